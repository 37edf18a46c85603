//! The `objsal` command line.
//!
//! Exit status: 0 on success, 1 on usage errors, 2 on data errors (missing
//! or malformed files, inconsistent sizes), 3 on numerical failures
//! (divergence, non-finite values, failed gradient checks).

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::dissimilarity::{FusionFlags, Similarity, DEFAULT_COSINE_EPS};
use crate::harness::corpus::{scene_path, Corpus, DetectionMode, DetectionSource};
use crate::harness::experiments::{
    fit_model, gradient_suite, predict, run_ablation, run_robustness, ExperimentConfig, ModelSpec,
};
use crate::harness::formats::{
    load_checkpoint, load_grid, save_checkpoint, save_grid, write_atomic, DEFAULT_CONFIDENCE_THRESHOLD,
};
use crate::harness::synth::{synth_corpus, SynthSpec};
use crate::metrics::{evaluate, EvalConfig};
use crate::readout::{fit_center_bias, LossKind, TrainConfig, DEFAULT_KLD_EPS};
use crate::svcca::DEFAULT_ENERGY_FRACTION;
use crate::tensor::{FixationMap, SaliencyMap};
use crate::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "objsal", version, about = "Object-aware saliency prediction toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus
    Synth(SynthArgs),
    /// Write the appearance and size channels of one scene
    Dissim(DissimArgs),
    /// Train a readout on a corpus
    Train(TrainArgs),
    /// Write predicted saliency maps
    Predict(PredictArgs),
    /// Score predicted maps against ground truth
    Eval(EvalArgs),
    /// Train and test every subset of the object channels
    Ablate(AblateArgs),
    /// Train under one detection source and test under others
    Robust(RobustArgs),
    /// Check analytic readout gradients against finite differences
    Gradcheck(GradcheckArgs),
    /// Fit a centre-bias prior to training fixations
    Fitcb(FitcbArgs),
}

fn parse_flags(s: &str) -> std::result::Result<FusionFlags, String> {
    FusionFlags::parse(s).map_err(|e| e.to_string())
}

fn parse_loss(s: &str) -> std::result::Result<LossKind, String> {
    LossKind::parse(s).map_err(|e| e.to_string())
}

fn parse_mode(s: &str) -> std::result::Result<DetectionMode, String> {
    DetectionMode::parse(s).map_err(|e| e.to_string())
}

fn parse_distance(s: &str) -> std::result::Result<Similarity, String> {
    match s.to_ascii_lowercase().as_str() {
        "cosine" => Ok(Similarity::Cosine {
            eps: DEFAULT_COSINE_EPS,
        }),
        "svcca" => Ok(Similarity::Svcca {
            energy_fraction: DEFAULT_ENERGY_FRACTION,
        }),
        _ => Err(format!("unknown distance {s:?} (expected cosine or svcca)")),
    }
}

#[derive(Args, Debug)]
struct CorpusArgs {
    /// Corpus directory
    #[arg(long)]
    corpus: PathBuf,
    /// Detector confidence gate
    #[arg(long, default_value_t = DEFAULT_CONFIDENCE_THRESHOLD)]
    threshold: f64,
}

#[derive(Args, Debug)]
struct SourceArgs {
    /// Detection source: gt, predicted, random or none
    #[arg(long, default_value = "predicted", value_parser = parse_mode)]
    source: DetectionMode,
    /// Seed for donor scenes in random mode
    #[arg(long, default_value_t = 0)]
    donor_seed: u64,
    /// Object similarity: cosine or svcca
    #[arg(long, default_value = "cosine", value_parser = parse_distance)]
    distance: Similarity,
}

impl SourceArgs {
    fn source(&self) -> DetectionSource {
        DetectionSource {
            mode: self.source,
            donor_seed: self.donor_seed,
        }
    }
}

#[derive(Args, Debug)]
struct TrainingArgs {
    /// Extra channels, any of O, S, A (e.g. S+A), or none
    #[arg(long, default_value = "S+A", value_parser = parse_flags)]
    flags: FusionFlags,
    #[arg(long, default_value = "kld", value_parser = parse_loss)]
    loss: LossKind,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 3e-3)]
    lr: f64,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    /// Seed for initialisation and shuffling
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Add a centre-bias prior fitted to the training fixations
    #[arg(long)]
    center_bias: bool,
    /// Blur applied to the logits
    #[arg(long, default_value_t = 0.0)]
    smooth: f64,
}

impl TrainingArgs {
    fn config(&self, source: &SourceArgs) -> ExperimentConfig {
        ExperimentConfig {
            model: ModelSpec {
                center_bias: self.center_bias,
                smooth_sigma: self.smooth,
                init_seed: self.seed,
                ..ModelSpec::default()
            },
            train: TrainConfig {
                learning_rate: self.lr,
                batch_size: self.batch,
                epochs: self.epochs,
                loss: self.loss,
                seed: self.seed,
                kld_eps: DEFAULT_KLD_EPS,
            },
            eval: EvalConfig {
                seed: self.seed,
                ..EvalConfig::default()
            },
            similarity: source.distance,
            detections: source.source(),
        }
    }
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Put most ground-truth mass on a centred Gaussian
    #[arg(long)]
    center_biased: bool,
}

#[derive(Args, Debug)]
struct DissimArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[command(flatten)]
    source: SourceArgs,
    /// Scene id
    #[arg(long)]
    scene: String,
    /// Output directory (defaults to the corpus)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[command(flatten)]
    source: SourceArgs,
    #[command(flatten)]
    training: TrainingArgs,
    /// Checkpoint path (defaults to <corpus>/model.rdm)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[command(flatten)]
    source: SourceArgs,
    #[arg(long)]
    model: PathBuf,
    /// Channels the model was trained with
    #[arg(long, default_value = "S+A", value_parser = parse_flags)]
    flags: FusionFlags,
    /// Output directory (defaults to the corpus)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Predict every scene instead of the test split only
    #[arg(long)]
    all: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    /// Directory holding <id>.pred.ftn files (defaults to the corpus)
    #[arg(long)]
    pred: Option<PathBuf>,
    /// key=value report path (defaults to <pred>/report.txt)
    #[arg(long)]
    report: Option<PathBuf>,
    /// Evaluate every scene instead of the test split only
    #[arg(long)]
    all: bool,
    /// Seed for shuffled-AUC sampling
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    sauc_splits: usize,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[command(flatten)]
    source: SourceArgs,
    #[command(flatten)]
    training: TrainingArgs,
    /// Also write the table here
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RobustArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[command(flatten)]
    training: TrainingArgs,
    #[arg(long, default_value = "cosine", value_parser = parse_distance)]
    distance: Similarity,
    /// Boxes used for training
    #[arg(long, default_value = "predicted", value_parser = parse_mode)]
    train_source: DetectionMode,
    /// Comma-separated boxes used for testing
    #[arg(long, default_value = "predicted,random,none", value_delimiter = ',', value_parser = parse_mode)]
    test_source: Vec<DetectionMode>,
    #[arg(long, default_value_t = 0)]
    donor_seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    models: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Finite-difference step
    #[arg(long, default_value_t = 1e-4)]
    step: f64,
    /// Largest acceptable relative error
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

#[derive(Args, Debug)]
struct FitcbArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    /// Store the prior in this checkpoint
    #[arg(long)]
    model: Option<PathBuf>,
}

fn exit_code(e: &Error) -> i32 {
    if e.is_numerical() {
        EXIT_NUMERICAL
    } else {
        EXIT_DATA
    }
}

/// Parses `argv` (including the program name), runs the subcommand and
/// returns the exit status. Normal output goes to `out`, diagnostics to
/// `err`.
pub fn run<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{text}");
                    EXIT_OK
                }
                _ => {
                    let _ = write!(err, "{text}");
                    EXIT_USAGE
                }
            };
        }
    };
    let name = command_name(&cli.command);
    match dispatch(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "objsal {name}: {e}");
            exit_code(&e)
        }
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Synth(_) => "synth",
        Command::Dissim(_) => "dissim",
        Command::Train(_) => "train",
        Command::Predict(_) => "predict",
        Command::Eval(_) => "eval",
        Command::Ablate(_) => "ablate",
        Command::Robust(_) => "robust",
        Command::Gradcheck(_) => "gradcheck",
        Command::Fitcb(_) => "fitcb",
    }
}

fn load_corpus(a: &CorpusArgs) -> Result<Corpus> {
    if !(0.0..=1.0).contains(&a.threshold) {
        return Err(Error::InvalidArgument(format!(
            "confidence threshold {} outside [0, 1]",
            a.threshold
        )));
    }
    Corpus::load(&a.corpus, a.threshold)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

fn dispatch(command: Command, out: &mut dyn Write) -> Result<i32> {
    let stdout = |out: &mut dyn Write, s: &str| out.write_all(s.as_bytes()).map_err(io_err(Path::new("<stdout>")));
    match command {
        Command::Synth(a) => {
            let spec = if a.center_biased {
                SynthSpec::center_biased()
            } else {
                SynthSpec::default()
            };
            let corpus = synth_corpus(a.n, a.seed, &spec)?;
            corpus.save(&a.out)?;
            stdout(out, &format!("wrote {} scenes to {}\n", corpus.len(), a.out.display()))?;
        }
        Command::Dissim(a) => {
            let corpus = load_corpus(&a.corpus)?;
            let i = corpus.scenes.iter().position(|s| s.id == a.scene).ok_or_else(|| {
                Error::InvalidArgument(format!("no scene {:?} in {}", a.scene, a.corpus.corpus.display()))
            })?;
            let split = corpus.split()?;
            let channels = corpus.channels(a.source.source(), &split.train, &a.source.distance)?;
            let dir = a.out.unwrap_or(a.corpus.corpus);
            std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
            let app = scene_path(&dir, &a.scene, "appearance.ftn");
            let size = scene_path(&dir, &a.scene, "size.ftn");
            save_grid(&channels[i].appearance.grid, &app)?;
            save_grid(&channels[i].size.grid, &size)?;
            stdout(out, &format!("{}\n{}\n", app.display(), size.display()))?;
        }
        Command::Train(a) => {
            let corpus = load_corpus(&a.corpus)?;
            let config = a.training.config(&a.source);
            let split = corpus.split()?;
            let channels = corpus.channels(config.detections, &split.train, &config.similarity)?;
            let outcome = fit_model(&corpus, &split, &channels, a.training.flags, &config)?;
            let path = a.out.unwrap_or_else(|| a.corpus.corpus.join("model.rdm"));
            save_checkpoint(&outcome.model, &path)?;
            stdout(
                out,
                &format!(
                    "flags={}\ninitial_loss={}\nfinal_loss={}\nbest_epoch={}\ncheckpoint={}\n",
                    a.training.flags.label(),
                    outcome.initial_loss,
                    outcome.epoch_losses.last().copied().unwrap_or(f64::NAN),
                    outcome.best_epoch.map_or("-".into(), |e| e.to_string()),
                    path.display()
                ),
            )?;
        }
        Command::Predict(a) => {
            let corpus = load_corpus(&a.corpus)?;
            let model = load_checkpoint(&a.model)?;
            let split = corpus.split()?;
            let channels = corpus.channels(a.source.source(), &split.train, &a.source.distance)?;
            let indices: Vec<usize> = if a.all {
                (0..corpus.len()).collect()
            } else {
                split.test.clone()
            };
            let preds = predict(&model, &corpus, &channels, &indices, a.flags)?;
            let dir = a.out.unwrap_or(a.corpus.corpus);
            std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
            for (&i, p) in indices.iter().zip(&preds) {
                save_grid(p.as_grid(), &scene_path(&dir, &corpus.scenes[i].id, "pred.ftn"))?;
            }
            stdout(
                out,
                &format!("wrote {} predictions to {}\n", preds.len(), dir.display()),
            )?;
        }
        Command::Eval(a) => {
            let corpus = load_corpus(&a.corpus)?;
            let split = corpus.split()?;
            let indices: Vec<usize> = if a.all {
                (0..corpus.len()).collect()
            } else {
                split.test.clone()
            };
            let dir = a.pred.unwrap_or_else(|| a.corpus.corpus.clone());
            let mut preds = Vec::with_capacity(indices.len());
            for &i in &indices {
                let s = &corpus.scenes[i];
                let path = scene_path(&dir, &s.id, "pred.ftn");
                let g = load_grid(&path)?;
                if (g.height(), g.width()) != (s.height(), s.width()) {
                    return Err(Error::Format {
                        path,
                        detail: format!(
                            "scene {}: prediction is {}x{}, ground truth is {}x{}",
                            s.id,
                            g.height(),
                            g.width(),
                            s.height(),
                            s.width()
                        ),
                    });
                }
                let p = crate::tensor::normalize_to_distribution(&g).map_err(|e| Error::Format {
                    path: path.clone(),
                    detail: format!("scene {}: {e}", s.id),
                })?;
                preds.push(p);
            }
            let gts: Vec<SaliencyMap> = indices.iter().map(|&i| corpus.scenes[i].saliency.clone()).collect();
            let fixs: Vec<FixationMap> = indices.iter().map(|&i| corpus.scenes[i].fixations.clone()).collect();
            let cfg = EvalConfig {
                seed: a.seed,
                sauc_splits: a.sauc_splits,
                ..EvalConfig::default()
            };
            let report = evaluate(&preds, &gts, &fixs, None, &cfg)?;
            let ids = corpus.ids(&indices);
            let report_path = a.report.unwrap_or_else(|| dir.join("report.txt"));
            write_atomic(&report_path, report.to_key_values(&ids).as_bytes())?;
            stdout(out, &report.to_table(&ids))?;
        }
        Command::Ablate(a) => {
            let corpus = load_corpus(&a.corpus)?;
            let config = a.training.config(&a.source);
            let table = run_ablation(&corpus, &FusionFlags::all_subsets(), &config)?;
            let text = table.to_text();
            if let Some(p) = &a.out {
                write_atomic(p, text.as_bytes())?;
            }
            stdout(out, &text)?;
        }
        Command::Robust(a) => {
            let corpus = load_corpus(&a.corpus)?;
            let src = |mode| DetectionSource {
                mode,
                donor_seed: a.donor_seed,
            };
            let train_src = SourceArgs {
                source: a.train_source,
                donor_seed: a.donor_seed,
                distance: a.distance,
            };
            let config = a.training.config(&train_src);
            let tests: Vec<DetectionSource> = a.test_source.iter().map(|&m| src(m)).collect();
            let run = run_robustness(&corpus, src(a.train_source), &tests, a.training.flags, &config)?;
            let text = run.to_text();
            if let Some(p) = &a.out {
                write_atomic(p, text.as_bytes())?;
            }
            stdout(out, &text)?;
        }
        Command::Gradcheck(a) => {
            let suite = gradient_suite(a.models, a.seed, a.step)?;
            let worst = suite.max_relative_error();
            stdout(
                out,
                &format!(
                    "checks={}\nresampled={}\nmax_relative_error={worst:e}\ntolerance={:e}\n",
                    suite.cases.len(),
                    suite.resampled,
                    a.tolerance
                ),
            )?;
            if !(worst < a.tolerance) {
                return Err(Error::GradientCheck {
                    worst,
                    tolerance: a.tolerance,
                });
            }
        }
        Command::Fitcb(a) => {
            let corpus = load_corpus(&a.corpus)?;
            let split = corpus.split()?;
            let maps: Vec<FixationMap> = split
                .train
                .iter()
                .map(|&i| corpus.scenes[i].fixations.clone())
                .collect();
            let cb = fit_center_bias(&maps)?;
            if let Some(path) = &a.model {
                let model = load_checkpoint(path)?.with_center_bias(Some(cb))?;
                save_checkpoint(&model, path)?;
            }
            stdout(
                out,
                &format!(
                    "mu_x={}\nmu_y={}\nsigma_x={}\nsigma_y={}\nweight={}\n",
                    cb.mu_x, cb.mu_y, cb.sigma_x, cb.sigma_y, cb.weight
                ),
            )?;
        }
    }
    Ok(EXIT_OK)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn call(args: &[&str]) -> (i32, String, String) {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let argv: Vec<String> = std::iter::once("objsal")
            .chain(args.iter().copied())
            .map(String::from)
            .collect();
        let code = run(argv, &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn help_and_usage_errors() {
        assert_eq!(call(&["--help"]).0, EXIT_OK);
        let (code, _, err) = call(&["synth", "--bogus"]);
        assert_eq!(code, EXIT_USAGE);
        assert!(err.contains("Usage"), "{err}");
        assert_eq!(call(&["train", "--corpus", "x", "--flags", "Q"]).0, EXIT_USAGE);
        assert_eq!(call(&[]).0, EXIT_USAGE);
    }

    #[test]
    fn missing_corpus_is_a_data_error() {
        let (code, _, err) = call(&["train", "--corpus", "/nonexistent/objsal-corpus"]);
        assert_eq!(code, EXIT_DATA);
        assert!(err.starts_with("objsal train:"), "{err}");
        assert!(err.contains("corpus.txt"), "{err}");
    }
}
