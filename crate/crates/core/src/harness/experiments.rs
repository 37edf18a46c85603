//! Training and evaluation protocols over a corpus: channel ablation,
//! detection robustness, the centre-bias comparison and the gradient suite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dissimilarity::{build_fused_features, FusionFlags, ObjectChannels, Similarity};
use crate::harness::corpus::{Corpus, DetectionSource, Split};
use crate::metrics::{evaluate, EvalConfig, Metric, MetricReport};
use crate::par;
use crate::readout::{
    fit_center_bias, forward, gradient_check, rectifier_pattern, train, CenterBias, GradCheck, LossKind, ReadoutModel,
    Sample, TrainConfig, TrainOutcome, DEFAULT_HIDDEN_WIDTHS,
};
use crate::tensor::{FeatureMap, FixationMap, Grid, SaliencyMap};
use crate::{Error, Result};

/// Shape and post-processing of the readout.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    /// Layer widths; the last must be 1.
    pub widths: Vec<usize>,
    /// Fit a Gaussian prior to the training fixations.
    pub center_bias: bool,
    pub smooth_sigma: f64,
    pub init_seed: u64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            widths: DEFAULT_HIDDEN_WIDTHS.to_vec(),
            center_bias: false,
            smooth_sigma: 0.0,
            init_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub similarity: Similarity,
    /// Boxes used for training and, in the ablation, for testing.
    pub detections: DetectionSource,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: ModelSpec::default(),
            train: TrainConfig {
                learning_rate: 3e-3,
                batch_size: 4,
                epochs: 30,
                ..TrainConfig::default()
            },
            eval: EvalConfig::default(),
            similarity: Similarity::default(),
            detections: DetectionSource::PREDICTED,
        }
    }
}

fn fused(corpus: &Corpus, channels: &[ObjectChannels], i: usize, flags: FusionFlags) -> Result<FeatureMap> {
    build_fused_features(&corpus.scenes[i].features, &channels[i], flags)
}

/// Training samples for `indices`.
pub fn samples(
    corpus: &Corpus,
    channels: &[ObjectChannels],
    indices: &[usize],
    flags: FusionFlags,
) -> Result<Vec<Sample>> {
    par::try_map_slice(indices, |&i| {
        let s = &corpus.scenes[i];
        Ok(Sample {
            features: fused(corpus, channels, i, flags)?,
            target: s.saliency.clone(),
            fixations: s.fixations.clone(),
        })
    })
}

/// Builds a fresh readout for the given input width and trains it.
pub fn fit_model(
    corpus: &Corpus,
    split: &Split,
    channels: &[ObjectChannels],
    flags: FusionFlags,
    config: &ExperimentConfig,
) -> Result<TrainOutcome> {
    let c = corpus.scenes[0].features.channels();
    let inputs = c + flags.extra_channels(c);
    let cb = if config.model.center_bias {
        let maps: Vec<FixationMap> = split
            .train
            .iter()
            .map(|&i| corpus.scenes[i].fixations.clone())
            .collect();
        Some(fit_center_bias(&maps)?)
    } else {
        None
    };
    let model = ReadoutModel::new(inputs, &config.model.widths, config.model.init_seed)?
        .with_center_bias(cb)?
        .with_smoothing(config.model.smooth_sigma)?;
    let train_set = samples(corpus, channels, &split.train, flags)?;
    let val_set = samples(corpus, channels, &split.val, flags)?;
    let val = (!val_set.is_empty()).then_some(val_set.as_slice());
    train(&model, &train_set, val, &config.train)
}

/// Predicted distributions for `indices`.
pub fn predict(
    model: &ReadoutModel,
    corpus: &Corpus,
    channels: &[ObjectChannels],
    indices: &[usize],
    flags: FusionFlags,
) -> Result<Vec<SaliencyMap>> {
    par::try_map_slice(indices, |&i| {
        Ok(forward(model, &fused(corpus, channels, i, flags)?)?.prediction)
    })
}

/// Evaluates predictions on `indices`; shuffled-AUC negatives come from the
/// other scenes of the same set.
pub fn evaluate_model(
    model: &ReadoutModel,
    corpus: &Corpus,
    channels: &[ObjectChannels],
    indices: &[usize],
    flags: FusionFlags,
    config: &EvalConfig,
) -> Result<MetricReport> {
    let preds = predict(model, corpus, channels, indices, flags)?;
    let gts: Vec<SaliencyMap> = indices.iter().map(|&i| corpus.scenes[i].saliency.clone()).collect();
    let fixs: Vec<FixationMap> = indices.iter().map(|&i| corpus.scenes[i].fixations.clone()).collect();
    evaluate(&preds, &gts, &fixs, None, config)
}

/// One configuration's outcome.
#[derive(Debug, Clone)]
pub struct CellResult {
    pub model: ReadoutModel,
    pub report: MetricReport,
    pub initial_loss: f64,
    pub final_loss: f64,
}

#[derive(Debug)]
pub struct AblationRow {
    pub flags: FusionFlags,
    pub result: Result<CellResult>,
}

#[derive(Debug)]
pub struct AblationTable {
    pub test_ids: Vec<String>,
    pub baseline: AblationRow,
    pub rows: Vec<AblationRow>,
}

fn cell(
    corpus: &Corpus,
    split: &Split,
    channels: &[ObjectChannels],
    flags: FusionFlags,
    config: &ExperimentConfig,
) -> Result<CellResult> {
    let outcome = fit_model(corpus, split, channels, flags, config)?;
    let report = evaluate_model(&outcome.model, corpus, channels, &split.test, flags, &config.eval)?;
    Ok(CellResult {
        final_loss: outcome.epoch_losses.last().copied().unwrap_or(f64::NAN),
        initial_loss: outcome.initial_loss,
        model: outcome.model,
        report,
    })
}

fn test_split(corpus: &Corpus) -> Result<Split> {
    let split = corpus.split()?;
    if split.test.is_empty() || split.train.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "corpus of {} scenes is too small for a train/test split",
            corpus.len()
        )));
    }
    Ok(split)
}

/// Trains one readout per flag set plus the baseline, all on the same split
/// and seeds, and evaluates each on the test scenes. A failing cell does not
/// stop the others.
pub fn run_ablation(corpus: &Corpus, grid: &[FusionFlags], config: &ExperimentConfig) -> Result<AblationTable> {
    let split = test_split(corpus)?;
    let channels = corpus.channels(config.detections, &split.train, &config.similarity)?;
    let mut all = vec![FusionFlags::NONE];
    all.extend_from_slice(grid);
    let mut results = par::map_slice(&all, |&flags| AblationRow {
        flags,
        result: cell(corpus, &split, &channels, flags, config),
    });
    let rows = results.split_off(1);
    Ok(AblationTable {
        test_ids: corpus.ids(&split.test),
        baseline: results.pop().unwrap(),
        rows,
    })
}

fn fmt_metric(r: &MetricReport, m: Metric) -> String {
    r.mean(m).map_or_else(|| "-".to_string(), |v| format!("{v:.6}"))
}

impl AblationTable {
    pub fn row(&self, flags: FusionFlags) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.flags == flags)
    }

    /// One line per configuration with the mean of every metric.
    pub fn to_text(&self) -> String {
        let mut out = format!("{:<10}", "config");
        for m in Metric::ALL {
            out.push_str(&format!(" {:>10}", m.name()));
        }
        out.push('\n');
        for row in std::iter::once(&self.baseline).chain(&self.rows) {
            let label = if row.flags.is_empty() && !std::ptr::eq(row, &self.baseline) {
                "{}".to_string()
            } else {
                row.flags.label()
            };
            out.push_str(&format!("{label:<10}"));
            match &row.result {
                Ok(c) => {
                    for m in Metric::ALL {
                        out.push_str(&format!(" {:>10}", fmt_metric(&c.report, m)));
                    }
                }
                Err(e) => out.push_str(&format!(" failed: {e}")),
            }
            out.push('\n');
        }
        out
    }
}

/// A model trained under one detection source, tested under several.
#[derive(Debug)]
pub struct RobustnessRun {
    pub train_source: DetectionSource,
    pub model: ReadoutModel,
    pub test_ids: Vec<String>,
    pub cells: Vec<(DetectionSource, Result<MetricReport>)>,
}

impl RobustnessRun {
    pub fn report(&self, source: DetectionSource) -> Option<&MetricReport> {
        self.cells
            .iter()
            .find(|(s, _)| *s == source)
            .and_then(|(_, r)| r.as_ref().ok())
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{:<14} {:<14}", "train", "test");
        for m in Metric::ALL {
            out.push_str(&format!(" {:>10}", m.name()));
        }
        out.push('\n');
        for (src, r) in &self.cells {
            out.push_str(&format!(
                "{:<14} {:<14}",
                self.train_source.to_string(),
                src.to_string()
            ));
            match r {
                Ok(rep) => {
                    for m in Metric::ALL {
                        out.push_str(&format!(" {:>10}", fmt_metric(rep, m)));
                    }
                }
                Err(e) => out.push_str(&format!(" failed: {e}")),
            }
            out.push('\n');
        }
        out
    }
}

/// Trains with `train_source` boxes and evaluates the test scenes under each
/// of `test_sources`. Random donors are drawn from the training split.
pub fn run_robustness(
    corpus: &Corpus,
    train_source: DetectionSource,
    test_sources: &[DetectionSource],
    flags: FusionFlags,
    config: &ExperimentConfig,
) -> Result<RobustnessRun> {
    let split = test_split(corpus)?;
    let train_channels = corpus.channels(train_source, &split.train, &config.similarity)?;
    let outcome = fit_model(corpus, &split, &train_channels, flags, config)?;
    let model = outcome.model;
    let cells = par::map_slice(test_sources, |&src| {
        let r = corpus
            .channels(src, &split.train, &config.similarity)
            .and_then(|ch| evaluate_model(&model, corpus, &ch, &split.test, flags, &config.eval));
        (src, r)
    });
    Ok(RobustnessRun {
        train_source,
        model,
        test_ids: corpus.ids(&split.test),
        cells,
    })
}

/// Test metrics of the same readout shape with and without a fitted prior.
#[derive(Debug)]
pub struct CenterBiasComparison {
    pub prior: CenterBias,
    pub without: MetricReport,
    pub with: MetricReport,
}

pub fn center_bias_comparison(
    corpus: &Corpus,
    flags: FusionFlags,
    config: &ExperimentConfig,
) -> Result<CenterBiasComparison> {
    let split = test_split(corpus)?;
    let channels = corpus.channels(config.detections, &split.train, &config.similarity)?;
    let mut off = config.clone();
    off.model.center_bias = false;
    let mut on = config.clone();
    on.model.center_bias = true;
    let without = cell(corpus, &split, &channels, flags, &off)?;
    let with = cell(corpus, &split, &channels, flags, &on)?;
    Ok(CenterBiasComparison {
        prior: with.model.center_bias.expect("prior was requested"),
        without: without.report,
        with: with.report,
    })
}

/// One finite-difference check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientCase {
    pub model_index: usize,
    pub loss: LossKind,
    pub check: GradCheck,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientSuite {
    pub cases: Vec<GradientCase>,
    /// Draws thrown away because a step of `h` flipped a rectifier.
    pub resampled: usize,
}

impl GradientSuite {
    pub fn max_relative_error(&self) -> f64 {
        self.cases
            .iter()
            .map(|c| c.check.max_relative_error)
            .fold(0.0, f64::max)
    }
}

pub const GRADIENT_SUITE_WIDTHS: [usize; 4] = [16, 8, 4, 1];
pub const GRADIENT_SUITE_INPUTS: usize = 3;
pub const GRADIENT_SUITE_SIDE: usize = 6;

/// Whether every `+-h` step on every parameter leaves all rectifier signs
/// unchanged, so that finite differences see a smooth function.
fn kink_free(model: &ReadoutModel, fused: &FeatureMap, h: f64) -> Result<bool> {
    let base = rectifier_pattern(model, fused)?;
    let params = model.parameters();
    let flips = par::map_range(params.len(), |i| -> Result<bool> {
        let mut m = model.clone();
        let mut p = params.clone();
        for step in [h, -h] {
            p[i] = params[i] + step;
            m.set_parameters(&p)?;
            if rectifier_pattern(&m, fused)? != base {
                return Ok(true);
            }
        }
        Ok(false)
    });
    for f in flips {
        if f? {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Random `[3 -> 16 -> 8 -> 4 -> 1]` readouts with a centre prior and
/// smoothing sigma 1 on 6x6 inputs, each checked against central differences
/// of step `h` for both losses. Draws where a step would cross a rectifier
/// kink are replaced.
pub fn gradient_suite(n_models: usize, seed: u64, h: f64) -> Result<GradientSuite> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = GRADIENT_SUITE_SIDE;
    let mut cases = Vec::with_capacity(2 * n_models);
    let mut resampled = 0;
    let mut index = 0;
    while index < n_models {
        if resampled > 50 * n_models.max(1) {
            return Err(Error::NoConvergence { sweeps: resampled });
        }
        let model = ReadoutModel::new(GRADIENT_SUITE_INPUTS, &GRADIENT_SUITE_WIDTHS, rng.random())?;
        let mut params = model.parameters();
        // nonzero biases so that every layer's bias gradient is exercised
        let mut model = model;
        let mut offset = 0;
        for l in model.layers().to_vec() {
            offset += l.weight.len();
            for b in &mut params[offset..offset + l.bias.len()] {
                *b = rng.random_range(-0.5..0.5);
            }
            offset += l.bias.len();
        }
        model.set_parameters(&params)?;
        let cb = CenterBias {
            mu_x: rng.random_range(1.5..3.5),
            mu_y: rng.random_range(1.5..3.5),
            sigma_x: rng.random_range(1.0..3.0),
            sigma_y: rng.random_range(1.0..3.0),
            weight: rng.random_range(0.2..1.0),
        };
        let model = model.with_center_bias(Some(cb))?.with_smoothing(1.0)?;
        let fused = FeatureMap::from_fn(side, side, GRADIENT_SUITE_INPUTS, |_, _, _| rng.random_range(-1.0..1.0))?;
        let raw = Grid::from_fn(side, side, |_, _| rng.random_range(0.05..1.0));
        let target = SaliencyMap::from_distribution(Grid::from_fn(side, side, |y, x| raw.get(y, x) / raw.sum()))?;
        let mut fix = FixationMap::empty(side, side);
        for _ in 0..rng.random_range(1..=6) {
            fix.set(rng.random_range(0..side), rng.random_range(0..side), true);
        }
        if !kink_free(&model, &fused, h)? {
            resampled += 1;
            continue;
        }
        for loss in [LossKind::Kld, LossKind::Eml] {
            let check = gradient_check(&model, &fused, &target, &fix, loss, crate::readout::DEFAULT_KLD_EPS, h)?;
            cases.push(GradientCase {
                model_index: index,
                loss,
                check,
            });
        }
        index += 1;
    }
    Ok(GradientSuite { cases, resampled })
}
