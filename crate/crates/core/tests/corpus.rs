use objsal::dissimilarity::{build_fused_features, FusionFlags, ObjectChannels};
use objsal::harness::experiments::{fit_model, predict, run_robustness, ExperimentConfig};
use objsal::harness::formats::{decode_checkpoint, encode_checkpoint};
use objsal::harness::synth::{synth_corpus, SynthSpec};
use objsal::harness::{Corpus, DetectionSource};
use objsal::metrics::Metric;
use objsal::readout::forward;

fn small_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.train.epochs = 10;
    cfg
}

#[test]
fn save_load_save_is_stable() {
    let corpus = synth_corpus(6, 9, &SynthSpec::default()).unwrap();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    corpus.save(a.path()).unwrap();
    let once = Corpus::load(a.path(), 0.7).unwrap();
    once.save(b.path()).unwrap();
    let twice = Corpus::load(b.path(), 0.7).unwrap();
    assert_eq!(once.scenes, twice.scenes);
    assert_eq!(once.scenes, corpus.scenes);
    let mut names: Vec<_> = std::fs::read_dir(a.path())
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    for name in names {
        let x = std::fs::read(a.path().join(&name)).unwrap();
        let y = std::fs::read(b.path().join(&name)).unwrap();
        assert_eq!(x, y, "{name:?}");
    }
}

#[test]
fn trained_checkpoint_round_trips() {
    let corpus = synth_corpus(16, 2, &SynthSpec::default()).unwrap();
    let mut cfg = small_config();
    cfg.model.center_bias = true;
    cfg.model.smooth_sigma = 0.5;
    let split = corpus.split().unwrap();
    let ch = corpus.channels(cfg.detections, &split.train, &cfg.similarity).unwrap();
    let model = fit_model(&corpus, &split, &ch, FusionFlags::SIZE_APPEARANCE, &cfg)
        .unwrap()
        .model;
    let bytes = encode_checkpoint(&model);
    let back = decode_checkpoint(&bytes, "mem".as_ref()).unwrap();
    assert_eq!(back, model);
    assert_eq!(encode_checkpoint(&back), bytes);
}

#[test]
fn none_mode_is_the_zeroed_forward() {
    let corpus = synth_corpus(16, 4, &SynthSpec::default()).unwrap();
    let cfg = small_config();
    let split = corpus.split().unwrap();
    let flags = FusionFlags::SIZE_APPEARANCE;
    let predicted = corpus
        .channels(DetectionSource::PREDICTED, &split.train, &cfg.similarity)
        .unwrap();
    let model = fit_model(&corpus, &split, &predicted, flags, &cfg).unwrap().model;
    let none = corpus
        .channels(DetectionSource::NONE, &split.train, &cfg.similarity)
        .unwrap();
    let got = predict(&model, &corpus, &none, &split.test, flags).unwrap();
    for (k, &i) in split.test.iter().enumerate() {
        let s = &corpus.scenes[i];
        let mut zeroed: ObjectChannels = predicted[i].clone();
        zeroed.size.grid.data_mut().fill(0.0);
        zeroed.appearance.grid.data_mut().fill(0.0);
        let fused = build_fused_features(&s.features, &zeroed, flags).unwrap();
        let want = forward(&model, &fused).unwrap().prediction;
        let bits = |g: &[f64]| g.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(got[k].data()), bits(want.data()), "scene {}", s.id);
    }
}

#[test]
fn ground_truth_boxes_beat_no_boxes() {
    let corpus = synth_corpus(32, 5, &SynthSpec::default()).unwrap();
    let cfg = small_config();
    let flags = FusionFlags::SIZE_APPEARANCE;
    let gt = run_robustness(
        &corpus,
        DetectionSource::GROUND_TRUTH,
        &[DetectionSource::GROUND_TRUTH],
        flags,
        &cfg,
    )
    .unwrap();
    let none = run_robustness(&corpus, DetectionSource::NONE, &[DetectionSource::NONE], flags, &cfg).unwrap();
    let kld = |r: &objsal::harness::experiments::RobustnessRun, s| r.report(s).unwrap().mean(Metric::Kld).unwrap();
    let (a, b) = (
        kld(&gt, DetectionSource::GROUND_TRUTH),
        kld(&none, DetectionSource::NONE),
    );
    assert!(a < b, "gt/gt {a} vs none/none {b}");
}
