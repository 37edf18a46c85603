use objsal::readout::{train, LossKind, ReadoutModel, Sample, TrainConfig};
use objsal::tensor::{FeatureMap, FixationMap, Grid, SaliencyMap};

// One 8x8 sample whose first channel marks the salient square exactly.
fn toy_sample() -> Sample {
    let inside = |y: usize, x: usize| (2..6).contains(&y) && (3..7).contains(&x);
    let features = FeatureMap::from_fn(8, 8, 2, |y, x, k| match k {
        0 => inside(y, x) as u8 as f64,
        _ => 0.5,
    })
    .unwrap();
    let raw = Grid::from_fn(8, 8, |y, x| if inside(y, x) { 0.9 / 16.0 } else { 0.1 / 48.0 });
    let target = SaliencyMap::from_distribution(raw).unwrap();
    let fixations = FixationMap::from_points(8, 8, &[(3, 4), (4, 5), (2, 3)]).unwrap();
    Sample {
        features,
        target,
        fixations,
    }
}

fn config(lr: f64, steps: usize, loss: LossKind) -> TrainConfig {
    TrainConfig {
        learning_rate: lr,
        batch_size: 1,
        epochs: steps,
        loss,
        ..TrainConfig::default()
    }
}

#[test]
fn toy_task_converges() {
    let model = ReadoutModel::new(2, &[4, 1], 1).unwrap();
    let out = train(&model, &[toy_sample()], None, &config(1e-2, 500, LossKind::Kld)).unwrap();
    let last = *out.epoch_losses.last().unwrap();
    assert!(last < 0.1 * out.initial_loss, "{} -> {last}", out.initial_loss);
}

#[test]
fn eml_training_also_decreases() {
    let model = ReadoutModel::new(2, &[4, 1], 2).unwrap();
    let out = train(&model, &[toy_sample()], None, &config(1e-2, 200, LossKind::Eml)).unwrap();
    assert!(*out.epoch_losses.last().unwrap() < out.initial_loss);
}

#[test]
fn training_is_deterministic() {
    let model = ReadoutModel::new(2, &[8, 4, 1], 3).unwrap();
    let data = vec![toy_sample(), toy_sample()];
    let cfg = TrainConfig {
        batch_size: 2,
        ..config(3e-3, 20, LossKind::Kld)
    };
    let a = train(&model, &data, Some(&data), &cfg).unwrap();
    let b = train(&model, &data, Some(&data), &cfg).unwrap();
    let bits = |m: &ReadoutModel| m.parameters().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.model), bits(&b.model));
    assert_eq!(a.epoch_losses, b.epoch_losses);
    assert_eq!(a.validation_losses, b.validation_losses);
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let model = ReadoutModel::new(2, &[4, 1], 4).unwrap();
    let out = train(&model, &[toy_sample()], None, &config(0.0, 10, LossKind::Kld)).unwrap();
    assert_eq!(out.model.parameters(), model.parameters());
}
