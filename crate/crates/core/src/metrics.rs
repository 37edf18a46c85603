//! Saliency evaluation metrics: AUC-Judd, shuffled AUC, NSS, KLD, CC and SIM,
//! plus batch evaluation into a [`MetricReport`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::par;
use crate::readout::{correlation, kld_loss, nonconstant, DEFAULT_KLD_EPS};
use crate::tensor::{FixationMap, Grid, SaliencyMap};
use crate::{Error, Result};

/// Area under the ROC curve separating `positives` from `negatives`.
///
/// The threshold sweeps every distinct score, highest first; a sample counts
/// as detected when its score is `>=` the threshold and the curve is
/// integrated with the trapezoid rule. That is exactly the probability that a
/// positive outranks a negative, with ties worth one half.
pub fn auc_from_scores(positives: &[f64], negatives: &[f64]) -> Result<f64> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::DegenerateMap(format!(
            "AUC needs positives and negatives, got {} and {}",
            positives.len(),
            negatives.len()
        )));
    }
    let mut scored: Vec<(f64, bool)> = positives
        .iter()
        .map(|&v| (v, true))
        .chain(negatives.iter().map(|&v| (v, false)))
        .collect();
    if scored.iter().any(|(v, _)| v.is_nan()) {
        return Err(Error::NonFinite("NaN saliency value".into()));
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    // Twice the area times |pos| |neg|, accumulated in integers.
    let mut doubled: u128 = 0;
    let mut tp: u128 = 0;
    let mut i = 0;
    while i < scored.len() {
        let value = scored[i].0;
        let (mut gp, mut gn) = (0u128, 0u128);
        while i < scored.len() && scored[i].0 == value {
            if scored[i].1 {
                gp += 1;
            } else {
                gn += 1;
            }
            i += 1;
        }
        doubled += gn * (2 * tp + gp);
        tp += gp;
    }
    let denom = 2 * positives.len() as u128 * negatives.len() as u128;
    Ok(doubled as f64 / denom as f64)
}

fn check_fixations(p: &Grid, f: &FixationMap) -> Result<()> {
    if !f.same_shape_as(p) {
        return Err(Error::ShapeMismatch(format!(
            "fixations {}x{} vs map {}x{}",
            f.height(),
            f.width(),
            p.height(),
            p.width()
        )));
    }
    if f.count() == 0 {
        return Err(Error::NoFixations("fixation map is empty".into()));
    }
    Ok(())
}

/// AUC with every fixated pixel as a positive and every other pixel as a
/// negative.
pub fn auc_judd(p: &Grid, f: &FixationMap) -> Result<f64> {
    check_fixations(p, f)?;
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for (&v, &fixated) in p.data().iter().zip(f.data()) {
        if fixated {
            pos.push(v);
        } else {
            neg.push(v);
        }
    }
    auc_from_scores(&pos, &neg)
}

/// Pixels fixated in any of `others` but not in `f`, ascending.
pub fn negative_pool(f: &FixationMap, others: &[FixationMap]) -> Result<Vec<usize>> {
    let mut pooled = vec![false; f.len()];
    for (j, o) in others.iter().enumerate() {
        if (o.height(), o.width()) != (f.height(), f.width()) {
            return Err(Error::ShapeMismatch(format!(
                "other fixation map #{j} is {}x{}, expected {}x{}",
                o.height(),
                o.width(),
                f.height(),
                f.width()
            )));
        }
        for (slot, &b) in pooled.iter_mut().zip(o.data()) {
            *slot |= b;
        }
    }
    Ok(pooled
        .iter()
        .zip(f.data())
        .enumerate()
        .filter_map(|(i, (&other, &own))| (other && !own).then_some(i))
        .collect())
}

/// The negative pixel sets used by [`shuffled_auc`], one per split. Each split
/// draws `min(#fixations, pool size)` pool pixels without replacement.
pub fn shuffled_negatives(
    f: &FixationMap,
    others: &[FixationMap],
    n_splits: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if n_splits == 0 {
        return Err(Error::InvalidArgument("shuffled AUC needs at least one split".into()));
    }
    let pool = negative_pool(f, others)?;
    if pool.is_empty() {
        return Err(Error::NoFixations(
            "no fixations from other images to sample negatives from".into(),
        ));
    }
    let take = f.count().min(pool.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n_splits)
        .map(|_| {
            rand::seq::index::sample(&mut rng, pool.len(), take)
                .into_iter()
                .map(|k| pool[k])
                .collect()
        })
        .collect())
}

/// AUC with negatives sampled from other images' fixation locations,
/// averaged over `n_splits` draws.
pub fn shuffled_auc(p: &Grid, f: &FixationMap, others: &[FixationMap], n_splits: usize, seed: u64) -> Result<f64> {
    check_fixations(p, f)?;
    let pos: Vec<f64> = f.indices().iter().map(|&i| p.data()[i]).collect();
    let splits = shuffled_negatives(f, others, n_splits, seed)?;
    let mut total = 0.0;
    for negs in &splits {
        let neg: Vec<f64> = negs.iter().map(|&i| p.data()[i]).collect();
        total += auc_from_scores(&pos, &neg)?;
    }
    Ok(total / splits.len() as f64)
}

/// Mean standardised saliency at fixated pixels.
pub fn nss_metric(p: &Grid, f: &FixationMap) -> Result<f64> {
    check_fixations(p, f)?;
    let m = nonconstant(p.data(), "saliency map")?;
    let (mean, std) = (m.mean, m.std);
    let idx = f.indices();
    Ok(idx.iter().map(|&i| (p.data()[i] - mean) / std).sum::<f64>() / idx.len() as f64)
}

/// Same quantity as the KLD training loss.
pub fn kld_metric(p: &Grid, q: &Grid, eps: f64) -> Result<f64> {
    kld_loss(p, q, eps)
}

/// Pearson correlation coefficient.
pub fn cc_metric(p: &Grid, q: &Grid) -> Result<f64> {
    correlation(p, q)
}

/// Tolerance on total mass accepted by [`sim_metric`].
pub const SIM_MASS_TOLERANCE: f64 = 1e-6;

/// Histogram intersection `sum_i min(P_i, Q_i)` of two distributions.
pub fn sim_metric(p: &Grid, q: &Grid) -> Result<f64> {
    if !p.same_shape(q) {
        return Err(Error::ShapeMismatch(format!(
            "SIM: {}x{} vs {}x{}",
            p.height(),
            p.width(),
            q.height(),
            q.width()
        )));
    }
    for (name, m) in [("prediction", p), ("ground truth", q)] {
        let total = m.sum();
        if (total - 1.0).abs() > SIM_MASS_TOLERANCE || m.data().iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "SIM needs distributions; {name} sums to {total}"
            )));
        }
    }
    Ok(p.data()
        .iter()
        .zip(q.data())
        .map(|(a, b)| a.min(*b))
        .sum::<f64>()
        .min(1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Metric {
    AucJudd,
    ShuffledAuc,
    Nss,
    Kld,
    Cc,
    Sim,
}

impl Metric {
    pub const ALL: [Metric; 6] = [
        Metric::AucJudd,
        Metric::ShuffledAuc,
        Metric::Nss,
        Metric::Kld,
        Metric::Cc,
        Metric::Sim,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Metric::AucJudd => "aucj",
            Metric::ShuffledAuc => "sauc",
            Metric::Nss => "nss",
            Metric::Kld => "kld",
            Metric::Cc => "cc",
            Metric::Sim => "sim",
        }
    }

    fn index(&self) -> usize {
        Metric::ALL.iter().position(|m| m == self).unwrap()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub kld_eps: f64,
    pub sauc_splits: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            kld_eps: DEFAULT_KLD_EPS,
            sauc_splits: 10,
            seed: 0,
        }
    }
}

/// Metric values of one image; `None` where the metric's preconditions
/// failed, with the reason kept alongside.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageMetrics {
    values: [Option<f64>; 6],
    skipped: Vec<(Metric, String)>,
}

impl ImageMetrics {
    pub fn get(&self, m: Metric) -> Option<f64> {
        self.values[m.index()]
    }

    pub fn skipped(&self) -> &[(Metric, String)] {
        &self.skipped
    }
}

/// Per-image metrics with their means. A metric skipped on an image is left
/// out of that metric's mean only.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub images: Vec<ImageMetrics>,
    means: [Option<f64>; 6],
    counts: [usize; 6],
}

impl MetricReport {
    pub fn mean(&self, m: Metric) -> Option<f64> {
        self.means[m.index()]
    }

    /// Images that contributed to `m`'s mean.
    pub fn count(&self, m: Metric) -> usize {
        self.counts[m.index()]
    }

    pub fn skipped(&self, m: Metric) -> usize {
        self.images.len() - self.count(m)
    }

    /// `id.metric=value` per image, then `mean.metric=value`,
    /// `count.metric=n` and `skipped.metric=n` lines.
    pub fn to_key_values(&self, ids: &[String]) -> String {
        let mut out = String::new();
        for (img, id) in self.images.iter().zip(ids) {
            for m in Metric::ALL {
                match img.get(m) {
                    Some(v) => out.push_str(&format!("{id}.{}={v}\n", m.name())),
                    None => out.push_str(&format!("{id}.{}=skipped\n", m.name())),
                }
            }
        }
        for m in Metric::ALL {
            match self.mean(m) {
                Some(v) => out.push_str(&format!("mean.{}={v}\n", m.name())),
                None => out.push_str(&format!("mean.{}=nan\n", m.name())),
            }
        }
        for m in Metric::ALL {
            out.push_str(&format!("count.{}={}\n", m.name(), self.count(m)));
        }
        for m in Metric::ALL {
            out.push_str(&format!("skipped.{}={}\n", m.name(), self.skipped(m)));
        }
        out
    }

    /// Fixed-width text table, one row per image plus the mean.
    pub fn to_table(&self, ids: &[String]) -> String {
        let mut out = format!("{:<16}", "image");
        for m in Metric::ALL {
            out.push_str(&format!("{:>10}", m.name()));
        }
        out.push('\n');
        let cell = |v: Option<f64>| v.map_or_else(|| format!("{:>10}", "-"), |x| format!("{x:>10.4}"));
        for (img, id) in self.images.iter().zip(ids) {
            out.push_str(&format!("{id:<16}"));
            for m in Metric::ALL {
                out.push_str(&cell(img.get(m)));
            }
            out.push('\n');
        }
        out.push_str(&format!("{:<16}", "mean"));
        for m in Metric::ALL {
            out.push_str(&cell(self.mean(m)));
        }
        out.push('\n');
        out
    }
}

fn evaluate_image(
    p: &SaliencyMap,
    q: &SaliencyMap,
    f: &FixationMap,
    others: &[FixationMap],
    config: &EvalConfig,
    seed: u64,
) -> ImageMetrics {
    let mut values = [None; 6];
    let mut skipped = Vec::new();
    let mut record = |m: Metric, r: Result<f64>| match r {
        Ok(v) => values[m.index()] = Some(v),
        Err(e) => skipped.push((m, e.to_string())),
    };
    record(Metric::AucJudd, auc_judd(p, f));
    record(
        Metric::ShuffledAuc,
        shuffled_auc(p, f, others, config.sauc_splits, seed),
    );
    record(Metric::Nss, nss_metric(p, f));
    record(Metric::Kld, kld_metric(p, q, config.kld_eps));
    record(Metric::Cc, cc_metric(p, q));
    record(Metric::Sim, sim_metric(p, q));
    ImageMetrics { values, skipped }
}

/// Evaluates aligned predictions, ground-truth maps and fixations.
///
/// Shuffled-AUC negatives for image `i` come from `pool` when given,
/// otherwise from the fixations of every other image in the batch.
pub fn evaluate(
    predictions: &[SaliencyMap],
    ground_truth: &[SaliencyMap],
    fixations: &[FixationMap],
    pool: Option<&[FixationMap]>,
    config: &EvalConfig,
) -> Result<MetricReport> {
    if predictions.len() != ground_truth.len() || predictions.len() != fixations.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions, {} ground-truth maps, {} fixation maps",
            predictions.len(),
            ground_truth.len(),
            fixations.len()
        )));
    }
    for (i, ((p, q), f)) in predictions.iter().zip(ground_truth).zip(fixations).enumerate() {
        if !p.same_shape(q) || !f.same_shape_as(p) {
            return Err(Error::ShapeMismatch(format!(
                "image #{i}: prediction {}x{}, ground truth {}x{}, fixations {}x{}",
                p.height(),
                p.width(),
                q.height(),
                q.width(),
                f.height(),
                f.width()
            )));
        }
    }
    let images = par::map_range(predictions.len(), |i| {
        let others: Vec<FixationMap> = match pool {
            Some(pool) => pool.to_vec(),
            None => fixations
                .iter()
                .enumerate()
                .filter(|&(j, o)| j != i && o.same_shape_as(&predictions[i]))
                .map(|(_, o)| o.clone())
                .collect(),
        };
        let seed = config.seed.wrapping_add(i as u64);
        evaluate_image(&predictions[i], &ground_truth[i], &fixations[i], &others, config, seed)
    });
    let mut means = [None; 6];
    let mut counts = [0; 6];
    for m in Metric::ALL {
        let vals: Vec<f64> = images.iter().filter_map(|im| im.get(m)).collect();
        counts[m.index()] = vals.len();
        if !vals.is_empty() {
            means[m.index()] = Some(vals.iter().sum::<f64>() / vals.len() as f64);
        }
    }
    Ok(MetricReport { images, means, counts })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{gaussian_blur, normalize_to_distribution};

    fn grid(h: usize, w: usize, v: &[f64]) -> Grid {
        Grid::new(h, w, v.to_vec()).unwrap()
    }

    #[test]
    fn auc_judd_perfect_and_constant() {
        let f = FixationMap::from_points(3, 3, &[(0, 0), (2, 1)]).unwrap();
        let p = Grid::from_fn(3, 3, |y, x| if f.get(y, x) { 1.0 } else { 0.1 * (y + x) as f64 / 10.0 });
        assert_eq!(auc_judd(&p, &f).unwrap(), 1.0);
        assert_eq!(auc_judd(&Grid::from_fn(3, 3, |_, _| 0.3), &f).unwrap(), 0.5);
        assert!(auc_judd(&p, &FixationMap::empty(3, 3)).is_err());
    }

    #[test]
    fn auc_small_hand_case() {
        // pos {3, 1}, neg {2, 1, 0}: pairs won 3>2,3>1,3>0,1>0 = 4, tie 1=1 -> 0.5
        assert_eq!(auc_from_scores(&[3.0, 1.0], &[2.0, 1.0, 0.0]).unwrap(), 4.5 / 6.0);
    }

    #[test]
    fn nss_examples() {
        let f = FixationMap::from_points(2, 2, &[(0, 0)]).unwrap();
        let p = grid(2, 2, &[0.7, 0.1, 0.1, 0.1]);
        assert!((nss_metric(&p, &f).unwrap() - 3f64.sqrt()).abs() < 1e-12);
        // mean 0.25, fixated values symmetric around it
        let f2 = FixationMap::from_points(2, 2, &[(0, 0), (0, 1)]).unwrap();
        let p2 = grid(2, 2, &[0.4, 0.1, 0.25, 0.25]);
        assert!(nss_metric(&p2, &f2).unwrap().abs() < 1e-12);
        assert!(matches!(
            nss_metric(&grid(2, 2, &[0.25; 4]), &f),
            Err(Error::DegenerateMap(_))
        ));
    }

    #[test]
    fn cc_and_sim_examples() {
        let q = grid(2, 2, &[0.1, 0.2, 0.3, 0.4]);
        assert!((cc_metric(&q, &q).unwrap() - 1.0).abs() < 1e-12);
        let flip = grid(2, 2, &[0.4, 0.3, 0.2, 0.1]);
        assert!((cc_metric(&flip, &q).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(sim_metric(&q, &q).unwrap(), 1.0);
        let a = grid(1, 4, &[0.5, 0.5, 0.0, 0.0]);
        let b = grid(1, 4, &[0.25; 4]);
        assert_eq!(sim_metric(&a, &b).unwrap(), 0.5);
        let c = grid(1, 4, &[0.0, 0.0, 0.5, 0.5]);
        assert_eq!(sim_metric(&a, &c).unwrap(), 0.0);
        assert!(sim_metric(&grid(1, 4, &[1.0; 4]), &b).is_err());
    }

    #[test]
    fn kld_is_asymmetric() {
        let p = grid(1, 3, &[0.8, 0.1, 0.1]);
        let q = grid(1, 3, &[0.4, 0.4, 0.2]);
        let a = kld_metric(&p, &q, 1e-7).unwrap();
        let b = kld_metric(&q, &p, 1e-7).unwrap();
        assert!((a - b).abs() > 1e-3);
    }

    #[test]
    fn shuffled_auc_requires_pool() {
        let f = FixationMap::from_points(3, 3, &[(1, 1)]).unwrap();
        let p = Grid::from_fn(3, 3, |y, x| (y * 3 + x) as f64);
        assert!(matches!(shuffled_auc(&p, &f, &[], 3, 0), Err(Error::NoFixations(_))));
        // the only other fixation is on the same pixel -> pool empties
        assert!(shuffled_auc(&p, &f, std::slice::from_ref(&f), 3, 0).is_err());
        let other = FixationMap::from_points(3, 3, &[(0, 0), (2, 2)]).unwrap();
        assert_eq!(
            shuffled_auc(&Grid::from_fn(3, 3, |_, _| 1.0), &f, &[other], 4, 1).unwrap(),
            0.5
        );
    }

    fn blurred_fix(f: &FixationMap) -> SaliencyMap {
        normalize_to_distribution(&gaussian_blur(&f.to_grid(), 1.0).unwrap()).unwrap()
    }

    #[test]
    fn evaluate_perfect_image() {
        let f = FixationMap::from_points(8, 8, &[(2, 2), (5, 6)]).unwrap();
        let q = blurred_fix(&f);
        let other = FixationMap::from_points(8, 8, &[(0, 0), (7, 7), (3, 5)]).unwrap();
        let r = evaluate(
            std::slice::from_ref(&q),
            std::slice::from_ref(&q),
            &[f],
            Some(&[other]),
            &EvalConfig::default(),
        )
        .unwrap();
        assert!((r.mean(Metric::Sim).unwrap() - 1.0).abs() < 1e-12);
        assert!((r.mean(Metric::Cc).unwrap() - 1.0).abs() < 1e-12);
        // with eps = 1e-7 the formula bottoms out at about -eps * (pixels - 1)
        let kld = r.mean(Metric::Kld).unwrap();
        assert!(kld < 1e-6 && kld > -1e-7 * 64.0, "{kld}");
    }

    #[test]
    fn evaluate_aggregates_and_skips() {
        let f1 = FixationMap::from_points(6, 6, &[(1, 1), (4, 4)]).unwrap();
        let f2 = FixationMap::from_points(6, 6, &[(2, 3)]).unwrap();
        let q1 = blurred_fix(&f1);
        let q2 = blurred_fix(&f2);
        let cfg = EvalConfig::default();
        let same = evaluate(
            &[q1.clone(), q1.clone()],
            &[q1.clone(), q1.clone()],
            &[f1.clone(), f1.clone()],
            Some(std::slice::from_ref(&f2)),
            &cfg,
        )
        .unwrap();
        use std::slice::from_ref;
        let single = evaluate(from_ref(&q1), from_ref(&q1), from_ref(&f1), Some(from_ref(&f2)), &cfg).unwrap();
        for m in [Metric::AucJudd, Metric::Nss, Metric::Kld, Metric::Cc, Metric::Sim] {
            assert_eq!(same.mean(m), single.mean(m));
        }

        let flat = SaliencyMap::uniform(6, 6);
        let r = evaluate(
            &[q1.clone(), flat, q2.clone()],
            &[q1.clone(), q2.clone(), q2.clone()],
            &[f1.clone(), f2.clone(), f2.clone()],
            None,
            &cfg,
        )
        .unwrap();
        assert_eq!(r.count(Metric::Nss), 2);
        assert_eq!(r.skipped(Metric::Nss), 1);
        assert_eq!(r.count(Metric::Kld), 3);
        assert_eq!(r.count(Metric::AucJudd), 3);
        let kv = r.to_key_values(&["a".into(), "b".into(), "c".into()]);
        assert!(kv.contains("b.nss=skipped\n"));
        assert!(kv.contains("skipped.nss=1\n"));
    }

    #[test]
    fn evaluate_rejects_mismatch() {
        let q = SaliencyMap::uniform(4, 4);
        let f = FixationMap::from_points(4, 5, &[(0, 0)]).unwrap();
        assert!(matches!(
            evaluate(
                std::slice::from_ref(&q),
                std::slice::from_ref(&q),
                &[f],
                None,
                &EvalConfig::default()
            ),
            Err(Error::ShapeMismatch(_))
        ));
    }
}
