//! Synthetic scenes with planted object saliency.
//!
//! Each scene has up to a handful of rectangular objects drawn from a few
//! categories. Objects of one category share a feature signature, so a
//! category that appears once stands out while repeated categories look
//! alike. Ground truth puts mass on objects in proportion to
//! `exp(uniqueness_gain * d + size_gain * s)`, where `d` is the object's
//! appearance dissimilarity computed on the noise-free features and `s` its
//! relative area, mixed with a centred Gaussian. Fixations are drawn from the
//! ground truth. A fake detector reports the boxes with misses, jitter and
//! low-confidence false alarms.

use std::f64::consts::PI;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;

use crate::dissimilarity::{dissimilarity_scores, normalized_size, ObjectSet, DEFAULT_COSINE_EPS};
use crate::harness::corpus::{Corpus, Scene};
use crate::par;
use crate::tensor::{Detection, FeatureMap, FixationMap, Grid, SaliencyMap};
use crate::{Error, Result};

/// Ground truth is stored on a lattice of `2^-QUANT_BITS`, which `f32` holds
/// exactly.
const QUANT_BITS: i32 = 24;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub grid_h: usize,
    pub grid_w: usize,
    pub channels: usize,
    /// Detector frame; a multiple of the grid in each direction.
    pub frame_w: usize,
    pub frame_h: usize,
    pub max_objects: usize,
    pub categories: usize,
    /// Box side range in grid cells.
    pub min_box: usize,
    pub max_box: usize,
    /// Share of ground-truth mass on the centred Gaussian.
    pub center_mass: f64,
    /// Gaussian width as a fraction of each side.
    pub center_sigma: f64,
    pub uniqueness_gain: f64,
    pub size_gain: f64,
    pub noise: f64,
    pub fixations: usize,
    pub miss_rate: f64,
    /// Box jitter in frame pixels.
    pub jitter: f64,
    pub max_false_positives: usize,
    /// Upper end of false-positive confidences; those above the gate survive.
    pub false_positive_confidence: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            grid_h: 24,
            grid_w: 32,
            channels: 8,
            frame_w: 128,
            frame_h: 96,
            max_objects: 6,
            categories: 4,
            min_box: 3,
            max_box: 10,
            center_mass: 0.02,
            center_sigma: 0.35,
            uniqueness_gain: 3.0,
            size_gain: 20.0,
            noise: 0.1,
            fixations: 40,
            miss_rate: 0.0,
            jitter: 0.5,
            max_false_positives: 2,
            false_positive_confidence: 0.78,
        }
    }
}

impl SynthSpec {
    /// Scenes whose ground truth is dominated by the centred Gaussian.
    pub fn center_biased() -> Self {
        SynthSpec {
            center_mass: 0.6,
            center_sigma: 0.2,
            ..SynthSpec::default()
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.grid_h == 0 || self.grid_w == 0 || self.channels == 0 || self.categories == 0 {
            return bad("grid, channels and categories must be positive".into());
        }
        if !self.frame_w.is_multiple_of(self.grid_w) || !self.frame_h.is_multiple_of(self.grid_h) {
            return bad(format!(
                "frame {}x{} is not a multiple of the grid {}x{}",
                self.frame_w, self.frame_h, self.grid_w, self.grid_h
            ));
        }
        if self.min_box == 0 || self.min_box > self.max_box || self.max_box > self.grid_h.min(self.grid_w) {
            return bad(format!(
                "box range {}..={} does not fit the grid",
                self.min_box, self.max_box
            ));
        }
        if !(0.0..=1.0).contains(&self.center_mass) || !(0.0..=1.0).contains(&self.miss_rate) {
            return bad("center_mass and miss_rate must lie in [0, 1]".into());
        }
        if !(self.center_sigma > 0.0) || !(self.noise >= 0.0) || !(self.jitter >= 0.0) {
            return bad("center_sigma must be positive, noise and jitter nonnegative".into());
        }
        if !(self.false_positive_confidence > 0.2 && self.false_positive_confidence <= 1.0) {
            return bad("false_positive_confidence must lie in (0.2, 1]".into());
        }

        Ok(())
    }
}

/// An object in grid cells, `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlantedObject {
    pub category: usize,
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
    pub gain: f64,
}

impl PlantedObject {
    fn overlaps(&self, o: &PlantedObject) -> bool {
        self.x0 < o.x1 && o.x0 < self.x1 && self.y0 < o.y1 && o.y0 < self.y1
    }

    pub fn area(&self) -> usize {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }
}

/// Signature of `category` on `channel` at relative position `(u, v)` in
/// the box: a rectified plane wave whose frequency and phase depend on both.
pub fn signature(category: usize, channel: usize, u: f64, v: f64) -> f64 {
    let (c, k) = (category as f64, channel as f64);
    let a = 1.0 + ((category + channel) % 3) as f64;
    let b = 1.0 + ((category * channel + category) % 2) as f64;
    let phase = 2.0 * PI * ((c + 1.0) * (k + 1.0) * 0.618_033_988_75).fract();
    (2.0 * PI * (a * u + b * v) + phase).cos().max(0.0)
}

fn clean_features(spec: &SynthSpec, objects: &[PlantedObject]) -> FeatureMap {
    let mut f = FeatureMap::zeros(spec.grid_h, spec.grid_w, spec.channels);
    let c = spec.channels;
    let w = spec.grid_w;
    let data = f.data_mut();
    for o in objects {
        let (bw, bh) = ((o.x1 - o.x0) as f64, (o.y1 - o.y0) as f64);
        for y in o.y0..o.y1 {
            for x in o.x0..o.x1 {
                let u = (x - o.x0) as f64 / bw;
                let v = (y - o.y0) as f64 / bh;
                for k in 0..c {
                    let val = o.gain * signature(o.category, k, u, v);
                    let slot = &mut data[(y * w + x) * c + k];
                    *slot = slot.max(val);
                }
            }
        }
    }
    f
}

fn center_gaussian(spec: &SynthSpec) -> Grid {
    let (h, w) = (spec.grid_h as f64, spec.grid_w as f64);
    let (cy, cx) = ((h - 1.0) / 2.0, (w - 1.0) / 2.0);
    let (sy, sx) = (spec.center_sigma * h, spec.center_sigma * w);
    let g = Grid::from_fn(spec.grid_h, spec.grid_w, |y, x| {
        let dy = (y as f64 - cy) / sy;
        let dx = (x as f64 - cx) / sx;
        (-0.5 * (dx * dx + dy * dy)).exp()
    });
    let s = g.sum();
    Grid::from_fn(spec.grid_h, spec.grid_w, |y, x| g.get(y, x) / s)
}

/// Rounds a nonnegative map with unit mass onto the `2^-24` lattice keeping
/// the total exactly 1 (largest remainders get the spare units).
fn quantize_distribution(g: &Grid) -> Result<SaliencyMap> {
    let scale = 2f64.powi(QUANT_BITS);
    let total = g.sum();
    let exact: Vec<f64> = g.data().iter().map(|v| v / total * scale).collect();
    let mut units: Vec<u64> = exact.iter().map(|v| v.floor() as u64).collect();
    let assigned: u64 = units.iter().sum();
    let mut spare = (scale as u64).saturating_sub(assigned);
    let mut order: Vec<usize> = (0..exact.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if spare == 0 {
            break;
        }
        units[i] += 1;
        spare -= 1;
    }
    let data = units.iter().map(|&u| u as f64 / scale).collect();
    SaliencyMap::from_distribution(Grid::new(g.height(), g.width(), data)?)
}

/// Mass each object receives before mixing with the centre term.
pub fn planted_intensities(spec: &SynthSpec, objects: &[PlantedObject]) -> Result<Vec<f64>> {
    if objects.is_empty() {
        return Ok(Vec::new());
    }
    let clean = clean_features(spec, objects);
    let boxes = boxes(spec, objects);
    let set = ObjectSet::extract(&clean, &boxes, spec.frame_w, spec.frame_h)?;
    let diss = dissimilarity_scores(&set, DEFAULT_COSINE_EPS);
    boxes
        .iter()
        .zip(diss)
        .map(|(b, d)| {
            let s = normalized_size(b, spec.frame_w, spec.frame_h)?;
            Ok((spec.uniqueness_gain * d + spec.size_gain * s).exp())
        })
        .collect()
}

fn boxes(spec: &SynthSpec, objects: &[PlantedObject]) -> Vec<Detection> {
    let sx = (spec.frame_w / spec.grid_w) as f64;
    let sy = (spec.frame_h / spec.grid_h) as f64;
    objects
        .iter()
        .map(|o| {
            Detection::new(
                o.x0 as f64 * sx,
                o.y0 as f64 * sy,
                o.x1 as f64 * sx,
                o.y1 as f64 * sy,
                1.0,
            )
            .with_class(o.category as u32)
        })
        .collect()
}

/// Ground-truth distribution for a set of objects.
pub fn planted_saliency(spec: &SynthSpec, objects: &[PlantedObject]) -> Result<SaliencyMap> {
    let center = center_gaussian(spec);
    if objects.is_empty() {
        return quantize_distribution(&center);
    }
    let intensity = planted_intensities(spec, objects)?;
    let mut sum = Grid::zeros(spec.grid_h, spec.grid_w);
    let mut count = vec![0u32; spec.grid_h * spec.grid_w];
    for (o, &v) in objects.iter().zip(&intensity) {
        for y in o.y0..o.y1 {
            for x in o.x0..o.x1 {
                sum.set(y, x, sum.get(y, x) + v);
                count[y * spec.grid_w + x] += 1;
            }
        }
    }
    let obj = Grid::from_fn(spec.grid_h, spec.grid_w, |y, x| {
        let c = count[y * spec.grid_w + x];
        if c == 0 {
            0.0
        } else {
            sum.get(y, x) / c as f64
        }
    });
    let obj_total = obj.sum();
    let lambda = spec.center_mass;
    let mixed = Grid::from_fn(spec.grid_h, spec.grid_w, |y, x| {
        (1.0 - lambda) * obj.get(y, x) / obj_total + lambda * center.get(y, x)
    });
    quantize_distribution(&mixed)
}

fn sample_objects(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<PlantedObject> {
    let k = rng.random_range(0..=spec.max_objects);
    let mut out: Vec<PlantedObject> = Vec::with_capacity(k);
    for _ in 0..k {
        for _attempt in 0..50 {
            let bw = rng.random_range(spec.min_box..=spec.max_box);
            let bh = rng.random_range(spec.min_box..=spec.max_box.min(spec.grid_h));
            let x0 = rng.random_range(0..=spec.grid_w - bw);
            let y0 = rng.random_range(0..=spec.grid_h - bh);
            let cand = PlantedObject {
                category: rng.random_range(0..spec.categories),
                x0,
                y0,
                x1: x0 + bw,
                y1: y0 + bh,
                gain: rng.random_range(0.7..1.3),
            };
            if out.iter().all(|o| !o.overlaps(&cand)) {
                out.push(cand);
                break;
            }
        }
    }
    out
}

fn fake_detector(spec: &SynthSpec, truth: &[Detection], rng: &mut ChaCha8Rng) -> Vec<Detection> {
    let (fw, fh) = (spec.frame_w as f64, spec.frame_h as f64);
    let jitter = Normal::new(0.0, spec.jitter.max(f64::MIN_POSITIVE)).unwrap();
    let clamp_box = |x0: f64, y0: f64, x1: f64, y1: f64| {
        let x0 = x0.clamp(0.0, fw - 2.0);
        let y0 = y0.clamp(0.0, fh - 2.0);
        (x0, y0, x1.clamp(x0 + 2.0, fw), y1.clamp(y0 + 2.0, fh))
    };
    let mut out = Vec::new();
    for d in truth {
        if rng.random_bool(spec.miss_rate) {
            continue;
        }
        let mut j = || {
            if spec.jitter > 0.0 {
                jitter.sample(rng).round()
            } else {
                0.0
            }
        };
        let (x0, y0, x1, y1) = clamp_box(d.x_min + j(), d.y_min + j(), d.x_max + j(), d.y_max + j());
        let conf = (rng.random_range(750..1000) as f64) / 1000.0;
        let mut det = Detection::new(x0, y0, x1, y1, conf);
        det.class_id = d.class_id;
        out.push(det);
    }
    let n_fp = rng.random_range(0..=spec.max_false_positives);
    for _ in 0..n_fp {
        let bw = rng.random_range(8..=40) as f64;
        let bh = rng.random_range(8..=40).min(spec.frame_h) as f64;
        let x0 = rng.random_range(0.0..fw - bw).round();
        let y0 = rng.random_range(0.0..(fh - bh).max(1.0)).round();
        let (x0, y0, x1, y1) = clamp_box(x0, y0, x0 + bw, y0 + bh);
        let conf = rng.random_range(0.2..spec.false_positive_confidence);
        out.push(Detection::new(x0, y0, x1, y1, conf));
    }
    out
}

/// Renders one scene from explicit objects. `rng` drives noise, fixations and
/// the fake detector.
pub fn render_scene(id: &str, spec: &SynthSpec, objects: &[PlantedObject], rng: &mut ChaCha8Rng) -> Result<Scene> {
    spec.validate()?;
    for o in objects {
        if o.x0 >= o.x1 || o.y0 >= o.y1 || o.x1 > spec.grid_w || o.y1 > spec.grid_h {
            return Err(Error::InvalidArgument(format!("object {o:?} is outside the grid")));
        }
    }
    let clean = clean_features(spec, objects);
    let noise = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE)).unwrap();
    let data = clean
        .data()
        .iter()
        .map(|v| {
            let n = if spec.noise > 0.0 { noise.sample(rng) } else { 0.0 };
            f64::from((v + n) as f32)
        })
        .collect();
    let features = FeatureMap::new(spec.grid_h, spec.grid_w, spec.channels, data)?;
    let saliency = planted_saliency(spec, objects)?;

    let picker = WeightedIndex::new(saliency.data()).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut fixations = FixationMap::empty(spec.grid_h, spec.grid_w);
    for _ in 0..spec.fixations {
        let i = picker.sample(rng);
        fixations.set(i / spec.grid_w, i % spec.grid_w, true);
    }

    let gt_detections = boxes(spec, objects);
    let detections = fake_detector(spec, &gt_detections, rng);
    Ok(Scene {
        id: id.to_string(),
        features,
        gt_detections,
        detections,
        saliency,
        fixations,
        frame_w: spec.frame_w,
        frame_h: spec.frame_h,
    })
}

/// `n` scenes, each drawn from its own stream of the seed.
pub fn synth_corpus(n: usize, seed: u64, spec: &SynthSpec) -> Result<Corpus> {
    if n == 0 {
        return Err(Error::InvalidArgument("corpus needs at least one scene".into()));
    }
    spec.validate()?;
    let idx: Vec<usize> = (0..n).collect();
    let scenes = par::try_map_slice(&idx, |&i| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let objects = sample_objects(spec, &mut rng);
        render_scene(&format!("s{i:03}"), spec, &objects, &mut rng)
    })?;
    Corpus::new(seed, scenes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obj(category: usize, x0: usize, y0: usize) -> PlantedObject {
        PlantedObject {
            category,
            x0,
            y0,
            x1: x0 + 5,
            y1: y0 + 5,
            gain: 1.0,
        }
    }

    fn mass_on(s: &SaliencyMap, spec: &SynthSpec, o: &PlantedObject) -> f64 {
        let mut m = 0.0;
        for y in o.y0..o.y1 {
            for x in o.x0..o.x1 {
                m += s.data()[y * spec.grid_w + x];
            }
        }
        m
    }

    #[test]
    fn unique_object_beats_twins() {
        let spec = SynthSpec::default();
        let objects = [obj(0, 2, 2), obj(1, 12, 2), obj(1, 22, 12)];
        let gt = planted_saliency(&spec, &objects).unwrap();
        let unique = mass_on(&gt, &spec, &objects[0]);
        for twin in &objects[1..] {
            assert!(unique > mass_on(&gt, &spec, twin));
        }
    }

    #[test]
    fn empty_scene_is_center_gaussian() {
        let spec = SynthSpec::default();
        let gt = planted_saliency(&spec, &[]).unwrap();
        let c = center_gaussian(&spec);
        for (a, b) in gt.data().iter().zip(c.data()) {
            assert!((a - b).abs() <= 2f64.powi(-24));
        }
        assert_eq!(gt.sum(), 1.0);
    }

    #[test]
    fn quantized_mass_is_exact_and_f32_stable() {
        let spec = SynthSpec::default();
        let gt = planted_saliency(&spec, &[obj(2, 4, 4), obj(3, 20, 10)]).unwrap();
        assert_eq!(gt.sum(), 1.0);
        assert!(gt.data().iter().all(|v| f64::from(*v as f32) == *v));
    }

    #[test]
    fn larger_objects_get_more_mass_per_pixel() {
        let spec = SynthSpec::default();
        let small = obj(0, 2, 2);
        let big = PlantedObject {
            category: 1,
            x0: 12,
            y0: 4,
            x1: 22,
            y1: 14,
            gain: 1.0,
        };
        let gt = planted_saliency(&spec, &[small, big]).unwrap();
        let per_small = mass_on(&gt, &spec, &small) / small.area() as f64;
        let per_big = mass_on(&gt, &spec, &big) / big.area() as f64;
        assert!(per_big > per_small);
    }

    #[test]
    fn corpus_is_deterministic() {
        let spec = SynthSpec::default();
        let a = synth_corpus(6, 11, &spec).unwrap();
        let b = synth_corpus(6, 11, &spec).unwrap();
        assert_eq!(a, b);
        let c = synth_corpus(6, 12, &spec).unwrap();
        assert_ne!(a, c);
        for s in &a.scenes {
            assert!(s.fixations.count() > 0);
            assert!(s.features.data().iter().all(|v| f64::from(*v as f32) == *v));
        }
    }

    #[test]
    fn same_category_scores_lower() {
        let spec = SynthSpec::default();
        // two twins and two distinct objects of equal size
        let objects = [obj(0, 1, 1), obj(0, 9, 1), obj(1, 17, 1), obj(2, 25, 12)];
        let d = planted_intensities(&spec, &objects).unwrap();
        assert!(d[2] > d[0] && d[2] > d[1], "{d:?}");
        assert!(d[3] > d[0] && d[3] > d[1], "{d:?}");
    }
}
