//! Scenes on disk and in memory, deterministic splits and detection sources.
//!
//! A corpus directory holds a `corpus.txt` manifest plus five files per
//! scene:
//!
//! ```text
//! # comment
//! seed 7
//! scene s000 128 96
//! scene s001 128 96
//! ```
//!
//! `<id>.features.ftn`, `<id>.saliency.ftn`, `<id>.fixations.ftn`,
//! `<id>.det.txt` (detector output, gated on load by confidence) and
//! `<id>.gt.txt` (annotated boxes).

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dissimilarity::{ObjectChannels, Similarity};
use crate::harness::formats::{
    gate_detections, load_feature_tensor, load_fixations, load_saliency, parse_detections, save_detections,
    save_feature_tensor, save_fixations, save_grid, write_atomic, DEFAULT_CONFIDENCE_THRESHOLD,
};
use crate::par;
use crate::tensor::{Detection, FeatureMap, FixationMap, SaliencyMap};
use crate::{Error, Result};

pub const MANIFEST: &str = "corpus.txt";

/// Keeps the split stream apart from other draws seeded with the corpus seed.
const SPLIT_SALT: u64 = 0x7370_6c69_7400;

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: String,
    pub features: FeatureMap,
    /// Annotated boxes.
    pub gt_detections: Vec<Detection>,
    /// Detector output, ungated.
    pub detections: Vec<Detection>,
    pub saliency: SaliencyMap,
    pub fixations: FixationMap,
    pub frame_w: usize,
    pub frame_h: usize,
}

impl Scene {
    /// Checks that maps agree in size and every box lies in the frame.
    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.features.height(), self.features.width());
        if !self.saliency.same_shape(&self.features.channel_grid(0)) {
            return Err(Error::ShapeMismatch(format!(
                "scene {}: saliency is {}x{}, features are {h}x{w}",
                self.id,
                self.saliency.height(),
                self.saliency.width()
            )));
        }
        if (self.fixations.height(), self.fixations.width()) != (h, w) {
            return Err(Error::ShapeMismatch(format!(
                "scene {}: fixations are {}x{}, features are {h}x{w}",
                self.id,
                self.fixations.height(),
                self.fixations.width()
            )));
        }
        if self.frame_w == 0 || self.frame_h == 0 {
            return Err(Error::InvalidArgument(format!("scene {}: empty frame", self.id)));
        }
        for (i, d) in self.gt_detections.iter().chain(&self.detections).enumerate() {
            d.validate(self.frame_w, self.frame_h)
                .map_err(|reason| Error::InvalidDetection { index: i, reason })?;
        }
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.features.height()
    }

    pub fn width(&self) -> usize {
        self.features.width()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub seed: u64,
    pub scenes: Vec<Scene>,
    /// Detector confidence gate applied to [`Scene::detections`].
    pub confidence_threshold: f64,
}

/// Index sets of a train/validation/test split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    /// Shuffles `0..n` with `seed`; a quarter goes to test, an eighth to
    /// validation, the rest to training. Each part is returned sorted.
    pub fn new(n: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("cannot split an empty corpus".into()));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ SPLIT_SALT));
        let n_test = n / 4;
        let n_val = n / 8;
        let mut test = order[..n_test].to_vec();
        let mut val = order[n_test..n_test + n_val].to_vec();
        let mut train = order[n_test + n_val..].to_vec();
        test.sort_unstable();
        val.sort_unstable();
        train.sort_unstable();
        Ok(Split { train, val, test })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DetectionMode {
    GroundTruth,
    Predicted,
    /// Each scene borrows the detector output of another training scene.
    Random,
    None,
}

impl DetectionMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gt" | "ground_truth" | "ground-truth" => Ok(DetectionMode::GroundTruth),
            "pred" | "predicted" => Ok(DetectionMode::Predicted),
            "random" => Ok(DetectionMode::Random),
            "none" => Ok(DetectionMode::None),
            _ => Err(Error::InvalidArgument(format!(
                "unknown detection mode {s:?} (expected gt, predicted, random or none)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DetectionMode::GroundTruth => "gt",
            DetectionMode::Predicted => "predicted",
            DetectionMode::Random => "random",
            DetectionMode::None => "none",
        }
    }
}

/// Where a scene's boxes come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DetectionSource {
    pub mode: DetectionMode,
    /// Seeds the donor draw in random mode.
    pub donor_seed: u64,
}

impl DetectionSource {
    pub const GROUND_TRUTH: DetectionSource = DetectionSource::new(DetectionMode::GroundTruth);
    pub const PREDICTED: DetectionSource = DetectionSource::new(DetectionMode::Predicted);
    pub const NONE: DetectionSource = DetectionSource::new(DetectionMode::None);

    pub const fn new(mode: DetectionMode) -> Self {
        DetectionSource { mode, donor_seed: 0 }
    }

    pub const fn random(donor_seed: u64) -> Self {
        DetectionSource {
            mode: DetectionMode::Random,
            donor_seed,
        }
    }
}

impl fmt::Display for DetectionSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.mode {
            DetectionMode::Random => write!(f, "random({})", self.donor_seed),
            m => f.write_str(m.name()),
        }
    }
}

/// Rescales a box from one frame to another.
fn rescale(d: &Detection, from_w: usize, from_h: usize, to_w: usize, to_h: usize) -> Detection {
    let sx = to_w as f64 / from_w as f64;
    let sy = to_h as f64 / from_h as f64;
    Detection {
        x_min: d.x_min * sx,
        x_max: d.x_max * sx,
        y_min: d.y_min * sy,
        y_max: d.y_max * sy,
        ..*d
    }
}

impl Corpus {
    pub fn new(seed: u64, scenes: Vec<Scene>) -> Result<Self> {
        let mut ids = std::collections::HashSet::new();
        for s in &scenes {
            s.validate()?;
            if !ids.insert(s.id.as_str()) {
                return Err(Error::InvalidArgument(format!("duplicate scene id {}", s.id)));
            }
            if s.id.is_empty() || s.id.chars().any(|c| c.is_whitespace() || c == '/') {
                return Err(Error::InvalidArgument(format!("bad scene id {:?}", s.id)));
            }
        }
        Ok(Corpus {
            seed,
            scenes,
            confidence_threshold: DEFAULT_CONFIDENCE_THRESHOLD,
        })
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    pub fn split(&self) -> Result<Split> {
        Split::new(self.len(), self.seed)
    }

    pub fn ids(&self, indices: &[usize]) -> Vec<String> {
        indices.iter().map(|&i| self.scenes[i].id.clone()).collect()
    }

    /// Detector output of scene `i` above the confidence gate.
    pub fn predicted(&self, i: usize) -> Vec<Detection> {
        gate_detections(&self.scenes[i].detections, self.confidence_threshold)
    }

    /// Donor scene for every scene in random mode. Donors are drawn
    /// uniformly from `pool` (normally the training split), never the scene
    /// itself.
    pub fn random_donors(&self, pool: &[usize], seed: u64) -> Result<Vec<usize>> {
        if self.len() < 2 {
            return Err(Error::InvalidArgument(
                "random detections need at least two scenes".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..self.len())
            .map(|i| {
                let candidates: Vec<usize> = pool.iter().copied().filter(|&j| j != i).collect();
                let candidates = if candidates.is_empty() {
                    (0..self.len()).filter(|&j| j != i).collect()
                } else {
                    candidates
                };
                Ok(candidates[rng.random_range(0..candidates.len())])
            })
            .collect()
    }

    /// Boxes of every scene under `source`, in each scene's own frame.
    /// `pool` is where random-mode donors come from.
    pub fn detections_for(&self, source: DetectionSource, pool: &[usize]) -> Result<Vec<Vec<Detection>>> {
        Ok(match source.mode {
            DetectionMode::GroundTruth => self.scenes.iter().map(|s| s.gt_detections.clone()).collect(),
            DetectionMode::Predicted => (0..self.len()).map(|i| self.predicted(i)).collect(),
            DetectionMode::None => vec![Vec::new(); self.len()],
            DetectionMode::Random => {
                let donors = self.random_donors(pool, source.donor_seed)?;
                donors
                    .iter()
                    .enumerate()
                    .map(|(i, &j)| {
                        let (host, donor) = (&self.scenes[i], &self.scenes[j]);
                        self.predicted(j)
                            .iter()
                            .map(|d| rescale(d, donor.frame_w, donor.frame_h, host.frame_w, host.frame_h))
                            .collect()
                    })
                    .collect()
            }
        })
    }

    /// Object channels of every scene under `source`. In `none` mode all
    /// channels are zero.
    pub fn channels(
        &self,
        source: DetectionSource,
        pool: &[usize],
        similarity: &Similarity,
    ) -> Result<Vec<ObjectChannels>> {
        let dets = self.detections_for(source, pool)?;
        let idx: Vec<usize> = (0..self.len()).collect();
        par::try_map_slice(&idx, |&i| {
            let s = &self.scenes[i];
            if source.mode == DetectionMode::None {
                return Ok(ObjectChannels::zeros(
                    s.height(),
                    s.width(),
                    Some(s.features.channels()),
                ));
            }
            ObjectChannels::compute(&s.features, &s.features, &dets[i], s.frame_w, s.frame_h, similarity)
                .map_err(|e| Error::InvalidArgument(format!("scene {}: {e}", s.id)))
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = format!("# objsal corpus\nseed {}\n", self.seed);
        for s in &self.scenes {
            manifest.push_str(&format!("scene {} {} {}\n", s.id, s.frame_w, s.frame_h));
        }
        par::try_map_slice(&self.scenes, |s| -> Result<()> {
            save_feature_tensor(&s.features, &scene_path(dir, &s.id, "features.ftn"))?;
            save_grid(s.saliency.as_grid(), &scene_path(dir, &s.id, "saliency.ftn"))?;
            save_fixations(&s.fixations, &scene_path(dir, &s.id, "fixations.ftn"))?;
            save_detections(&s.detections, &scene_path(dir, &s.id, "det.txt"))?;
            save_detections(&s.gt_detections, &scene_path(dir, &s.id, "gt.txt"))
        })?;
        write_atomic(&dir.join(MANIFEST), manifest.as_bytes())
    }

    /// Loads a corpus directory; detector output is gated at `threshold`
    /// whenever predicted boxes are requested.
    pub fn load(dir: &Path, threshold: f64) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut seed = None;
        let mut entries = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |detail: String| Error::Parse {
                path: path.clone(),
                line: n + 1,
                detail,
            };
            let fields: Vec<&str> = line.split_whitespace().collect();
            match fields.as_slice() {
                ["seed", v] => seed = Some(v.parse::<u64>().map_err(|_| err(format!("bad seed {v:?}")))?),
                ["scene", id, w, h] => {
                    let w = w.parse::<usize>().map_err(|_| err(format!("bad frame width {w:?}")))?;
                    let h = h.parse::<usize>().map_err(|_| err(format!("bad frame height {h:?}")))?;
                    entries.push((id.to_string(), w, h));
                }
                _ => return Err(err(format!("unrecognised line {line:?}"))),
            }
        }
        let seed = seed.ok_or_else(|| Error::Format {
            path: path.clone(),
            detail: "missing seed line".into(),
        })?;
        let scenes = par::try_map_slice(&entries, |(id, w, h)| load_scene(dir, id, *w, *h))?;
        let mut corpus = Corpus::new(seed, scenes).map_err(|e| Error::Format {
            path: path.clone(),
            detail: e.to_string(),
        })?;
        corpus.confidence_threshold = threshold;
        Ok(corpus)
    }
}

pub fn scene_path(dir: &Path, id: &str, suffix: &str) -> PathBuf {
    dir.join(format!("{id}.{suffix}"))
}

fn load_scene(dir: &Path, id: &str, frame_w: usize, frame_h: usize) -> Result<Scene> {
    let read_dets = |suffix: &str| -> Result<Vec<Detection>> {
        let p = scene_path(dir, id, suffix);
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        parse_detections(&text, &p)
    };
    let scene = Scene {
        id: id.to_string(),
        features: load_feature_tensor(&scene_path(dir, id, "features.ftn"))?,
        gt_detections: read_dets("gt.txt")?,
        detections: read_dets("det.txt")?,
        saliency: load_saliency(&scene_path(dir, id, "saliency.ftn"))?,
        fixations: load_fixations(&scene_path(dir, id, "fixations.ftn"))?,
        frame_w,
        frame_h,
    };
    scene.validate().map_err(|e| Error::Format {
        path: scene_path(dir, id, "*"),
        detail: e.to_string(),
    })?;
    Ok(scene)
}
