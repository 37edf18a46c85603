//! Appearance and size dissimilarity channels.
//!
//! Each detected object is sliced out of a feature tensor, resized to a common
//! resolution and compared with every other object. The reciprocal of an
//! object's summed similarity is its raw dissimilarity; raw scores are min-max
//! normalised per image and painted into the object's box. The size channel
//! paints each box's area relative to the frame. Both channels are zero where
//! no box lies and average where boxes overlap.

use crate::par;
use crate::svcca;
use crate::tensor::{bilinear_resize, crop, project_box, slice_features_indexed, Detection, FeatureMap, Grid};
use crate::{Error, Result};

/// Default floor on the cosine denominator.
pub const DEFAULT_COSINE_EPS: f64 = 1e-8;

/// Detected objects with their features resized to a common `h x w x d`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectSet {
    objects: Vec<(Detection, FeatureMap)>,
}

impl ObjectSet {
    pub fn empty() -> Self {
        ObjectSet { objects: Vec::new() }
    }

    /// Builds a set from features that already share one shape.
    pub fn new(objects: Vec<(Detection, FeatureMap)>) -> Result<Self> {
        if let Some((_, first)) = objects.first() {
            if let Some(i) = objects.iter().position(|(_, f)| !f.same_shape(first)) {
                let f = &objects[i].1;
                return Err(Error::ShapeMismatch(format!(
                    "object #{i} features are {}x{}x{}, object #0 features are {}x{}x{}",
                    f.height(),
                    f.width(),
                    f.channels(),
                    first.height(),
                    first.width(),
                    first.channels()
                )));
            }
        }
        Ok(ObjectSet { objects })
    }

    /// Resizes raw per-object slices to the largest height and width among
    /// them.
    pub fn from_slices(detections: &[Detection], slices: Vec<FeatureMap>) -> Result<Self> {
        if detections.len() != slices.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} detections but {} feature slices",
                detections.len(),
                slices.len()
            )));
        }
        let h = slices.iter().map(FeatureMap::height).max().unwrap_or(0);
        let w = slices.iter().map(FeatureMap::width).max().unwrap_or(0);
        let objects = detections
            .iter()
            .zip(slices)
            .map(|(d, s)| Ok((*d, bilinear_resize(&s, h, w)?)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(objects)
    }

    /// Slices every detection (in `frame_w x frame_h` coordinates) out of
    /// `features` and resizes the slices to a common size.
    pub fn extract(features: &FeatureMap, detections: &[Detection], frame_w: usize, frame_h: usize) -> Result<Self> {
        let slices = detections
            .iter()
            .enumerate()
            .map(|(i, d)| slice_features_indexed(features, d, i, frame_w, frame_h))
            .collect::<Result<Vec<_>>>()?;
        Self::from_slices(detections, slices)
    }

    pub fn len(&self) -> usize {
        self.objects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }

    pub fn objects(&self) -> &[(Detection, FeatureMap)] {
        &self.objects
    }

    pub fn detections(&self) -> Vec<Detection> {
        self.objects.iter().map(|(d, _)| *d).collect()
    }
}

/// Which dissimilarity a [`ChannelMap`] carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelKind {
    Appearance,
    Size,
}

/// Single-channel map with values in `[0, 1]`, zero outside every box.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMap {
    pub kind: ChannelKind,
    pub grid: Grid,
}

impl ChannelMap {
    pub fn zeros(kind: ChannelKind, height: usize, width: usize) -> Self {
        ChannelMap {
            kind,
            grid: Grid::zeros(height, width),
        }
    }
}

/// Object-to-object similarity used inside [`dissimilarity_scores_with`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Similarity {
    /// Sum over channels of the per-channel cosine similarity.
    Cosine { eps: f64 },
    /// Mean canonical correlation after SVD projection.
    Svcca { energy_fraction: f64 },
}

impl Default for Similarity {
    fn default() -> Self {
        Similarity::Cosine {
            eps: DEFAULT_COSINE_EPS,
        }
    }
}

/// Sum over channels `k` of `<f_i[:,:,k], f_j[:,:,k]> / max(|f_i[:,:,k]| |f_j[:,:,k]|, eps)`.
pub fn pairwise_similarity(fi: &FeatureMap, fj: &FeatureMap, eps: f64) -> Result<f64> {
    if !fi.same_shape(fj) {
        return Err(Error::ShapeMismatch(format!(
            "cannot compare {}x{}x{} with {}x{}x{} features",
            fi.height(),
            fi.width(),
            fi.channels(),
            fj.height(),
            fj.width(),
            fj.channels()
        )));
    }
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    let d = fi.channels();
    let mut dot = vec![0.0; d];
    let mut ni = vec![0.0; d];
    let mut nj = vec![0.0; d];
    for (pi, pj) in fi.data().chunks_exact(d).zip(fj.data().chunks_exact(d)) {
        for k in 0..d {
            dot[k] += pi[k] * pj[k];
            ni[k] += pi[k] * pi[k];
            nj[k] += pj[k] * pj[k];
        }
    }
    Ok((0..d).map(|k| dot[k] / (ni[k].sqrt() * nj[k].sqrt()).max(eps)).sum())
}

fn svcca_similarity(fi: &FeatureMap, fj: &FeatureMap, energy_fraction: f64) -> Result<f64> {
    let x = svcca::Matrix::from_feature_map(fi);
    let y = svcca::Matrix::from_feature_map(fj);
    svcca::svcca_score(&x, &y, energy_fraction)
}

/// Min-max normalises raw scores to `[0, 1]`. When every score is the same
/// (within a relative 1e-12) all of them map to 1.
pub fn normalize_scores(raw: &[f64]) -> Vec<f64> {
    let Some(&first) = raw.first() else {
        return Vec::new();
    };
    let (lo, hi) = raw.iter().fold((first, first), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = hi - lo;
    if span <= 1e-12 * hi.abs().max(lo.abs()) {
        return vec![1.0; raw.len()];
    }
    raw.iter().map(|v| (v - lo) / span).collect()
}

fn scores_from_similarity_rows(rows: Vec<Vec<f64>>, eps: f64) -> Vec<f64> {
    let raw: Vec<f64> = rows
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let total: f64 = row.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, s)| s).sum();
            // A negative sum saturates at 1/eps through the clamp.
            1.0 / total.max(eps)
        })
        .collect();
    normalize_scores(&raw)
}

/// Normalised appearance dissimilarity of each object, cosine similarity.
pub fn dissimilarity_scores(set: &ObjectSet, eps: f64) -> Vec<f64> {
    dissimilarity_scores_with(set, &Similarity::Cosine { eps }).expect("cosine similarity on an ObjectSet cannot fail")
}

/// Normalised appearance dissimilarity of each object using any
/// [`Similarity`]. A single object scores 1; an empty set gives no scores.
pub fn dissimilarity_scores_with(set: &ObjectSet, similarity: &Similarity) -> Result<Vec<f64>> {
    let n = set.len();
    match n {
        0 => return Ok(Vec::new()),
        1 => return Ok(vec![1.0]),
        _ => {}
    }
    let eps = match *similarity {
        Similarity::Cosine { eps } => eps,
        Similarity::Svcca { .. } => DEFAULT_COSINE_EPS,
    };
    let objs = set.objects();
    let pair = |i: usize, j: usize| -> Result<f64> {
        match *similarity {
            Similarity::Cosine { eps } => pairwise_similarity(&objs[i].1, &objs[j].1, eps),
            Similarity::Svcca { energy_fraction } => svcca_similarity(&objs[i].1, &objs[j].1, energy_fraction),
        }
    };
    // Upper triangle in parallel, mirrored so sim(i, j) == sim(j, i) bit for bit.
    let upper = par::map_range(n, |i| ((i + 1)..n).map(|j| pair(i, j)).collect::<Result<Vec<f64>>>());
    let mut rows = vec![vec![0.0; n]; n];
    for (i, row) in upper.into_iter().enumerate() {
        for (off, s) in row?.into_iter().enumerate() {
            let j = i + 1 + off;
            rows[i][j] = s;
            rows[j][i] = s;
        }
    }
    Ok(scores_from_similarity_rows(rows, eps))
}

/// Paints `scores[i]` into the footprint of `detections[i]` on an
/// `out_h x out_w` grid (boxes given in an `img_w x img_h` frame). Pixels
/// covered by several boxes get the mean of their scores; uncovered pixels
/// are 0.
pub fn rasterize_scores(
    detections: &[Detection],
    scores: &[f64],
    kind: ChannelKind,
    out_h: usize,
    out_w: usize,
    img_w: usize,
    img_h: usize,
) -> Result<ChannelMap> {
    if detections.len() != scores.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} detections but {} scores",
            detections.len(),
            scores.len()
        )));
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument(format!(
            "channel map must be non-empty, got {out_h}x{out_w}"
        )));
    }
    let mut sum = vec![0.0; out_h * out_w];
    let mut count = vec![0u32; out_h * out_w];
    for (i, (det, &score)) in detections.iter().zip(scores).enumerate() {
        let r = project_box(det, i, img_w, img_h, out_w, out_h)?;
        for y in r.y0..r.y1 {
            for x in r.x0..r.x1 {
                sum[y * out_w + x] += score;
                count[y * out_w + x] += 1;
            }
        }
    }
    let data = sum
        .iter()
        .zip(&count)
        .map(|(&s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
        .collect();
    Ok(ChannelMap {
        kind,
        grid: Grid::new(out_h, out_w, data)?,
    })
}

/// Box area over frame area.
pub fn normalized_size(det: &Detection, img_w: usize, img_h: usize) -> Result<f64> {
    det.validate(img_w, img_h)
        .map_err(|reason| Error::InvalidDetection { index: 0, reason })?;
    Ok(det.box_width() * det.box_height() / (img_w as f64 * img_h as f64))
}

pub fn size_channel(
    detections: &[Detection],
    out_h: usize,
    out_w: usize,
    img_w: usize,
    img_h: usize,
) -> Result<ChannelMap> {
    let sizes = detections
        .iter()
        .enumerate()
        .map(|(i, d)| {
            normalized_size(d, img_w, img_h).map_err(|e| match e {
                Error::InvalidDetection { reason, .. } => Error::InvalidDetection { index: i, reason },
                other => other,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    rasterize_scores(detections, &sizes, ChannelKind::Size, out_h, out_w, img_w, img_h)
}

pub fn appearance_channel(
    set: &ObjectSet,
    similarity: &Similarity,
    out_h: usize,
    out_w: usize,
    img_w: usize,
    img_h: usize,
) -> Result<ChannelMap> {
    let scores = dissimilarity_scores_with(set, similarity)?;
    rasterize_scores(
        &set.detections(),
        &scores,
        ChannelKind::Appearance,
        out_h,
        out_w,
        img_w,
        img_h,
    )
}

/// Raw object features placed at their boxes on an `out_h x out_w` grid,
/// averaged per channel where boxes overlap, zero elsewhere.
pub fn object_block(
    object_features: &FeatureMap,
    detections: &[Detection],
    out_h: usize,
    out_w: usize,
    img_w: usize,
    img_h: usize,
) -> Result<FeatureMap> {
    let d = object_features.channels();
    let mut sum = vec![0.0; out_h * out_w * d];
    let mut count = vec![0u32; out_h * out_w];
    for (i, det) in detections.iter().enumerate() {
        let src = project_box(det, i, img_w, img_h, object_features.width(), object_features.height())?;
        let dst = project_box(det, i, img_w, img_h, out_w, out_h)?;
        let placed = bilinear_resize(&crop(object_features, &src)?, dst.height(), dst.width())?;
        for y in dst.y0..dst.y1 {
            for x in dst.x0..dst.x1 {
                let p = y * out_w + x;
                count[p] += 1;
                let vals = placed.pixel(y - dst.y0, x - dst.x0);
                for (acc, v) in sum[p * d..(p + 1) * d].iter_mut().zip(vals) {
                    *acc += v;
                }
            }
        }
    }
    for (p, &c) in count.iter().enumerate() {
        if c > 1 {
            sum[p * d..(p + 1) * d].iter_mut().for_each(|v| *v /= c as f64);
        }
    }
    FeatureMap::new(out_h, out_w, d, sum)
}

/// Which extra channel groups are concatenated to the global features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct FusionFlags {
    /// Raw object features block (`O`).
    pub object: bool,
    /// Size dissimilarity (`S`).
    pub size: bool,
    /// Appearance dissimilarity (`A`).
    pub appearance: bool,
}

impl FusionFlags {
    pub const NONE: FusionFlags = FusionFlags {
        object: false,
        size: false,
        appearance: false,
    };
    pub const SIZE_APPEARANCE: FusionFlags = FusionFlags {
        object: false,
        size: true,
        appearance: true,
    };

    /// Parses a combination of the letters `O`, `S`, `A`; `none` or `-` for
    /// the baseline.
    pub fn parse(s: &str) -> Result<Self> {
        let mut f = FusionFlags::NONE;
        let t = s.trim();
        if t.eq_ignore_ascii_case("none") || t == "-" || t.is_empty() {
            return Ok(f);
        }
        for c in t.chars().filter(|c| *c != '+') {
            match c.to_ascii_uppercase() {
                'O' => f.object = true,
                'S' => f.size = true,
                'A' => f.appearance = true,
                other => {
                    return Err(Error::InvalidArgument(format!(
                        "unknown channel flag {other:?} in {s:?} (expected O, S, A)"
                    )))
                }
            }
        }
        Ok(f)
    }

    /// `O+S+A` style label, `baseline` when empty.
    pub fn label(&self) -> String {
        let parts: Vec<&str> = [(self.object, "O"), (self.size, "S"), (self.appearance, "A")]
            .iter()
            .filter_map(|&(on, name)| on.then_some(name))
            .collect();
        if parts.is_empty() {
            "baseline".to_string()
        } else {
            parts.join("+")
        }
    }

    pub fn is_empty(&self) -> bool {
        !(self.object || self.size || self.appearance)
    }

    /// All eight subsets of `{O, S, A}`, empty set first.
    pub fn all_subsets() -> Vec<FusionFlags> {
        (0..8u8)
            .map(|m| FusionFlags {
                object: m & 4 != 0,
                size: m & 2 != 0,
                appearance: m & 1 != 0,
            })
            .collect()
    }

    /// Channels added on top of the global ones.
    pub fn extra_channels(&self, object_channels: usize) -> usize {
        usize::from(self.size) + usize::from(self.appearance) + if self.object { object_channels } else { 0 }
    }
}

/// The per-image object channels that may be fused with global features.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectChannels {
    pub appearance: ChannelMap,
    pub size: ChannelMap,
    pub objects: Option<FeatureMap>,
}

impl ObjectChannels {
    /// All-zero channels, as produced when nothing is detected.
    pub fn zeros(height: usize, width: usize, object_channels: Option<usize>) -> Self {
        ObjectChannels {
            appearance: ChannelMap::zeros(ChannelKind::Appearance, height, width),
            size: ChannelMap::zeros(ChannelKind::Size, height, width),
            objects: object_channels.map(|d| FeatureMap::zeros(height, width, d)),
        }
    }

    /// Computes every channel for one image. Detections are in a
    /// `frame_w x frame_h` frame; outputs match the global map's grid.
    pub fn compute(
        global: &FeatureMap,
        object_features: &FeatureMap,
        detections: &[Detection],
        frame_w: usize,
        frame_h: usize,
        similarity: &Similarity,
    ) -> Result<Self> {
        let (h, w) = (global.height(), global.width());
        let set = ObjectSet::extract(object_features, detections, frame_w, frame_h)?;
        Ok(ObjectChannels {
            appearance: appearance_channel(&set, similarity, h, w, frame_w, frame_h)?,
            size: size_channel(detections, h, w, frame_w, frame_h)?,
            objects: Some(object_block(object_features, detections, h, w, frame_w, frame_h)?),
        })
    }
}

/// Concatenates the global features with the selected channel groups in the
/// order global, O, S, A.
pub fn build_fused_features(global: &FeatureMap, channels: &ObjectChannels, flags: FusionFlags) -> Result<FeatureMap> {
    let (h, w) = (global.height(), global.width());
    let check = |name: &str, gh: usize, gw: usize| -> Result<()> {
        if (gh, gw) != (h, w) {
            return Err(Error::ShapeMismatch(format!(
                "{name} channel is {gh}x{gw}, global features are {h}x{w}"
            )));
        }
        Ok(())
    };
    let object = if flags.object {
        let o = channels
            .objects
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("object block requested but not computed".into()))?;
        check("object", o.height(), o.width())?;
        Some(o)
    } else {
        None
    };
    if flags.size {
        check("size", channels.size.grid.height(), channels.size.grid.width())?;
    }
    if flags.appearance {
        check(
            "appearance",
            channels.appearance.grid.height(),
            channels.appearance.grid.width(),
        )?;
    }
    if flags.is_empty() {
        return Ok(global.clone());
    }
    let out_c = global.channels() + flags.extra_channels(object.map_or(0, |o| o.channels()));
    let mut data = Vec::with_capacity(h * w * out_c);
    for y in 0..h {
        for x in 0..w {
            data.extend_from_slice(global.pixel(y, x));
            if let Some(o) = object {
                data.extend_from_slice(o.pixel(y, x));
            }
            if flags.size {
                data.push(channels.size.grid.get(y, x));
            }
            if flags.appearance {
                data.push(channels.appearance.grid.get(y, x));
            }
        }
    }
    FeatureMap::new(h, w, out_c, data)
}
