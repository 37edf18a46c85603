//! Dense tensors and the image-processing primitives shared by every other
//! module.
//!
//! Everything is stored as `f64`. Feature tensors are row-major with the
//! channel index varying fastest, so `data[(y * width + x) * channels + k]`.

use std::ops::Deref;

use crate::{Error, Result};

/// Rank-3 feature tensor (height x width x channels).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::InvalidArgument(format!(
                "feature map dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::ShapeMismatch(format!(
                "{height}x{width}x{channels} feature map needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("feature value #{i} is {}", data[i])));
        }
        Ok(FeatureMap {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        assert!(height > 0 && width > 0 && channels > 0);
        FeatureMap {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for k in 0..channels {
                    data.push(f(y, x, k));
                }
            }
        }
        Self::new(height, width, channels, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, k: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + k]
    }

    /// All channel values of one pixel.
    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let start = (y * self.width + x) * self.channels;
        &self.data[start..start + self.channels]
    }

    /// Channel `k` flattened over spatial positions in row-major order.
    pub fn channel(&self, k: usize) -> Vec<f64> {
        self.data.iter().skip(k).step_by(self.channels).copied().collect()
    }

    pub fn same_shape(&self, other: &FeatureMap) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    /// Single-channel tensor built from a rank-2 map.
    pub fn from_grid(grid: &Grid) -> Self {
        FeatureMap {
            height: grid.height,
            width: grid.width,
            channels: 1,
            data: grid.data.clone(),
        }
    }

    /// Channel `k` as a rank-2 map.
    pub fn channel_grid(&self, k: usize) -> Grid {
        Grid {
            height: self.height,
            width: self.width,
            data: self.channel(k),
        }
    }
}

/// Rank-2 real-valued map (logits, blurred maps, raw ground truth).
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Grid {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument(format!(
                "map dimensions must be positive, got {height}x{width}"
            )));
        }
        if data.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "{height}x{width} map needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Grid { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        assert!(height > 0 && width > 0);
        Grid {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(height > 0 && width > 0);
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Grid { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn same_shape(&self, other: &Grid) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Index of the largest value; first occurrence wins.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = i;
            }
        }
        best
    }
}

/// Nonnegative map summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap(Grid);

/// Tolerance on the total mass of a [`SaliencyMap`].
pub const MASS_TOLERANCE: f64 = 1e-9;

impl SaliencyMap {
    /// Wraps a map that is already a distribution.
    pub fn from_distribution(grid: Grid) -> Result<Self> {
        if let Some(i) = grid.data.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "saliency value #{i} is {}, expected a finite nonnegative number",
                grid.data[i]
            )));
        }
        let total = grid.sum();
        if (total - 1.0).abs() > MASS_TOLERANCE {
            return Err(Error::InvalidArgument(format!(
                "saliency map sums to {total}, expected 1"
            )));
        }
        Ok(SaliencyMap(grid))
    }

    pub fn uniform(height: usize, width: usize) -> Self {
        let v = 1.0 / (height * width) as f64;
        SaliencyMap(Grid::from_fn(height, width, |_, _| v))
    }

    pub fn as_grid(&self) -> &Grid {
        &self.0
    }

    pub fn into_grid(self) -> Grid {
        self.0
    }
}

impl Deref for SaliencyMap {
    type Target = Grid;

    fn deref(&self) -> &Grid {
        &self.0
    }
}

/// Binary map of fixated pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FixationMap {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl FixationMap {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument(format!(
                "fixation map dimensions must be positive, got {height}x{width}"
            )));
        }
        if data.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "{height}x{width} fixation map needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(FixationMap { height, width, data })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        assert!(height > 0 && width > 0);
        FixationMap {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    /// Map with the given `(row, col)` pixels fixated.
    pub fn from_points(height: usize, width: usize, points: &[(usize, usize)]) -> Result<Self> {
        let mut map = Self::new(height, width, vec![false; height * width])?;
        for &(y, x) in points {
            if y >= height || x >= width {
                return Err(Error::InvalidArgument(format!(
                    "fixation ({y}, {x}) outside {height}x{width} map"
                )));
            }
            map.data[y * width + x] = true;
        }
        Ok(map)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Flat indices of fixated pixels, ascending.
    pub fn indices(&self) -> Vec<usize> {
        self.data
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect()
    }

    pub fn same_shape_as(&self, grid: &Grid) -> bool {
        self.height == grid.height() && self.width == grid.width()
    }

    /// Fixations as a 0/1 real-valued map.
    pub fn to_grid(&self) -> Grid {
        Grid {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        }
    }
}

/// Axis-aligned detection box in frame pixel coordinates. The box covers
/// `[x_min, x_max) x [y_min, y_max)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
    pub confidence: f64,
    pub class_id: Option<u32>,
}

impl Detection {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64, confidence: f64) -> Self {
        Detection {
            x_min,
            y_min,
            x_max,
            y_max,
            confidence,
            class_id: None,
        }
    }

    pub fn with_class(mut self, class_id: u32) -> Self {
        self.class_id = Some(class_id);
        self
    }

    pub fn box_width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn box_height(&self) -> f64 {
        self.y_max - self.y_min
    }

    /// Checks the box against a `frame_w x frame_h` frame.
    pub fn validate(&self, frame_w: usize, frame_h: usize) -> std::result::Result<(), String> {
        let coords = [self.x_min, self.y_min, self.x_max, self.y_max];
        if coords.iter().any(|v| !v.is_finite()) {
            return Err("non-finite coordinate".into());
        }
        if !(self.confidence.is_finite() && (0.0..=1.0).contains(&self.confidence)) {
            return Err(format!("confidence {} outside [0, 1]", self.confidence));
        }
        if !(0.0 <= self.x_min && self.x_min < self.x_max && self.x_max <= frame_w as f64) {
            return Err(format!(
                "x range [{}, {}) not inside frame width {frame_w}",
                self.x_min, self.x_max
            ));
        }
        if !(0.0 <= self.y_min && self.y_min < self.y_max && self.y_max <= frame_h as f64) {
            return Err(format!(
                "y range [{}, {}) not inside frame height {frame_h}",
                self.y_min, self.y_max
            ));
        }
        Ok(())
    }
}

/// Half-open pixel rectangle on a grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Region {
    pub y0: usize,
    pub y1: usize,
    pub x0: usize,
    pub x1: usize,
}

impl Region {
    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.y0..self.y1).contains(&y) && (self.x0..self.x1).contains(&x)
    }
}

fn project_axis(lo: f64, hi: f64, frame: usize, grid: usize) -> Option<(usize, usize)> {
    let start = (lo * grid as f64 / frame as f64).floor();
    let end = (hi * grid as f64 / frame as f64).ceil();
    if start >= grid as f64 || end <= 0.0 {
        return None;
    }
    let start = start.max(0.0) as usize;
    let end = (end.min(grid as f64) as usize).max(start + 1);
    Some((start, end))
}

/// Maps a box from a `frame_w x frame_h` frame onto a `grid_w x grid_h`
/// grid: minimum corners floored, maximum corners ceiled, clamped to the grid
/// and never smaller than one pixel. `index` only labels errors.
pub fn project_box(
    det: &Detection,
    index: usize,
    frame_w: usize,
    frame_h: usize,
    grid_w: usize,
    grid_h: usize,
) -> Result<Region> {
    if frame_w == 0 || frame_h == 0 {
        return Err(Error::InvalidArgument(format!(
            "frame dimensions must be positive, got {frame_w}x{frame_h}"
        )));
    }
    det.validate(frame_w, frame_h)
        .map_err(|reason| Error::InvalidDetection { index, reason })?;
    let outside = || Error::InvalidDetection {
        index,
        reason: format!("box is empty on the {grid_h}x{grid_w} grid"),
    };
    let (x0, x1) = project_axis(det.x_min, det.x_max, frame_w, grid_w).ok_or_else(outside)?;
    let (y0, y1) = project_axis(det.y_min, det.y_max, frame_h, grid_h).ok_or_else(outside)?;
    Ok(Region { y0, y1, x0, x1 })
}

/// Per-channel bilinear resize with corner-aligned sampling: source corner
/// pixels land exactly on destination corner pixels.
pub fn bilinear_resize(src: &FeatureMap, out_h: usize, out_w: usize) -> Result<FeatureMap> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument(format!(
            "resize target must be positive, got {out_h}x{out_w}"
        )));
    }
    if out_h == src.height && out_w == src.width {
        return Ok(src.clone());
    }
    let taps = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
        (0..out)
            .map(|i| {
                if out == 1 || inp == 1 {
                    return (0, 0, 0.0);
                }
                let pos = i as f64 * (inp - 1) as f64 / (out - 1) as f64;
                let lo = (pos.floor() as usize).min(inp - 1);
                let hi = (lo + 1).min(inp - 1);
                (lo, hi, pos - lo as f64)
            })
            .collect()
    };
    let ys = taps(out_h, src.height);
    let xs = taps(out_w, src.width);
    let c = src.channels;
    let mut data = Vec::with_capacity(out_h * out_w * c);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            for k in 0..c {
                let top = src.get(y0, x0, k) * (1.0 - fx) + src.get(y0, x1, k) * fx;
                let bottom = src.get(y1, x0, k) * (1.0 - fx) + src.get(y1, x1, k) * fx;
                data.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    FeatureMap::new(out_h, out_w, c, data)
}

/// Extracts the features under a detection given in a
/// `detector_w x detector_h` frame.
pub fn slice_features(
    global: &FeatureMap,
    det: &Detection,
    detector_w: usize,
    detector_h: usize,
) -> Result<FeatureMap> {
    slice_features_indexed(global, det, 0, detector_w, detector_h)
}

pub(crate) fn slice_features_indexed(
    global: &FeatureMap,
    det: &Detection,
    index: usize,
    detector_w: usize,
    detector_h: usize,
) -> Result<FeatureMap> {
    let r = project_box(det, index, detector_w, detector_h, global.width, global.height)?;
    crop(global, &r)
}

pub(crate) fn crop(global: &FeatureMap, r: &Region) -> Result<FeatureMap> {
    let c = global.channels;
    let mut data = Vec::with_capacity(r.height() * r.width() * c);
    for y in r.y0..r.y1 {
        let start = (y * global.width + r.x0) * c;
        data.extend_from_slice(&global.data[start..start + r.width() * c]);
    }
    FeatureMap::new(r.height(), r.width(), c, data)
}

/// Normalised sampled Gaussian with radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|t| (-(t * t) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|w| *w /= total);
    k
}

/// Half-sample symmetric reflection of an index into `0..n`.
#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period);
    if m >= n as isize {
        (period - 1 - m) as usize
    } else {
        m as usize
    }
}

fn convolve_line(src: &[f64], dst: &mut [f64], kernel: &[f64], stride: usize, n: usize) {
    let radius = (kernel.len() / 2) as isize;
    for j in 0..n {
        let mut acc = 0.0;
        for (t, w) in kernel.iter().enumerate() {
            let i = reflect(j as isize + t as isize - radius, n);
            acc += w * src[i * stride];
        }
        dst[j * stride] = acc;
    }
}

/// Separable Gaussian blur.
///
/// Taps falling outside the map fold back onto their mirror pixels, which
/// keeps both the row sums and the column sums of the blur operator at one:
/// constant maps are unchanged, total mass is conserved, and the operator is
/// its own adjoint.
pub fn gaussian_blur(map: &Grid, sigma: f64) -> Result<Grid> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "blur sigma must be a finite nonnegative number, got {sigma}"
        )));
    }
    if sigma == 0.0 {
        return Ok(map.clone());
    }
    let kernel = gaussian_kernel(sigma);
    let (h, w) = (map.height, map.width);
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        let row = y * w;
        convolve_line(&map.data[row..row + w], &mut tmp[row..row + w], &kernel, 1, w);
    }
    let mut out = vec![0.0; h * w];
    for x in 0..w {
        convolve_line(&tmp[x..], &mut out[x..], &kernel, w, h);
    }
    Grid::new(h, w, out)
}

/// Spatial softmax over all pixels.
pub fn softmax_2d(logits: &Grid) -> Result<SaliencyMap> {
    if let Some(i) = logits.data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("logit #{i} is {}", logits.data[i])));
    }
    let max = logits.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut data: Vec<f64> = logits.data.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = data.iter().sum();
    data.iter_mut().for_each(|v| *v /= total);
    Ok(SaliencyMap(Grid::new(logits.height, logits.width, data)?))
}

/// Divides a nonnegative map by its total.
pub fn normalize_to_distribution(map: &Grid) -> Result<SaliencyMap> {
    if let Some(i) = map.data.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "value #{i} is {}, expected a finite nonnegative number",
            map.data[i]
        )));
    }
    let total = map.sum();
    if total <= 0.0 {
        return Err(Error::DegenerateMap("map has zero total mass".into()));
    }
    let data = map.data.iter().map(|v| v / total).collect();
    Ok(SaliencyMap(Grid::new(map.height, map.width, data)?))
}
