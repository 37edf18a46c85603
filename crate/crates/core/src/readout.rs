//! Trainable saliency readout.
//!
//! A stack of per-pixel (1x1) channel-mixing layers with rectifiers between
//! them maps fused features to one logit per pixel. An optional Gaussian
//! center-bias prior is added in log space, the logits are smoothed with a
//! Gaussian blur and a spatial softmax turns them into a saliency map.
//!
//! Training minimises either the KLD loss or the EML composite
//! (`NSS' + CC' + KLD`) with hand-written gradients and Adam.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::par;
use crate::tensor::{gaussian_blur, softmax_2d, FeatureMap, FixationMap, Grid, SaliencyMap};
use crate::{Error, Result};

pub const DEFAULT_KLD_EPS: f64 = 1e-7;
pub const DEFAULT_HIDDEN_WIDTHS: [usize; 4] = [16, 8, 4, 1];
/// Initial bias of hidden units; keeps narrow layers from starting dead.
pub const INIT_HIDDEN_BIAS: f64 = 0.1;

/// One 1x1 convolution: `out = W x + b` with `W` stored `outputs x inputs`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn new(inputs: usize, outputs: usize, weight: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if inputs == 0 || outputs == 0 {
            return Err(Error::InvalidArgument(format!(
                "layer dimensions must be positive, got {inputs} -> {outputs}"
            )));
        }
        if weight.len() != inputs * outputs || bias.len() != outputs {
            return Err(Error::ShapeMismatch(format!(
                "{inputs} -> {outputs} layer needs {} weights and {outputs} biases, got {} and {}",
                inputs * outputs,
                weight.len(),
                bias.len()
            )));
        }
        if weight.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("layer parameter".into()));
        }
        Ok(Layer {
            inputs,
            outputs,
            weight,
            bias,
        })
    }

    fn apply(&self, input: &[f64], out: &mut [f64]) {
        for (o, row) in out.iter_mut().zip(self.weight.chunks_exact(self.inputs)) {
            *o = 0.0;
            for (w, x) in row.iter().zip(input) {
                *o += w * x;
            }
        }
        for (o, b) in out.iter_mut().zip(&self.bias) {
            *o += b;
        }
    }
}

/// Axis-aligned Gaussian prior over pixel positions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CenterBias {
    pub mu_x: f64,
    pub mu_y: f64,
    pub sigma_x: f64,
    pub sigma_y: f64,
    pub weight: f64,
}

impl CenterBias {
    pub fn validate(&self) -> Result<()> {
        let vals = [self.mu_x, self.mu_y, self.sigma_x, self.sigma_y, self.weight];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("center-bias parameter".into()));
        }
        if !(self.sigma_x > 0.0 && self.sigma_y > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "center-bias sigmas must be positive, got {} and {}",
                self.sigma_x, self.sigma_y
            )));
        }
        Ok(())
    }

    /// `weight * log N(x, y)` up to an additive constant, which the softmax
    /// discards.
    pub fn log_prior(&self, height: usize, width: usize) -> Grid {
        Grid::from_fn(height, width, |y, x| {
            let dx = (x as f64 - self.mu_x) / self.sigma_x;
            let dy = (y as f64 - self.mu_y) / self.sigma_y;
            -0.5 * self.weight * (dx * dx + dy * dy)
        })
    }
}

/// Fits a center-bias prior to pooled fixations: the mean is the centroid of
/// all fixated pixels, the sigmas their per-axis standard deviations floored
/// at one pixel.
pub fn fit_center_bias(maps: &[FixationMap]) -> Result<CenterBias> {
    let (mut n, mut sx, mut sy) = (0usize, 0.0, 0.0);
    for m in maps {
        for i in m.indices() {
            n += 1;
            sx += (i % m.width()) as f64;
            sy += (i / m.width()) as f64;
        }
    }
    if n == 0 {
        return Err(Error::NoFixations("cannot fit a center bias without fixations".into()));
    }
    let (mx, my) = (sx / n as f64, sy / n as f64);
    let (mut vx, mut vy) = (0.0, 0.0);
    for m in maps {
        for i in m.indices() {
            let dx = (i % m.width()) as f64 - mx;
            let dy = (i / m.width()) as f64 - my;
            vx += dx * dx;
            vy += dy * dy;
        }
    }
    Ok(CenterBias {
        mu_x: mx,
        mu_y: my,
        sigma_x: (vx / n as f64).sqrt().max(1.0),
        sigma_y: (vy / n as f64).sqrt().max(1.0),
        weight: 1.0,
    })
}

/// The readout decoder and its post-processing parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ReadoutModel {
    layers: Vec<Layer>,
    pub center_bias: Option<CenterBias>,
    pub smooth_sigma: f64,
}

impl ReadoutModel {
    /// Layers of the given widths on top of `input_channels`, He-uniform
    /// weights, hidden biases of [`INIT_HIDDEN_BIAS`] and a zero output bias.
    /// The last width must be 1.
    pub fn new(input_channels: usize, widths: &[usize], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(widths.len());
        let mut inputs = input_channels;
        for &outputs in widths {
            if inputs == 0 || outputs == 0 {
                return Err(Error::InvalidArgument(format!(
                    "layer widths must be positive, got {input_channels} -> {widths:?}"
                )));
            }
            let bound = (6.0 / inputs as f64).sqrt();
            let weight = (0..inputs * outputs).map(|_| rng.random_range(-bound..bound)).collect();
            let b = if layers.len() + 1 < widths.len() {
                INIT_HIDDEN_BIAS
            } else {
                0.0
            };
            layers.push(Layer::new(inputs, outputs, weight, vec![b; outputs])?);
            inputs = outputs;
        }
        Self::from_layers(layers, None, 0.0)
    }

    pub fn from_layers(layers: Vec<Layer>, center_bias: Option<CenterBias>, smooth_sigma: f64) -> Result<Self> {
        let Some(last) = layers.last() else {
            return Err(Error::InvalidArgument("readout needs at least one layer".into()));
        };
        if last.outputs != 1 {
            return Err(Error::InvalidArgument(format!(
                "last readout layer must have one output, got {}",
                last.outputs
            )));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].outputs != pair[1].inputs {
                return Err(Error::ShapeMismatch(format!(
                    "layer {i} outputs {} channels but layer {} takes {}",
                    pair[0].outputs,
                    i + 1,
                    pair[1].inputs
                )));
            }
        }
        if let Some(cb) = &center_bias {
            cb.validate()?;
        }
        if !(smooth_sigma >= 0.0 && smooth_sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "smoothing sigma must be finite and nonnegative, got {smooth_sigma}"
            )));
        }
        Ok(ReadoutModel {
            layers,
            center_bias,
            smooth_sigma,
        })
    }

    pub fn with_center_bias(mut self, cb: Option<CenterBias>) -> Result<Self> {
        if let Some(c) = &cb {
            c.validate()?;
        }
        self.center_bias = cb;
        Ok(self)
    }

    pub fn with_smoothing(mut self, sigma: f64) -> Result<Self> {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "smoothing sigma must be finite and nonnegative, got {sigma}"
            )));
        }
        self.smooth_sigma = sigma;
        Ok(self)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_channels(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Flattened parameters: each layer's weights then its biases.
    pub fn parameters(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.parameter_count());
        for l in &self.layers {
            out.extend_from_slice(&l.weight);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_parameters(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.parameter_count() {
            return Err(Error::ShapeMismatch(format!(
                "model has {} parameters, got {}",
                self.parameter_count(),
                params.len()
            )));
        }
        let mut it = params.iter().copied();
        for l in &mut self.layers {
            l.weight.iter_mut().for_each(|w| *w = it.next().unwrap());
            l.bias.iter_mut().for_each(|b| *b = it.next().unwrap());
        }
        Ok(())
    }
}

/// Result of a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    /// Raw output of the last layer, before prior and smoothing.
    pub logits: Grid,
    pub prediction: SaliencyMap,
}

struct Trace {
    /// `activations[l]` is the input of layer `l`, pixel-major.
    activations: Vec<Vec<f64>>,
    /// Pre-activations of every layer except the last.
    pre: Vec<Vec<f64>>,
    logits: Grid,
    prediction: SaliencyMap,
}

fn run(model: &ReadoutModel, fused: &FeatureMap, keep: bool) -> Result<Trace> {
    if fused.channels() != model.input_channels() {
        return Err(Error::ShapeMismatch(format!(
            "readout expects {} input channels, features have {}",
            model.input_channels(),
            fused.channels()
        )));
    }
    let (h, w) = (fused.height(), fused.width());
    let npix = h * w;
    let mut activations = Vec::new();
    let mut pre = Vec::new();
    let mut input: Vec<f64> = fused.data().to_vec();
    let last = model.layers.len() - 1;
    for (li, layer) in model.layers.iter().enumerate() {
        let mut out = vec![0.0; npix * layer.outputs];
        for (x, o) in input
            .chunks_exact(layer.inputs)
            .zip(out.chunks_exact_mut(layer.outputs))
        {
            layer.apply(x, o);
        }
        if li < last {
            let act: Vec<f64> = out.iter().map(|v| v.max(0.0)).collect();
            if keep {
                pre.push(out);
                activations.push(std::mem::replace(&mut input, act));
            } else {
                input = act;
            }
        } else {
            if keep {
                activations.push(std::mem::take(&mut input));
            }
            input = out;
        }
    }
    let logits = Grid::new(h, w, input)?;
    let mut z = logits.clone();
    if let Some(cb) = &model.center_bias {
        let prior = cb.log_prior(h, w);
        z.data_mut().iter_mut().zip(prior.data()).for_each(|(a, b)| *a += b);
    }
    let z = gaussian_blur(&z, model.smooth_sigma)?;
    let prediction = softmax_2d(&z)?;
    Ok(Trace {
        activations,
        pre,
        logits,
        prediction,
    })
}

/// Runs the readout on fused features.
pub fn forward(model: &ReadoutModel, fused: &FeatureMap) -> Result<Forward> {
    let t = run(model, fused, false)?;
    Ok(Forward {
        logits: t.logits,
        prediction: t.prediction,
    })
}

fn check_same(a: &Grid, b: &Grid, what: &str) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::ShapeMismatch(format!(
            "{what}: {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

/// `sum_i Q_i log(eps + Q_i / (eps + P_i))`.
pub fn kld_loss(p: &Grid, q: &Grid, eps: f64) -> Result<f64> {
    check_same(p, q, "KLD")?;
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    Ok(p.data()
        .iter()
        .zip(q.data())
        .map(|(&pi, &qi)| qi * (eps + qi / (eps + pi)).ln())
        .sum())
}

fn kld_grad(p: &Grid, q: &Grid, eps: f64) -> Vec<f64> {
    p.data()
        .iter()
        .zip(q.data())
        .map(|(&pi, &qi)| {
            let d = eps + pi;
            -qi * qi / ((eps + qi / d) * d * d)
        })
        .collect()
}

pub(crate) struct Moments {
    pub(crate) mean: f64,
    pub(crate) std: f64,
}

fn moments(v: &[f64]) -> Moments {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    // rounding in the mean must not make a constant map look variable
    if v.iter().all(|x| *x == v[0]) {
        return Moments { mean, std: 0.0 };
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    Moments { mean, std: var.sqrt() }
}

pub(crate) fn nonconstant(v: &[f64], what: &str) -> Result<Moments> {
    let m = moments(v);
    if !(m.std > 0.0) {
        return Err(Error::DegenerateMap(format!("{what} has zero variance")));
    }
    Ok(m)
}

/// Pearson correlation with population moments.
pub(crate) fn correlation(p: &Grid, q: &Grid) -> Result<f64> {
    check_same(p, q, "correlation")?;
    let mp = nonconstant(p.data(), "first map")?;
    let mq = nonconstant(q.data(), "second map")?;
    let cov = p
        .data()
        .iter()
        .zip(q.data())
        .map(|(a, b)| (a - mp.mean) * (b - mq.mean))
        .sum::<f64>()
        / p.len() as f64;
    Ok((cov / (mp.std * mq.std)).clamp(-1.0, 1.0))
}

/// `1 - cov(P, Q) / (std(P) std(Q))`, in `[0, 2]`.
pub fn cc_prime(p: &Grid, q: &Grid) -> Result<f64> {
    Ok(1.0 - correlation(p, q)?)
}

fn cc_prime_grad(p: &Grid, q: &Grid) -> Result<Vec<f64>> {
    let mp = nonconstant(p.data(), "prediction")?;
    let mq = nonconstant(q.data(), "ground truth")?;
    let n = p.len() as f64;
    let cc = correlation(p, q)?;
    Ok(p.data()
        .iter()
        .zip(q.data())
        .map(|(&pi, &qi)| -((qi - mq.mean) / (mp.std * mq.std) - cc * (pi - mp.mean) / (mp.std * mp.std)) / n)
        .collect())
}

fn fixation_stats(p: &Grid, f: &FixationMap) -> Result<(f64, Moments, Moments)> {
    if !f.same_shape_as(p) {
        return Err(Error::ShapeMismatch(format!(
            "fixations {}x{} vs map {}x{}",
            f.height(),
            f.width(),
            p.height(),
            p.width()
        )));
    }
    let count = f.count();
    if count == 0 {
        return Err(Error::NoFixations("fixation map is empty".into()));
    }
    let mp = nonconstant(p.data(), "saliency map")?;
    let mf = nonconstant(f.to_grid().data(), "fixation map")?;
    Ok((count as f64, mp, mf))
}

/// `(1/N) sum_i (Rbar_i - Pbar_i) F_i` with `Pbar`, `Rbar` the standardised
/// prediction and fixation maps.
pub fn nss_prime(p: &Grid, f: &FixationMap) -> Result<f64> {
    let (n_fix, mp, mf) = fixation_stats(p, f)?;
    let mut acc = 0.0;
    for i in f.indices() {
        let r = (1.0 - mf.mean) / mf.std;
        let pb = (p.data()[i] - mp.mean) / mp.std;
        acc += r - pb;
    }
    Ok(acc / n_fix)
}

fn nss_prime_grad(p: &Grid, f: &FixationMap) -> Result<Vec<f64>> {
    let (n_fix, mp, _) = fixation_stats(p, f)?;
    let n = p.len() as f64;
    let s: f64 = f.indices().iter().map(|&i| p.data()[i] - mp.mean).sum();
    let sd = mp.std;
    Ok(p.data()
        .iter()
        .zip(f.data())
        .map(|(&pj, &fj)| {
            let fj = if fj { 1.0 } else { 0.0 };
            -((fj - n_fix / n) / sd - s * (pj - mp.mean) / (n * sd * sd * sd)) / n_fix
        })
        .collect())
}

/// `NSS' + CC' + KLD`.
pub fn eml_loss(p: &Grid, q: &Grid, f: &FixationMap, eps: f64) -> Result<f64> {
    Ok(nss_prime(p, f)? + cc_prime(p, q)? + kld_loss(p, q, eps)?)
}

/// Training objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossKind {
    #[default]
    Kld,
    Eml,
}

impl LossKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "kld" => Ok(LossKind::Kld),
            "eml" => Ok(LossKind::Eml),
            other => Err(Error::InvalidArgument(format!(
                "unknown loss {other:?} (expected kld or eml)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LossKind::Kld => "kld",
            LossKind::Eml => "eml",
        }
    }
}

pub fn loss_value(kind: LossKind, p: &Grid, q: &Grid, f: &FixationMap, eps: f64) -> Result<f64> {
    match kind {
        LossKind::Kld => kld_loss(p, q, eps),
        LossKind::Eml => eml_loss(p, q, f, eps),
    }
}

fn loss_and_grad(kind: LossKind, p: &Grid, q: &Grid, f: &FixationMap, eps: f64) -> Result<(f64, Vec<f64>)> {
    let loss = loss_value(kind, p, q, f, eps)?;
    let mut g = kld_grad(p, q, eps);
    if kind == LossKind::Eml {
        for (a, b) in g.iter_mut().zip(cc_prime_grad(p, q)?) {
            *a += b;
        }
        for (a, b) in g.iter_mut().zip(nss_prime_grad(p, f)?) {
            *a += b;
        }
    }
    Ok((loss, g))
}

/// Parameter gradients laid out like [`ReadoutModel::parameters`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Gradients {
    pub fn zeros_like(model: &ReadoutModel) -> Self {
        Gradients {
            layers: model
                .layers
                .iter()
                .map(|l| (vec![0.0; l.weight.len()], vec![0.0; l.bias.len()]))
                .collect(),
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|(w, b)| w.iter().chain(b.iter()).copied())
            .collect()
    }

    fn add_assign(&mut self, other: &Gradients) {
        for ((w, b), (ow, ob)) in self.layers.iter_mut().zip(&other.layers) {
            w.iter_mut().zip(ow).for_each(|(a, c)| *a += c);
            b.iter_mut().zip(ob).for_each(|(a, c)| *a += c);
        }
    }

    fn scale(&mut self, s: f64) {
        for (w, b) in &mut self.layers {
            w.iter_mut().chain(b.iter_mut()).for_each(|v| *v *= s);
        }
    }

    pub fn norm(&self) -> f64 {
        self.flatten().iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Loss and its exact gradient with respect to every weight and bias.
pub fn backward(
    model: &ReadoutModel,
    fused: &FeatureMap,
    target: &SaliencyMap,
    fixations: &FixationMap,
    kind: LossKind,
    eps: f64,
) -> Result<(f64, Gradients)> {
    let t = run(model, fused, true)?;
    let p = &t.prediction;
    let (loss, g_p) = loss_and_grad(kind, p, target, fixations, eps)?;

    // softmax: dz_i = P_i (g_i - sum_j P_j g_j)
    let mean_g: f64 = p.data().iter().zip(&g_p).map(|(a, b)| a * b).sum();
    let g_z: Vec<f64> = p.data().iter().zip(&g_p).map(|(pi, gi)| pi * (gi - mean_g)).collect();
    // the blur operator is symmetric, so its adjoint is itself
    let g_l = gaussian_blur(&Grid::new(p.height(), p.width(), g_z)?, model.smooth_sigma)?;

    let mut grads = Gradients::zeros_like(model);
    let mut delta = g_l.into_data();
    for li in (0..model.layers.len()).rev() {
        let layer = &model.layers[li];
        let input = &t.activations[li];
        let (gw, gb) = &mut grads.layers[li];
        for (d, x) in delta.chunks_exact(layer.outputs).zip(input.chunks_exact(layer.inputs)) {
            for (o, &dv) in d.iter().enumerate() {
                if dv == 0.0 {
                    continue;
                }
                gb[o] += dv;
                for (g, xv) in gw[o * layer.inputs..(o + 1) * layer.inputs].iter_mut().zip(x) {
                    *g += dv * xv;
                }
            }
        }
        if li == 0 {
            break;
        }
        let pre = &t.pre[li - 1];
        let mut prev = vec![0.0; pre.len()];
        for ((d, pd), z) in delta
            .chunks_exact(layer.outputs)
            .zip(prev.chunks_exact_mut(layer.inputs))
            .zip(pre.chunks_exact(layer.inputs))
        {
            for (o, &dv) in d.iter().enumerate() {
                if dv == 0.0 {
                    continue;
                }
                let row = &layer.weight[o * layer.inputs..(o + 1) * layer.inputs];
                for (acc, w) in pd.iter_mut().zip(row) {
                    *acc += dv * w;
                }
            }
            // rectifier, subgradient 0 at 0
            for (acc, &zv) in pd.iter_mut().zip(z) {
                if zv <= 0.0 {
                    *acc = 0.0;
                }
            }
        }
        delta = prev;
    }
    Ok((loss, grads))
}

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_relative_error: f64,
    pub worst_parameter: usize,
    pub parameters: usize,
}

/// Denominator floor used by [`gradient_check`] for parameters whose
/// gradient is essentially zero.
pub const GRADCHECK_FLOOR: f64 = 1e-6;

/// Compares [`backward`] with central finite differences of step `h` on every
/// parameter. Relative error is `|a - n| / max(|a|, |n|, GRADCHECK_FLOOR)`.
pub fn gradient_check(
    model: &ReadoutModel,
    fused: &FeatureMap,
    target: &SaliencyMap,
    fixations: &FixationMap,
    kind: LossKind,
    eps: f64,
    h: f64,
) -> Result<GradCheck> {
    let (_, grads) = backward(model, fused, target, fixations, kind, eps)?;
    let analytic = grads.flatten();
    let base = model.parameters();
    let numeric = par::map_range(base.len(), |i| -> Result<f64> {
        let mut m = model.clone();
        let mut params = base.clone();
        params[i] = base[i] + h;
        m.set_parameters(&params)?;
        let plus = loss_value(kind, &forward(&m, fused)?.prediction, target, fixations, eps)?;
        params[i] = base[i] - h;
        m.set_parameters(&params)?;
        let minus = loss_value(kind, &forward(&m, fused)?.prediction, target, fixations, eps)?;
        Ok((plus - minus) / (2.0 * h))
    });
    let mut worst = (0.0, 0);
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        let n = n?;
        let err = (a - n).abs() / a.abs().max(n.abs()).max(GRADCHECK_FLOOR);
        if err > worst.0 {
            worst = (err, i);
        }
    }
    Ok(GradCheck {
        max_relative_error: worst.0,
        worst_parameter: worst.1,
        parameters: analytic.len(),
    })
}

/// Smallest `|pre-activation|` over all hidden units and pixels. Finite
/// differences are only meaningful when this is comfortably above the step.
pub fn rectifier_margin(model: &ReadoutModel, fused: &FeatureMap) -> Result<f64> {
    let t = run(model, fused, true)?;
    Ok(t.pre.iter().flatten().fold(f64::INFINITY, |m, v| m.min(v.abs())))
}

/// Sign of every hidden pre-activation (`true` when positive), layer by
/// layer, pixel-major.
pub fn rectifier_pattern(model: &ReadoutModel, fused: &FeatureMap) -> Result<Vec<bool>> {
    let t = run(model, fused, true)?;
    Ok(t.pre.iter().flatten().map(|v| *v > 0.0).collect())
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(parameters: usize, learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; parameters],
            v: vec![0.0; parameters],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let mh = *m / c1;
            let vh = *v / c2;
            *p -= self.learning_rate * mh / (vh.sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub loss: LossKind,
    pub seed: u64,
    pub kld_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 2,
            epochs: 10,
            loss: LossKind::Kld,
            seed: 0,
            kld_eps: DEFAULT_KLD_EPS,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be finite and nonnegative, got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "epochs and batch size must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// One training example: fused features, ground-truth distribution and
/// fixations.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: FeatureMap,
    pub target: SaliencyMap,
    pub fixations: FixationMap,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ReadoutModel,
    /// Mean training loss before the first update.
    pub initial_loss: f64,
    /// Mean training loss of each epoch, measured during the pass.
    pub epoch_losses: Vec<f64>,
    /// Validation KLD after each epoch, when a validation set was given.
    pub validation_losses: Vec<f64>,
    pub best_epoch: Option<usize>,
}

/// Mean loss over a dataset.
pub fn mean_loss(model: &ReadoutModel, data: &[Sample], kind: LossKind, eps: f64) -> Result<f64> {
    let losses = par::try_map_slice(data, |s| {
        let p = forward(model, &s.features)?.prediction;
        loss_value(kind, &p, &s.target, &s.fixations, eps)
    })?;
    Ok(losses.iter().sum::<f64>() / data.len().max(1) as f64)
}

/// Minibatch Adam training. The shuffle order comes from `config.seed` and
/// per-batch gradients are summed in index order, so results are
/// reproducible bit for bit. With a validation set, the parameters of the
/// epoch with the lowest validation KLD are returned.
pub fn train(
    model: &ReadoutModel,
    data: &[Sample],
    validation: Option<&[Sample]>,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    if let Some(i) = data
        .iter()
        .chain(validation.unwrap_or(&[]))
        .position(|s| s.features.channels() != model.input_channels())
    {
        return Err(Error::ShapeMismatch(format!(
            "sample #{i} has {} channels, model takes {}",
            data.iter()
                .chain(validation.unwrap_or(&[]))
                .nth(i)
                .map_or(0, |s| s.features.channels()),
            model.input_channels()
        )));
    }

    let mut model = model.clone();
    let mut params = model.parameters();
    let mut adam = Adam::new(params.len(), config.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();

    let initial_loss = mean_loss(&model, data, config.loss, config.kld_eps)?;
    if !initial_loss.is_finite() {
        return Err(Error::Diverged {
            epoch: 0,
            loss: initial_loss,
        });
    }

    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut validation_losses = Vec::new();
    let mut best: Option<(f64, usize, Vec<f64>)> = None;

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let current = &model;
            let results = par::map_slice(batch, |&i| {
                let s = &data[i];
                backward(
                    current,
                    &s.features,
                    &s.target,
                    &s.fixations,
                    config.loss,
                    config.kld_eps,
                )
            });
            let mut sum = Gradients::zeros_like(&model);
            for r in results {
                let (loss, g) = r.map_err(|e| match e {
                    Error::NonFinite(_) => Error::Diverged { epoch, loss: f64::NAN },
                    other => other,
                })?;
                if !loss.is_finite() {
                    return Err(Error::Diverged { epoch, loss });
                }
                total += loss;
                sum.add_assign(&g);
            }
            sum.scale(1.0 / batch.len() as f64);
            adam.step(&mut params, &sum.flatten());
            if params.iter().any(|v| !v.is_finite()) {
                return Err(Error::Diverged { epoch, loss: f64::NAN });
            }
            model.set_parameters(&params)?;
        }
        epoch_losses.push(total / data.len() as f64);

        if let Some(val) = validation.filter(|v| !v.is_empty()) {
            let vl = mean_loss(&model, val, LossKind::Kld, config.kld_eps)?;
            if !vl.is_finite() {
                return Err(Error::Diverged { epoch, loss: vl });
            }
            validation_losses.push(vl);
            if best.as_ref().is_none_or(|(b, _, _)| vl < *b) {
                best = Some((vl, epoch, params.clone()));
            }
        }
    }

    let best_epoch = best.as_ref().map(|(_, e, _)| *e);
    if let Some((_, _, p)) = best {
        model.set_parameters(&p)?;
    }
    Ok(TrainOutcome {
        model,
        initial_loss,
        epoch_losses,
        validation_losses,
        best_epoch,
    })
}
