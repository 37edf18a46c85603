// Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, SymmetricEigen};
use objsal::svcca::Matrix;
use objsal::tensor::{FeatureMap, FixationMap, Grid};
use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Probability that a positive outranks a negative, ties counting half.
pub fn pairwise_auc(pos: &[f64], neg: &[f64]) -> f64 {
    let mut wins = 0.0;
    for &p in pos {
        for &n in neg {
            if p > n {
                wins += 1.0;
            } else if p == n {
                wins += 0.5;
            }
        }
    }
    wins / (pos.len() * neg.len()) as f64
}

/// Judd AUC by pairwise comparison of fixated against non-fixated pixels.
pub fn auc_judd_oracle(p: &Grid, f: &FixationMap) -> f64 {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (v, &fix) in p.data().iter().zip(f.data()) {
        if fix {
            pos.push(*v);
        } else {
            neg.push(*v);
        }
    }
    pairwise_auc(&pos, &neg)
}

/// A random map of at most 16x16 with at most 10 fixations. Values are drawn
/// from a coarse lattice half of the time so ties are common.
pub fn random_instance(rng: &mut ChaCha8Rng) -> (Grid, FixationMap) {
    let h = rng.random_range(2..=16);
    let w = rng.random_range(2..=16);
    let coarse = rng.random_bool(0.5);
    let p = Grid::from_fn(h, w, |_, _| {
        if coarse {
            rng.random_range(0..6) as f64 / 5.0
        } else {
            rng.random::<f64>()
        }
    });
    let k = rng.random_range(1..=10.min(h * w - 1));
    let mut f = FixationMap::empty(h, w);
    for i in sample(rng, h * w, k) {
        f.set(i / w, i % w, true);
    }
    (p, f)
}

/// Fixations at `k` random distinct pixels, or every pixel if `k` is larger.
pub fn random_fixations(rng: &mut ChaCha8Rng, h: usize, w: usize, k: usize) -> FixationMap {
    let mut f = FixationMap::empty(h, w);
    for i in sample(rng, h * w, k.min(h * w)) {
        f.set(i / w, i % w, true);
    }
    f
}

/// Per-channel cosine summed over channels, written from scratch.
pub fn cosine_sum(a: &FeatureMap, b: &FeatureMap, eps: f64) -> f64 {
    let mut total = 0.0;
    for k in 0..a.channels() {
        let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
        for y in 0..a.height() {
            for x in 0..a.width() {
                let (u, v) = (a.get(y, x, k), b.get(y, x, k));
                dot += u * v;
                na += u * u;
                nb += v * v;
            }
        }
        total += dot / (na.sqrt() * nb.sqrt()).max(eps);
    }
    total
}

/// Reciprocal summed similarity to the others, then min-max over the image.
pub fn brute_dissimilarity(objects: &[FeatureMap], eps: f64) -> Vec<f64> {
    let n = objects.len();
    if n == 0 {
        return Vec::new();
    }
    let raw: Vec<f64> = (0..n)
        .map(|i| {
            let s: f64 = (0..n)
                .filter(|&j| j != i)
                .map(|j| cosine_sum(&objects[i], &objects[j], eps))
                .sum();
            1.0 / s.max(eps)
        })
        .collect();
    let lo = raw.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo <= 1e-12 * hi.abs().max(lo.abs()) {
        return vec![1.0; n];
    }
    raw.iter().map(|r| (r - lo) / (hi - lo)).collect()
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

pub fn to_na(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_fn(m.rows(), m.cols(), |i, j| m.get(i, j))
}

pub fn max_abs_diff(a: &Matrix, b: &Matrix) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Random orthogonal `n x n` matrix from the QR factor of a Gaussian-ish draw.
pub fn random_rotation(rng: &mut ChaCha8Rng, n: usize) -> Matrix {
    let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let q = a.qr().q();
    Matrix::from_fn(n, n, |i, j| q[(i, j)])
}

fn inv_sqrt(s: &DMatrix<f64>) -> DMatrix<f64> {
    let e = SymmetricEigen::new(s.clone());
    let d = DMatrix::from_diagonal(&e.eigenvalues.map(|v| 1.0 / v.sqrt()));
    &e.eigenvectors * d * e.eigenvectors.transpose()
}

/// Canonical correlations from a symmetric eigen-solve, descending.
pub fn cca_oracle(x: &Matrix, y: &Matrix, ridge: f64) -> Vec<f64> {
    let center = |m: &Matrix| {
        let mut a = to_na(m);
        for mut c in a.column_iter_mut() {
            let mean = c.mean();
            c.add_scalar_mut(-mean);
        }
        a
    };
    let (xc, yc) = (center(x), center(y));
    let scale = 1.0 / (x.rows() - 1) as f64;
    let id = |n| DMatrix::<f64>::identity(n, n) * ridge;
    let sxx = xc.transpose() * &xc * scale + id(x.cols());
    let syy = yc.transpose() * &yc * scale + id(y.cols());
    let sxy = xc.transpose() * &yc * scale;
    let wx = inv_sqrt(&sxx);
    let wy = inv_sqrt(&syy);
    let t = &wx * sxy * &wy;
    let m = &t * t.transpose();
    let mut ev: Vec<f64> = SymmetricEigen::new(m)
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0).sqrt().min(1.0))
        .collect();
    ev.sort_by(|a, b| b.partial_cmp(a).unwrap());
    ev.truncate(x.cols().min(y.cols()));
    ev
}
