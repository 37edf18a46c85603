//! SVCCA feature similarity: project each feature matrix onto its leading
//! singular directions, then measure canonical correlations between the two
//! projections.
//!
//! The SVD is a one-sided (Hestenes) Jacobi iteration. The matrices involved
//! are object feature slices with at most a few hundred rows, so the simple
//! O(n^2 m) sweep is fast enough and fully deterministic.

use crate::tensor::FeatureMap;
use crate::{Error, Result};

/// Sweep cap for the Jacobi SVD.
pub const MAX_SWEEPS: usize = 100;
/// A column pair is treated as orthogonal once `|<a_p, a_q>| <= tol |a_p| |a_q|`.
pub const ORTHOGONALITY_TOL: f64 = 1e-12;
/// Ridge added to covariance diagonals before whitening.
pub const CCA_RIDGE: f64 = 1e-10;
pub const DEFAULT_ENERGY_FRACTION: f64 = 0.99;

/// Dense row-major matrix. Used for `positions x channels` feature matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidArgument(format!(
                "matrix dimensions must be positive, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("matrix entry".into()));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        let n = diag.len();
        Self::from_fn(n, n, |i, j| if i == j { diag[i] } else { 0.0 })
    }

    /// One row per spatial position, one column per channel.
    pub fn from_feature_map(f: &FeatureMap) -> Self {
        Matrix {
            rows: f.height() * f.width(),
            cols: f.channels(),
            data: f.data().to_vec(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn transpose(&self) -> Matrix {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::ShapeMismatch(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out.data[i * other.cols + j] += a * other.get(k, j);
                }
            }
        }
        Ok(out)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Copy with each column's mean subtracted.
    pub fn centered(&self) -> Matrix {
        let mut out = self.clone();
        for j in 0..self.cols {
            let mean = (0..self.rows).map(|i| self.get(i, j)).sum::<f64>() / self.rows as f64;
            for i in 0..self.rows {
                out.data[i * self.cols + j] -= mean;
            }
        }
        out
    }
}

/// Thin SVD `M = U diag(s) V^T` with `k = min(rows, cols)` components.
#[derive(Debug, Clone)]
pub struct Svd {
    /// `rows x k`, orthonormal columns.
    pub u: Matrix,
    /// Descending, nonnegative.
    pub singular_values: Vec<f64>,
    /// `cols x k`, orthonormal columns.
    pub v: Matrix,
}

impl Svd {
    pub fn reconstruct(&self) -> Matrix {
        let k = self.singular_values.len();
        let us = Matrix::from_fn(self.u.rows, k, |i, j| self.u.get(i, j) * self.singular_values[j]);
        us.matmul(&self.v.transpose())
            .expect("SVD factors have matching inner dimension")
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Completes a set of orthonormal vectors (some slots empty) to an
/// orthonormal basis of the first `len` slots using the standard basis.
fn complete_basis(cols: &mut [Option<Vec<f64>>], dim: usize) {
    let mut candidate = 0;
    for slot in 0..cols.len() {
        if cols[slot].is_some() {
            continue;
        }
        while candidate < dim {
            let mut v = vec![0.0; dim];
            v[candidate] = 1.0;
            candidate += 1;
            // Two passes of Gram-Schmidt for stability.
            for _ in 0..2 {
                for c in cols.iter().flatten() {
                    let p = dot(&v, c);
                    v.iter_mut().zip(c).for_each(|(vi, ci)| *vi -= p * ci);
                }
            }
            let norm = dot(&v, &v).sqrt();
            if norm > 1e-8 {
                v.iter_mut().for_each(|x| *x /= norm);
                cols[slot] = Some(v);
                break;
            }
        }
    }
}

/// Jacobi SVD of a matrix with at least as many rows as columns.
fn jacobi_tall(m: &Matrix) -> Result<Svd> {
    let (rows, n) = (m.rows, m.cols);
    let mut a: Vec<Vec<f64>> = (0..n).map(|j| m.column(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();
    // columns at roundoff level carry no direction worth orthogonalising
    let negligible = {
        let f2: f64 = a.iter().map(|c| dot(c, c)).sum();
        let tol = rows.max(n) as f64 * f64::EPSILON;
        f2 * tol * tol
    };
    let mut converged = n < 2;
    for _ in 0..MAX_SWEEPS {
        if converged {
            break;
        }
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let alpha = dot(&a[p], &a[p]);
                let beta = dot(&a[q], &a[q]);
                let gamma = dot(&a[p], &a[q]);
                if gamma == 0.0
                    || alpha <= negligible
                    || beta <= negligible
                    || gamma.abs() <= ORTHOGONALITY_TOL * (alpha * beta).sqrt()
                {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for cols in [&mut a, &mut v] {
                    let (left, right) = cols.split_at_mut(q);
                    for (xp, xq) in left[p].iter_mut().zip(right[0].iter_mut()) {
                        let (vp, vq) = (*xp, *xq);
                        *xp = c * vp - s * vq;
                        *xq = s * vp + c * vq;
                    }
                }
            }
        }
        if !rotated {
            converged = true;
        }
    }
    if !converged {
        return Err(Error::NoConvergence { sweeps: MAX_SWEEPS });
    }

    let norms: Vec<f64> = a.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]).then(i.cmp(&j)));
    let largest = norms[order[0]];
    let cutoff = largest * rows.max(n) as f64 * f64::EPSILON;

    let mut u_cols: Vec<Option<Vec<f64>>> = order
        .iter()
        .map(|&j| (norms[j] > cutoff && norms[j] > 0.0).then(|| a[j].iter().map(|x| x / norms[j]).collect()))
        .collect();
    complete_basis(&mut u_cols, rows);

    let singular_values: Vec<f64> = order.iter().map(|&j| norms[j]).collect();
    let u = Matrix::from_fn(rows, n, |i, j| u_cols[j].as_ref().map_or(0.0, |c| c[i]));
    let vm = Matrix::from_fn(n, n, |i, j| v[order[j]][i]);
    Ok(Svd {
        u,
        singular_values,
        v: vm,
    })
}

/// Thin singular value decomposition by one-sided Jacobi rotations.
pub fn svd(m: &Matrix) -> Result<Svd> {
    if m.rows >= m.cols {
        jacobi_tall(m)
    } else {
        let t = jacobi_tall(&m.transpose())?;
        Ok(Svd {
            u: t.v,
            singular_values: t.singular_values,
            v: t.u,
        })
    }
}

/// Smallest `k` whose leading squared singular values reach
/// `energy_fraction` of the total.
pub fn retained_rank(singular_values: &[f64], energy_fraction: f64) -> usize {
    let total: f64 = singular_values.iter().map(|s| s * s).sum();
    let target = energy_fraction * total;
    let mut acc = 0.0;
    for (i, s) in singular_values.iter().enumerate() {
        acc += s * s;
        if acc >= target {
            return i + 1;
        }
    }
    singular_values.len()
}

/// Projects `m` onto its leading right singular vectors, keeping enough of
/// them to retain `energy_fraction` of the squared singular value mass.
pub fn project_topk(m: &Matrix, energy_fraction: f64) -> Result<Matrix> {
    if !(energy_fraction > 0.0 && energy_fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "energy fraction must lie in (0, 1], got {energy_fraction}"
        )));
    }
    let dec = svd(m)?;
    if dec.singular_values[0] == 0.0 {
        return Err(Error::DegenerateMap("cannot project a zero matrix".into()));
    }
    let k = retained_rank(&dec.singular_values, energy_fraction);
    let vk = Matrix::from_fn(dec.v.rows, k, |i, j| dec.v.get(i, j));
    m.matmul(&vk)
}

/// `S^{-1/2}` of a symmetric positive definite matrix.
fn inverse_sqrt(s: &Matrix) -> Result<Matrix> {
    let dec = svd(s)?;
    let n = s.rows;
    let scaled = Matrix::from_fn(n, n, |i, j| dec.u.get(i, j) / dec.singular_values[j].sqrt());
    scaled.matmul(&dec.u.transpose())
}

fn covariance(a: &Matrix, b: &Matrix, ridge: f64) -> Matrix {
    let scale = 1.0 / (a.rows - 1) as f64;
    let mut c = Matrix::from_fn(a.cols, b.cols, |i, j| {
        (0..a.rows).map(|r| a.get(r, i) * b.get(r, j)).sum::<f64>() * scale
    });
    if ridge > 0.0 {
        for i in 0..c.rows.min(c.cols) {
            c.data[i * c.cols + i] += ridge;
        }
    }
    c
}

/// Canonical correlations between the columns of `x` and `y`, descending,
/// clamped to `[0, 1]`. Both matrices are column-centred internally and the
/// within-set covariances get a small ridge.
pub fn cca_correlations(x: &Matrix, y: &Matrix) -> Result<Vec<f64>> {
    if x.rows != y.rows {
        return Err(Error::ShapeMismatch(format!(
            "CCA needs matching row counts, got {} and {}",
            x.rows, y.rows
        )));
    }
    if x.rows < 2 {
        return Err(Error::InvalidArgument(format!(
            "CCA needs at least 2 rows, got {}",
            x.rows
        )));
    }
    let xc = x.centered();
    let yc = y.centered();
    let wx = inverse_sqrt(&covariance(&xc, &xc, CCA_RIDGE))?;
    let wy = inverse_sqrt(&covariance(&yc, &yc, CCA_RIDGE))?;
    let sxy = covariance(&xc, &yc, 0.0);
    let t = wx.matmul(&sxy)?.matmul(&wy)?;
    Ok(svd(&t)?
        .singular_values
        .into_iter()
        .map(|r| r.clamp(0.0, 1.0))
        .collect())
}

/// Mean canonical correlation between the SVD projections of `x` and `y`.
pub fn svcca_score(x: &Matrix, y: &Matrix, energy_fraction: f64) -> Result<f64> {
    let px = project_topk(x, energy_fraction)?;
    let py = project_topk(y, energy_fraction)?;
    let corr = cca_correlations(&px, &py)?;
    Ok(corr.iter().sum::<f64>() / corr.len() as f64)
}
