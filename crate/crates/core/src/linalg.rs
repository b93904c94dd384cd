//! Small sparse/dense linear algebra kernels shared by the solvers.

use crate::error::{Error, Result};

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha * x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn scale(alpha: f64, x: &mut [f64]) {
    x.iter_mut().for_each(|v| *v *= alpha);
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CgOutcome {
    pub iterations: usize,
    /// Final residual norm relative to the right-hand side.
    pub relative_residual: f64,
}

/// Preconditioned conjugate gradients for an SPD operator, starting from `x = 0`.
///
/// Stops when `||b - A x|| <= rtol ||b||`. A zero right-hand side returns zero
/// immediately, which keeps the solve exactly homogeneous.
pub fn pcg(
    apply: impl Fn(&[f64], &mut [f64]),
    precond: impl Fn(&[f64], &mut [f64]),
    b: &[f64],
    rtol: f64,
    max_iter: usize,
) -> Result<(Vec<f64>, CgOutcome)> {
    let n = b.len();
    let mut x = vec![0.0; n];
    let bnorm = norm(b);
    if bnorm == 0.0 {
        return Ok((x, CgOutcome { iterations: 0, relative_residual: 0.0 }));
    }
    let mut r = b.to_vec();
    let mut z = vec![0.0; n];
    precond(&r, &mut z);
    let mut p = z.clone();
    let mut ap = vec![0.0; n];
    let mut rz = dot(&r, &z);
    for it in 1..=max_iter {
        apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            return Err(Error::LinearSolveFailure { iterations: it, residual: norm(&r) / bnorm });
        }
        let alpha = rz / pap;
        axpy(alpha, &p, &mut x);
        axpy(-alpha, &ap, &mut r);
        let rel = norm(&r) / bnorm;
        if rel <= rtol {
            return Ok((x, CgOutcome { iterations: it, relative_residual: rel }));
        }
        precond(&r, &mut z);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for (pi, zi) in p.iter_mut().zip(&z) {
            *pi = zi + beta * *pi;
        }
    }
    Err(Error::LinearSolveFailure { iterations: max_iter, residual: norm(&r) / bnorm })
}

/// Symmetric matrix with a 5-point sparsity pattern over active cells.
#[derive(Debug, Clone)]
pub struct StencilMatrix {
    pub diag: Vec<f64>,
    /// Off-diagonal couplings `(a, b, value)` with `a < b`; the matrix is symmetric.
    pub off: Vec<(usize, usize, f64)>,
}

impl StencilMatrix {
    pub fn apply(&self, x: &[f64], y: &mut [f64]) {
        for ((yi, d), xi) in y.iter_mut().zip(&self.diag).zip(x) {
            *yi = d * xi;
        }
        for &(a, b, v) in &self.off {
            y[a] += v * x[b];
            y[b] += v * x[a];
        }
    }

    pub fn mul(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; x.len()];
        self.apply(x, &mut y);
        y
    }
}

/// Cholesky factor of a symmetric positive-definite banded matrix.
#[derive(Debug, Clone)]
pub struct BandedCholesky {
    n: usize,
    bw: usize,
    /// Row `i` holds `L[i][i-bw ..= i]`.
    band: Vec<f64>,
}

impl BandedCholesky {
    pub fn factor(m: &StencilMatrix) -> Result<Self> {
        let n = m.diag.len();
        let bw = m.off.iter().map(|&(a, b, _)| b.abs_diff(a)).max().unwrap_or(0);
        let w = bw + 1;
        let mut band = vec![0.0; n * w];
        for i in 0..n {
            band[i * w + bw] = m.diag[i];
        }
        for &(a, b, v) in &m.off {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            band[hi * w + (lo + bw - hi)] += v;
        }
        for i in 0..n {
            let j0 = i.saturating_sub(bw);
            for j in j0..=i {
                let k0 = j0.max(j.saturating_sub(bw));
                let mut s = band[i * w + (j + bw - i)];
                for k in k0..j {
                    s -= band[i * w + (k + bw - i)] * band[j * w + (k + bw - j)];
                }
                if i == j {
                    if !(s > 0.0) {
                        return Err(Error::LinearSolveFailure { iterations: 0, residual: f64::NAN });
                    }
                    band[i * w + bw] = s.sqrt();
                } else {
                    band[i * w + (j + bw - i)] = s / band[j * w + bw];
                }
            }
        }
        Ok(BandedCholesky { n, bw, band })
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let (n, bw, w) = (self.n, self.bw, self.bw + 1);
        let mut y = b.to_vec();
        for i in 0..n {
            let mut s = y[i];
            for k in i.saturating_sub(bw)..i {
                s -= self.band[i * w + (k + bw - i)] * y[k];
            }
            y[i] = s / self.band[i * w + bw];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in i + 1..(i + bw + 1).min(n) {
                s -= self.band[k * w + (i + bw - k)] * y[k];
            }
            y[i] = s / self.band[i * w + bw];
        }
        y
    }

    /// `L^T x = b`, used to draw samples with covariance `A^{-1}`.
    pub fn solve_upper(&self, b: &[f64]) -> Vec<f64> {
        let (n, bw, w) = (self.n, self.bw, self.bw + 1);
        let mut y = b.to_vec();
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in i + 1..(i + bw + 1).min(n) {
                s -= self.band[k * w + (i + bw - k)] * y[k];
            }
            y[i] = s / self.band[i * w + bw];
        }
        y
    }
}
