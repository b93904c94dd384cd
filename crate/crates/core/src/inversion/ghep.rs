//! Randomized double-pass solver for the generalized eigenproblem `H v = λ Γ_pr⁻¹ v`.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::prior::GaussianPrior;

/// Relative residual below which a column is treated as linearly dependent.
const COLLAPSE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GhepConfig {
    /// Fixed rank; `None` selects it adaptively.
    pub rank: Option<usize>,
    pub oversample: usize,
    pub power_iterations: usize,
    /// Adaptive rule: grow the rank until the smallest retained eigenvalue drops below this.
    pub threshold: f64,
    pub max_rank: usize,
    pub initial_rank: usize,
    pub seed: u64,
}

impl Default for GhepConfig {
    fn default() -> Self {
        GhepConfig {
            rank: None,
            oversample: 10,
            power_iterations: 1,
            threshold: 0.1,
            max_rank: 200,
            initial_rank: 16,
            seed: 7,
        }
    }
}

/// Eigenpairs sorted by decreasing eigenvalue; vectors are `Γ_pr⁻¹`-orthonormal.
#[derive(Debug, Clone, PartialEq)]
pub struct Eigenpairs {
    pub values: Vec<f64>,
    pub vectors: Vec<Vec<f64>>,
}

impl Eigenpairs {
    pub fn empty() -> Self {
        Eigenpairs { values: Vec::new(), vectors: Vec::new() }
    }

    pub fn truncate(&mut self, r: usize) {
        self.values.truncate(r);
        self.vectors.truncate(r);
    }
}

fn apply_all<H>(hessian: &H, cols: &[Vec<f64>]) -> Result<Vec<Vec<f64>>>
where
    H: Fn(&[f64]) -> Result<Vec<f64>> + Sync,
{
    cols.par_iter().map(|c| hessian(c)).collect()
}

/// Modified Gram–Schmidt (two passes) in the `Γ_pr⁻¹` inner product. Columns whose
/// residual falls below `COLLAPSE_TOL` of their original norm are dropped.
fn b_orthonormalize<P: GaussianPrior + ?Sized>(prior: &P, cols: Vec<Vec<f64>>) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(cols.len());
    let mut bq: Vec<Vec<f64>> = Vec::with_capacity(cols.len());
    for mut v in cols {
        let norm0 = linalg::dot(&v, &prior.apply_precision(&v)).max(0.0).sqrt();
        if norm0 == 0.0 || !norm0.is_finite() {
            continue;
        }
        for _ in 0..2 {
            for (qi, bqi) in q.iter().zip(&bq) {
                let c = linalg::dot(bqi, &v);
                linalg::axpy(-c, qi, &mut v);
            }
        }
        let bv = prior.apply_precision(&v);
        let nrm = linalg::dot(&v, &bv).max(0.0).sqrt();
        if nrm < COLLAPSE_TOL * norm0 {
            continue;
        }
        linalg::scale(1.0 / nrm, &mut v);
        q.push(v);
        bq.push(bv.iter().map(|x| x / nrm).collect());
    }
    (q, bq)
}

/// Top-`r` eigenpairs of `H v = λ Γ_pr⁻¹ v` from a Gaussian test block of `r + oversample`
/// columns, `power_iters` subspace iterations and a Rayleigh–Ritz projection.
///
/// Returns fewer than `r` pairs when the range of `H` has lower dimension.
pub fn randomized_ghep<H, P>(
    hessian: &H,
    prior: &P,
    r: usize,
    oversample: usize,
    power_iters: usize,
    seed: u64,
) -> Result<Eigenpairs>
where
    H: Fn(&[f64]) -> Result<Vec<f64>> + Sync,
    P: GaussianPrior + ?Sized,
{
    let n = prior.dim();
    if r == 0 {
        return Ok(Eigenpairs::empty());
    }
    let k = r + oversample;
    if k > n {
        return Err(Error::InvalidArgument(format!("rank {r} + oversampling {oversample} exceeds {n} dof")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let omega: Vec<Vec<f64>> = (0..k).map(|_| (0..n).map(|_| rng.sample(StandardNormal)).collect()).collect();

    let cov_h = |cols: &[Vec<f64>]| -> Result<Vec<Vec<f64>>> {
        let hy = apply_all(hessian, cols)?;
        Ok(hy.par_iter().map(|c| prior.apply_covariance(c)).collect())
    };
    let mut y = cov_h(&omega)?;
    for _ in 0..power_iters {
        let (q, _) = b_orthonormalize(prior, y);
        y = cov_h(&q)?;
    }
    let (q, _) = b_orthonormalize(prior, y);
    if q.is_empty() {
        // every column vanished: H is zero on the sampled subspace
        if apply_all(hessian, &omega)?.iter().any(|c| linalg::norm(c) > 0.0) {
            return Err(Error::RankDeficiency { kept: 0, requested: r });
        }
        return Ok(Eigenpairs::empty());
    }

    let hq = apply_all(hessian, &q)?;
    let m = q.len();
    let t = DMatrix::from_fn(m, m, |i, j| 0.5 * (linalg::dot(&q[i], &hq[j]) + linalg::dot(&q[j], &hq[i])));
    let eig = SymmetricEigen::new(t);
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let keep = r.min(m);
    let mut out = Eigenpairs { values: Vec::with_capacity(keep), vectors: Vec::with_capacity(keep) };
    for &idx in order.iter().take(keep) {
        let u = eig.eigenvectors.column(idx);
        let mut v = vec![0.0; n];
        for (qi, &c) in q.iter().zip(u.iter()) {
            linalg::axpy(c, qi, &mut v);
        }
        out.values.push(eig.eigenvalues[idx].max(0.0));
        out.vectors.push(v);
    }
    Ok(out)
}

/// Randomized GHEP with the rank either fixed by `cfg.rank` or chosen as the smallest `r`
/// whose eigenvalue `λ_r` falls below `cfg.threshold`, doubling the trial rank up to
/// `min(cfg.max_rank, N/4)`.
pub fn adaptive_ghep<H, P>(hessian: &H, prior: &P, cfg: &GhepConfig) -> Result<Eigenpairs>
where
    H: Fn(&[f64]) -> Result<Vec<f64>> + Sync,
    P: GaussianPrior + ?Sized,
{
    let n = prior.dim();
    let cap = cfg.max_rank.min(n / 4).min(n.saturating_sub(cfg.oversample));
    if let Some(r) = cfg.rank {
        return randomized_ghep(hessian, prior, r, cfg.oversample, cfg.power_iterations, cfg.seed);
    }
    if cap == 0 {
        return Ok(Eigenpairs::empty());
    }
    let mut r = cfg.initial_rank.clamp(1, cap);
    loop {
        let mut pairs = randomized_ghep(hessian, prior, r, cfg.oversample, cfg.power_iterations, cfg.seed)?;
        if let Some(pos) = pairs.values.iter().position(|&l| l < cfg.threshold) {
            pairs.truncate(pos + 1);
            return Ok(pairs);
        }
        if pairs.values.len() < r || r == cap {
            return Ok(pairs);
        }
        r = (2 * r).min(cap);
    }
}
