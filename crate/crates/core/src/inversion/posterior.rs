//! Laplace posterior with low-rank covariance update, sampling and prediction.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::ghep::{adaptive_ghep, Eigenpairs, GhepConfig};
use super::misfit::{Misfit, MisfitContext};
use crate::error::{Error, Result};
use crate::forward::{solve_forward, ParameterFields};
use crate::grid::ScalarField;
use crate::linalg;
use crate::prior::{sample_variance, GaussianPrior, PriorPair};

/// `N(θ_MAP, Γ_post)` with `Γ_post = Γ_pr − V diag(λ/(1+λ)) Vᵀ`.
#[derive(Debug, Clone)]
pub struct LowRankPosterior<P = PriorPair> {
    prior: Arc<P>,
    map: Vec<f64>,
    values: Vec<f64>,
    vectors: Vec<Vec<f64>>,
}

impl<P: GaussianPrior + Send> LowRankPosterior<P> {
    pub fn new(prior: Arc<P>, map: Vec<f64>, pairs: Eigenpairs) -> Result<Self> {
        let n = prior.dim();
        if map.len() != n || pairs.vectors.iter().any(|v| v.len() != n) || pairs.values.len() != pairs.vectors.len() {
            return Err(Error::DimensionMismatch("posterior pieces disagree with the prior dimension".into()));
        }
        if pairs.values.windows(2).any(|w| w[0] < w[1]) || pairs.values.iter().any(|&l| !(l >= 0.0)) {
            return Err(Error::InvalidArgument("eigenvalues must be non-negative and sorted descending".into()));
        }
        let lrp = LowRankPosterior { prior, map, values: pairs.values, vectors: pairs.vectors };
        let res = lrp.orthonormality_residual();
        if !(res < 1e-8) {
            return Err(Error::InvalidArgument(format!("eigenvectors are not prior-orthonormal (residual {res:.3e})")));
        }
        Ok(lrp)
    }

    pub fn prior(&self) -> &Arc<P> {
        &self.prior
    }
    pub fn map(&self) -> &[f64] {
        &self.map
    }
    pub fn eigenvalues(&self) -> &[f64] {
        &self.values
    }
    pub fn eigenvectors(&self) -> &[Vec<f64>] {
        &self.vectors
    }
    pub fn rank(&self) -> usize {
        self.values.len()
    }

    /// `max |VᵀΓ_pr⁻¹V − I|`.
    pub fn orthonormality_residual(&self) -> f64 {
        let bv: Vec<Vec<f64>> = self.vectors.iter().map(|v| self.prior.apply_precision(v)).collect();
        let mut worst: f64 = 0.0;
        for (i, bvi) in bv.iter().enumerate() {
            for (j, vj) in self.vectors.iter().enumerate() {
                let e = linalg::dot(bvi, vj) - if i == j { 1.0 } else { 0.0 };
                worst = worst.max(e.abs());
            }
        }
        worst
    }

    /// Keep only the leading `r` eigenpairs.
    pub fn truncated(&self, r: usize) -> Self {
        let r = r.min(self.rank());
        LowRankPosterior {
            prior: self.prior.clone(),
            map: self.map.clone(),
            values: self.values[..r].to_vec(),
            vectors: self.vectors[..r].to_vec(),
        }
    }

    pub fn apply_covariance(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.prior.apply_covariance(x);
        for (v, &l) in self.vectors.iter().zip(&self.values) {
            linalg::axpy(-l / (1.0 + l) * linalg::dot(v, x), v, &mut y);
        }
        y
    }

    pub fn sample_fluctuation(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut s = self.prior.sample_fluctuation(rng);
        let bs = self.prior.apply_precision(&s);
        let coeffs: Vec<f64> = self
            .vectors
            .iter()
            .zip(&self.values)
            .map(|(v, &l)| (1.0 - 1.0 / (1.0 + l).sqrt()) * linalg::dot(v, &bs))
            .collect();
        for (v, c) in self.vectors.iter().zip(coeffs) {
            linalg::axpy(-c, v, &mut s);
        }
        s
    }

    /// `θ_MAP + fluctuation`, deterministic in `seed`.
    pub fn sample_vec(&self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        linalg::add(&self.map, &self.sample_fluctuation(&mut rng))
    }

    /// Monte Carlo per-dof variance from `n` samples with seeds `seed, seed + 1, …`.
    pub fn sampled_variance(&self, n: usize, seed: u64) -> Vec<f64> {
        sample_variance(self.prior.dim(), n, |i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
            self.sample_fluctuation(&mut rng)
        })
    }

    /// Exact per-dof variance; costs one covariance application per dof.
    pub fn exact_variance(&self) -> Vec<f64> {
        let n = self.prior.dim();
        let mut diag: Vec<f64> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut e = vec![0.0; n];
                e[i] = 1.0;
                self.prior.apply_covariance(&e)[i]
            })
            .collect();
        for (v, &l) in self.vectors.iter().zip(&self.values) {
            let d = l / (1.0 + l);
            for (di, vi) in diag.iter_mut().zip(v) {
                *di -= d * vi * vi;
            }
        }
        diag
    }

    /// Dense `Γ_post`, for small problems.
    pub fn dense_covariance(&self) -> Vec<Vec<f64>> {
        let n = self.prior.dim();
        (0..n)
            .into_par_iter()
            .map(|i| {
                let mut e = vec![0.0; n];
                e[i] = 1.0;
                self.apply_covariance(&e)
            })
            .collect()
    }
}

impl LowRankPosterior<PriorPair> {
    pub fn map_fields(&self) -> ParameterFields {
        ParameterFields::from_vec(self.prior.grid(), &self.map)
    }
}

/// Build the Laplace posterior at `map`, using the Gauss–Newton misfit Hessian there.
pub fn laplace_posterior<M: Misfit, P: GaussianPrior + Send>(
    misfit: &M,
    prior: Arc<P>,
    map: Vec<f64>,
    cfg: &GhepConfig,
) -> Result<LowRankPosterior<P>> {
    let (_, point) = misfit.evaluate(&map)?;
    let h = |v: &[f64]| misfit.gn_apply(&point, v);
    let pairs = adaptive_ghep(&h, prior.as_ref(), cfg)?;
    LowRankPosterior::new(prior, map, pairs)
}

/// One posterior draw as parameter fields.
pub fn posterior_sample(lrp: &LowRankPosterior, seed: u64) -> ParameterFields {
    ParameterFields::from_vec(lrp.prior.grid(), &lrp.sample_vec(seed))
}

/// Monte Carlo pointwise posterior variance of (logD, logG).
pub fn pointwise_posterior_variance(lrp: &LowRankPosterior, n_samples: usize, seed: u64) -> (ScalarField, ScalarField) {
    split_fields(lrp, &lrp.sampled_variance(n_samples, seed))
}

/// Exact pointwise posterior variance of (logD, logG).
pub fn exact_posterior_variance(lrp: &LowRankPosterior) -> (ScalarField, ScalarField) {
    split_fields(lrp, &lrp.exact_variance())
}

fn split_fields(lrp: &LowRankPosterior, v: &[f64]) -> (ScalarField, ScalarField) {
    let grid = lrp.prior.grid();
    let n = grid.n_active();
    (ScalarField::from_active(grid, &v[..n]), ScalarField::from_active(grid, &v[n..]))
}

/// Forecast fields at the horizon days for the MAP and each posterior sample.
#[derive(Debug, Clone)]
pub struct PredictionEnsemble {
    pub days: Vec<f64>,
    /// `map[d]` is the MAP forecast on `days[d]`.
    pub map: Vec<ScalarField>,
    /// `samples[s][d]` is the forecast of sample `s` on `days[d]`.
    pub samples: Vec<Vec<ScalarField>>,
    pub seeds: Vec<u64>,
    pub cutoff: f64,
}

/// Propagate the MAP and `n_samples` posterior draws (seeds `seed + i`) from the
/// context's initial state to every horizon day.
pub fn predict(
    lrp: &LowRankPosterior,
    ctx: &MisfitContext,
    horizon_days: &[f64],
    n_samples: usize,
    cutoff: f64,
    seed: u64,
) -> Result<PredictionEnsemble> {
    if horizon_days.is_empty() || horizon_days.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument("horizon days must be non-empty and increasing".into()));
    }
    let last = ctx.observations().days.last().copied().unwrap_or(ctx.start_day());
    if horizon_days[0] <= last {
        return Err(Error::InvalidArgument(format!(
            "horizon day {} does not lie beyond the last training day {last}",
            horizon_days[0]
        )));
    }
    if !(cutoff > 0.0 && cutoff < 1.0) {
        return Err(Error::InvalidArgument(format!("cutoff must lie in (0, 1), got {cutoff}")));
    }
    let mut days = vec![ctx.start_day()];
    days.extend_from_slice(horizon_days);
    let run = |theta: &ParameterFields| -> Result<Vec<ScalarField>> {
        let traj = solve_forward(ctx.grid(), theta, ctx.u0(), &days, ctx.solver())?;
        Ok(traj.states_at_days()[1..].to_vec())
    };
    let map = run(&lrp.map_fields())?;
    let seeds: Vec<u64> = (0..n_samples as u64).map(|i| seed.wrapping_add(i)).collect();
    let samples = seeds
        .par_iter()
        .map(|&s| run(&posterior_sample(lrp, s)))
        .collect::<Result<Vec<_>>>()?;
    Ok(PredictionEnsemble { days: horizon_days.to_vec(), map, samples, seeds, cutoff })
}
