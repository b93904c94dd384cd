//! Comparison calibrators: a spatially homogeneous prior (SHP) and a piecewise-constant
//! posterior (PCP) sampled by delayed-rejection adaptive Metropolis.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::ParameterFields;
use crate::grid::{Region, RegionLabels, ScalarField};
use crate::inversion::{Misfit, MisfitContext};
use crate::prior::{RegionHyper, RegionStats};

fn average(a: RegionStats, b: RegionStats) -> RegionStats {
    RegionStats {
        mean: 0.5 * (a.mean + b.mean),
        variance: 0.5 * (a.variance + b.variance),
        rho: 0.5 * (a.rho + b.rho),
    }
}

/// Replace the GM and WM statistics by their average, leaving a single homogeneous region.
pub fn shp_hyper(hyper: &RegionHyper) -> RegionHyper {
    let mut out = *hyper;
    for p in [&mut out.log_d, &mut out.log_g] {
        let s = average(p.gm, p.wm);
        p.gm = s;
        p.wm = s;
    }
    out.rho_int = None;
    out
}

/// One scalar per tissue class and parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PcpParams {
    pub log_d_gm: f64,
    pub log_d_wm: f64,
    pub log_g_gm: f64,
    pub log_g_wm: f64,
}

impl PcpParams {
    pub const NAMES: [&'static str; 4] = ["log_d_gm", "log_d_wm", "log_g_gm", "log_g_wm"];

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        match v {
            &[log_d_gm, log_d_wm, log_g_gm, log_g_wm] => Ok(PcpParams { log_d_gm, log_d_wm, log_g_gm, log_g_wm }),
            _ => Err(Error::DimensionMismatch(format!("expected 4 piecewise-constant parameters, got {}", v.len()))),
        }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.log_d_gm, self.log_d_wm, self.log_g_gm, self.log_g_wm]
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|x| x.is_finite())
    }

    /// Prior means of the four scalars.
    pub fn means(hyper: &RegionHyper) -> Self {
        PcpParams {
            log_d_gm: hyper.log_d.gm.mean,
            log_d_wm: hyper.log_d.wm.mean,
            log_g_gm: hyper.log_g.gm.mean,
            log_g_wm: hyper.log_g.wm.mean,
        }
    }
}

/// Independent Gaussian priors on the four scalars.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PcpPrior {
    pub mean: [f64; 4],
    pub variance: [f64; 4],
}

impl PcpPrior {
    pub fn from_hyper(hyper: &RegionHyper) -> Self {
        PcpPrior {
            mean: PcpParams::means(hyper).to_array(),
            variance: [hyper.log_d.gm.variance, hyper.log_d.wm.variance, hyper.log_g.gm.variance, hyper.log_g.wm.variance],
        }
    }

    pub fn log_density(&self, p: &PcpParams) -> f64 {
        p.to_array()
            .iter()
            .zip(self.mean.iter().zip(&self.variance))
            .map(|(x, (m, v))| -0.5 * (x - m).powi(2) / v)
            .sum()
    }
}

/// Tissue side each brain cell belongs to when the interface band is dissolved: GM and WM
/// keep their label, interface cells take the majority class among their nearest
/// non-interface cells (ties go to GM).
pub fn pcp_sides(labels: &RegionLabels) -> Vec<Option<Region>> {
    let grid = labels.grid();
    let tissue: Vec<(f64, f64, Region)> = (0..grid.n_cells())
        .filter_map(|c| match labels.get(c) {
            r @ (Region::Gm | Region::Wm) => {
                let (x, y) = grid.center(c);
                Some((x, y, r))
            }
            _ => None,
        })
        .collect();
    (0..grid.n_cells())
        .map(|c| match labels.get(c) {
            Region::Outside => None,
            Region::Interface => {
                let (x, y) = grid.center(c);
                let d2: Vec<f64> = tissue.iter().map(|t| (t.0 - x).powi(2) + (t.1 - y).powi(2)).collect();
                let dmin = d2.iter().copied().fold(f64::INFINITY, f64::min);
                let tol = 1e-9 * dmin.max(1e-12);
                let (mut gm, mut wm) = (0, 0);
                for (t, &d) in tissue.iter().zip(&d2) {
                    if d <= dmin + tol {
                        if t.2 == Region::Wm {
                            wm += 1
                        } else {
                            gm += 1
                        }
                    }
                }
                Some(if wm > gm { Region::Wm } else { Region::Gm })
            }
            r => Some(r),
        })
        .collect()
}

/// Paint the four scalars onto the grid.
pub fn paint_pcp(labels: &RegionLabels, p: &PcpParams) -> ParameterFields {
    let grid = labels.grid();
    let sides = pcp_sides(labels);
    let pick = |gm: f64, wm: f64| {
        let vals = sides.iter().map(|s| match s {
            Some(Region::Wm) => wm,
            Some(_) => gm,
            None => 0.0,
        });
        ScalarField::from_values(grid, vals.collect()).expect("painted field matches its grid")
    };
    ParameterFields { log_d: pick(p.log_d_gm, p.log_d_wm), log_g: pick(p.log_g_gm, p.log_g_wm) }
}

/// Log-likelihood of the painted fields plus the scalar log-priors. Non-finite
/// parameters give `−∞`; solver failures are returned as errors.
pub fn pcp_log_posterior(ctx: &MisfitContext, labels: &RegionLabels, prior: &PcpPrior, p: &PcpParams) -> Result<f64> {
    if !p.is_finite() {
        return Ok(f64::NEG_INFINITY);
    }
    labels.grid().same_as(ctx.grid()).then_some(()).ok_or(Error::GridMismatch)?;
    let theta = paint_pcp(labels, p);
    let (cost, _) = ctx.evaluate(&theta.to_vec())?;
    Ok(-cost + prior.log_density(p))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DramConfig {
    /// Starting point; empty means the origin.
    pub initial: Vec<f64>,
    /// Diagonal of the initial proposal covariance; empty means unit.
    pub initial_variance: Vec<f64>,
    /// Iteration at which covariance adaptation starts.
    pub adapt_start: usize,
    pub adapt_interval: usize,
    /// Standard-deviation shrink of the second-stage proposal.
    pub dr_shrink: f64,
    /// Covariance scale; `None` uses `2.38² / d`.
    pub scale: Option<f64>,
    /// Regularization added to the empirical covariance.
    pub epsilon: f64,
}

impl Default for DramConfig {
    fn default() -> Self {
        DramConfig {
            initial: Vec::new(),
            initial_variance: Vec::new(),
            adapt_start: 500,
            adapt_interval: 100,
            dr_shrink: 0.2,
            scale: None,
            epsilon: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationRecord {
    pub iteration: usize,
    /// Diagonal of the proposal covariance adopted at this iteration.
    pub proposal_variance: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AcceptanceStats {
    pub iterations: usize,
    pub accepted_first: usize,
    pub accepted_second: usize,
    /// First-stage proposals and acceptances after adaptation started.
    pub adapted_proposals: usize,
    pub adapted_accepted_first: usize,
}

impl AcceptanceStats {
    /// Fraction of iterations that moved, counting both stages.
    pub fn overall_rate(&self) -> f64 {
        ratio(self.accepted_first + self.accepted_second, self.iterations)
    }

    /// First-stage acceptance once the proposal covariance is adapted.
    pub fn adapted_rate(&self) -> f64 {
        ratio(self.adapted_accepted_first, self.adapted_proposals)
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Chain {
    pub dim: usize,
    pub samples: Vec<Vec<f64>>,
    pub log_posterior: Vec<f64>,
    pub stats: AcceptanceStats,
    pub adaptation: Vec<AdaptationRecord>,
}

impl Chain {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Samples after discarding the leading `fraction` as burn-in.
    pub fn after_burn_in(&self, fraction: f64) -> &[Vec<f64>] {
        let skip = ((fraction.clamp(0.0, 1.0) * self.len() as f64).floor() as usize).min(self.len());
        &self.samples[skip..]
    }

    /// Per-component mean and variance (unbiased) after burn-in.
    pub fn moments(&self, burn_in: f64) -> (Vec<f64>, Vec<f64>) {
        let s = self.after_burn_in(burn_in);
        let n = s.len() as f64;
        let mut mean = vec![0.0; self.dim];
        for x in s {
            mean.iter_mut().zip(x).for_each(|(m, v)| *m += v / n);
        }
        let mut var = vec![0.0; self.dim];
        for x in s {
            var.iter_mut().zip(x.iter().zip(&mean)).for_each(|(a, (v, m))| *a += (v - m).powi(2));
        }
        var.iter_mut().for_each(|v| *v /= (n - 1.0).max(1.0));
        (mean, var)
    }
}

/// Cholesky factor of `cov`, adding diagonal jitter until it factors.
fn factor(cov: &DMatrix<f64>) -> Cholesky<f64, Dyn> {
    let d = cov.nrows();
    let mut jitter = 0.0;
    loop {
        let m = cov + DMatrix::identity(d, d) * jitter;
        if let Some(c) = Cholesky::new(m) {
            return c;
        }
        jitter = if jitter == 0.0 { 1e-12 * (1.0 + cov.diagonal().amax()) } else { jitter * 10.0 };
    }
}

fn sanitize(lp: f64) -> f64 {
    if lp.is_nan() {
        f64::NEG_INFINITY
    } else {
        lp
    }
}

/// `log min(1, exp(a - b))`, with `−∞` handled.
fn log_alpha(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        f64::NEG_INFINITY
    } else if b == f64::NEG_INFINITY {
        0.0
    } else {
        (a - b).min(0.0)
    }
}

/// Delayed-rejection adaptive Metropolis with one DR stage. The proposal covariance
/// becomes `scale · (Cov(chain) + ε I)` from `adapt_start` on, refreshed every
/// `adapt_interval` iterations. `target` returns the log-density; non-finite values
/// are treated as rejections.
pub fn dram_sample<F>(target: F, dim: usize, n: usize, cfg: &DramConfig, seed: u64) -> Result<Chain>
where
    F: Fn(&[f64]) -> f64,
{
    if dim == 0 || n == 0 {
        return Err(Error::InvalidArgument("DRAM needs a positive dimension and chain length".into()));
    }
    if !(cfg.dr_shrink > 0.0 && cfg.dr_shrink < 1.0) || cfg.adapt_interval == 0 {
        return Err(Error::InvalidArgument("DR shrink must lie in (0, 1) and the adaptation interval be positive".into()));
    }
    let x0 = if cfg.initial.is_empty() { vec![0.0; dim] } else { cfg.initial.clone() };
    let v0 = if cfg.initial_variance.is_empty() { vec![1.0; dim] } else { cfg.initial_variance.clone() };
    if x0.len() != dim || v0.len() != dim {
        return Err(Error::DimensionMismatch("initial point or proposal variance has the wrong length".into()));
    }
    if v0.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
        return Err(Error::InvalidArgument("initial proposal variances must be positive".into()));
    }
    let scale = cfg.scale.unwrap_or(2.38 * 2.38 / dim as f64);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chol = factor(&DMatrix::from_diagonal(&DVector::from_vec(v0)));
    let mut x = DVector::from_vec(x0);
    let mut lp = sanitize(target(x.as_slice()));

    // running moments of the chain for adaptation
    let mut mean = DVector::zeros(dim);
    let mut m2 = DMatrix::zeros(dim, dim);
    let mut count = 0usize;

    let mut chain = Chain {
        dim,
        samples: Vec::with_capacity(n),
        log_posterior: Vec::with_capacity(n),
        stats: AcceptanceStats::default(),
        adaptation: Vec::new(),
    };
    let mut adapted = false;

    for it in 0..n {
        if it >= cfg.adapt_start && it > 1 && (it - cfg.adapt_start) % cfg.adapt_interval == 0 {
            let cov = (&m2 / (count as f64 - 1.0) + DMatrix::identity(dim, dim) * cfg.epsilon) * scale;
            chol = factor(&cov);
            adapted = true;
            chain.adaptation.push(AdaptationRecord { iteration: it, proposal_variance: cov.diagonal().as_slice().to_vec() });
        }
        let l = chol.l();
        let z1 = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y1 = &x + &l * z1;
        let lp1 = sanitize(target(y1.as_slice()));
        let a1 = log_alpha(lp1, lp);
        chain.stats.iterations += 1;
        if adapted {
            chain.stats.adapted_proposals += 1;
        }
        let u1: f64 = rng.random();
        if u1.ln() < a1 {
            x = y1;
            lp = lp1;
            chain.stats.accepted_first += 1;
            if adapted {
                chain.stats.adapted_accepted_first += 1;
            }
        } else {
            let z2 = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
            let y2 = &x + &l * z2 * cfg.dr_shrink;
            let lp2 = sanitize(target(y2.as_slice()));
            // Tierney–Mira second-stage ratio; first-stage proposal densities share a covariance
            let a1_rev = log_alpha(lp1, lp2);
            let maha = |d: DVector<f64>| {
                let w = l.solve_lower_triangular(&d).expect("Cholesky factor is nonsingular");
                w.norm_squared()
            };
            let log_q_ratio = -0.5 * (maha(&y1 - &y2) - maha(&y1 - &x));
            let num_tail = (1.0 - a1_rev.exp()).ln();
            let den_tail = (1.0 - a1.exp()).ln();
            let a2 = if lp2 == f64::NEG_INFINITY || num_tail == f64::NEG_INFINITY {
                f64::NEG_INFINITY
            } else if lp == f64::NEG_INFINITY {
                0.0
            } else {
                (lp2 + log_q_ratio + num_tail - lp - den_tail).min(0.0)
            };
            let u2: f64 = rng.random();
            if u2.ln() < a2 {
                x = y2;
                lp = lp2;
                chain.stats.accepted_second += 1;
            }
        }
        count += 1;
        let delta = &x - &mean;
        mean += &delta / count as f64;
        m2 += &delta * (&x - &mean).transpose();
        chain.samples.push(x.as_slice().to_vec());
        chain.log_posterior.push(lp);
    }
    Ok(chain)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PcpConfig {
    pub samples: usize,
    pub burn_in: f64,
    /// Initial proposal variance as a fraction of the prior variance.
    pub initial_variance_fraction: f64,
    pub dram: DramConfig,
    pub seed: u64,
}

impl Default for PcpConfig {
    fn default() -> Self {
        PcpConfig { samples: 50_000, burn_in: 0.2, initial_variance_fraction: 0.01, dram: DramConfig::default(), seed: 1 }
    }
}

/// Sample the piecewise-constant posterior, starting at the prior means. Forward-solver
/// failures at a proposal count as rejections.
pub fn calibrate_pcp(ctx: &MisfitContext, labels: &RegionLabels, hyper: &RegionHyper, cfg: &PcpConfig) -> Result<Chain> {
    labels.grid().same_as(ctx.grid()).then_some(()).ok_or(Error::GridMismatch)?;
    if !(0.0..1.0).contains(&cfg.burn_in) {
        return Err(Error::InvalidArgument(format!("burn-in fraction must lie in [0, 1), got {}", cfg.burn_in)));
    }
    let prior = PcpPrior::from_hyper(hyper);
    let mut dram = cfg.dram.clone();
    if dram.initial.is_empty() {
        dram.initial = prior.mean.to_vec();
    }
    if dram.initial_variance.is_empty() {
        dram.initial_variance = prior.variance.iter().map(|v| v * cfg.initial_variance_fraction).collect();
    }
    let target = |v: &[f64]| {
        PcpParams::from_slice(v)
            .and_then(|p| pcp_log_posterior(ctx, labels, &prior, &p))
            .unwrap_or(f64::NEG_INFINITY)
    };
    dram_sample(target, 4, cfg.samples, &dram, cfg.seed)
}
