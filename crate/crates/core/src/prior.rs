//! Region-wise Matérn (ν = 1) Gaussian priors built from the elliptic operator
//! `A θ = -γ Δθ + δ θ` with a Robin closure `γ ∂θ/∂n + β θ = 0`.
//!
//! The operator is assembled in finite-volume (area-integrated) form `K = M A`,
//! with `M = hx hy I`. A sample is `θ̄ + K⁻¹ √(hx hy) ξ` for standard normal `ξ`,
//! which is the discrete solution of `A (θ - θ̄) = W`. Its covariance is
//! `Γ_pr = K⁻¹ M K⁻¹`, so the precision is `K M⁻¹ K`.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::ParameterFields;
use crate::grid::{Grid, Region, RegionLabels, ScalarField};
use crate::linalg::{self, BandedCholesky, StencilMatrix};

/// Mean (log units), variance (log units squared) and correlation length (mm).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionStats {
    pub mean: f64,
    pub variance: f64,
    pub rho: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamHyper {
    pub gm: RegionStats,
    pub wm: RegionStats,
}

/// Prior hyperparameters for both parameter fields. `rho_int` is the correlation
/// length imposed on the GM/WM interface band; `None` means the interface carries
/// no separate prior (only valid when GM and WM statistics coincide).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionHyper {
    pub log_d: ParamHyper,
    pub log_g: ParamHyper,
    pub rho_int: Option<f64>,
}

impl Default for RegionHyper {
    /// Rat-brain estimates: correlation lengths 6 / 12 / 0.6 mm for GM / WM / interface.
    fn default() -> Self {
        RegionHyper {
            log_d: ParamHyper {
                gm: RegionStats { mean: -0.9937, variance: 0.2336, rho: 6.0 },
                wm: RegionStats { mean: -0.3006, variance: 0.2336, rho: 12.0 },
            },
            log_g: ParamHyper {
                gm: RegionStats { mean: -0.7800, variance: 0.0682, rho: 6.0 },
                wm: RegionStats { mean: -0.8419, variance: 0.0682, rho: 12.0 },
            },
            rho_int: Some(0.6),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Param {
    LogD,
    LogG,
}

impl RegionHyper {
    pub fn param(&self, p: Param) -> &ParamHyper {
        match p {
            Param::LogD => &self.log_d,
            Param::LogG => &self.log_g,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, ph) in [("log_d", &self.log_d), ("log_g", &self.log_g)] {
            for (region, s) in [("gm", &ph.gm), ("wm", &ph.wm)] {
                if !(s.variance > 0.0 && s.variance.is_finite()) {
                    return Err(Error::NonpositiveHyper(format!("{name}.{region}.variance = {}", s.variance)));
                }
                if !(s.rho > 0.0 && s.rho.is_finite()) {
                    return Err(Error::NonpositiveHyper(format!("{name}.{region}.rho = {}", s.rho)));
                }
                if !s.mean.is_finite() {
                    return Err(Error::InvalidArgument(format!("{name}.{region}.mean is not finite")));
                }
            }
            if let Some(ri) = self.rho_int {
                if !(ri > 0.0) {
                    return Err(Error::NonpositiveHyper(format!("rho_int = {ri}")));
                }
                if ri > ph.gm.rho.min(ph.wm.rho) {
                    return Err(Error::InvalidArgument(format!(
                        "rho_int = {ri} exceeds the {name} region correlation lengths"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// SPDE coefficients for a target standard deviation and correlation length.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpdeCoeffs {
    pub delta: f64,
    pub gamma: f64,
    pub beta: f64,
}

pub fn hyper_to_coeffs(sigma: f64, rho: f64) -> Result<SpdeCoeffs> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::NonpositiveHyper(format!("sigma = {sigma}")));
    }
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(Error::NonpositiveHyper(format!("rho = {rho}")));
    }
    let delta = 2f64.sqrt() / (sigma * rho * PI.sqrt());
    let gamma = rho / (4.0 * sigma * (2.0 * PI).sqrt());
    let beta = (delta * gamma).sqrt() / 1.42;
    Ok(SpdeCoeffs { delta, gamma, beta })
}

/// Assembly switches.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpdeOptions {
    /// Apply the Robin boundary term; without it the closure is homogeneous Neumann.
    pub robin: bool,
}

impl Default for SpdeOptions {
    fn default() -> Self {
        SpdeOptions { robin: true }
    }
}

/// Per-cell (mean, variance, rho) for one parameter, with the interface band blended
/// from the nearest GM and WM cells by inverse distance.
fn cell_stats(labels: &RegionLabels, hyper: &RegionHyper, param: Param) -> Result<Vec<RegionStats>> {
    let grid = labels.grid();
    let ph = hyper.param(param);
    let act = labels.active_labels();
    let has_interface = act.contains(&Region::Interface);
    if has_interface && hyper.rho_int.is_none() && ph.gm != ph.wm {
        return Err(Error::MissingRegionHyper("interface".into()));
    }
    // frontier cells of each tissue region adjacent to the band
    let mut frontier_gm = Vec::new();
    let mut frontier_wm = Vec::new();
    if has_interface {
        let mut adj = vec![false; act.len()];
        for f in grid.faces() {
            if act[f.a] == Region::Interface {
                adj[f.b] = true;
            }
            if act[f.b] == Region::Interface {
                adj[f.a] = true;
            }
        }
        for (k, &l) in act.iter().enumerate() {
            if adj[k] {
                match l {
                    Region::Gm => frontier_gm.push(grid.active_center(k)),
                    Region::Wm => frontier_wm.push(grid.active_center(k)),
                    _ => {}
                }
            }
        }
    }
    let nearest = |pts: &[(f64, f64)], (x, y): (f64, f64)| {
        pts.iter().map(|&(px, py)| (px - x).hypot(py - y)).fold(f64::INFINITY, f64::min)
    };
    act.iter()
        .enumerate()
        .map(|(k, &l)| match l {
            Region::Gm => Ok(ph.gm),
            Region::Wm => Ok(ph.wm),
            Region::Interface => {
                let p = grid.active_center(k);
                let (dg, dw) = (nearest(&frontier_gm, p), nearest(&frontier_wm, p));
                let wg = match (dg.is_finite(), dw.is_finite()) {
                    (true, true) => dw / (dg + dw),
                    (true, false) => 1.0,
                    (false, true) => 0.0,
                    (false, false) => 0.5,
                };
                let blend = |a: f64, b: f64| wg * a + (1.0 - wg) * b;
                Ok(RegionStats {
                    mean: blend(ph.gm.mean, ph.wm.mean),
                    variance: blend(ph.gm.variance, ph.wm.variance),
                    rho: hyper.rho_int.unwrap_or_else(|| blend(ph.gm.rho, ph.wm.rho)),
                })
            }
            Region::Outside => unreachable!("active cells are never outside"),
        })
        .collect()
}

/// Prior mean field of one parameter.
pub fn prior_mean(labels: &RegionLabels, hyper: &RegionHyper, param: Param) -> Result<ScalarField> {
    let stats = cell_stats(labels, hyper, param)?;
    let mean: Vec<f64> = stats.iter().map(|s| s.mean).collect();
    Ok(ScalarField::from_active(labels.grid(), &mean))
}

/// Assembled SPDE operator with its Cholesky factor.
#[derive(Debug, Clone)]
pub struct SpdeOperator {
    grid: Arc<Grid>,
    delta: Vec<f64>,
    gamma: Vec<f64>,
    beta: Vec<f64>,
    stiffness: StencilMatrix,
    factor: BandedCholesky,
}

pub fn assemble_spde_operator(
    grid: &Arc<Grid>,
    labels: &RegionLabels,
    hyper: &RegionHyper,
    param: Param,
) -> Result<SpdeOperator> {
    assemble_spde_operator_with(grid, labels, hyper, param, SpdeOptions::default())
}

pub fn assemble_spde_operator_with(
    grid: &Arc<Grid>,
    labels: &RegionLabels,
    hyper: &RegionHyper,
    param: Param,
    opts: SpdeOptions,
) -> Result<SpdeOperator> {
    if !labels.grid().same_as(grid) {
        return Err(Error::GridMismatch);
    }
    hyper.validate()?;
    let stats = cell_stats(labels, hyper, param)?;
    let coeffs = stats
        .iter()
        .map(|s| hyper_to_coeffs(s.variance.sqrt(), s.rho))
        .collect::<Result<Vec<_>>>()?;
    SpdeOperator::from_coeffs(grid, &coeffs, opts)
}

impl SpdeOperator {
    /// Assemble from per-active-cell coefficients.
    pub fn from_coeffs(grid: &Arc<Grid>, coeffs: &[SpdeCoeffs], opts: SpdeOptions) -> Result<Self> {
        let n = grid.n_active();
        if coeffs.len() != n {
            return Err(Error::DimensionMismatch("one coefficient triple per brain cell".into()));
        }
        let area = grid.cell_area();
        let delta: Vec<f64> = coeffs.iter().map(|c| c.delta).collect();
        let gamma: Vec<f64> = coeffs.iter().map(|c| c.gamma).collect();
        let beta: Vec<f64> = coeffs.iter().map(|c| c.beta).collect();
        let mut diag: Vec<f64> = delta.iter().map(|d| d * area).collect();
        let mut off = Vec::with_capacity(grid.faces().len());
        for f in grid.faces() {
            let (ga, gb) = (gamma[f.a], gamma[f.b]);
            let k = f.weight * 2.0 * ga * gb / (ga + gb);
            diag[f.a] += k;
            diag[f.b] += k;
            off.push((f.a, f.b, -k));
        }
        if opts.robin {
            for bf in grid.boundary_faces() {
                diag[bf.cell] += beta[bf.cell] * bf.length;
            }
        }
        let stiffness = StencilMatrix { diag, off };
        let factor = BandedCholesky::factor(&stiffness)?;
        Ok(SpdeOperator { grid: grid.clone(), delta, gamma, beta, stiffness, factor })
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }
    pub fn dim(&self) -> usize {
        self.delta.len()
    }
    pub fn delta(&self) -> &[f64] {
        &self.delta
    }
    pub fn gamma(&self) -> &[f64] {
        &self.gamma
    }
    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    /// Area-integrated operator `K x`.
    pub fn apply_stiffness(&self, x: &[f64]) -> Vec<f64> {
        self.stiffness.mul(x)
    }

    /// Pointwise operator `A x = M⁻¹ K x`.
    pub fn apply_operator(&self, x: &ScalarField) -> Result<ScalarField> {
        x.check_grid(&self.grid)?;
        let area = self.grid.cell_area();
        let y: Vec<f64> = self.stiffness.mul(&x.active()).into_iter().map(|v| v / area).collect();
        Ok(ScalarField::from_active(&self.grid, &y))
    }

    pub fn solve_stiffness(&self, b: &[f64]) -> Vec<f64> {
        self.factor.solve(b)
    }

    /// `Γ_pr⁻¹ x = K M⁻¹ K x`
    pub fn precision(&self, x: &[f64]) -> Vec<f64> {
        let area = self.grid.cell_area();
        let mut kx = self.stiffness.mul(x);
        linalg::scale(1.0 / area, &mut kx);
        self.stiffness.mul(&kx)
    }

    /// `Γ_pr x = K⁻¹ M K⁻¹ x`
    pub fn covariance(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.factor.solve(x);
        linalg::scale(self.grid.cell_area(), &mut y);
        self.factor.solve(&y)
    }

    /// Zero-mean draw `K⁻¹ √(hx hy) ξ`.
    pub fn sample_fluctuation(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let s = self.grid.cell_area().sqrt();
        let w: Vec<f64> = (0..self.dim())
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                s * z
            })
            .collect();
        self.factor.solve(&w)
    }
}

pub fn prior_sample(op: &SpdeOperator, mean: &ScalarField, seed: u64) -> Result<ScalarField> {
    mean.check_grid(op.grid())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fluct = op.sample_fluctuation(&mut rng);
    let v = linalg::add(&mean.active(), &fluct);
    Ok(ScalarField::from_active(op.grid(), &v))
}

pub fn apply_precision(op: &SpdeOperator, x: &ScalarField) -> Result<ScalarField> {
    x.check_grid(op.grid())?;
    Ok(ScalarField::from_active(op.grid(), &op.precision(&x.active())))
}

/// `½ <θ - θ̄, Γ_pr⁻¹ (θ - θ̄)>`
pub fn prior_cost(op: &SpdeOperator, mean: &ScalarField, theta: &ScalarField) -> Result<f64> {
    mean.check_grid(op.grid())?;
    theta.check_grid(op.grid())?;
    let r = linalg::sub(&theta.active(), &mean.active());
    Ok(0.5 * linalg::dot(&r, &op.precision(&r)))
}

pub fn prior_grad(op: &SpdeOperator, mean: &ScalarField, theta: &ScalarField) -> Result<ScalarField> {
    mean.check_grid(op.grid())?;
    theta.check_grid(op.grid())?;
    let r = linalg::sub(&theta.active(), &mean.active());
    Ok(ScalarField::from_active(op.grid(), &op.precision(&r)))
}

/// Monte Carlo per-cell variance from `n_samples` draws (seeds `seed + i`).
pub fn pointwise_marginal_variance(op: &SpdeOperator, n_samples: usize, seed: u64) -> Result<ScalarField> {
    if n_samples < 2 {
        return Err(Error::InvalidArgument("need at least two samples".into()));
    }
    let draws = |i: usize| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
        op.sample_fluctuation(&mut rng)
    };
    let var = sample_variance(op.dim(), n_samples, draws);
    Ok(ScalarField::from_active(op.grid(), &var))
}

/// Unbiased per-entry variance of `n` vectors produced by `draw(i)`; chunked in a
/// fixed order so the result does not depend on the thread count.
pub(crate) fn sample_variance(dim: usize, n: usize, draw: impl Fn(usize) -> Vec<f64> + Sync) -> Vec<f64> {
    const CHUNK: usize = 32;
    let partials: Vec<(Vec<f64>, Vec<f64>)> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut s = vec![0.0; dim];
            let mut s2 = vec![0.0; dim];
            for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
                let x = draw(i);
                for k in 0..dim {
                    s[k] += x[k];
                    s2[k] += x[k] * x[k];
                }
            }
            (s, s2)
        })
        .collect();
    let mut s = vec![0.0; dim];
    let mut s2 = vec![0.0; dim];
    for (a, b) in &partials {
        linalg::axpy(1.0, a, &mut s);
        linalg::axpy(1.0, b, &mut s2);
    }
    let nf = n as f64;
    s.iter().zip(&s2).map(|(a, b)| (b - a * a / nf) / (nf - 1.0)).collect()
}

/// Exact per-cell prior variance `diag(K⁻¹ M K⁻¹)`, one solve per cell.
pub fn exact_marginal_variance(op: &SpdeOperator) -> ScalarField {
    let n = op.dim();
    let area = op.grid.cell_area();
    let var: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut e = vec![0.0; n];
            e[i] = 1.0;
            let col = op.factor.solve(&e);
            area * linalg::dot(&col, &col)
        })
        .collect();
    ScalarField::from_active(&op.grid, &var)
}

/// Matérn ν = 1 correlation at distance `r` for correlation length `rho`:
/// `κ r K₁(κ r)` with `κ = √8 / ρ`.
pub fn matern_correlation(r: f64, rho: f64) -> f64 {
    if r <= 0.0 {
        return 1.0;
    }
    let x = 8f64.sqrt() * r / rho;
    x * bessel_k1(x)
}

fn bessel_i1(x: f64) -> f64 {
    let ax = x.abs();
    if ax < 3.75 {
        let y = (x / 3.75).powi(2);
        x * (0.5
            + y * (0.87890594
                + y * (0.51498869 + y * (0.15084934 + y * (0.2658733e-1 + y * (0.301532e-2 + y * 0.32411e-3))))))
    } else {
        let y = 3.75 / ax;
        let mut ans = 0.2282967e-1 + y * (-0.2895312e-1 + y * (0.1787654e-1 - y * 0.420059e-2));
        ans = 0.39894228 + y * (-0.3988024e-1 + y * (-0.362018e-2 + y * (0.163801e-2 + y * (-0.1031555e-1 + y * ans))));
        ans *= ax.exp() / ax.sqrt();
        if x < 0.0 { -ans } else { ans }
    }
}

/// Modified Bessel function of the second kind, order one (polynomial approximations,
/// absolute error below 1e-7 of the scaled value).
pub fn bessel_k1(x: f64) -> f64 {
    assert!(x > 0.0);
    if x <= 2.0 {
        let y = x * x / 4.0;
        (x / 2.0).ln() * bessel_i1(x)
            + (1.0 / x)
                * (1.0
                    + y * (0.15443144
                        + y * (-0.67278579
                            + y * (-0.18156897 + y * (-0.1919402e-1 + y * (-0.110404e-2 + y * (-0.4686e-4)))))))
    } else {
        let y = 2.0 / x;
        ((-x).exp() / x.sqrt())
            * (1.25331414
                + y * (0.23498619
                    + y * (-0.3655620e-1 + y * (0.1504268e-1 + y * (-0.780353e-2 + y * (0.325614e-2 + y * (-0.68245e-3)))))))
    }
}

/// Joint Gaussian prior over a stacked parameter vector.
pub trait GaussianPrior: Sync {
    fn dim(&self) -> usize;
    fn mean(&self) -> &[f64];
    fn apply_precision(&self, x: &[f64]) -> Vec<f64>;
    fn apply_covariance(&self, x: &[f64]) -> Vec<f64>;
    fn sample_fluctuation(&self, rng: &mut ChaCha8Rng) -> Vec<f64>;

    fn cost(&self, theta: &[f64]) -> f64 {
        let r = linalg::sub(theta, self.mean());
        0.5 * linalg::dot(&r, &self.apply_precision(&r))
    }

    fn grad(&self, theta: &[f64]) -> Vec<f64> {
        self.apply_precision(&linalg::sub(theta, self.mean()))
    }
}

/// Independent SPDE priors for logD and logG over the same grid.
#[derive(Debug, Clone)]
pub struct PriorPair {
    pub log_d: SpdeOperator,
    pub log_g: SpdeOperator,
    mean: Vec<f64>,
}

impl PriorPair {
    pub fn new(log_d: SpdeOperator, log_g: SpdeOperator, mean: &ParameterFields) -> Result<Self> {
        if !log_d.grid.same_as(&log_g.grid) {
            return Err(Error::GridMismatch);
        }
        mean.check_grid(&log_d.grid)?;
        Ok(PriorPair { mean: mean.to_vec(), log_d, log_g })
    }

    pub fn assemble(labels: &RegionLabels, hyper: &RegionHyper) -> Result<Self> {
        Self::assemble_with(labels, hyper, SpdeOptions::default())
    }

    pub fn assemble_with(labels: &RegionLabels, hyper: &RegionHyper, opts: SpdeOptions) -> Result<Self> {
        let grid = labels.grid();
        let log_d = assemble_spde_operator_with(grid, labels, hyper, Param::LogD, opts)?;
        let log_g = assemble_spde_operator_with(grid, labels, hyper, Param::LogG, opts)?;
        let mean = ParameterFields::new(
            prior_mean(labels, hyper, Param::LogD)?,
            prior_mean(labels, hyper, Param::LogG)?,
        )?;
        Self::new(log_d, log_g, &mean)
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.log_d.grid
    }

    pub fn mean_fields(&self) -> ParameterFields {
        ParameterFields::from_vec(self.grid(), &self.mean)
    }

    fn blockwise(&self, x: &[f64], f: impl Fn(&SpdeOperator, &[f64]) -> Vec<f64>) -> Vec<f64> {
        let n = self.log_d.dim();
        let mut out = f(&self.log_d, &x[..n]);
        out.extend(f(&self.log_g, &x[n..]));
        out
    }

    /// Parameter draw (deterministic given `seed`).
    pub fn sample(&self, seed: u64) -> ParameterFields {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = linalg::add(&self.mean, &self.sample_fluctuation(&mut rng));
        ParameterFields::from_vec(self.grid(), &s)
    }
}

impl GaussianPrior for PriorPair {
    fn dim(&self) -> usize {
        self.mean.len()
    }
    fn mean(&self) -> &[f64] {
        &self.mean
    }
    fn apply_precision(&self, x: &[f64]) -> Vec<f64> {
        self.blockwise(x, |op, v| op.precision(v))
    }
    fn apply_covariance(&self, x: &[f64]) -> Vec<f64> {
        self.blockwise(x, |op, v| op.covariance(v))
    }
    fn sample_fluctuation(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut s = self.log_d.sample_fluctuation(rng);
        s.extend(self.log_g.sample_fluctuation(rng));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{region_labels_from_masks, BinaryMask};
    use rand::Rng;

    fn uniform_op(nx: usize, ny: usize, h: f64, var: f64, rho: f64) -> (SpdeOperator, ScalarField) {
        let grid = Arc::new(Grid::full(nx, ny, h, h).unwrap());
        let stats = RegionStats { mean: 0.3, variance: var, rho };
        let hyper = RegionHyper {
            log_d: ParamHyper { gm: stats, wm: stats },
            log_g: ParamHyper { gm: stats, wm: stats },
            rho_int: None,
        };
        let labels = RegionLabels::uniform(&grid, Region::Gm);
        let op = assemble_spde_operator(&grid, &labels, &hyper, Param::LogD).unwrap();
        let mean = prior_mean(&labels, &hyper, Param::LogD).unwrap();
        (op, mean)
    }

    #[test]
    fn coefficient_formulas_at_rat_values() {
        // independent evaluation with explicit constants
        let s = 0.2336f64.sqrt();
        let c = hyper_to_coeffs(s, 6.0).unwrap();
        let delta = 1.4142135623730951 / (s * 6.0 * 1.7724538509055159);
        let gamma = 6.0 / (4.0 * s * 2.5066282746310002);
        assert!((c.delta - delta).abs() < 1e-14);
        assert!((c.gamma - gamma).abs() < 1e-14);
        // frozen from an independent 12-digit evaluation
        assert!((c.delta - 0.275139150394).abs() < 1e-11);
        assert!((c.gamma - 1.238126176773).abs() < 1e-11);
        assert!((c.beta - 0.411026955662).abs() < 1e-11);
        let c = hyper_to_coeffs(0.0682f64.sqrt(), 12.0).unwrap();
        assert!((c.delta - 0.254604824077).abs() < 1e-11);
        assert!((c.gamma - 4.582886833391).abs() < 1e-11);
        assert!((c.beta - 0.760701961808).abs() < 1e-11);
    }

    #[test]
    fn doubling_rho_halves_delta_and_doubles_gamma() {
        let a = hyper_to_coeffs(0.7, 3.0).unwrap();
        let b = hyper_to_coeffs(0.7, 6.0).unwrap();
        assert!((b.delta - a.delta / 2.0).abs() < 1e-15);
        assert!((b.gamma - 2.0 * a.gamma).abs() < 1e-15);
        assert!(hyper_to_coeffs(0.0, 1.0).is_err());
        assert!(hyper_to_coeffs(1.0, -1.0).is_err());
    }

    #[test]
    fn constant_field_stencil_on_3x3() {
        // grid must be at least 4x4; use 4x4 with a 3x3 brain in the corner
        let mask: Vec<bool> = (0..16).map(|c| c % 4 < 3 && c / 4 < 3).collect();
        let grid = Arc::new(Grid::new(4, 4, 0.5, 0.5, mask).unwrap());
        let co = hyper_to_coeffs(0.5, 2.0).unwrap();
        let op = SpdeOperator::from_coeffs(&grid, &vec![co; 9], SpdeOptions::default()).unwrap();
        let c = 1.7;
        let out = op.apply_operator(&ScalarField::constant(&grid, c)).unwrap();
        // hand computation: interior rows give delta*c; each boundary face adds beta*len*c/area
        let area = 0.25;
        for (k, &cell) in grid.active_cells().iter().enumerate() {
            let nb = grid.boundary_faces().iter().filter(|b| b.cell == k).count() as f64;
            let expect = co.delta * c + nb * co.beta * 0.5 * c / area;
            assert!((out.get(cell) - expect).abs() < 1e-13, "cell {cell}");
        }
        // centre cell has no boundary faces
        assert!((out.get(5) - co.delta * c).abs() < 1e-13);
    }

    #[test]
    fn operator_is_symmetric() {
        let (op, _) = uniform_op(9, 7, 0.5, 0.3, 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v: Vec<f64> = (0..op.dim()).map(|_| rng.random::<f64>() - 0.5).collect();
        let w: Vec<f64> = (0..op.dim()).map(|_| rng.random::<f64>() - 0.5).collect();
        let a = linalg::dot(&op.apply_stiffness(&v), &w);
        let b = linalg::dot(&v, &op.apply_stiffness(&w));
        assert!((a - b).abs() <= 1e-12 * linalg::norm(&v) * linalg::norm(&w));
        // Rayleigh quotient positive
        assert!(linalg::dot(&v, &op.apply_stiffness(&v)) > 0.0);
    }

    #[test]
    fn samples_are_deterministic_per_seed() {
        let (op, mean) = uniform_op(8, 8, 0.5, 0.3, 2.0);
        let a = prior_sample(&op, &mean, 5).unwrap();
        let b = prior_sample(&op, &mean, 5).unwrap();
        let c = prior_sample(&op, &mean, 6).unwrap();
        assert_eq!(a.values(), b.values());
        assert!(a.values().iter().zip(c.values()).any(|(x, y)| x != y));
    }

    #[test]
    fn cost_and_gradient_vanish_at_mean() {
        let (op, mean) = uniform_op(8, 8, 0.5, 0.3, 2.0);
        assert_eq!(prior_cost(&op, &mean, &mean).unwrap(), 0.0);
        assert!(prior_grad(&op, &mean, &mean).unwrap().values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn prior_gradient_matches_finite_differences() {
        let (op, mean) = uniform_op(8, 6, 0.5, 0.3, 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let theta = ScalarField::from_active(
            op.grid(),
            &(0..op.dim()).map(|_| rng.random::<f64>()).collect::<Vec<_>>(),
        );
        let g = prior_grad(&op, &mean, &theta).unwrap().active();
        let dir: Vec<f64> = (0..op.dim()).map(|_| rng.random::<f64>() - 0.5).collect();
        let eps = 1e-4;
        let shifted = |s: f64| {
            let v: Vec<f64> = theta.active().iter().zip(&dir).map(|(t, d)| t + s * d).collect();
            prior_cost(&op, &mean, &ScalarField::from_active(op.grid(), &v)).unwrap()
        };
        let fd = (shifted(eps) - shifted(-eps)) / (2.0 * eps);
        let an = linalg::dot(&g, &dir);
        assert!((fd - an).abs() / an.abs() < 1e-8, "fd {fd} an {an}");
    }

    #[test]
    fn covariance_inverts_precision() {
        let (op, _) = uniform_op(7, 6, 0.5, 0.3, 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let v: Vec<f64> = (0..op.dim()).map(|_| rng.random::<f64>() - 0.5).collect();
        let back = op.covariance(&op.precision(&v));
        assert!(linalg::norm(&linalg::sub(&back, &v)) < 1e-10 * linalg::norm(&v));
    }

    #[test]
    fn chi_square_mean_matches_dimension() {
        let (op, mean) = uniform_op(10, 10, 0.5, 0.3, 2.0);
        let n = 2000;
        let total: f64 = (0..n)
            .map(|i| {
                let s = prior_sample(&op, &mean, 100 + i).unwrap();
                2.0 * prior_cost(&op, &mean, &s).unwrap()
            })
            .sum();
        let m = total / n as f64;
        assert!((m / op.dim() as f64 - 1.0).abs() < 0.05, "{m}");
    }

    #[test]
    fn monte_carlo_variance_tracks_exact_variance() {
        let (op, _) = uniform_op(20, 20, 0.5, 0.3, 2.0);
        let exact = exact_marginal_variance(&op);
        let mc = pointwise_marginal_variance(&op, 5000, 17).unwrap();
        let gap = exact
            .values()
            .iter()
            .zip(mc.values())
            .map(|(e, m)| ((e - m) / e).abs())
            .fold(0.0, f64::max);
        assert!(gap < 0.1, "{gap}");
    }

    #[test]
    fn robin_closure_limits_boundary_inflation() {
        let ratio = |robin: bool| {
            let grid = Arc::new(Grid::full(30, 30, 1.0, 1.0).unwrap());
            let co = hyper_to_coeffs(0.5, 5.0).unwrap();
            let op = SpdeOperator::from_coeffs(&grid, &vec![co; grid.n_active()], SpdeOptions { robin }).unwrap();
            let var = exact_marginal_variance(&op);
            let interior: Vec<f64> = (0..grid.n_cells())
                .filter(|&c| {
                    let (i, j) = (c % 30, c / 30);
                    (10..20).contains(&i) && (10..20).contains(&j)
                })
                .map(|c| var.get(c))
                .collect();
            let imean = interior.iter().sum::<f64>() / interior.len() as f64;
            var.max() / imean
        };
        let with = ratio(true);
        let without = ratio(false);
        assert!(with < 1.5, "robin ratio {with}");
        assert!(without > 2.0, "neumann ratio {without}");
    }

    #[test]
    fn interior_variance_is_stationary() {
        let (op, _) = uniform_op(40, 40, 0.5, 0.2336, 3.0);
        let var = exact_marginal_variance(&op);
        let grid = op.grid().clone();
        for c in 0..grid.n_cells() {
            let (i, j) = (c % 40, c / 40);
            if (8..32).contains(&i) && (8..32).contains(&j) {
                assert!((var.get(c) / 0.2336 - 1.0).abs() < 0.1, "{}", var.get(c));
            }
        }
    }

    #[test]
    fn region_coefficients_follow_labels() {
        let grid = Arc::new(Grid::full(20, 8, 0.25, 0.25).unwrap());
        let gm = BinaryMask::new(&grid, (0..160).map(|c| c % 20 < 10).collect()).unwrap();
        let wm = BinaryMask::new(&grid, (0..160).map(|c| c % 20 >= 10).collect()).unwrap();
        let labels = region_labels_from_masks(&grid, &gm, &wm, 0.6).unwrap();
        let hyper = RegionHyper::default();
        let op = assemble_spde_operator(&grid, &labels, &hyper, Param::LogD).unwrap();
        let s = hyper.log_d.gm.variance.sqrt();
        let gm_c = hyper_to_coeffs(s, 6.0).unwrap();
        let wm_c = hyper_to_coeffs(s, 12.0).unwrap();
        let int_c = hyper_to_coeffs(s, 0.6).unwrap();
        for (k, l) in labels.active_labels().iter().enumerate() {
            let expect = match l {
                Region::Gm => gm_c,
                Region::Wm => wm_c,
                Region::Interface => int_c,
                Region::Outside => unreachable!(),
            };
            assert!((op.delta()[k] - expect.delta).abs() < 1e-12);
            assert!((op.gamma()[k] - expect.gamma).abs() < 1e-12);
        }
        // interface mean blends the two region means
        let mean = prior_mean(&labels, &hyper, Param::LogD).unwrap();
        for (k, &c) in grid.active_cells().iter().enumerate() {
            let m = mean.get(c);
            match labels.active_labels()[k] {
                Region::Gm => assert_eq!(m, -0.9937),
                Region::Wm => assert_eq!(m, -0.3006),
                _ => assert!(m > -0.9937 && m < -0.3006),
            }
        }
    }

    #[test]
    fn interface_needs_its_own_hyper_when_regions_differ() {
        let grid = Arc::new(Grid::full(20, 8, 0.25, 0.25).unwrap());
        let gm = BinaryMask::new(&grid, (0..160).map(|c| c % 20 < 10).collect()).unwrap();
        let wm = BinaryMask::new(&grid, (0..160).map(|c| c % 20 >= 10).collect()).unwrap();
        let labels = region_labels_from_masks(&grid, &gm, &wm, 0.6).unwrap();
        let hyper = RegionHyper { rho_int: None, ..RegionHyper::default() };
        assert!(matches!(
            assemble_spde_operator(&grid, &labels, &hyper, Param::LogD),
            Err(Error::MissingRegionHyper(_))
        ));
    }

    #[test]
    fn bessel_values() {
        // reference values of K1
        assert!((bessel_k1(0.5) - 1.656441120).abs() < 1e-6);
        assert!((bessel_k1(1.0) - 0.601907230).abs() < 1e-6);
        assert!((bessel_k1(3.0) - 0.040156431).abs() < 1e-7);
        assert!((matern_correlation(1e-9, 1.0) - 1.0).abs() < 1e-6);
    }
}
