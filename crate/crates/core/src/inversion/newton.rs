//! Inexact Gauss–Newton–CG with Armijo backtracking for the MAP point.

use serde::{Deserialize, Serialize};

use super::misfit::Misfit;
use crate::error::{Error, Result};
use crate::linalg;
use crate::prior::GaussianPrior;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NewtonConfig {
    pub max_iterations: usize,
    /// Stop when the gradient norm falls below this fraction of its initial value.
    pub grad_rtol: f64,
    /// Absolute floor on the gradient norm.
    pub grad_atol: f64,
    pub max_cg_iterations: usize,
    /// Upper bound of the forcing term `η_k = min(η_max, sqrt(|g_k| / |g_0|))`.
    pub forcing_max: f64,
    /// Armijo sufficient-decrease constant.
    pub c1: f64,
    pub backtrack_factor: f64,
    pub max_backtracks: usize,
}

impl Default for NewtonConfig {
    fn default() -> Self {
        NewtonConfig {
            max_iterations: 40,
            grad_rtol: 1e-6,
            grad_atol: 1e-14,
            max_cg_iterations: 150,
            forcing_max: 0.5,
            c1: 1e-4,
            backtrack_factor: 0.5,
            max_backtracks: 12,
        }
    }
}

impl NewtonConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("grad_rtol", self.grad_rtol),
            ("forcing_max", self.forcing_max),
            ("c1", self.c1),
            ("backtrack_factor", self.backtrack_factor),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::InvalidArgument(format!("newton.{name} must lie in (0, 1), got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NewtonIteration {
    pub iteration: usize,
    pub cost: f64,
    pub misfit: f64,
    pub regularization: f64,
    /// Gradient norm in the prior-covariance metric, `sqrt(gᵀ Γ_pr g)`.
    pub grad_norm: f64,
    pub cg_iterations: usize,
    pub step_length: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub iterations: Vec<NewtonIteration>,
    pub converged: bool,
    pub reason: String,
    pub initial_grad_norm: f64,
    pub final_grad_norm: f64,
    pub final_cost: f64,
    pub final_misfit: f64,
    pub hessian_applications: usize,
}

impl ConvergenceReport {
    pub fn grad_reduction(&self) -> f64 {
        if self.final_grad_norm == 0.0 {
            f64::INFINITY
        } else {
            self.initial_grad_norm / self.final_grad_norm
        }
    }
}

/// Minimize `misfit(θ) + ½ |θ - θ̄|²_{Γ_pr⁻¹}` starting from `init` (prior mean if `None`).
pub fn compute_map<M: Misfit, P: GaussianPrior + ?Sized>(
    misfit: &M,
    prior: &P,
    cfg: &NewtonConfig,
    init: Option<&[f64]>,
) -> Result<(Vec<f64>, ConvergenceReport)> {
    cfg.validate()?;
    let n = prior.dim();
    if misfit.dim() != n {
        return Err(Error::DimensionMismatch(format!("misfit has {} dof, prior {n}", misfit.dim())));
    }
    let mut theta = init.map(<[f64]>::to_vec).unwrap_or_else(|| prior.mean().to_vec());
    let (mut mcost, mut point) = misfit.evaluate(&theta)?;
    let mut rcost = prior.cost(&theta);
    if !(mcost + rcost).is_finite() {
        return Err(Error::NonFiniteCost);
    }

    let mut iterations = Vec::new();
    let mut g0_norm = f64::NAN;
    let mut hessian_applications = 0;
    let mut converged = false;
    let mut reason = String::from("maximum iterations reached");

    for it in 0..=cfg.max_iterations {
        let g = linalg::add(&misfit.gradient(&point)?, &prior.grad(&theta));
        let pg = prior.apply_covariance(&g);
        let gnorm = linalg::dot(&g, &pg).max(0.0).sqrt();
        if it == 0 {
            g0_norm = gnorm;
        }
        let record = |cg_iterations, step_length| NewtonIteration {
            iteration: it,
            cost: mcost + rcost,
            misfit: mcost,
            regularization: rcost,
            grad_norm: gnorm,
            cg_iterations,
            step_length,
        };
        if gnorm <= cfg.grad_rtol * g0_norm || gnorm <= cfg.grad_atol {
            iterations.push(record(0, 0.0));
            converged = true;
            reason = "gradient tolerance reached".into();
            break;
        }
        if it == cfg.max_iterations {
            iterations.push(record(0, 0.0));
            break;
        }

        let eta = cfg.forcing_max.min((gnorm / g0_norm).sqrt());
        let hess = |v: &[f64]| -> Result<Vec<f64>> {
            Ok(linalg::add(&misfit.gn_apply(&point, v)?, &prior.apply_precision(v)))
        };
        let neg_g: Vec<f64> = g.iter().map(|v| -v).collect();
        let (dir, cg_its) = truncated_cg(&hess, |r| prior.apply_covariance(r), &neg_g, eta, cfg.max_cg_iterations)?;
        hessian_applications += cg_its;

        let slope = linalg::dot(&g, &dir);
        let cost = mcost + rcost;
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..=cfg.max_backtracks {
            let trial: Vec<f64> = theta.iter().zip(&dir).map(|(t, d)| t + alpha * d).collect();
            // solver failures at a trial point count as insufficient decrease
            if let Ok((m, p)) = misfit.evaluate(&trial) {
                let r = prior.cost(&trial);
                if (m + r).is_finite() && m + r <= cost + cfg.c1 * alpha * slope {
                    accepted = Some((trial, m, r, p));
                    break;
                }
            }
            alpha *= cfg.backtrack_factor;
        }
        let Some((trial, m, r, p)) = accepted else {
            return Err(Error::LineSearchFailure { backtracks: cfg.max_backtracks });
        };
        iterations.push(record(cg_its, alpha));
        theta = trial;
        mcost = m;
        rcost = r;
        point = p;
    }

    let last = iterations.last().cloned().expect("at least one iteration is recorded");
    let report = ConvergenceReport {
        converged,
        reason,
        initial_grad_norm: g0_norm,
        final_grad_norm: last.grad_norm,
        final_cost: last.cost,
        final_misfit: last.misfit,
        hessian_applications,
        iterations,
    };
    Ok((theta, report))
}

/// Preconditioned CG on `H x = b` stopped at relative (preconditioned) residual `eta`,
/// at the iteration cap, or on non-positive curvature.
fn truncated_cg(
    hess: &dyn Fn(&[f64]) -> Result<Vec<f64>>,
    precond: impl Fn(&[f64]) -> Vec<f64>,
    b: &[f64],
    eta: f64,
    max_iter: usize,
) -> Result<(Vec<f64>, usize)> {
    let n = b.len();
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut z = precond(&r);
    let mut rz = linalg::dot(&r, &z);
    let target = eta * rz.max(0.0).sqrt();
    let mut p = z.clone();
    for it in 1..=max_iter {
        let hp = hess(&p)?;
        let php = linalg::dot(&p, &hp);
        if php <= 0.0 {
            if it == 1 {
                // fall back to the preconditioned steepest-descent direction
                return Ok((z, it));
            }
            return Ok((x, it));
        }
        let alpha = rz / php;
        linalg::axpy(alpha, &p, &mut x);
        linalg::axpy(-alpha, &hp, &mut r);
        z = precond(&r);
        let rz_new = linalg::dot(&r, &z);
        if rz_new.max(0.0).sqrt() <= target {
            return Ok((x, it));
        }
        let beta = rz_new / rz;
        rz = rz_new;
        for (pi, zi) in p.iter_mut().zip(&z) {
            *pi = zi + beta * *pi;
        }
    }
    Ok((x, max_iter))
}
