use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{self, ParameterFields, SolverConfig, Trajectory};
use crate::grid::{Grid, ScalarField};
use crate::linalg;
use crate::phantom::ObservationSeries;

/// Data-misfit term of the negative log-posterior, with Gauss–Newton curvature.
pub trait Misfit: Sync {
    /// Linearization state kept between cost, gradient and Hessian evaluations.
    type Point: Send + Sync;

    fn dim(&self) -> usize;
    fn evaluate(&self, theta: &[f64]) -> Result<(f64, Self::Point)>;
    fn gradient(&self, point: &Self::Point) -> Result<Vec<f64>>;
    fn gn_apply(&self, point: &Self::Point, v: &[f64]) -> Result<Vec<f64>>;
}

/// Constant in front of the squared residual in the negative log-likelihood.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LikelihoodScale {
    /// `½ σ⁻² Σ ∫ (u - d)²`
    #[default]
    Half,
    /// `σ⁻² Σ ∫ (u - d)²`, the form without the ½.
    Unit,
}

impl LikelihoodScale {
    pub fn factor(self) -> f64 {
        match self {
            LikelihoodScale::Half => 0.5,
            LikelihoodScale::Unit => 1.0,
        }
    }
}

/// Observations, initial state and noise model for the tumor likelihood.
#[derive(Debug, Clone)]
pub struct MisfitContext {
    grid: Arc<Grid>,
    u0: ScalarField,
    start_day: f64,
    observations: ObservationSeries,
    noise_variance: f64,
    solver: SolverConfig,
    scale: LikelihoodScale,
}

impl MisfitContext {
    /// `u0` is the state on `start_day`; every observation day must come later.
    pub fn new(
        grid: &Arc<Grid>,
        u0: ScalarField,
        start_day: f64,
        observations: ObservationSeries,
        noise_variance: f64,
        solver: SolverConfig,
    ) -> Result<Self> {
        u0.check_grid(grid)?;
        for f in &observations.fields {
            f.check_grid(grid)?;
        }
        if !(noise_variance > 0.0 && noise_variance.is_finite()) {
            return Err(Error::InvalidArgument(format!("noise variance must be positive, got {noise_variance}")));
        }
        if let Some(&first) = observations.days.first() {
            if first <= start_day {
                return Err(Error::InvalidArgument("observation days must follow the initial day".into()));
            }
        }
        Ok(MisfitContext {
            grid: grid.clone(),
            u0,
            start_day,
            observations,
            noise_variance,
            solver,
            scale: LikelihoodScale::Half,
        })
    }

    pub fn with_scale(mut self, scale: LikelihoodScale) -> Self {
        self.scale = scale;
        self
    }

    pub fn with_noise_variance(mut self, noise_variance: f64) -> Self {
        self.noise_variance = noise_variance;
        self
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }
    pub fn u0(&self) -> &ScalarField {
        &self.u0
    }
    pub fn start_day(&self) -> f64 {
        self.start_day
    }
    pub fn observations(&self) -> &ObservationSeries {
        &self.observations
    }
    pub fn noise_variance(&self) -> f64 {
        self.noise_variance
    }
    pub fn solver(&self) -> &SolverConfig {
        &self.solver
    }

    /// Forward days: the initial day followed by every observation day.
    pub fn days(&self) -> Vec<f64> {
        let mut d = vec![self.start_day];
        d.extend(&self.observations.days);
        d
    }

    fn weight(&self) -> f64 {
        2.0 * self.scale.factor() / self.noise_variance * self.grid.cell_area()
    }

    pub fn solve(&self, theta: &ParameterFields) -> Result<Trajectory> {
        theta.check_grid(&self.grid)?;
        forward::solve_forward(&self.grid, theta, &self.u0, &self.days(), &self.solver)
    }
}

pub struct TumorPoint {
    traj: Option<Trajectory>,
    residuals: Vec<Vec<f64>>,
}

impl TumorPoint {
    pub fn trajectory(&self) -> Option<&Trajectory> {
        self.traj.as_ref()
    }
}

impl Misfit for MisfitContext {
    type Point = TumorPoint;

    fn dim(&self) -> usize {
        2 * self.grid.n_active()
    }

    fn evaluate(&self, theta: &[f64]) -> Result<(f64, TumorPoint)> {
        if self.observations.days.is_empty() {
            return Ok((0.0, TumorPoint { traj: None, residuals: Vec::new() }));
        }
        let u0 = self.u0.active();
        let traj = forward::solve_forward_active(&self.grid, theta, &u0, &self.days(), &self.solver)?;
        let mut cost = 0.0;
        let mut residuals = Vec::with_capacity(self.observations.days.len());
        for (i, d) in self.observations.fields.iter().enumerate() {
            let r = linalg::sub(traj.active_at_day(i + 1), &d.active());
            cost += linalg::dot(&r, &r);
            residuals.push(r);
        }
        cost *= 0.5 * self.weight();
        if !cost.is_finite() {
            return Err(Error::NonFiniteCost);
        }
        Ok((cost, TumorPoint { traj: Some(traj), residuals }))
    }

    fn gradient(&self, point: &TumorPoint) -> Result<Vec<f64>> {
        let Some(traj) = &point.traj else {
            return Ok(vec![0.0; self.dim()]);
        };
        let w = self.weight();
        let mut sources = vec![vec![0.0; self.grid.n_active()]];
        sources.extend(point.residuals.iter().map(|r| r.iter().map(|v| w * v).collect::<Vec<_>>()));
        forward::adjoint_active(traj, &sources, &self.solver)
    }

    fn gn_apply(&self, point: &TumorPoint, v: &[f64]) -> Result<Vec<f64>> {
        let Some(traj) = &point.traj else {
            return Ok(vec![0.0; self.dim()]);
        };
        let w = self.weight();
        let mut du = forward::tangent_active(traj, v, &self.solver)?;
        du[0].iter_mut().for_each(|x| *x = 0.0);
        for d in du.iter_mut().skip(1) {
            linalg::scale(w, d);
        }
        forward::adjoint_active(traj, &du, &self.solver)
    }
}

/// Cost and gradient of the tumor misfit at `theta`.
pub fn misfit_cost_grad(ctx: &MisfitContext, theta: &ParameterFields) -> Result<(f64, ParameterFields)> {
    theta.check_grid(&ctx.grid)?;
    let (cost, point) = ctx.evaluate(&theta.to_vec())?;
    let g = ctx.gradient(&point)?;
    Ok((cost, ParameterFields::from_vec(&ctx.grid, &g)))
}

/// Gauss–Newton Hessian action `J^T W J v` at `theta`.
pub fn gn_hessian_apply(ctx: &MisfitContext, theta: &ParameterFields, v: &ParameterFields) -> Result<ParameterFields> {
    theta.check_grid(&ctx.grid)?;
    v.check_grid(&ctx.grid)?;
    let (_, point) = ctx.evaluate(&theta.to_vec())?;
    let hv = ctx.gn_apply(&point, &v.to_vec())?;
    Ok(ParameterFields::from_vec(&ctx.grid, &hv))
}

/// Linear Gaussian surrogate: selected parameter entries observed directly with
/// quadrature weights `weights`, i.e. cost `½ σ⁻² Σ_k w_k (θ_{i_k} - d_k)²`.
#[derive(Debug, Clone)]
pub struct LinearGaussianMisfit {
    pub dim: usize,
    pub observed: Vec<usize>,
    pub weights: Vec<f64>,
    pub data: Vec<f64>,
    pub noise_variance: f64,
}

impl LinearGaussianMisfit {
    /// Every entry observed with weight `area`: Hessian `σ⁻² M`.
    pub fn identity(data: Vec<f64>, area: f64, noise_variance: f64) -> Self {
        let dim = data.len();
        LinearGaussianMisfit {
            dim,
            observed: (0..dim).collect(),
            weights: vec![area; dim],
            data,
            noise_variance,
        }
    }
}

impl Misfit for LinearGaussianMisfit {
    type Point = Vec<f64>;

    fn dim(&self) -> usize {
        self.dim
    }

    fn evaluate(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        let r: Vec<f64> = self.observed.iter().zip(&self.data).map(|(&i, d)| theta[i] - d).collect();
        let cost = 0.5 / self.noise_variance * r.iter().zip(&self.weights).map(|(x, w)| w * x * x).sum::<f64>();
        Ok((cost, r))
    }

    fn gradient(&self, r: &Vec<f64>) -> Result<Vec<f64>> {
        let mut g = vec![0.0; self.dim];
        for ((&i, x), w) in self.observed.iter().zip(r).zip(&self.weights) {
            g[i] += w * x / self.noise_variance;
        }
        Ok(g)
    }

    fn gn_apply(&self, _: &Vec<f64>, v: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim];
        for (&i, w) in self.observed.iter().zip(&self.weights) {
            out[i] += w * v[i] / self.noise_variance;
        }
        Ok(out)
    }
}
