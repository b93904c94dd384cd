//! Reaction-diffusion tumor model on a masked grid, with its exact discrete
//! tangent and adjoint.
//!
//! Each step solves `(M + dt K(D)) u⁺ = M (u + dt G (1 - u) u)`, where `M = hx hy I`
//! and `K` is the finite-volume diffusion matrix with harmonic-mean face
//! diffusivities and no flux through the brain boundary. The tangent and adjoint
//! differentiate exactly this recursion.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, ScalarField};
use crate::linalg::{self, CgOutcome};

/// The inversion unknown: log-diffusivity (log mm²/day) and log-proliferation (log 1/day).
#[derive(Debug, Clone)]
pub struct ParameterFields {
    pub log_d: ScalarField,
    pub log_g: ScalarField,
}

impl ParameterFields {
    pub fn new(log_d: ScalarField, log_g: ScalarField) -> Result<Self> {
        log_g.check_grid(log_d.grid())?;
        Ok(ParameterFields { log_d, log_g })
    }

    pub fn constant(grid: &Arc<Grid>, log_d: f64, log_g: f64) -> Self {
        ParameterFields {
            log_d: ScalarField::constant(grid, log_d),
            log_g: ScalarField::constant(grid, log_g),
        }
    }

    pub fn grid(&self) -> &Arc<Grid> {
        self.log_d.grid()
    }

    /// Stacked active vector `[logD; logG]` of length `2 n_active`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.log_d.active();
        v.extend(self.log_g.active());
        v
    }

    pub fn from_vec(grid: &Arc<Grid>, v: &[f64]) -> Self {
        let n = grid.n_active();
        assert_eq!(v.len(), 2 * n, "parameter vector length");
        ParameterFields {
            log_d: ScalarField::from_active(grid, &v[..n]),
            log_g: ScalarField::from_active(grid, &v[n..]),
        }
    }

    pub fn check_grid(&self, grid: &Arc<Grid>) -> Result<()> {
        self.log_d.check_grid(grid)?;
        self.log_g.check_grid(grid)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    /// Nominal time step (day).
    pub dt: f64,
    /// Relative residual tolerance of the CG solves.
    pub tol: f64,
    pub max_cg_iterations: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig { dt: 0.05, tol: 1e-12, max_cg_iterations: 500 }
    }
}

/// Time steps covering `days`: uniform `dt` with the last sub-step of each gap
/// shortened so every day is hit exactly. Returns the steps and, for every day,
/// the index of the state at that day.
pub fn time_schedule(days: &[f64], dt: f64) -> Result<(Vec<f64>, Vec<usize>)> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::StepSize(format!("time step must be positive, got {dt}")));
    }
    let mut steps = Vec::new();
    let mut at = Vec::with_capacity(days.len());
    if days.is_empty() {
        return Ok((steps, at));
    }
    at.push(0);
    for w in days.windows(2) {
        let gap = w[1] - w[0];
        if !(gap > 0.0) {
            return Err(Error::StepSize(format!("observation days not increasing at {}", w[1])));
        }
        let full = (gap / dt * (1.0 + 1e-12)).floor() as usize;
        steps.extend(std::iter::repeat_n(dt, full));
        let rem = gap - full as f64 * dt;
        if rem > 1e-9 * dt {
            steps.push(rem);
        }
        at.push(steps.len());
    }
    Ok((steps, at))
}

/// Coefficients of one parameter state, precomputed for repeated stencil applications.
#[derive(Debug, Clone)]
pub(crate) struct Dynamics {
    grid: Arc<Grid>,
    area: f64,
    g: Vec<f64>,
    d: Vec<f64>,
    /// Face conductance `w * harmonic(D_a, D_b)`.
    kface: Vec<f64>,
    kdiag: Vec<f64>,
}

impl Dynamics {
    pub(crate) fn new(grid: &Arc<Grid>, theta: &[f64]) -> Result<Self> {
        let n = grid.n_active();
        if theta.len() != 2 * n {
            return Err(Error::DimensionMismatch(format!(
                "parameter vector has {} entries, expected {}",
                theta.len(),
                2 * n
            )));
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite parameter".into()));
        }
        let d: Vec<f64> = theta[..n].iter().map(|v| v.exp()).collect();
        let g: Vec<f64> = theta[n..].iter().map(|v| v.exp()).collect();
        let mut kface = Vec::with_capacity(grid.faces().len());
        let mut kdiag = vec![0.0; n];
        for f in grid.faces() {
            let (da, db) = (d[f.a], d[f.b]);
            let k = f.weight * 2.0 * da * db / (da + db);
            kface.push(k);
            kdiag[f.a] += k;
            kdiag[f.b] += k;
        }
        Ok(Dynamics { grid: grid.clone(), area: grid.cell_area(), g, d, kface, kdiag })
    }

    pub(crate) fn max_growth(&self) -> f64 {
        self.g.iter().cloned().fold(0.0, f64::max)
    }

    /// `y = (M + dt K) x`
    fn apply_system(&self, dt: f64, x: &[f64], y: &mut [f64]) {
        for k in 0..x.len() {
            y[k] = (self.area + dt * self.kdiag[k]) * x[k];
        }
        for (f, &kf) in self.grid.faces().iter().zip(&self.kface) {
            let t = dt * kf;
            y[f.a] -= t * x[f.b];
            y[f.b] -= t * x[f.a];
        }
    }

    fn solve_system(&self, dt: f64, rhs: &[f64], cfg: &SolverConfig) -> Result<(Vec<f64>, CgOutcome)> {
        linalg::pcg(
            |x, y| self.apply_system(dt, x, y),
            |r, z| {
                for k in 0..r.len() {
                    z[k] = r[k] / (self.area + dt * self.kdiag[k]);
                }
            },
            rhs,
            cfg.tol,
            cfg.max_cg_iterations,
        )
    }

    fn step(&self, u: &[f64], dt: f64, cfg: &SolverConfig) -> Result<Vec<f64>> {
        let rhs: Vec<f64> = u
            .iter()
            .zip(&self.g)
            .map(|(&ui, &gi)| self.area * (ui + dt * gi * (1.0 - ui) * ui))
            .collect();
        Ok(self.solve_system(dt, &rhs, cfg)?.0)
    }

    /// `(dK/dlogD · dlogd) u`
    fn diffusion_derivative(&self, dlogd: &[f64], u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; u.len()];
        for f in self.grid.faces() {
            let (da, db) = (self.d[f.a], self.d[f.b]);
            let s = (da + db) * (da + db);
            let dk = f.weight * 2.0 * (db * db * da * dlogd[f.a] + da * da * db * dlogd[f.b]) / s;
            let flux = dk * (u[f.a] - u[f.b]);
            out[f.a] += flux;
            out[f.b] -= flux;
        }
        out
    }

    /// Accumulate `scale * [dK/dlogD (u)]^T p` into `grad`.
    fn diffusion_derivative_transpose(&self, u: &[f64], p: &[f64], scale: f64, grad: &mut [f64]) {
        for f in self.grid.faces() {
            let (da, db) = (self.d[f.a], self.d[f.b]);
            let s = (da + db) * (da + db);
            let t = scale * f.weight * 2.0 * (u[f.a] - u[f.b]) * (p[f.a] - p[f.b]) / s;
            grad[f.a] += t * db * db * da;
            grad[f.b] += t * da * da * db;
        }
    }
}

/// One IMEX step: implicit diffusion, explicit logistic growth.
pub fn imex_step(u: &ScalarField, theta: &ParameterFields, dt: f64, cfg: &SolverConfig) -> Result<ScalarField> {
    let grid = theta.grid();
    u.check_grid(grid)?;
    theta.check_grid(grid)?;
    if !(dt > 0.0) {
        return Err(Error::StepSize(format!("time step must be positive, got {dt}")));
    }
    let dynamics = Dynamics::new(grid, &theta.to_vec())?;
    Ok(ScalarField::from_active(grid, &dynamics.step(&u.active(), dt, cfg)?))
}

/// All states of a forward solve, kept for the adjoint sweep.
#[derive(Debug, Clone)]
pub struct Trajectory {
    grid: Arc<Grid>,
    theta: Vec<f64>,
    cfg: SolverConfig,
    days: Vec<f64>,
    steps: Vec<f64>,
    at_day: Vec<usize>,
    states: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }
    pub fn days(&self) -> &[f64] {
        &self.days
    }
    pub fn step_sizes(&self) -> &[f64] {
        &self.steps
    }
    pub fn n_steps(&self) -> usize {
        self.steps.len()
    }
    /// Time (day, relative to the first observation day) of every stored state.
    pub fn times(&self) -> Vec<f64> {
        let mut t = vec![self.days.first().copied().unwrap_or(0.0)];
        for dt in &self.steps {
            let last = *t.last().unwrap();
            t.push(last + dt);
        }
        t
    }
    /// Active state vector after `k` steps.
    pub fn state(&self, k: usize) -> &[f64] {
        &self.states[k]
    }
    pub fn state_at_day(&self, i: usize) -> ScalarField {
        ScalarField::from_active(&self.grid, &self.states[self.at_day[i]])
    }
    pub fn states_at_days(&self) -> Vec<ScalarField> {
        (0..self.days.len()).map(|i| self.state_at_day(i)).collect()
    }
    pub(crate) fn active_at_day(&self, i: usize) -> &[f64] {
        &self.states[self.at_day[i]]
    }

    fn check(&self, theta: &[f64], cfg: &SolverConfig) -> Result<()> {
        if self.theta.as_slice() != theta {
            return Err(Error::TrajectoryMismatch("parameters differ from the forward solve".into()));
        }
        if *cfg != self.cfg {
            return Err(Error::TrajectoryMismatch("solver configuration differs".into()));
        }
        Ok(())
    }
}

/// Integrate from `u0` (the state at `days[0]`) through every day in `days`.
pub fn solve_forward(
    grid: &Arc<Grid>,
    theta: &ParameterFields,
    u0: &ScalarField,
    days: &[f64],
    cfg: &SolverConfig,
) -> Result<Trajectory> {
    theta.check_grid(grid)?;
    u0.check_grid(grid)?;
    solve_forward_active(grid, &theta.to_vec(), &u0.active(), days, cfg)
}

pub(crate) fn solve_forward_active(
    grid: &Arc<Grid>,
    theta: &[f64],
    u0: &[f64],
    days: &[f64],
    cfg: &SolverConfig,
) -> Result<Trajectory> {
    if days.is_empty() {
        return Err(Error::InvalidArgument("at least one day is required".into()));
    }
    let dynamics = Dynamics::new(grid, theta)?;
    let gmax = dynamics.max_growth();
    if cfg.dt * gmax > 0.5 {
        return Err(Error::StepSize(format!(
            "dt = {} violates the stability guard dt <= 0.5 / max(G) = {}",
            cfg.dt,
            0.5 / gmax
        )));
    }
    let (steps, at_day) = time_schedule(days, cfg.dt)?;
    let mut states = Vec::with_capacity(steps.len() + 1);
    states.push(u0.to_vec());
    for &dt in &steps {
        let next = dynamics.step(states.last().unwrap(), dt, cfg)?;
        states.push(next);
    }
    Ok(Trajectory {
        grid: grid.clone(),
        theta: theta.to_vec(),
        cfg: *cfg,
        days: days.to_vec(),
        steps,
        at_day,
        states,
    })
}

pub(crate) fn tangent_active(traj: &Trajectory, dtheta: &[f64], cfg: &SolverConfig) -> Result<Vec<Vec<f64>>> {
    let n = traj.grid.n_active();
    if dtheta.len() != 2 * n {
        return Err(Error::DimensionMismatch("direction length".into()));
    }
    let dynamics = Dynamics::new(&traj.grid, &traj.theta)?;
    let (dlogd, dlogg) = dtheta.split_at(n);
    let area = dynamics.area;
    let mut du = vec![0.0; n];
    let mut out = Vec::with_capacity(traj.days.len());
    let mut next_day = 0;
    if traj.at_day[0] == 0 {
        out.push(du.clone());
        next_day = 1;
    }
    for (k, &dt) in traj.steps.iter().enumerate() {
        let u = &traj.states[k];
        let u1 = &traj.states[k + 1];
        let dk = dynamics.diffusion_derivative(dlogd, u1);
        let rhs: Vec<f64> = (0..n)
            .map(|c| {
                let g = dynamics.g[c];
                area * ((1.0 + dt * g * (1.0 - 2.0 * u[c])) * du[c] + dt * g * (1.0 - u[c]) * u[c] * dlogg[c])
                    - dt * dk[c]
            })
            .collect();
        du = dynamics.solve_system(dt, &rhs, cfg)?.0;
        while next_day < traj.at_day.len() && traj.at_day[next_day] == k + 1 {
            out.push(du.clone());
            next_day += 1;
        }
    }
    Ok(out)
}

pub(crate) fn adjoint_active(traj: &Trajectory, sources: &[Vec<f64>], cfg: &SolverConfig) -> Result<Vec<f64>> {
    let n = traj.grid.n_active();
    if sources.len() != traj.days.len() {
        return Err(Error::TrajectoryMismatch(format!(
            "{} sources for {} observation days",
            sources.len(),
            traj.days.len()
        )));
    }
    if sources.iter().any(|s| s.len() != n) {
        return Err(Error::DimensionMismatch("source length".into()));
    }
    let dynamics = Dynamics::new(&traj.grid, &traj.theta)?;
    let area = dynamics.area;
    let mut grad = vec![0.0; 2 * n];
    let nsteps = traj.steps.len();

    let mut source_at = vec![None; nsteps + 1];
    for (i, &k) in traj.at_day.iter().enumerate() {
        source_at[k] = Some(i);
    }
    let mut lambda = vec![0.0; n];
    if let Some(i) = source_at[nsteps] {
        linalg::axpy(1.0, &sources[i], &mut lambda);
    }
    for k in (0..nsteps).rev() {
        let dt = traj.steps[k];
        let u = &traj.states[k];
        let u1 = &traj.states[k + 1];
        let p = dynamics.solve_system(dt, &lambda, cfg)?.0;
        let (gd, gg) = grad.split_at_mut(n);
        dynamics.diffusion_derivative_transpose(u1, &p, -dt, gd);
        for c in 0..n {
            let g = dynamics.g[c];
            gg[c] += dt * area * g * (1.0 - u[c]) * u[c] * p[c];
            lambda[c] = area * (1.0 + dt * g * (1.0 - 2.0 * u[c])) * p[c];
        }
        if let Some(i) = source_at[k] {
            linalg::axpy(1.0, &sources[i], &mut lambda);
        }
    }
    Ok(grad)
}

/// Linearized states at every observation day for a parameter direction.
pub fn tangent_solve(
    traj: &Trajectory,
    theta: &ParameterFields,
    dtheta: &ParameterFields,
    cfg: &SolverConfig,
) -> Result<Vec<ScalarField>> {
    theta.check_grid(&traj.grid)?;
    dtheta.check_grid(&traj.grid)?;
    traj.check(&theta.to_vec(), cfg)?;
    let du = tangent_active(traj, &dtheta.to_vec(), cfg)?;
    Ok(du.iter().map(|d| ScalarField::from_active(&traj.grid, d)).collect())
}

/// Gradient of `Σ_i <s_i, u(t_i)>` with respect to the parameters, by a backward sweep
/// that is the exact transpose of [`tangent_solve`].
pub fn adjoint_solve(
    traj: &Trajectory,
    theta: &ParameterFields,
    sources: &[ScalarField],
    cfg: &SolverConfig,
) -> Result<ParameterFields> {
    theta.check_grid(&traj.grid)?;
    traj.check(&theta.to_vec(), cfg)?;
    for s in sources {
        s.check_grid(&traj.grid)?;
    }
    let sources: Vec<Vec<f64>> = sources.iter().map(|s| s.active()).collect();
    let grad = adjoint_active(traj, &sources, cfg)?;
    Ok(ParameterFields::from_vec(&traj.grid, &grad))
}
