//! Cross-validated grid search over prior correlation lengths and noise level, with
//! Pareto selection on (Dice ↑, NTA error ↓).

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{solve_forward, ParameterFields, SolverConfig};
use crate::grid::{RegionLabels, ScalarField};
use crate::inversion::{compute_map, MisfitContext, NewtonConfig};
use crate::metrics::{compare, MetricsConfig};
use crate::phantom::ObservationSeries;
use crate::prior::{PriorPair, RegionHyper};

/// `n` evenly spaced points on `[a, b]`.
pub fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![a],
        _ => (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect(),
    }
}

/// `n` logarithmically spaced points on `[a, b]`, with both ends exact.
pub fn logspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    let mut v: Vec<f64> = linspace(a.ln(), b.ln(), n).into_iter().map(f64::exp).collect();
    if let Some(first) = v.first_mut() {
        *first = a;
    }
    if n > 1 {
        v[n - 1] = b;
    }
    v
}

/// Grid points for `ρ_gm` (mm), `k = ρ_gm / ρ_wm` and the noise standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchSpace {
    pub rho_gm: Vec<f64>,
    pub k: Vec<f64>,
    pub sigma_noise: Vec<f64>,
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            rho_gm: linspace(2.0, 10.0, 5),
            k: linspace(0.5, 1.0, 3),
            sigma_noise: logspace(0.015, 0.5, 4),
        }
    }
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("rho_gm", &self.rho_gm), ("k", &self.k), ("sigma_noise", &self.sigma_noise)] {
            if v.is_empty() {
                return Err(Error::InvalidArgument(format!("search axis {name} is empty")));
            }
            if v.iter().any(|x| !(*x > 0.0 && x.is_finite())) {
                return Err(Error::NonpositiveHyper(format!("search axis {name} has a non-positive value")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rho_gm.len() * self.k.len() * self.sigma_noise.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Every grid point with its axis indices, `ρ_gm` slowest.
    pub fn points(&self) -> Vec<([usize; 3], HyperPoint)> {
        let mut out = Vec::with_capacity(self.len());
        for (i, &rho_gm) in self.rho_gm.iter().enumerate() {
            for (j, &k) in self.k.iter().enumerate() {
                for (l, &sigma_noise) in self.sigma_noise.iter().enumerate() {
                    out.push(([i, j, l], HyperPoint { rho_gm, k, sigma_noise }));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperPoint {
    pub rho_gm: f64,
    pub k: f64,
    pub sigma_noise: f64,
}

impl HyperPoint {
    pub fn rho_wm(&self) -> f64 {
        self.rho_gm / self.k
    }

    pub fn noise_variance(&self) -> f64 {
        self.sigma_noise * self.sigma_noise
    }

    /// `base` with both parameters' correlation lengths set from this point.
    pub fn apply(&self, base: &RegionHyper) -> RegionHyper {
        let mut h = *base;
        for p in [&mut h.log_d, &mut h.log_g] {
            p.gm.rho = self.rho_gm;
            p.wm.rho = self.rho_wm();
        }
        h
    }
}

/// One calibration case: training observations and a held-out day.
#[derive(Debug, Clone)]
pub struct Subject {
    pub labels: RegionLabels,
    pub u0: ScalarField,
    pub start_day: f64,
    pub training: ObservationSeries,
    pub test_day: f64,
    pub test: ScalarField,
}

impl Subject {
    pub fn validate(&self) -> Result<()> {
        let last = self.training.days.last().copied().ok_or_else(|| Error::InvalidArgument("subject has no training days".into()))?;
        if self.test_day <= last {
            return Err(Error::InvalidArgument(format!("testing day {} must follow the last training day {last}", self.test_day)));
        }
        let grid = self.labels.grid();
        self.u0.check_grid(grid)?;
        self.test.check_grid(grid)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub dice: f64,
    pub nta_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub index: [usize; 3],
    pub point: HyperPoint,
    pub per_subject: Vec<Option<Score>>,
    /// Subject-averaged objectives; `None` when any subject failed.
    pub score: Option<Score>,
    pub error: Option<String>,
    pub on_front: bool,
}

impl CellResult {
    pub fn is_valid(&self) -> bool {
        self.score.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub cells: Vec<CellResult>,
    pub chosen: HyperPoint,
    pub chosen_index: usize,
}

/// Indices of the non-dominated points under (Dice maximized, NTA error minimized).
pub fn pareto_front(points: &[Score]) -> Result<Vec<usize>> {
    let valid = |s: &Score| s.dice.is_finite() && s.nta_error.is_finite();
    if !points.iter().any(valid) {
        return Err(Error::NoValidPoints);
    }
    let dominates = |a: &Score, b: &Score| {
        a.dice >= b.dice && a.nta_error <= b.nta_error && (a.dice > b.dice || a.nta_error < b.nta_error)
    };
    Ok((0..points.len())
        .filter(|&i| valid(&points[i]) && !points.iter().any(|q| valid(q) && dominates(q, &points[i])))
        .collect())
}

/// Highest Dice; ties go to the lower NTA error, then the smaller `ρ_gm`.
pub fn select_hyper(front: &[(HyperPoint, Score)]) -> Result<usize> {
    (0..front.len())
        .min_by(|&a, &b| {
            let (pa, sa) = &front[a];
            let (pb, sb) = &front[b];
            sb.dice
                .total_cmp(&sa.dice)
                .then(sa.nta_error.total_cmp(&sb.nta_error))
                .then(pa.rho_gm.total_cmp(&pb.rho_gm))
        })
        .ok_or(Error::NoValidPoints)
}

/// Evaluate every grid cell on every subject (cells in parallel), average the objectives
/// over subjects, and pick a point from the Pareto front. Failing cells are kept but
/// marked invalid.
pub fn grid_search<F>(space: &SearchSpace, n_subjects: usize, evaluate: F) -> Result<SearchResult>
where
    F: Fn(&HyperPoint, usize) -> Result<Score> + Sync,
{
    space.validate()?;
    if n_subjects == 0 {
        return Err(Error::InvalidArgument("grid search needs at least one subject".into()));
    }
    let mut cells: Vec<CellResult> = space
        .points()
        .into_par_iter()
        .map(|(index, point)| {
            let mut error = None;
            let per_subject: Vec<Option<Score>> = (0..n_subjects)
                .map(|s| match evaluate(&point, s) {
                    Ok(sc) if sc.dice.is_finite() && sc.nta_error.is_finite() => Some(sc),
                    Ok(_) => {
                        error.get_or_insert_with(|| format!("subject {s}: non-finite objective"));
                        None
                    }
                    Err(e) => {
                        error.get_or_insert_with(|| format!("subject {s}: {e}"));
                        None
                    }
                })
                .collect();
            let score = if per_subject.iter().all(Option::is_some) {
                let n = n_subjects as f64;
                let scores = per_subject.iter().flatten();
                Some(Score {
                    dice: scores.clone().map(|s| s.dice).sum::<f64>() / n,
                    nta_error: scores.map(|s| s.nta_error).sum::<f64>() / n,
                })
            } else {
                None
            };
            CellResult { index, point, per_subject, score, error, on_front: false }
        })
        .collect();

    let objectives: Vec<Score> =
        cells.iter().map(|c| c.score.unwrap_or(Score { dice: f64::NAN, nta_error: f64::NAN })).collect();
    let front = pareto_front(&objectives)?;
    for &i in &front {
        cells[i].on_front = true;
    }
    let candidates: Vec<(HyperPoint, Score)> = front.iter().map(|&i| (cells[i].point, objectives[i])).collect();
    let chosen_index = front[select_hyper(&candidates)?];
    Ok(SearchResult { chosen: cells[chosen_index].point, chosen_index, cells })
}

/// Settings shared by every MAP calibration in the search.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationSettings {
    pub solver: SolverConfig,
    pub newton: NewtonConfig,
    pub metrics: MetricsConfig,
}

/// Calibrate the MAP on a subject's training days with the prior and noise level of
/// `point`, forecast the testing day and score it against the held-out data.
pub fn evaluate_subject(subject: &Subject, base: &RegionHyper, point: &HyperPoint, settings: &CalibrationSettings) -> Result<Score> {
    subject.validate()?;
    let grid = subject.labels.grid();
    let prior = Arc::new(PriorPair::assemble(&subject.labels, &point.apply(base))?);
    let ctx = MisfitContext::new(
        grid,
        subject.u0.clone(),
        subject.start_day,
        subject.training.clone(),
        point.noise_variance(),
        settings.solver,
    )?;
    let (map, _) = compute_map(&ctx, prior.as_ref(), &settings.newton, None)?;
    let theta = ParameterFields::from_vec(grid, &map);
    let traj = solve_forward(grid, &theta, &subject.u0, &[subject.start_day, subject.test_day], &settings.solver)?;
    let report = compare(&traj.state_at_day(1), &subject.test, &settings.metrics)?;
    Ok(Score { dice: report.dice, nta_error: report.nta_error })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(dice: f64, nta_error: f64) -> Score {
        Score { dice, nta_error }
    }

    #[test]
    fn default_space_spans_the_published_ranges() {
        let sp = SearchSpace::default();
        assert_eq!(sp.rho_gm, vec![2.0, 4.0, 6.0, 8.0, 10.0]);
        assert_eq!(sp.k, vec![0.5, 0.75, 1.0]);
        assert_eq!((sp.sigma_noise[0], sp.sigma_noise[3]), (0.015, 0.5));
        assert_eq!(sp.len(), 60);
    }

    #[test]
    fn pareto_examples() {
        assert_eq!(pareto_front(&[s(0.9, 0.1)]).unwrap(), vec![0]);
        assert_eq!(pareto_front(&[s(0.9, 0.1), s(0.8, 0.2)]).unwrap(), vec![0]);
        assert_eq!(pareto_front(&[s(0.9, 0.2), s(0.8, 0.1)]).unwrap(), vec![0, 1]);
        assert!(matches!(pareto_front(&[s(f64::NAN, 0.1)]), Err(Error::NoValidPoints)));
    }

    #[test]
    fn selection_tie_rules() {
        let p = |rho_gm| HyperPoint { rho_gm, k: 0.5, sigma_noise: 0.1 };
        assert_eq!(select_hyper(&[(p(4.0), s(0.9, 0.2)), (p(6.0), s(0.9, 0.1))]).unwrap(), 1);
        assert_eq!(select_hyper(&[(p(6.0), s(0.9, 0.1)), (p(4.0), s(0.9, 0.1))]).unwrap(), 1);
    }

    #[test]
    fn failing_cells_are_invalid_and_off_the_front() {
        let sp = SearchSpace { rho_gm: vec![2.0, 4.0], k: vec![0.5], sigma_noise: vec![0.1] };
        let r = grid_search(&sp, 2, |p, _| {
            if p.rho_gm == 4.0 {
                Err(Error::StepSize("forced".into()))
            } else {
                Ok(s(0.5, 0.1))
            }
        })
        .unwrap();
        assert!(!r.cells[1].is_valid() && !r.cells[1].on_front);
        assert!(r.cells[1].error.as_deref().unwrap().contains("forced"));
        assert_eq!(r.chosen_index, 0);
    }

    #[test]
    fn hyper_point_sets_correlation_lengths() {
        let h = HyperPoint { rho_gm: 6.0, k: 0.5, sigma_noise: 0.0624 }.apply(&RegionHyper::default());
        assert_eq!(h, RegionHyper::default());
    }
}
