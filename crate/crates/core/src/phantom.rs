//! Synthetic brains, ground-truth parameter fields and noisy tumor observations for
//! twin experiments.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{solve_forward, ParameterFields, SolverConfig};
use crate::grid::{region_labels_from_masks, BinaryMask, Grid, Region, RegionLabels, ScalarField};
use crate::prior::{prior_mean, Param, PriorPair, RegionHyper};
use crate::registration::{downsample_image, gaussian_smooth, DisplacementField, Image, LabelImage};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ellipse {
    pub center: [f64; 2],
    pub semi_axes: [f64; 2],
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let dx = (x - self.center[0]) / self.semi_axes[0];
        let dy = (y - self.center[1]) / self.semi_axes[1];
        dx * dx + dy * dy <= 1.0
    }
}

/// Band of white matter along a circular arc (a stand-in for the corpus callosum).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WmArc {
    pub center: [f64; 2],
    pub radius: f64,
    pub thickness: f64,
    /// Angular extent in degrees, counter-clockwise from +x.
    pub start_deg: f64,
    pub end_deg: f64,
}

impl WmArc {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.center[0], y - self.center[1]);
        let r = dx.hypot(dy);
        if (r - self.radius).abs() > 0.5 * self.thickness {
            return false;
        }
        let a = dy.atan2(dx).to_degrees().rem_euclid(360.0);
        let (s, e) = (self.start_deg.rem_euclid(360.0), self.end_deg.rem_euclid(360.0));
        if s <= e {
            (s..=e).contains(&a)
        } else {
            a >= s || a <= e
        }
    }

    /// Points on the outer rim of the band, for containment checks.
    fn rim(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        let span = (self.end_deg - self.start_deg).rem_euclid(360.0);
        (0..=180).flat_map(move |k| {
            let a = (self.start_deg + span * k as f64 / 180.0).to_radians();
            [-0.5, 0.5].map(|s| {
                let r = self.radius + s * self.thickness;
                (self.center[0] + r * a.cos(), self.center[1] + r * a.sin())
            })
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    pub nx: usize,
    pub ny: usize,
    /// Cell size (mm) in both directions.
    pub h: f64,
    pub brain: Ellipse,
    pub white_matter: WmArc,
    pub tumor_center: [f64; 2],
    pub tumor_radius: f64,
    pub tumor_peak: f64,
    /// Imaging days; the first is the day of the initial state.
    pub days: Vec<f64>,
    pub noise_variance: f64,
    /// Clamp noisy observations to [0, 1].
    pub clamp: bool,
    pub seed: u64,
    pub band_halfwidth: f64,
    /// Atlas resolution relative to the subject grid.
    pub atlas_upsample: usize,
    /// Amplitude (mm) of the analytic atlas deformation.
    pub deformation: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            nx: 41,
            ny: 61,
            h: 0.25,
            brain: Ellipse { center: [5.125, 7.625], semi_axes: [4.9, 7.4] },
            white_matter: WmArc {
                center: [5.125, 4.0],
                radius: 4.0,
                thickness: 2.0,
                start_deg: 25.0,
                end_deg: 155.0,
            },
            tumor_center: [4.125, 6.125],
            tumor_radius: 2.5,
            tumor_peak: 0.9,
            days: vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0],
            noise_variance: 3.9e-3,
            clamp: true,
            seed: 20170101,
            band_halfwidth: 0.6,
            atlas_upsample: 2,
            deformation: 0.5,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.h > 0.0) || self.nx < 4 || self.ny < 4 {
            return Err(Error::InvalidArgument("phantom grid needs nx, ny >= 4 and h > 0".into()));
        }
        if self.days.is_empty() || self.days.windows(2).any(|w| w[1] <= w[0]) || self.days[0] < 0.0 {
            return Err(Error::InvalidArgument("phantom days must be non-negative and strictly increasing".into()));
        }
        if !(self.tumor_peak > 0.0 && self.tumor_peak <= 1.0) {
            return Err(Error::InvalidArgument(format!("tumor peak must lie in (0, 1], got {}", self.tumor_peak)));
        }
        if !(self.tumor_radius >= 0.0) || !(self.noise_variance >= 0.0) || !(self.band_halfwidth >= 0.0) {
            return Err(Error::InvalidArgument("tumor radius, noise variance and band must be non-negative".into()));
        }
        if self.atlas_upsample == 0 {
            return Err(Error::InvalidArgument("atlas upsampling factor must be at least 1".into()));
        }
        Ok(())
    }

    /// Tissue code of the subject geometry at a point (mm).
    fn tissue(&self, x: f64, y: f64) -> Region {
        if !self.brain.contains(x, y) {
            Region::Outside
        } else if self.white_matter.contains(x, y) {
            Region::Wm
        } else {
            Region::Gm
        }
    }

    /// Smooth atlas-to-subject map: the atlas shows the subject tissue at `y + w(y)`.
    pub fn deformation_at(&self, x: f64, y: f64) -> (f64, f64) {
        let (lx, ly) = (self.nx as f64 * self.h, self.ny as f64 * self.h);
        let a = self.deformation;
        (
            a * (PI * x / lx).sin() * (2.0 * PI * y / ly).sin(),
            a * (2.0 * PI * x / lx).sin() * (PI * y / ly).sin(),
        )
    }
}

/// Tumor-fraction fields at the observation days (the initial day excluded).
#[derive(Debug, Clone)]
pub struct ObservationSeries {
    pub days: Vec<f64>,
    pub fields: Vec<ScalarField>,
}

impl ObservationSeries {
    pub fn new(days: Vec<f64>, fields: Vec<ScalarField>) -> Result<Self> {
        if days.len() != fields.len() {
            return Err(Error::DimensionMismatch(format!("{} days but {} fields", days.len(), fields.len())));
        }
        if days.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument("observation days must be strictly increasing".into()));
        }
        if let Some(f) = fields.first() {
            for g in &fields[1..] {
                g.check_grid(f.grid())?;
            }
        }
        Ok(ObservationSeries { days, fields })
    }

    pub fn empty() -> Self {
        ObservationSeries { days: Vec::new(), fields: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.days.len()
    }

    pub fn is_empty(&self) -> bool {
        self.days.is_empty()
    }

    /// Keep the observations with the given indices, in order.
    pub fn select(&self, indices: &[usize]) -> Self {
        ObservationSeries {
            days: indices.iter().map(|&i| self.days[i]).collect(),
            fields: indices.iter().map(|&i| self.fields[i].clone()).collect(),
        }
    }

    pub fn field_at(&self, day: f64) -> Option<&ScalarField> {
        self.days.iter().position(|&d| d == day).map(|i| &self.fields[i])
    }
}

/// Everything a twin experiment needs from the synthetic subject.
#[derive(Debug, Clone)]
pub struct Phantom {
    pub grid: Arc<Grid>,
    pub labels: RegionLabels,
    pub gm: BinaryMask,
    pub wm: BinaryMask,
    pub subject_image: Image,
    /// Atlas intensities at `atlas_upsample` times the subject resolution.
    pub atlas_image: Image,
    pub atlas_labels: LabelImage,
    /// Displacement (subject pixels) that maps the downsampled atlas onto the subject.
    pub true_displacement: DisplacementField,
    pub u0: ScalarField,
}

fn tissue_intensity(r: Region) -> f64 {
    match r {
        Region::Outside => 0.0,
        Region::Gm => 0.45,
        Region::Wm => 0.9,
        Region::Interface => 0.675,
    }
}

/// Rasterize the phantom geometry, its deformed atlas, and the initial tumor.
pub fn make_brain_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let (nx, ny, h) = (spec.nx, spec.ny, spec.h);
    let center = |i: usize, j: usize| ((i as f64 + 0.5) * h, (j as f64 + 0.5) * h);

    let brain = &spec.brain;
    if let Some((x, y)) = spec.white_matter.rim().find(|&(x, y)| !brain.contains(x, y)) {
        return Err(Error::GeometryOutOfBounds(format!("white matter leaves the brain near ({x:.2}, {y:.2}) mm")));
    }
    let [tx, ty] = spec.tumor_center;
    let tumor_inside = (0..64).all(|k| {
        let a = 2.0 * PI * k as f64 / 64.0;
        brain.contains(tx + spec.tumor_radius * a.cos(), ty + spec.tumor_radius * a.sin())
    });
    if !brain.contains(tx, ty) || !tumor_inside {
        return Err(Error::GeometryOutOfBounds("tumor leaves the brain".into()));
    }

    let tissue: Vec<Region> =
        (0..nx * ny).map(|c| { let (x, y) = center(c % nx, c / nx); spec.tissue(x, y) }).collect();
    let grid = Arc::new(Grid::new(nx, ny, h, h, tissue.iter().map(|&r| r != Region::Outside).collect())?);
    let gm = BinaryMask::new(&grid, tissue.iter().map(|&r| r == Region::Gm).collect())?;
    let wm = BinaryMask::new(&grid, tissue.iter().map(|&r| r == Region::Wm).collect())?;
    let labels = region_labels_from_masks(&grid, &gm, &wm, spec.band_halfwidth)?;

    let u0 = ScalarField::from_fn(&grid, |x, y| {
        if spec.tumor_radius <= 0.0 {
            return 0.0;
        }
        let s = ((x - tx).powi(2) + (y - ty).powi(2)) / spec.tumor_radius.powi(2);
        if s < 1.0 { spec.tumor_peak * (1.0 - s * s).powi(2) } else { 0.0 }
    });

    // images are rendered on a fine raster and block-averaged, like a scanner would
    let f = spec.atlas_upsample;
    let hf = h / f as f64;
    let (fw, fh) = (nx * f, ny * f);
    let fine_center = |k: usize| (((k % fw) as f64 + 0.5) * hf, ((k / fw) as f64 + 0.5) * hf);
    let smooth = |codes: &[Region]| {
        let raw: Vec<f64> = codes.iter().map(|&r| tissue_intensity(r)).collect();
        gaussian_smooth(&raw, fw, fh, 0.5 * f as f64)
    };
    let subject_fine: Vec<Region> = (0..fw * fh).map(|k| { let (x, y) = fine_center(k); spec.tissue(x, y) }).collect();
    let atlas_fine: Vec<Region> = (0..fw * fh)
        .map(|k| {
            let (x, y) = fine_center(k);
            let (wx, wy) = spec.deformation_at(x, y);
            spec.tissue(x + wx, y + wy)
        })
        .collect();
    let subject_image = downsample_image(&Image::new(fw, fh, smooth(&subject_fine))?, f, f)?;
    let atlas_image = Image::new(fw, fh, smooth(&atlas_fine))?;
    let atlas_labels = LabelImage::new(fw, fh, atlas_fine.iter().map(|r| r.code()).collect())?;

    // atlas(y) = subject(y + w(y)); the subject is recovered at x + u(x) with x + u + w(x + u) = x
    let mut dx = Vec::with_capacity(nx * ny);
    let mut dy = Vec::with_capacity(nx * ny);
    for c in 0..nx * ny {
        let (x, y) = center(c % nx, c / nx);
        let (mut ux, mut uy) = (0.0, 0.0);
        for _ in 0..50 {
            let (wx, wy) = spec.deformation_at(x + ux, y + uy);
            ux = -wx;
            uy = -wy;
        }
        dx.push(ux / h);
        dy.push(uy / h);
    }
    let true_displacement = DisplacementField::new(nx, ny, dx, dy)?;

    Ok(Phantom { grid, labels, gm, wm, subject_image, atlas_image, atlas_labels, true_displacement, u0 })
}

/// One draw of (logD, logG) from the prior; deterministic in `seed`.
pub fn draw_truth_fields(prior: &PriorPair, seed: u64) -> ParameterFields {
    prior.sample(seed)
}

/// Off-prior truth: region-wise constant means plus one smooth Gaussian bump per field.
pub fn off_prior_truth(
    labels: &RegionLabels,
    hyper: &RegionHyper,
    bump_center: [f64; 2],
    bump_width: f64,
    amplitudes: (f64, f64),
) -> Result<ParameterFields> {
    let grid = labels.grid();
    let bump = |a: f64| {
        ScalarField::from_fn(grid, |x, y| {
            let r2 = (x - bump_center[0]).powi(2) + (y - bump_center[1]).powi(2);
            a * (-r2 / (2.0 * bump_width * bump_width)).exp()
        })
    };
    let add = |m: ScalarField, b: ScalarField| {
        let v: Vec<f64> = m.values().iter().zip(b.values()).map(|(x, y)| x + y).collect();
        ScalarField::from_values(grid, v)
    };
    ParameterFields::new(
        add(prior_mean(labels, hyper, Param::LogD)?, bump(amplitudes.0))?,
        add(prior_mean(labels, hyper, Param::LogG)?, bump(amplitudes.1))?,
    )
}

/// Forward-solve from `u0` on `days[0]` and perturb every later day with i.i.d. noise.
pub fn synthesize_observations(
    grid: &Arc<Grid>,
    theta: &ParameterFields,
    u0: &ScalarField,
    days: &[f64],
    noise_variance: f64,
    seed: u64,
    clamp: bool,
    solver: &SolverConfig,
) -> Result<ObservationSeries> {
    Ok(add_noise(&noiseless_observations(grid, theta, u0, days, solver)?, noise_variance, seed, clamp))
}

/// Exact model states at `days[1..]`.
pub fn noiseless_observations(
    grid: &Arc<Grid>,
    theta: &ParameterFields,
    u0: &ScalarField,
    days: &[f64],
    solver: &SolverConfig,
) -> Result<ObservationSeries> {
    if days.is_empty() || days[0] < 0.0 {
        return Err(Error::InvalidArgument("observation days must start at a non-negative day".into()));
    }
    let traj = solve_forward(grid, theta, u0, days, solver)?;
    ObservationSeries::new(days[1..].to_vec(), traj.states_at_days()[1..].to_vec())
}

/// Add N(0, σ²) noise to every brain cell of every field, optionally clamping to [0, 1].
pub fn add_noise(clean: &ObservationSeries, noise_variance: f64, seed: u64, clamp: bool) -> ObservationSeries {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sigma = noise_variance.max(0.0).sqrt();
    let fields = clean
        .fields
        .iter()
        .map(|f| {
            let noisy: Vec<f64> = f
                .active()
                .iter()
                .map(|&u| {
                    let z: f64 = rng.sample(StandardNormal);
                    let d = u + sigma * z;
                    if clamp { d.clamp(0.0, 1.0) } else { d }
                })
                .collect();
            ScalarField::from_active(f.grid(), &noisy)
        })
        .collect();
    ObservationSeries { days: clean.days.clone(), fields }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prior::{ParamHyper, RegionStats};

    #[test]
    fn default_phantom_has_expected_shape() {
        let spec = PhantomSpec::default();
        let p = make_brain_phantom(&spec).unwrap();
        assert_eq!((p.grid.nx(), p.grid.ny()), (41, 61));
        assert!(p.labels.count(Region::Wm) > 50);
        assert!(p.labels.count(Region::Interface) > 0);
        let c = p.grid.cell(16, 24);
        assert_eq!(p.grid.center(c), (4.125, 6.125));
        assert!((p.u0.get(c) - spec.tumor_peak).abs() < 1e-15);
        assert_eq!(p.u0.max(), spec.tumor_peak);
    }

    #[test]
    fn zero_radius_gives_zero_tumor() {
        let spec = PhantomSpec { tumor_radius: 0.0, ..Default::default() };
        let p = make_brain_phantom(&spec).unwrap();
        assert!(p.u0.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_deformation_gives_identical_atlas() {
        let spec = PhantomSpec { deformation: 0.0, ..Default::default() };
        let p = make_brain_phantom(&spec).unwrap();
        let down = downsample_image(&p.atlas_image, 2, 2).unwrap();
        assert_eq!(down, p.subject_image);
        assert_eq!(p.true_displacement.sup_norm(), 0.0);
    }

    #[test]
    fn geometry_leaving_the_brain_is_rejected() {
        let spec = PhantomSpec { tumor_center: [0.5, 7.625], ..Default::default() };
        assert!(matches!(make_brain_phantom(&spec), Err(Error::GeometryOutOfBounds(_))));
        let mut spec = PhantomSpec::default();
        spec.white_matter.radius = 8.0;
        assert!(matches!(make_brain_phantom(&spec), Err(Error::GeometryOutOfBounds(_))));
    }

    fn tiny_hyper(var: f64) -> RegionHyper {
        let s = |mean| RegionStats { mean, variance: var, rho: 2.0 };
        RegionHyper {
            log_d: ParamHyper { gm: s(-1.0), wm: s(-0.3) },
            log_g: ParamHyper { gm: s(-0.8), wm: s(-0.85) },
            rho_int: Some(0.6),
        }
    }

    #[test]
    fn truth_draws_collapse_to_means_and_depend_on_seed() {
        let p = make_brain_phantom(&PhantomSpec::default()).unwrap();
        let prior = PriorPair::assemble(&p.labels, &tiny_hyper(1e-16)).unwrap();
        let t = draw_truth_fields(&prior, 3);
        let mean = prior.mean_fields().to_vec();
        let gap = t.to_vec().iter().zip(&mean).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(gap < 1e-6, "{gap}");

        let prior = PriorPair::assemble(&p.labels, &tiny_hyper(0.2)).unwrap();
        let a = draw_truth_fields(&prior, 3).to_vec();
        assert_eq!(a, draw_truth_fields(&prior, 3).to_vec());
        let b = draw_truth_fields(&prior, 4).to_vec();
        assert!(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) > 0.0);
    }

    #[test]
    fn noiseless_data_matches_forward_and_stays_in_range() {
        let spec = PhantomSpec::default();
        let p = make_brain_phantom(&spec).unwrap();
        let theta = ParameterFields::constant(&p.grid, -0.7, -0.8);
        let cfg = SolverConfig::default();
        let obs = synthesize_observations(&p.grid, &theta, &p.u0, &spec.days, 0.0, 1, false, &cfg).unwrap();
        let traj = solve_forward(&p.grid, &theta, &p.u0, &spec.days, &cfg).unwrap();
        assert_eq!(obs.days, spec.days[1..]);
        for (i, f) in obs.fields.iter().enumerate() {
            assert_eq!(f.values(), traj.state_at_day(i + 1).values());
            assert!(f.min() >= 0.0 && f.max() <= 1.0);
        }
    }

    #[test]
    fn noise_has_the_requested_spread() {
        let grid = Arc::new(Grid::full(8, 8, 0.25, 0.25).unwrap());
        let clean = ObservationSeries::new(vec![1.0], vec![ScalarField::constant(&grid, 0.5)]).unwrap();
        let var = 3.9e-3;
        let n = 1000;
        let mut sum = vec![0.0; 64];
        let mut sq = vec![0.0; 64];
        for r in 0..n {
            let d = add_noise(&clean, var, r, true);
            for (k, v) in d.fields[0].active().iter().enumerate() {
                sum[k] += v;
                sq[k] += v * v;
            }
        }
        for k in 0..64 {
            let m = sum[k] / n as f64;
            let s = ((sq[k] - n as f64 * m * m) / (n - 1) as f64).sqrt();
            assert!((s / var.sqrt() - 1.0).abs() < 0.05, "cell {k}: {s}");
        }
    }

    #[test]
    fn zero_tumor_stays_zero_and_noise_averages_out() {
        let spec = PhantomSpec { tumor_radius: 0.0, ..Default::default() };
        let p = make_brain_phantom(&spec).unwrap();
        let theta = ParameterFields::constant(&p.grid, -0.7, -0.8);
        let cfg = SolverConfig::default();
        let clean = noiseless_observations(&p.grid, &theta, &p.u0, &[0.0, 1.0], &cfg).unwrap();
        assert!(clean.fields[0].values().iter().all(|&v| v == 0.0));
        let reps = 200;
        let mut mean = 0.0;
        for r in 0..reps {
            mean += add_noise(&clean, 3.9e-3, r, false).fields[0].active().iter().sum::<f64>();
        }
        mean /= (reps * p.grid.n_active() as u64) as f64;
        assert!(mean.abs() < 1e-3, "{mean}");
    }
}
