//! Tumor shape and area metrics: indicators, Dice, normalized tumor area, iso-contours,
//! boundary margins and kernel density estimates.

use std::collections::HashMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{BinaryMask, ScalarField};

/// Cells with `u >= cutoff` (ties count as tumor).
pub fn tumor_indicator(u: &ScalarField, cutoff: f64) -> BinaryMask {
    let grid = u.grid();
    let values = (0..grid.n_cells()).map(|c| grid.in_brain(c) && u.get(c) >= cutoff).collect();
    BinaryMask::new(grid, values).expect("values cover the grid")
}

fn overlap(a: &BinaryMask, b: &BinaryMask) -> Result<usize> {
    a.check_grid(b)?;
    Ok(a.values().iter().zip(b.values()).filter(|(x, y)| **x && **y).count())
}

/// `2|a ∩ b| / (|a| + |b|)`, and 1 when both masks are empty.
pub fn dice(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    let i = overlap(a, b)?;
    let s = a.count() + b.count();
    Ok(if s == 0 { 1.0 } else { 2.0 * i as f64 / s as f64 })
}

fn brain_cells(brain: &BinaryMask) -> Result<f64> {
    match brain.count() {
        0 => Err(Error::EmptyBrain),
        n => Ok(n as f64),
    }
}

/// Normalized tumor area `|mask| / |brain|`.
pub fn nta(mask: &BinaryMask, brain: &BinaryMask) -> Result<f64> {
    mask.check_grid(brain)?;
    Ok(mask.count() as f64 / brain_cells(brain)?)
}

/// Symmetric-difference area between two indicators over the brain area.
pub fn nta_indicator_error(model: &BinaryMask, data: &BinaryMask, brain: &BinaryMask) -> Result<f64> {
    model.check_grid(brain)?;
    let i = overlap(model, data)?;
    Ok((model.count() + data.count() - 2 * i) as f64 / brain_cells(brain)?)
}

/// `|nta_model − nta_data| / nta_data`; infinite when only the data is empty.
pub fn relative_nta_gap(model: &BinaryMask, data: &BinaryMask, brain: &BinaryMask) -> Result<f64> {
    let (m, d) = (nta(model, brain)?, nta(data, brain)?);
    Ok(if d == 0.0 {
        if m == 0.0 { 0.0 } else { f64::INFINITY }
    } else {
        (m - d).abs() / d
    })
}

/// Thresholds used to turn model and data fields into indicators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    /// Model indicator: `u >= cutoff`.
    pub cutoff: f64,
    /// Data indicator for Dice: `d >= data_dice_cutoff`.
    pub data_dice_cutoff: f64,
    /// Data indicator for NTA: `d > data_nta_threshold`.
    pub data_nta_threshold: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig { cutoff: 0.5, data_dice_cutoff: 0.5, data_nta_threshold: 0.0 }
    }
}

impl MetricsConfig {
    fn data_nta_mask(&self, data: &ScalarField) -> BinaryMask {
        let grid = data.grid();
        let values = (0..grid.n_cells()).map(|c| grid.in_brain(c) && data.get(c) > self.data_nta_threshold).collect();
        BinaryMask::new(grid, values).expect("values cover the grid")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnsembleStats {
    pub n: usize,
    pub dice_mean: f64,
    pub dice_std: f64,
    pub nta_mean: f64,
    pub nta_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dice: f64,
    pub nta_model: f64,
    pub nta_data: f64,
    /// Symmetric-difference area over brain area.
    pub nta_error: f64,
    /// `|nta_model − nta_data| / nta_data` (`null` in JSON when infinite).
    pub nta_relative_gap: f64,
    pub boundary_margin_mm: Option<f64>,
    pub ensemble: Option<EnsembleStats>,
}

/// Compare one model field against one data field.
pub fn compare(model: &ScalarField, data: &ScalarField, cfg: &MetricsConfig) -> Result<MetricsReport> {
    data.check_grid(model.grid())?;
    let brain = BinaryMask::brain(model.grid());
    let m = tumor_indicator(model, cfg.cutoff);
    let d_dice = tumor_indicator(data, cfg.data_dice_cutoff);
    let d_nta = cfg.data_nta_mask(data);
    Ok(MetricsReport {
        dice: dice(&m, &d_dice)?,
        nta_model: nta(&m, &brain)?,
        nta_data: nta(&d_nta, &brain)?,
        nta_error: nta_indicator_error(&m, &d_nta, &brain)?,
        nta_relative_gap: relative_nta_gap(&m, &d_nta, &brain)?,
        boundary_margin_mm: None,
        ensemble: None,
    })
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 { v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (m, var.sqrt())
}

/// Dice and model NTA statistics of an ensemble of forecasts against one data field.
pub fn ensemble_stats(samples: &[ScalarField], data: &ScalarField, cfg: &MetricsConfig) -> Result<EnsembleStats> {
    let reports = samples.iter().map(|s| compare(s, data, cfg)).collect::<Result<Vec<_>>>()?;
    let (dice_mean, dice_std) = mean_std(&reports.iter().map(|r| r.dice).collect::<Vec<_>>());
    let (nta_mean, nta_std) = mean_std(&reports.iter().map(|r| r.nta_model).collect::<Vec<_>>());
    Ok(EnsembleStats { n: samples.len(), dice_mean, dice_std, nta_mean, nta_std })
}

/// Closed iso-contours, vertices in mm.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Boundary {
    pub polylines: Vec<Vec<[f64; 2]>>,
}

impl Boundary {
    pub fn is_empty(&self) -> bool {
        self.polylines.is_empty()
    }

    pub fn segments(&self) -> impl Iterator<Item = ([f64; 2], [f64; 2])> + '_ {
        self.polylines.iter().flat_map(|p| (0..p.len()).map(move |k| (p[k], p[(k + 1) % p.len()])))
    }

    pub fn length(&self) -> f64 {
        self.segments().map(|(a, b)| (b[0] - a[0]).hypot(b[1] - a[1])).sum()
    }

    /// Even–odd point-in-polygon test over all polylines.
    pub fn contains(&self, p: [f64; 2]) -> bool {
        let mut inside = false;
        for (a, b) in self.segments() {
            if (a[1] > p[1]) != (b[1] > p[1]) {
                let x = a[0] + (p[1] - a[1]) / (b[1] - a[1]) * (b[0] - a[0]);
                if p[0] < x {
                    inside = !inside;
                }
            }
        }
        inside
    }

    /// Distance from `p` to the nearest segment.
    pub fn distance(&self, p: [f64; 2]) -> f64 {
        self.segments().map(|(a, b)| point_segment_distance(p, a, b)).fold(f64::INFINITY, f64::min)
    }
}

fn point_segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 { 0.0 } else { (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0) };
    (p[0] - a[0] - t * dx).hypot(p[1] - a[1] - t * dy)
}

/// Edge of the dual (cell-center) lattice: horizontal from `(i, j)` to `(i+1, j)` or
/// vertical from `(i, j)` to `(i, j+1)`, in padded coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
struct EdgeKey(usize, usize, bool);

/// Marching-squares contour of `u` at `level` over cell centers. Cells outside the brain
/// and a one-cell ring around the grid count as below the level, so every contour closes.
/// Saddles are resolved by comparing the mean of the four corners with the level.
pub fn extract_boundary(u: &ScalarField, level: f64) -> Boundary {
    let grid = u.grid();
    let (nx, ny) = (grid.nx(), grid.ny());
    let (px, py) = (nx + 2, ny + 2);
    let value = |i: usize, j: usize| -> f64 {
        if i == 0 || j == 0 || i > nx || j > ny {
            return f64::NEG_INFINITY;
        }
        let c = grid.cell(i - 1, j - 1);
        if grid.in_brain(c) { u.get(c) } else { f64::NEG_INFINITY }
    };
    let pos = |i: usize, j: usize| [(i as f64 - 0.5) * grid.hx(), (j as f64 - 0.5) * grid.hy()];
    let vertex = |e: EdgeKey| -> [f64; 2] {
        let EdgeKey(i, j, vertical) = e;
        let (i2, j2) = if vertical { (i, j + 1) } else { (i + 1, j) };
        let (va, vb) = (value(i, j), value(i2, j2));
        let (a, b) = (pos(i, j), pos(i2, j2));
        // a masked-out endpoint puts the crossing on that cell's center-side midpoint
        let t = if va.is_finite() && vb.is_finite() {
            ((level - va) / (vb - va)).clamp(0.0, 1.0)
        } else {
            0.5
        };
        [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]
    };

    let mut links: HashMap<EdgeKey, Vec<EdgeKey>> = HashMap::new();
    let mut link = |a: EdgeKey, b: EdgeKey| {
        links.entry(a).or_default().push(b);
        links.entry(b).or_default().push(a);
    };
    for j in 0..py - 1 {
        for i in 0..px - 1 {
            let v = [value(i, j), value(i + 1, j), value(i + 1, j + 1), value(i, j + 1)];
            let inside = v.map(|x| x >= level);
            let code = inside.iter().enumerate().fold(0u8, |acc, (k, &b)| acc | ((b as u8) << k));
            if code == 0 || code == 15 {
                continue;
            }
            let e = [EdgeKey(i, j, false), EdgeKey(i + 1, j, true), EdgeKey(i, j + 1, false), EdgeKey(i, j, true)];
            match code {
                5 | 10 => {
                    let finite: Vec<f64> = v.iter().copied().filter(|x| x.is_finite()).collect();
                    let center_inside = finite.len() == 4 && finite.iter().sum::<f64>() / 4.0 >= level;
                    // corners 0 and 2 inside (code 5): a center inside joins them
                    if (code == 5) == center_inside {
                        link(e[0], e[1]);
                        link(e[2], e[3]);
                    } else {
                        link(e[3], e[0]);
                        link(e[1], e[2]);
                    }
                }
                _ => {
                    let crossed: Vec<EdgeKey> = (0..4).filter(|&k| inside[k] != inside[(k + 1) % 4]).map(|k| e[k]).collect();
                    link(crossed[0], crossed[1]);
                }
            }
        }
    }

    let mut keys: Vec<EdgeKey> = links.keys().copied().collect();
    keys.sort();
    let mut visited: HashMap<EdgeKey, bool> = HashMap::new();
    let mut polylines = Vec::new();
    for start in keys {
        if visited.contains_key(&start) {
            continue;
        }
        let mut poly = Vec::new();
        let (mut prev, mut cur) = (start, start);
        loop {
            visited.insert(cur, true);
            poly.push(vertex(cur));
            let next = links[&cur].iter().copied().find(|&n| n != prev && !visited.contains_key(&n));
            match next {
                Some(n) => {
                    prev = cur;
                    cur = n;
                }
                None => break,
            }
        }
        if poly.len() >= 3 {
            polylines.push(poly);
        }
    }
    Boundary { polylines }
}

/// Mean distance from every sample-boundary vertex to the nearest reference segment,
/// averaged over samples. Samples without a contour are skipped.
pub fn boundary_margin(samples: &[Boundary], reference: &Boundary) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::EmptyReference);
    }
    let per_sample: Vec<f64> = samples
        .iter()
        .filter(|s| !s.is_empty())
        .map(|s| {
            let d: Vec<f64> = s.polylines.iter().flatten().map(|&p| reference.distance(p)).collect();
            d.iter().sum::<f64>() / d.len() as f64
        })
        .collect();
    if per_sample.is_empty() {
        return Ok(f64::NAN);
    }
    Ok(per_sample.iter().sum::<f64>() / per_sample.len() as f64)
}

/// Gaussian kernel density estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Kde {
    pub values: Vec<f64>,
    pub bandwidth: f64,
}

/// Curve of `(x, density)` pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KdeCurve {
    pub x: Vec<f64>,
    pub density: Vec<f64>,
    pub bandwidth: f64,
}

impl Kde {
    /// Bandwidth defaults to Silverman's rule `1.06 σ̂ n^{-1/5}`.
    pub fn new(values: &[f64], bandwidth: Option<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::DegenerateData("kde needs at least two values".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::DegenerateData("kde values must be finite".into()));
        }
        let (_, sd) = mean_std(values);
        if sd == 0.0 {
            return Err(Error::DegenerateData(format!("all {} values equal {}", values.len(), values[0])));
        }
        let bandwidth = bandwidth.unwrap_or(1.06 * sd * (values.len() as f64).powf(-0.2));
        if !(bandwidth > 0.0) {
            return Err(Error::InvalidArgument("kde bandwidth must be positive".into()));
        }
        Ok(Kde { values: values.to_vec(), bandwidth })
    }

    pub fn density(&self, x: f64) -> f64 {
        let h = self.bandwidth;
        let norm = 1.0 / (self.values.len() as f64 * h * (2.0 * PI).sqrt());
        norm * self.values.iter().map(|v| (-0.5 * ((x - v) / h).powi(2)).exp()).sum::<f64>()
    }

    /// Density on `n` equispaced points spanning the data ± 4 bandwidths.
    pub fn curve(&self, n: usize) -> KdeCurve {
        let lo = self.values.iter().copied().fold(f64::INFINITY, f64::min) - 4.0 * self.bandwidth;
        let hi = self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 4.0 * self.bandwidth;
        let n = n.max(2);
        let x: Vec<f64> = (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect();
        let density = x.iter().map(|&t| self.density(t)).collect();
        KdeCurve { x, density, bandwidth: self.bandwidth }
    }
}

/// Default-resolution KDE curve (512 points).
pub fn kde(values: &[f64], bandwidth: Option<f64>) -> Result<KdeCurve> {
    Ok(Kde::new(values, bandwidth)?.curve(512))
}
