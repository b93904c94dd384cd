//! Demons deformable registration and atlas label transfer.

use std::collections::VecDeque;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{region_labels_from_masks, BinaryMask, Grid, Region, RegionLabels};

/// Grey-level image, row-major (`y * width + x`).
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if width < 2 || height < 2 {
            return Err(Error::DimensionMismatch(format!("image must be at least 2x2, got {width}x{height}")));
        }
        if values.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "{} intensities for a {width}x{height} image",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("image intensities must be finite".into()));
        }
        Ok(Image { width, height, values })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        let values = (0..height)
            .flat_map(|y| (0..width).map(move |x| (x, y)))
            .map(|(x, y)| f(x as f64, y as f64))
            .collect();
        Self::new(width, height, values)
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    /// Mean squared intensity difference.
    pub fn mse(&self, other: &Image) -> Result<f64> {
        self.check_dims(other.width, other.height)?;
        let s: f64 = self.values.iter().zip(&other.values).map(|(a, b)| (a - b) * (a - b)).sum();
        Ok(s / self.values.len() as f64)
    }

    fn check_dims(&self, width: usize, height: usize) -> Result<()> {
        if (self.width, self.height) != (width, height) {
            return Err(Error::DimensionMismatch(format!(
                "{}x{} vs {width}x{height}",
                self.width, self.height
            )));
        }
        Ok(())
    }

    /// Bilinear sample at continuous pixel coordinates, clamped to the border.
    fn bilinear(&self, x: f64, y: f64) -> f64 {
        let x = x.clamp(0.0, (self.width - 1) as f64);
        let y = y.clamp(0.0, (self.height - 1) as f64);
        let (x0, y0) = (x.floor() as usize, y.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(self.width - 1), (y0 + 1).min(self.height - 1));
        let (tx, ty) = (x - x0 as f64, y - y0 as f64);
        let top = (1.0 - tx) * self.get(x0, y0) + tx * self.get(x1, y0);
        let bottom = (1.0 - tx) * self.get(x0, y1) + tx * self.get(x1, y1);
        (1.0 - ty) * top + ty * bottom
    }
}

/// Integer label image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelImage {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<i64>,
}

impl LabelImage {
    pub fn new(width: usize, height: usize, labels: Vec<i64>) -> Result<Self> {
        if labels.len() != width * height {
            return Err(Error::DimensionMismatch(format!("{} labels for a {width}x{height} image", labels.len())));
        }
        Ok(LabelImage { width, height, labels })
    }

    pub fn from_regions(labels: &RegionLabels) -> Self {
        let g = labels.grid();
        LabelImage {
            width: g.nx(),
            height: g.ny(),
            labels: labels.labels().iter().map(|r| r.code()).collect(),
        }
    }
}

/// Per-pixel displacement in pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    pub width: usize,
    pub height: usize,
    pub dx: Vec<f64>,
    pub dy: Vec<f64>,
}

impl DisplacementField {
    pub fn zeros(width: usize, height: usize) -> Self {
        DisplacementField { width, height, dx: vec![0.0; width * height], dy: vec![0.0; width * height] }
    }

    pub fn new(width: usize, height: usize, dx: Vec<f64>, dy: Vec<f64>) -> Result<Self> {
        if dx.len() != width * height || dy.len() != width * height {
            return Err(Error::DimensionMismatch("displacement components must cover the image".into()));
        }
        if dx.iter().chain(&dy).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("displacements must be finite".into()));
        }
        Ok(DisplacementField { width, height, dx, dy })
    }

    /// Largest displacement magnitude.
    pub fn sup_norm(&self) -> f64 {
        self.dx.iter().zip(&self.dy).map(|(x, y)| x.hypot(*y)).fold(0.0, f64::max)
    }

    /// Mean displacement over the pixels where `mask` is true.
    pub fn mean_over(&self, mask: &[bool]) -> (f64, f64) {
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
        for ((x, y), &m) in self.dx.iter().zip(&self.dy).zip(mask) {
            if m {
                sx += x;
                sy += y;
                n += 1;
            }
        }
        let n = n.max(1) as f64;
        (sx / n, sy / n)
    }

    fn check_dims(&self, width: usize, height: usize) -> Result<()> {
        if (self.width, self.height) != (width, height) {
            return Err(Error::DimensionMismatch(format!(
                "displacement is {}x{}, image {width}x{height}",
                self.width, self.height
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DemonsParams {
    pub iterations: usize,
    /// Standard deviation (pixels) of the Gaussian applied to the total field.
    pub smoothing_sigma: f64,
    /// Largest per-iteration update (pixels).
    pub max_step: f64,
    /// Stop once the relative MSE change drops below this value.
    pub tolerance: f64,
}

impl Default for DemonsParams {
    fn default() -> Self {
        DemonsParams { iterations: 300, smoothing_sigma: 1.0, max_step: 0.5, tolerance: 1e-4 }
    }
}

impl DemonsParams {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::InvalidArgument("demons iterations must be at least 1".into()));
        }
        if !(self.smoothing_sigma >= 0.0) || !(self.max_step > 0.0) || !(self.tolerance >= 0.0) {
            return Err(Error::InvalidArgument("demons smoothing, step and tolerance must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    Bilinear,
    Nearest,
}

/// Block average over `fx × fy` blocks; partial blocks at the far edges are padded
/// by replicating the last row/column.
pub fn downsample_image(img: &Image, fx: usize, fy: usize) -> Result<Image> {
    if fx == 0 || fy == 0 {
        return Err(Error::InvalidArgument("downsampling factors must be at least 1".into()));
    }
    let (w, h) = (img.width.div_ceil(fx), img.height.div_ceil(fy));
    let mut out = Vec::with_capacity(w * h);
    for by in 0..h {
        for bx in 0..w {
            let mut s = 0.0;
            for y in by * fy..(by + 1) * fy {
                for x in bx * fx..(bx + 1) * fx {
                    s += img.get(x.min(img.width - 1), y.min(img.height - 1));
                }
            }
            out.push(s / (fx * fy) as f64);
        }
    }
    // a block average of a valid image is valid even when it shrinks below 2x2
    Ok(Image { width: w, height: h, values: out })
}

/// Majority label over `fx × fy` blocks; ties go to the smallest label value.
pub fn downsample_labels(img: &LabelImage, fx: usize, fy: usize) -> Result<LabelImage> {
    if fx == 0 || fy == 0 {
        return Err(Error::InvalidArgument("downsampling factors must be at least 1".into()));
    }
    let (w, h) = (img.width.div_ceil(fx), img.height.div_ceil(fy));
    let mut out = Vec::with_capacity(w * h);
    let mut block = Vec::with_capacity(fx * fy);
    for by in 0..h {
        for bx in 0..w {
            block.clear();
            for y in by * fy..(by + 1) * fy {
                for x in bx * fx..(bx + 1) * fx {
                    block.push(img.labels[y.min(img.height - 1) * img.width + x.min(img.width - 1)]);
                }
            }
            block.sort_unstable();
            let (mut best, mut best_n) = (block[0], 0);
            let mut i = 0;
            while i < block.len() {
                let j = block[i..].iter().take_while(|&&v| v == block[i]).count();
                if j > best_n {
                    best = block[i];
                    best_n = j;
                }
                i += j;
            }
            out.push(best);
        }
    }
    LabelImage::new(w, h, out)
}

/// Separable Gaussian blur with border replication; `sigma = 0` is the identity.
pub fn gaussian_smooth(values: &[f64], width: usize, height: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return values.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;

    let mut tmp = vec![0.0; values.len()];
    for y in 0..height {
        for x in 0..width {
            tmp[y * width + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * values[y * width + clamp(x as isize + k as isize - radius, width)])
                .sum();
        }
    }
    let mut out = vec![0.0; values.len()];
    for y in 0..height {
        for x in 0..width {
            out[y * width + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * tmp[clamp(y as isize + k as isize - radius, height) * width + x])
                .sum();
        }
    }
    out
}

/// `out(x) = img(x + disp(x))`, clamping samples to the image border.
pub fn warp_image(img: &Image, disp: &DisplacementField, interp: Interpolation) -> Result<Image> {
    disp.check_dims(img.width, img.height)?;
    let (w, h) = (img.width, img.height);
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let k = y * w + x;
            let (sx, sy) = (x as f64 + disp.dx[k], y as f64 + disp.dy[k]);
            out.push(match interp {
                Interpolation::Bilinear => img.bilinear(sx, sy),
                Interpolation::Nearest => {
                    let (ix, iy) = nearest_pixel(sx, sy, w, h);
                    img.get(ix, iy)
                }
            });
        }
    }
    Image::new(w, h, out)
}

/// Nearest-neighbour warp of a label image; never creates new label values.
pub fn warp_labels(labels: &LabelImage, disp: &DisplacementField) -> Result<LabelImage> {
    disp.check_dims(labels.width, labels.height)?;
    let (w, h) = (labels.width, labels.height);
    let out = (0..w * h)
        .map(|k| {
            let (ix, iy) = nearest_pixel((k % w) as f64 + disp.dx[k], (k / w) as f64 + disp.dy[k], w, h);
            labels.labels[iy * w + ix]
        })
        .collect();
    LabelImage::new(w, h, out)
}

fn nearest_pixel(x: f64, y: f64, w: usize, h: usize) -> (usize, usize) {
    let r = |v: f64, n: usize| (v + 0.5).floor().clamp(0.0, (n - 1) as f64) as usize;
    (r(x, w), r(y, h))
}

/// Central-difference gradient (one-sided at the border).
fn gradient(img: &Image) -> (Vec<f64>, Vec<f64>) {
    let (w, h) = (img.width, img.height);
    let mut gx = vec![0.0; w * h];
    let mut gy = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let (xl, xr) = (x.saturating_sub(1), (x + 1).min(w - 1));
            let (yl, yr) = (y.saturating_sub(1), (y + 1).min(h - 1));
            gx[y * w + x] = (img.get(xr, y) - img.get(xl, y)) / (xr - xl) as f64;
            gy[y * w + x] = (img.get(x, yr) - img.get(x, yl)) / (yr - yl) as f64;
        }
    }
    (gx, gy)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemonsResult {
    pub displacement: DisplacementField,
    /// MSE before the first iteration followed by the MSE after every accepted update.
    pub mse_history: Vec<f64>,
    pub iterations: usize,
}

/// Thirion demons: estimate `u` so that `moving(x + u(x)) ≈ static(x)`.
pub fn demons_register(fixed: &Image, moving: &Image, p: &DemonsParams) -> Result<DisplacementField> {
    Ok(demons_register_traced(fixed, moving, p)?.displacement)
}

/// [`demons_register`] with the per-iteration MSE trace.
///
/// Each iteration computes the passive demons force from the static gradient, clamps it
/// to `max_step`, adds it to the total field and smooths the total field. An update that
/// would raise the MSE is retried with half the step; the trace is therefore
/// non-increasing.
pub fn demons_register_traced(fixed: &Image, moving: &Image, p: &DemonsParams) -> Result<DemonsResult> {
    p.validate()?;
    moving.check_dims(fixed.width, fixed.height)?;
    let (w, h) = (fixed.width, fixed.height);
    let (gx, gy) = gradient(fixed);
    if gx.iter().chain(&gy).all(|g| g.abs() < 1e-12) {
        return Err(Error::DegenerateImage);
    }

    let mut disp = DisplacementField::zeros(w, h);
    let mut mse = moving.mse(fixed)?;
    let mut history = vec![mse];
    let mut iterations = 0;
    let mut scale = 1.0;

    while iterations < p.iterations && mse > 0.0 {
        iterations += 1;
        let warped = warp_image(moving, &disp, Interpolation::Bilinear)?;
        let mut fx = vec![0.0; w * h];
        let mut fy = vec![0.0; w * h];
        for k in 0..w * h {
            let diff = warped.values[k] - fixed.values[k];
            let denom = gx[k] * gx[k] + gy[k] * gy[k] + diff * diff;
            if denom < 1e-12 {
                continue;
            }
            let (mut ux, mut uy) = (-diff * gx[k] / denom, -diff * gy[k] / denom);
            let mag = ux.hypot(uy);
            if mag > p.max_step {
                ux *= p.max_step / mag;
                uy *= p.max_step / mag;
            }
            fx[k] = ux;
            fy[k] = uy;
        }

        let mut accepted = None;
        for _ in 0..10 {
            let tx: Vec<f64> = disp.dx.iter().zip(&fx).map(|(d, f)| d + scale * f).collect();
            let ty: Vec<f64> = disp.dy.iter().zip(&fy).map(|(d, f)| d + scale * f).collect();
            let cand = DisplacementField {
                width: w,
                height: h,
                dx: gaussian_smooth(&tx, w, h, p.smoothing_sigma),
                dy: gaussian_smooth(&ty, w, h, p.smoothing_sigma),
            };
            let m = warp_image(moving, &cand, Interpolation::Bilinear)?.mse(fixed)?;
            if m <= mse {
                accepted = Some((cand, m));
                break;
            }
            scale *= 0.5;
        }
        let Some((cand, m)) = accepted else { break };
        let change = (mse - m) / mse;
        disp = cand;
        mse = m;
        history.push(m);
        // let the step recover after successful iterations
        scale = (scale * 2.0).min(1.0);
        if change < p.tolerance {
            break;
        }
    }
    Ok(DemonsResult { displacement: disp, mse_history: history, iterations })
}

/// Warp atlas labels onto the subject grid, restrict to its brain, fill brain cells that
/// received no tissue label from the nearest labelled tissue, and add the interface band.
///
/// The atlas may be sampled at an integer multiple of the grid resolution; each cell then
/// takes the atlas pixel nearest to its displaced centre (`disp` is in grid pixels).
pub fn transfer_labels(
    atlas_labels: &LabelImage,
    disp: &DisplacementField,
    grid: &Arc<Grid>,
    band_halfwidth: f64,
) -> Result<RegionLabels> {
    let (nx, ny) = (grid.nx(), grid.ny());
    let (aw, ah) = (atlas_labels.width, atlas_labels.height);
    let (fx, fy) = (aw / nx, ah / ny);
    if fx == 0 || fy == 0 || aw != fx * nx || ah != fy * ny {
        return Err(Error::DimensionMismatch(format!(
            "atlas labels are {aw}x{ah}, not an integer multiple of the {nx}x{ny} grid"
        )));
    }
    disp.check_dims(nx, ny)?;
    for &l in &atlas_labels.labels {
        Region::from_code(l)?;
    }
    let n = grid.n_cells();
    let warped: Vec<i64> = (0..n)
        .map(|c| {
            // pixel k of the atlas covers [k, k + 1) in its own units
            let x = ((c % nx) as f64 + 0.5 + disp.dx[c]) * fx as f64 - 0.5;
            let y = ((c / nx) as f64 + 0.5 + disp.dy[c]) * fy as f64 - 0.5;
            let (ix, iy) = nearest_pixel(x, y, aw, ah);
            atlas_labels.labels[iy * aw + ix]
        })
        .collect();
    let mut tissue: Vec<Option<Region>> = (0..n)
        .map(|c| match Region::from_code(warped[c]) {
            Ok(r @ (Region::Gm | Region::Wm)) if grid.in_brain(c) => Some(r),
            _ => None,
        })
        .collect();

    // breadth-first fill inside the brain; the scan order fixes tie-breaking
    let mut queue: VecDeque<usize> = (0..n).filter(|&c| tissue[c].is_some()).collect();
    if queue.is_empty() {
        for &c in grid.active_cells() {
            tissue[c] = Some(Region::Gm);
        }
    }
    while let Some(c) = queue.pop_front() {
        let (i, j) = (c % nx, c / nx);
        let mut nbrs = Vec::with_capacity(4);
        if i > 0 {
            nbrs.push(c - 1);
        }
        if i + 1 < nx {
            nbrs.push(c + 1);
        }
        if j > 0 {
            nbrs.push(c - nx);
        }
        if j + 1 < ny {
            nbrs.push(c + nx);
        }
        for nb in nbrs {
            if grid.in_brain(nb) && tissue[nb].is_none() {
                tissue[nb] = tissue[c];
                queue.push_back(nb);
            }
        }
    }
    let gm = BinaryMask::new(grid, tissue.iter().map(|t| *t == Some(Region::Gm)).collect())?;
    let wm = BinaryMask::new(grid, tissue.iter().map(|t| *t == Some(Region::Wm)).collect())?;
    region_labels_from_masks(grid, &gm, &wm, band_halfwidth)
}

/// Register an atlas onto a subject image and transfer its labels onto the subject grid.
/// The atlas may be sampled at an integer multiple of the subject resolution; it is
/// block-averaged down to the subject size for registration, while labels are read at full resolution.
pub fn segment_brain(
    subject: &Image,
    atlas: &Image,
    atlas_labels: &LabelImage,
    grid: &Arc<Grid>,
    params: &DemonsParams,
    band_halfwidth: f64,
) -> Result<(RegionLabels, DisplacementField)> {
    if (subject.width(), subject.height()) != (grid.nx(), grid.ny()) {
        return Err(Error::DimensionMismatch(format!(
            "subject image is {}x{}, grid {}x{}",
            subject.width(),
            subject.height(),
            grid.nx(),
            grid.ny()
        )));
    }
    if (atlas_labels.width, atlas_labels.height) != (atlas.width(), atlas.height()) {
        return Err(Error::DimensionMismatch("atlas labels and atlas image differ in size".into()));
    }
    let (fx, fy) = (atlas.width() / subject.width(), atlas.height() / subject.height());
    if fx == 0 || fy == 0 || atlas.width() != fx * subject.width() || atlas.height() != fy * subject.height() {
        return Err(Error::DimensionMismatch(format!(
            "atlas {}x{} is not an integer multiple of the subject {}x{}",
            atlas.width(),
            atlas.height(),
            subject.width(),
            subject.height()
        )));
    }
    let moving = downsample_image(atlas, fx, fy)?;
    let disp = demons_register(subject, &moving, params)?;
    // labels are sampled at full atlas resolution: block majorities erode thin structures
    let labels = transfer_labels(atlas_labels, &disp, grid, band_halfwidth)?;
    Ok((labels, disp))
}
