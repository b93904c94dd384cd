//! Masked 2D structured grids and the fields that live on them.
//!
//! Cells are indexed row-major, `j * nx + i`, with cell centers at
//! `((i + 0.5) hx, (j + 0.5) hy)` in mm. Numerical kernels work on *active*
//! vectors that hold one entry per brain cell, in increasing full-index order.

use std::collections::VecDeque;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const NO_CELL: usize = usize::MAX;

/// A face shared by two active cells. `weight` is face length over center distance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Face {
    pub a: usize,
    pub b: usize,
    pub weight: f64,
}

/// A face between an active cell and the outside of the brain (or the grid edge).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryFace {
    pub cell: usize,
    pub length: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    nx: usize,
    ny: usize,
    hx: f64,
    hy: f64,
    mask: Vec<bool>,
    active: Vec<usize>,
    index: Vec<usize>,
    faces: Vec<Face>,
    boundary: Vec<BoundaryFace>,
}

impl Grid {
    pub fn new(nx: usize, ny: usize, hx: f64, hy: f64, brain_mask: Vec<bool>) -> Result<Self> {
        if nx < 4 || ny < 4 {
            return Err(Error::DimensionMismatch(format!(
                "grid must be at least 4x4, got {nx}x{ny}"
            )));
        }
        if brain_mask.len() != nx * ny {
            return Err(Error::DimensionMismatch(format!(
                "mask has {} cells, expected {}",
                brain_mask.len(),
                nx * ny
            )));
        }
        if !(hx > 0.0 && hy > 0.0 && hx.is_finite() && hy.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "cell sizes must be positive, got hx={hx} hy={hy}"
            )));
        }
        let active: Vec<usize> = (0..nx * ny).filter(|&c| brain_mask[c]).collect();
        if active.is_empty() {
            return Err(Error::EmptyMask);
        }
        let mut index = vec![NO_CELL; nx * ny];
        for (k, &c) in active.iter().enumerate() {
            index[c] = k;
        }
        let components = count_components(nx, ny, &brain_mask);
        if components != 1 {
            return Err(Error::DisconnectedMask { components });
        }

        let mut faces = Vec::new();
        let mut boundary = Vec::new();
        for (k, &c) in active.iter().enumerate() {
            let (i, j) = (c % nx, c / nx);
            // east and north faces are owned by this cell; west and south only for the boundary
            if i + 1 < nx && brain_mask[c + 1] {
                faces.push(Face { a: k, b: index[c + 1], weight: hy / hx });
            } else {
                boundary.push(BoundaryFace { cell: k, length: hy });
            }
            if j + 1 < ny && brain_mask[c + nx] {
                faces.push(Face { a: k, b: index[c + nx], weight: hx / hy });
            } else {
                boundary.push(BoundaryFace { cell: k, length: hx });
            }
            if i == 0 || !brain_mask[c - 1] {
                boundary.push(BoundaryFace { cell: k, length: hy });
            }
            if j == 0 || !brain_mask[c - nx] {
                boundary.push(BoundaryFace { cell: k, length: hx });
            }
        }

        Ok(Grid { nx, ny, hx, hy, mask: brain_mask, active, index, faces, boundary })
    }

    /// Grid with every cell inside the brain.
    pub fn full(nx: usize, ny: usize, hx: f64, hy: f64) -> Result<Self> {
        Self::new(nx, ny, hx, hy, vec![true; nx * ny])
    }

    pub fn nx(&self) -> usize {
        self.nx
    }
    pub fn ny(&self) -> usize {
        self.ny
    }
    pub fn hx(&self) -> f64 {
        self.hx
    }
    pub fn hy(&self) -> f64 {
        self.hy
    }
    pub fn cell_area(&self) -> f64 {
        self.hx * self.hy
    }
    pub fn n_cells(&self) -> usize {
        self.nx * self.ny
    }
    /// Number of brain cells (degrees of freedom of a scalar field).
    pub fn n_active(&self) -> usize {
        self.active.len()
    }
    pub fn mask(&self) -> &[bool] {
        &self.mask
    }
    pub fn in_brain(&self, cell: usize) -> bool {
        self.mask[cell]
    }
    /// Full index of each active cell.
    pub fn active_cells(&self) -> &[usize] {
        &self.active
    }
    pub fn active_index(&self, cell: usize) -> Option<usize> {
        let k = self.index[cell];
        (k != NO_CELL).then_some(k)
    }
    pub fn faces(&self) -> &[Face] {
        &self.faces
    }
    pub fn boundary_faces(&self) -> &[BoundaryFace] {
        &self.boundary
    }
    pub fn cell(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }
    pub fn center(&self, cell: usize) -> (f64, f64) {
        let (i, j) = (cell % self.nx, cell / self.nx);
        ((i as f64 + 0.5) * self.hx, (j as f64 + 0.5) * self.hy)
    }
    pub fn active_center(&self, k: usize) -> (f64, f64) {
        self.center(self.active[k])
    }
    /// Largest index distance between neighbouring active cells.
    pub fn bandwidth(&self) -> usize {
        self.faces.iter().map(|f| f.b - f.a).max().unwrap_or(0)
    }

    /// Scatter an active vector into a full row-major array (zeros outside).
    pub fn scatter(&self, active: &[f64]) -> Vec<f64> {
        let mut full = vec![0.0; self.n_cells()];
        for (k, &c) in self.active.iter().enumerate() {
            full[c] = active[k];
        }
        full
    }

    pub fn gather(&self, full: &[f64]) -> Vec<f64> {
        self.active.iter().map(|&c| full[c]).collect()
    }

    /// Same discretization: dimensions, spacing and mask.
    pub fn same_as(self: &Arc<Self>, other: &Arc<Self>) -> bool {
        Arc::ptr_eq(self, other) || **self == **other
    }
}

fn count_components(nx: usize, ny: usize, mask: &[bool]) -> usize {
    let mut seen = vec![false; nx * ny];
    let mut components = 0;
    let mut queue = VecDeque::new();
    for start in 0..nx * ny {
        if !mask[start] || seen[start] {
            continue;
        }
        components += 1;
        seen[start] = true;
        queue.push_back(start);
        while let Some(c) = queue.pop_front() {
            let (i, j) = (c % nx, c / nx);
            let mut visit = |n: usize| {
                if mask[n] && !seen[n] {
                    seen[n] = true;
                    queue.push_back(n);
                }
            };
            if i > 0 {
                visit(c - 1);
            }
            if i + 1 < nx {
                visit(c + 1);
            }
            if j > 0 {
                visit(c - nx);
            }
            if j + 1 < ny {
                visit(c + nx);
            }
        }
    }
    components
}

/// Real value per cell. Values outside the brain are kept at zero.
#[derive(Debug, Clone)]
pub struct ScalarField {
    grid: Arc<Grid>,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn zeros(grid: &Arc<Grid>) -> Self {
        ScalarField { grid: grid.clone(), values: vec![0.0; grid.n_cells()] }
    }

    pub fn constant(grid: &Arc<Grid>, value: f64) -> Self {
        let mut f = Self::zeros(grid);
        for &c in grid.active_cells() {
            f.values[c] = value;
        }
        f
    }

    /// Build from full row-major values; entries outside the brain are zeroed.
    pub fn from_values(grid: &Arc<Grid>, mut values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.n_cells() {
            return Err(Error::DimensionMismatch(format!(
                "field has {} values, grid has {} cells",
                values.len(),
                grid.n_cells()
            )));
        }
        for (c, v) in values.iter_mut().enumerate() {
            if !grid.in_brain(c) {
                *v = 0.0;
            } else if !v.is_finite() {
                return Err(Error::InvalidArgument(format!("non-finite value at cell {c}")));
            }
        }
        Ok(ScalarField { grid: grid.clone(), values })
    }

    pub fn from_active(grid: &Arc<Grid>, active: &[f64]) -> Self {
        debug_assert_eq!(active.len(), grid.n_active());
        ScalarField { grid: grid.clone(), values: grid.scatter(active) }
    }

    pub fn from_fn(grid: &Arc<Grid>, f: impl Fn(f64, f64) -> f64) -> Self {
        let mut field = Self::zeros(grid);
        for &c in grid.active_cells() {
            let (x, y) = grid.center(c);
            field.values[c] = f(x, y);
        }
        field
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }
    pub fn get(&self, cell: usize) -> f64 {
        self.values[cell]
    }
    pub fn active(&self) -> Vec<f64> {
        self.grid.gather(&self.values)
    }

    pub fn check_grid(&self, grid: &Arc<Grid>) -> Result<()> {
        if self.grid.same_as(grid) {
            Ok(())
        } else {
            Err(Error::GridMismatch)
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        let active: Vec<f64> = self.active().into_iter().map(f).collect();
        Self::from_active(&self.grid, &active)
    }

    pub fn max(&self) -> f64 {
        self.active().into_iter().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.active().into_iter().fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Region {
    Outside = 0,
    Gm = 1,
    Wm = 2,
    Interface = 3,
}

impl Region {
    pub fn code(self) -> i64 {
        self as i64
    }

    pub fn from_code(code: i64) -> Result<Self> {
        match code {
            0 => Ok(Region::Outside),
            1 => Ok(Region::Gm),
            2 => Ok(Region::Wm),
            3 => Ok(Region::Interface),
            other => Err(Error::UnknownLabelValue(other)),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RegionLabels {
    grid: Arc<Grid>,
    labels: Vec<Region>,
}

impl RegionLabels {
    pub fn new(grid: &Arc<Grid>, labels: Vec<Region>) -> Result<Self> {
        if labels.len() != grid.n_cells() {
            return Err(Error::DimensionMismatch("label count differs from grid".into()));
        }
        for (c, &l) in labels.iter().enumerate() {
            if grid.in_brain(c) == (l == Region::Outside) {
                return Err(Error::InvalidArgument(format!(
                    "cell {c}: label {l:?} inconsistent with the brain mask"
                )));
            }
        }
        Ok(RegionLabels { grid: grid.clone(), labels })
    }

    /// Every brain cell in a single region.
    pub fn uniform(grid: &Arc<Grid>, region: Region) -> Self {
        let labels = (0..grid.n_cells())
            .map(|c| if grid.in_brain(c) { region } else { Region::Outside })
            .collect();
        RegionLabels { grid: grid.clone(), labels }
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }
    pub fn labels(&self) -> &[Region] {
        &self.labels
    }
    pub fn get(&self, cell: usize) -> Region {
        self.labels[cell]
    }
    pub fn active_labels(&self) -> Vec<Region> {
        self.grid.active_cells().iter().map(|&c| self.labels[c]).collect()
    }
    pub fn count(&self, region: Region) -> usize {
        self.labels.iter().filter(|&&l| l == region).count()
    }
    pub fn mask_of(&self, region: Region) -> BinaryMask {
        BinaryMask {
            grid: self.grid.clone(),
            values: self.labels.iter().map(|&l| l == region).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    grid: Arc<Grid>,
    values: Vec<bool>,
}

impl BinaryMask {
    /// Cells outside the brain are forced to false.
    pub fn new(grid: &Arc<Grid>, mut values: Vec<bool>) -> Result<Self> {
        if values.len() != grid.n_cells() {
            return Err(Error::DimensionMismatch("mask length differs from grid".into()));
        }
        for (c, v) in values.iter_mut().enumerate() {
            *v &= grid.in_brain(c);
        }
        Ok(BinaryMask { grid: grid.clone(), values })
    }

    pub fn empty(grid: &Arc<Grid>) -> Self {
        BinaryMask { grid: grid.clone(), values: vec![false; grid.n_cells()] }
    }

    pub fn brain(grid: &Arc<Grid>) -> Self {
        BinaryMask { grid: grid.clone(), values: grid.mask().to_vec() }
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }
    pub fn values(&self) -> &[bool] {
        &self.values
    }
    pub fn get(&self, cell: usize) -> bool {
        self.values[cell]
    }
    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&v| v).count()
    }
    pub fn check_grid(&self, other: &BinaryMask) -> Result<()> {
        if self.grid.same_as(&other.grid) {
            Ok(())
        } else {
            Err(Error::GridMismatch)
        }
    }
}

/// Label GM/WM from a tissue partition and widen every GM/WM seam into an interface band.
///
/// A cell becomes INTERFACE when its center lies within `band_halfwidth` (mm) of the
/// midpoint of any face separating a GM cell from a WM cell.
pub fn region_labels_from_masks(
    grid: &Arc<Grid>,
    gm: &BinaryMask,
    wm: &BinaryMask,
    band_halfwidth: f64,
) -> Result<RegionLabels> {
    if !gm.grid.same_as(grid) || !wm.grid.same_as(grid) {
        return Err(Error::GridMismatch);
    }
    if !(band_halfwidth >= 0.0) {
        return Err(Error::InvalidArgument("band half-width must be non-negative".into()));
    }
    let mut labels = vec![Region::Outside; grid.n_cells()];
    for c in 0..grid.n_cells() {
        let (g, w) = (gm.values[c], wm.values[c]);
        if !grid.in_brain(c) {
            continue;
        }
        labels[c] = match (g, w) {
            (true, false) => Region::Gm,
            (false, true) => Region::Wm,
            (true, true) => {
                return Err(Error::NotAPartition(format!("cell {c} is both GM and WM")));
            }
            (false, false) => {
                return Err(Error::NotAPartition(format!("brain cell {c} is neither GM nor WM")));
            }
        };
    }

    let (nx, ny, hx, hy) = (grid.nx, grid.ny, grid.hx, grid.hy);
    let mut seams = Vec::new();
    for f in grid.faces() {
        let (ca, cb) = (grid.active[f.a], grid.active[f.b]);
        if labels[ca] != labels[cb] {
            let (xa, ya) = grid.center(ca);
            let (xb, yb) = grid.center(cb);
            seams.push((0.5 * (xa + xb), 0.5 * (ya + yb)));
        }
    }
    let mut band = vec![false; grid.n_cells()];
    let reach_i = (band_halfwidth / hx).ceil() as isize + 1;
    let reach_j = (band_halfwidth / hy).ceil() as isize + 1;
    for &(sx, sy) in &seams {
        let ci = (sx / hx - 0.5).floor() as isize;
        let cj = (sy / hy - 0.5).floor() as isize;
        for j in (cj - reach_j).max(0)..=(cj + reach_j + 1).min(ny as isize - 1) {
            for i in (ci - reach_i).max(0)..=(ci + reach_i + 1).min(nx as isize - 1) {
                let c = j as usize * nx + i as usize;
                let (x, y) = grid.center(c);
                if (x - sx).hypot(y - sy) <= band_halfwidth {
                    band[c] = true;
                }
            }
        }
    }
    for c in 0..grid.n_cells() {
        if band[c] && grid.in_brain(c) {
            labels[c] = Region::Interface;
        }
    }
    Ok(RegionLabels { grid: grid.clone(), labels })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn half_split(nx: usize, ny: usize, h: f64) -> (Arc<Grid>, BinaryMask, BinaryMask) {
        let grid = Arc::new(Grid::full(nx, ny, h, h).unwrap());
        let gm: Vec<bool> = (0..nx * ny).map(|c| c % nx < nx / 2).collect();
        let wm: Vec<bool> = gm.iter().map(|&g| !g).collect();
        let gm = BinaryMask::new(&grid, gm).unwrap();
        let wm = BinaryMask::new(&grid, wm).unwrap();
        (grid, gm, wm)
    }

    #[test]
    fn full_mask_has_all_cells() {
        let g = Grid::full(4, 4, 1.0, 1.0).unwrap();
        assert_eq!(g.n_active(), 16);
        // 2 * 4 * 3 interior faces, 16 boundary faces
        assert_eq!(g.faces().len(), 24);
        assert_eq!(g.boundary_faces().len(), 16);
    }

    #[test]
    fn full_resolution_phantom_grid() {
        let g = Grid::full(41, 61, 0.25, 0.25).unwrap();
        assert_eq!(g.n_cells(), 41 * 61);
        assert!((g.cell_area() - 0.0625).abs() < 1e-15);
    }

    #[test]
    fn rejects_disconnected_and_empty_masks() {
        let mut m = vec![false; 36];
        m[0] = true;
        m[35] = true;
        assert!(matches!(
            Grid::new(6, 6, 1.0, 1.0, m),
            Err(Error::DisconnectedMask { components: 2 })
        ));
        // diagonal contact is not 4-connected
        let mut m = vec![false; 16];
        m[0] = true;
        m[5] = true;
        assert!(matches!(Grid::new(4, 4, 1.0, 1.0, m), Err(Error::DisconnectedMask { .. })));
        assert!(matches!(Grid::new(4, 4, 1.0, 1.0, vec![false; 16]), Err(Error::EmptyMask)));
        assert!(matches!(
            Grid::new(4, 4, 1.0, 1.0, vec![true; 15]),
            Err(Error::DimensionMismatch(_))
        ));
        assert!(Grid::new(3, 4, 1.0, 1.0, vec![true; 12]).is_err());
    }

    #[test]
    fn row_major_indexing() {
        let g = Arc::new(Grid::full(5, 7, 0.5, 0.25).unwrap());
        let f = ScalarField::from_fn(&g, |x, y| 100.0 * y + x);
        for j in 0..7 {
            for i in 0..5 {
                let expect = 100.0 * ((j as f64 + 0.5) * 0.25) + (i as f64 + 0.5) * 0.5;
                assert_eq!(f.get(j * 5 + i), expect);
            }
        }
    }

    #[test]
    fn zero_band_leaves_no_interface() {
        let (grid, gm, wm) = half_split(8, 6, 0.25);
        let labels = region_labels_from_masks(&grid, &gm, &wm, 0.0).unwrap();
        assert_eq!(labels.count(Region::Interface), 0);
        assert_eq!(labels.count(Region::Gm), 24);
    }

    #[test]
    fn band_width_matches_brute_force_scan() {
        let (grid, gm, wm) = half_split(20, 6, 0.25);
        let labels = region_labels_from_masks(&grid, &gm, &wm, 0.6).unwrap();
        // brute force: seam face midpoints at x = 2.5, any y; distance to column centers
        let seam_x = 10.0 * 0.25;
        let mut cols = 0;
        for i in 0..20 {
            let x = (i as f64 + 0.5) * 0.25;
            if (x - seam_x).abs() <= 0.6 {
                cols += 1;
            }
        }
        assert_eq!(cols, 4);
        assert_eq!(labels.count(Region::Interface), cols * 6);
        for j in 0..6 {
            for i in 0..20 {
                let x = (i as f64 + 0.5) * 0.25;
                let inside = (x - seam_x).abs() <= 0.6;
                assert_eq!(labels.get(j * 20 + i) == Region::Interface, inside);
            }
        }
    }

    #[test]
    fn labelling_is_idempotent() {
        let (grid, gm, wm) = half_split(12, 6, 0.25);
        let a = region_labels_from_masks(&grid, &gm, &wm, 0.6).unwrap();
        let b = region_labels_from_masks(&grid, &gm, &wm, 0.6).unwrap();
        assert_eq!(a.labels(), b.labels());
    }

    #[test]
    fn partition_is_enforced() {
        let (grid, gm, _) = half_split(8, 6, 0.25);
        let mut wm: Vec<bool> = gm.values().iter().map(|&g| !g).collect();
        wm[47] = false;
        let wm = BinaryMask::new(&grid, wm).unwrap();
        assert!(matches!(
            region_labels_from_masks(&grid, &gm, &wm, 0.0),
            Err(Error::NotAPartition(_))
        ));
    }

    #[test]
    fn masks_reject_foreign_grids() {
        let (grid, gm, wm) = half_split(8, 6, 0.25);
        let other = Arc::new(Grid::full(8, 6, 0.5, 0.25).unwrap());
        assert!(region_labels_from_masks(&other, &gm, &wm, 0.0).is_err());
        let f = ScalarField::zeros(&grid);
        assert!(f.check_grid(&other).is_err());
        // structurally identical grids are accepted
        let twin = Arc::new(Grid::full(8, 6, 0.25, 0.25).unwrap());
        assert!(f.check_grid(&twin).is_ok());
    }
}
