//! Plain-text array formats: `SFIELD 1`, `MASK 1` and `LABELS 1`.
//!
//! ```text
//! SFIELD 1
//! nx <int> ny <int>
//! hx <decimal> hy <decimal>
//! <ny rows of nx values; row j is line 4 + j>
//! ```
//!
//! Reals are written with 17 significant digits so that reading back a written
//! file reproduces every value bit for bit.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::grid::{Grid, Region, RegionLabels, ScalarField};

/// Header and values of an array file, independent of any grid.
#[derive(Debug, Clone, PartialEq)]
pub struct RawArray<T> {
    pub nx: usize,
    pub ny: usize,
    pub hx: f64,
    pub hy: f64,
    pub values: Vec<T>,
}

impl<T> RawArray<T> {
    fn matches(&self, grid: &Grid) -> bool {
        self.nx == grid.nx() && self.ny == grid.ny() && self.hx == grid.hx() && self.hy == grid.hy()
    }
}

pub fn format_real(v: f64) -> String {
    format!("{v:.16e}")
}

fn render<T>(magic: &str, nx: usize, ny: usize, hx: f64, hy: f64, values: &[T], fmt: impl Fn(&T) -> String) -> String {
    let mut out = String::with_capacity(values.len() * 24 + 64);
    let _ = writeln!(out, "{magic} 1");
    let _ = writeln!(out, "nx {nx} ny {ny}");
    let _ = writeln!(out, "hx {} hy {}", format_real(hx), format_real(hy));
    for j in 0..ny {
        let row: Vec<String> = values[j * nx..(j + 1) * nx].iter().map(&fmt).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

fn parse<T>(path: &Path, magic: &str, parse_value: impl Fn(&str) -> Option<T>) -> Result<RawArray<T>> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
    let mut lines = text.lines().enumerate().map(|(n, l)| (n + 1, l));
    let bad = |line: usize, msg: &str| Error::format(path, line, msg);

    let (n, first) = lines.next().ok_or_else(|| bad(1, "empty file"))?;
    if first.trim() != format!("{magic} 1") {
        return Err(bad(n, &format!("expected header `{magic} 1`")));
    }
    let (n, dims) = lines.next().ok_or_else(|| bad(2, "missing dimension line"))?;
    let d: Vec<&str> = dims.split_whitespace().collect();
    let (nx, ny) = match d.as_slice() {
        ["nx", a, "ny", b] => match (a.parse::<usize>(), b.parse::<usize>()) {
            (Ok(a), Ok(b)) if a > 0 && b > 0 => (a, b),
            _ => return Err(bad(n, "invalid nx/ny")),
        },
        _ => return Err(bad(n, "expected `nx <int> ny <int>`")),
    };
    let (n, sp) = lines.next().ok_or_else(|| bad(3, "missing spacing line"))?;
    let s: Vec<&str> = sp.split_whitespace().collect();
    let (hx, hy) = match s.as_slice() {
        ["hx", a, "hy", b] => match (a.parse::<f64>(), b.parse::<f64>()) {
            (Ok(a), Ok(b)) => (a, b),
            _ => return Err(bad(n, "invalid hx/hy")),
        },
        _ => return Err(bad(n, "expected `hx <decimal> hy <decimal>`")),
    };

    let mut values = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        let (n, row) = lines.next().ok_or_else(|| bad(4 + j, "missing row"))?;
        let tokens: Vec<&str> = row.split_whitespace().collect();
        if tokens.len() != nx {
            return Err(bad(n, &format!("expected {nx} values, found {}", tokens.len())));
        }
        for t in tokens {
            values.push(parse_value(t).ok_or_else(|| bad(n, &format!("invalid value `{t}`")))?);
        }
    }
    if let Some((n, extra)) = lines.find(|(_, l)| !l.trim().is_empty()) {
        return Err(bad(n, &format!("unexpected trailing content `{extra}`")));
    }
    Ok(RawArray { nx, ny, hx, hy, values })
}

pub fn write_scalar_field(field: &ScalarField, path: impl AsRef<Path>) -> Result<()> {
    let g = field.grid();
    write_raw_field(
        &RawArray { nx: g.nx(), ny: g.ny(), hx: g.hx(), hy: g.hy(), values: field.values().to_vec() },
        path,
    )
}

pub fn write_raw_field(raw: &RawArray<f64>, path: impl AsRef<Path>) -> Result<()> {
    let text = render("SFIELD", raw.nx, raw.ny, raw.hx, raw.hy, &raw.values, |v| format_real(*v));
    write_text(path.as_ref(), &text)
}

pub fn read_raw_field(path: impl AsRef<Path>) -> Result<RawArray<f64>> {
    let path = path.as_ref();
    let raw = parse(path, "SFIELD", |t| t.parse::<f64>().ok().filter(|v| v.is_finite()))?;
    Ok(raw)
}

/// Read a scalar field into the context grid; values outside the brain are dropped.
pub fn read_scalar_field(path: impl AsRef<Path>, grid: &Arc<Grid>) -> Result<ScalarField> {
    let raw = read_raw_field(path)?;
    if !raw.matches(grid) {
        return Err(Error::GridMismatch);
    }
    ScalarField::from_values(grid, raw.values)
}

pub fn write_mask(grid: &Grid, values: &[bool], path: impl AsRef<Path>) -> Result<()> {
    let text = render("MASK", grid.nx(), grid.ny(), grid.hx(), grid.hy(), values, |&v| {
        if v { "1".into() } else { "0".into() }
    });
    write_text(path.as_ref(), &text)
}

pub fn read_raw_mask(path: impl AsRef<Path>) -> Result<RawArray<bool>> {
    parse(path.as_ref(), "MASK", |t| match t {
        "0" => Some(false),
        "1" => Some(true),
        _ => None,
    })
}

/// Read a brain-mask file and build the grid it describes.
pub fn read_grid(path: impl AsRef<Path>) -> Result<Grid> {
    let raw = read_raw_mask(path)?;
    Grid::new(raw.nx, raw.ny, raw.hx, raw.hy, raw.values)
}

pub fn write_int_labels(
    nx: usize,
    ny: usize,
    hx: f64,
    hy: f64,
    values: &[i64],
    path: impl AsRef<Path>,
) -> Result<()> {
    let text = render("LABELS", nx, ny, hx, hy, values, |v| v.to_string());
    write_text(path.as_ref(), &text)
}

pub fn write_labels(labels: &RegionLabels, path: impl AsRef<Path>) -> Result<()> {
    let g = labels.grid();
    let codes: Vec<i64> = labels.labels().iter().map(|l| l.code()).collect();
    write_int_labels(g.nx(), g.ny(), g.hx(), g.hy(), &codes, path)
}

/// Integer label image without interpretation (atlas label images).
pub fn read_raw_labels(path: impl AsRef<Path>) -> Result<RawArray<i64>> {
    parse(path.as_ref(), "LABELS", |t| t.parse::<i64>().ok())
}

pub fn read_labels(path: impl AsRef<Path>, grid: &Arc<Grid>) -> Result<RegionLabels> {
    let raw = read_raw_labels(path)?;
    if !raw.matches(grid) {
        return Err(Error::GridMismatch);
    }
    let labels = raw.values.iter().map(|&v| Region::from_code(v)).collect::<Result<Vec<_>>>()?;
    RegionLabels::new(grid, labels)
}
