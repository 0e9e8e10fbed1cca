//! Square real grids and the CLS-query similarity maps built on them.
//!
//! Grids are row-major; cell `(x, y)` is row `x`, column `y`.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// A `k x k` grid of finite reals stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid2D {
    side: usize,
    values: Vec<f64>,
}

impl Grid2D {
    pub fn new(side: usize, values: Vec<f64>) -> Result<Self> {
        if side < 2 {
            return Err(Error::GridTooSmall(side));
        }
        if values.len() != side * side {
            return Err(Error::GridShape { side, expected: side * side, got: values.len() });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { row: i / side, col: i % side });
        }
        Ok(Self { side, values })
    }

    pub fn zeros(side: usize) -> Result<Self> {
        Self::new(side, vec![0.0; side * side])
    }

    pub fn filled(side: usize, value: f64) -> Result<Self> {
        Self::new(side, vec![value; side * side])
    }

    pub fn from_fn(side: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut values = Vec::with_capacity(side * side);
        for r in 0..side {
            for c in 0..side {
                values.push(f(r, c));
            }
        }
        Self::new(side, values)
    }

    /// Builds a grid from nested rows; every row must have the same length as the row count.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let side = rows.len();
        let mut values = Vec::with_capacity(side * side);
        for (i, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            if row.len() != side {
                return Err(Error::DimensionMismatch(format!(
                    "row {i} has {} values, expected {side}",
                    row.len()
                )));
            }
            values.extend_from_slice(row);
        }
        Self::new(side, values)
    }

    #[inline]
    pub fn side(&self) -> usize {
        self.side
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.values.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.side + col]
    }

    /// Sets a cell. Non-finite values are rejected.
    pub fn set(&mut self, row: usize, col: usize, value: f64) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::NonFinite { row, col });
        }
        self.values[row * self.side + col] = value;
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Applies `f` cell-wise. Fails if `f` produces a non-finite value.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(self.side, self.values.iter().map(|&v| f(v)).collect())
    }

    pub fn add_scalar(&self, c: f64) -> Result<Self> {
        self.map(|v| v + c)
    }

    pub fn scale(&self, c: f64) -> Result<Self> {
        self.map(|v| v * c)
    }

    /// Rotates the grid 90 degrees clockwise: cell `(r, c)` moves to `(c, k-1-r)`.
    pub fn rotate90(&self) -> Self {
        let k = self.side;
        let mut values = vec![0.0; k * k];
        for r in 0..k {
            for c in 0..k {
                values[c * k + (k - 1 - r)] = self.values[r * k + c];
            }
        }
        Self { side: k, values }
    }

    /// Serializes to the line-oriented text format: the side `k` on the first
    /// line, then `k` rows of `k` whitespace-separated decimals. Values are
    /// written in shortest round-trip form, so parsing restores them exactly.
    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(self.values.len() * 12);
        let _ = writeln!(out, "{}", self.side);
        for row in self.values.chunks(self.side) {
            let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            let _ = writeln!(out, "{}", line.join(" "));
        }
        out
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
        let (hline, header) = lines.next().ok_or(Error::Parse { line: 1, message: "missing header".into() })?;
        let side: usize = header
            .parse()
            .map_err(|_| Error::Parse { line: hline, message: format!("bad grid side {header:?}") })?;
        let mut values = Vec::with_capacity(side * side);
        let mut rows = 0;
        for (line, text) in lines {
            let before = values.len();
            for tok in text.split_whitespace() {
                let v: f64 = tok
                    .parse()
                    .map_err(|_| Error::Parse { line, message: format!("bad number {tok:?}") })?;
                values.push(v);
            }
            if values.len() - before != side {
                return Err(Error::Parse {
                    line,
                    message: format!("expected {side} values, got {}", values.len() - before),
                });
            }
            rows += 1;
        }
        if rows != side {
            return Err(Error::Parse { line: hline, message: format!("expected {side} rows, got {rows}") });
        }
        Self::new(side, values)
    }

    pub fn read_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse_text(&std::fs::read_to_string(path)?)
    }

    pub fn write_file(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

/// Where a CLS-row map was taken from in the attention computation.
///
/// The spatial-entropy loss is only defined on pre-softmax maps; the
/// mass-threshold analysis works on post-softmax attention rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapKind {
    PreSoftmax,
    PostSoftmax,
}

/// A grid labeled with its extraction point.
#[derive(Debug, Clone, PartialEq)]
pub struct TaggedMap {
    pub kind: MapKind,
    pub grid: Grid2D,
}

/// One head's CLS query and the keys of the `k x k` patch tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadProjection {
    side: usize,
    cls_query: Vec<f64>,
    /// Row-major over the patch grid; entry `r * k + c` is the key of patch `(r, c)`.
    patch_keys: Vec<Vec<f64>>,
}

impl HeadProjection {
    pub fn new(side: usize, cls_query: Vec<f64>, patch_keys: Vec<Vec<f64>>) -> Result<Self> {
        if side < 2 {
            return Err(Error::GridTooSmall(side));
        }
        if cls_query.is_empty() {
            return Err(Error::DimensionMismatch("query has dimension 0".into()));
        }
        if patch_keys.len() != side * side {
            return Err(Error::DimensionMismatch(format!(
                "expected {} patch keys, got {}",
                side * side,
                patch_keys.len()
            )));
        }
        let d = cls_query.len();
        for (i, key) in patch_keys.iter().enumerate() {
            if key.len() != d {
                return Err(Error::DimensionMismatch(format!(
                    "key ({}, {}) has length {}, query has {d}",
                    i / side,
                    i % side,
                    key.len()
                )));
            }
        }
        if cls_query.iter().chain(patch_keys.iter().flatten()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("projection contains a non-finite entry".into()));
        }
        Ok(Self { side, cls_query, patch_keys })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn dim(&self) -> usize {
        self.cls_query.len()
    }

    pub fn cls_query(&self) -> &[f64] {
        &self.cls_query
    }

    pub fn patch_keys(&self) -> &[Vec<f64>] {
        &self.patch_keys
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Scaled dot products between the CLS query and every patch key:
/// `S[x, y] = <q, k[x, y]> / sqrt(d)`. Values are pre-softmax and may be negative.
pub fn similarity_map(proj: &HeadProjection) -> Result<Grid2D> {
    let scale = 1.0 / (proj.dim() as f64).sqrt();
    let values = proj.patch_keys.iter().map(|k| dot(&proj.cls_query, k) * scale).collect();
    Grid2D::new(proj.side, values)
}

/// Cosine similarity between the CLS query and every patch key, in `[-1, 1]`.
pub fn cosine_similarity_map(proj: &HeadProjection) -> Result<Grid2D> {
    let qn = dot(&proj.cls_query, &proj.cls_query).sqrt();
    if qn == 0.0 {
        return Err(Error::ZeroNorm("CLS query".into()));
    }
    let mut values = Vec::with_capacity(proj.patch_keys.len());
    for (i, k) in proj.patch_keys.iter().enumerate() {
        let kn = dot(k, k).sqrt();
        if kn == 0.0 {
            return Err(Error::ZeroNorm(format!("key ({}, {})", i / proj.side, i % proj.side)));
        }
        // rounding can push |cos| a hair past 1
        values.push((dot(&proj.cls_query, k) / (qn * kn)).clamp(-1.0, 1.0));
    }
    Grid2D::new(proj.side, values)
}

/// Arithmetic mean over all cells.
///
/// Accumulated as deviations from the first cell so a constant grid returns
/// its value exactly; a naive sum would leave rounding residue that
/// thresholding at the mean would turn into spurious support.
pub fn grid_mean(g: &Grid2D) -> f64 {
    let v = g.values();
    let origin = v[0];
    let dev: f64 = v.iter().map(|x| x - origin).sum();
    origin + dev / v.len() as f64
}
