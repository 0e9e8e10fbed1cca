//! Attention-map analysis: top-mass masks, Jaccard scoring against
//! ground-truth masks, and image export.
//!
//! These operate on post-softmax CLS attention rows reshaped to `k x k`.
//! Binary grids use `0.0` for "out" and any other value for "in".

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::grid::Grid2D;

/// Smallest set of top-valued cells carrying at least the requested fraction of the mass.
#[derive(Debug, Clone, PartialEq)]
pub struct MassMask {
    pub kept: Grid2D,
    /// Fraction of the total mass inside `kept`.
    pub kept_mass: f64,
}

/// Keeps the highest cells, in descending value order (ties in raster
/// order), until their sum reaches `fraction` of the total mass.
pub fn mass_threshold(a: &Grid2D, fraction: f64) -> Result<MassMask> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("fraction must be in (0, 1], got {fraction}")));
    }
    if let Some(i) = a.values().iter().position(|&v| v < 0.0) {
        return Err(Error::InvalidArgument(format!(
            "attention map must be non-negative; cell ({}, {}) is {}",
            i / a.side(),
            i % a.side(),
            a.values()[i]
        )));
    }
    let total = a.sum();
    if total <= 0.0 {
        return Err(Error::ZeroMass);
    }
    let mut order: Vec<usize> = (0..a.len()).collect();
    // stable sort keeps raster order among equal values
    order.sort_by(|&i, &j| a.values()[j].total_cmp(&a.values()[i]));

    // The prefix sum is accumulated in a different order than `total`, so
    // allow for rounding when testing coverage.
    let target = fraction * total * (1.0 - 1e-12);
    let mut kept = vec![0.0; a.len()];
    let mut cum = 0.0;
    for &i in &order {
        if cum >= target {
            break;
        }
        kept[i] = 1.0;
        cum += a.values()[i];
    }
    Ok(MassMask { kept: Grid2D::new(a.side(), kept)?, kept_mass: cum / total })
}

pub fn jaccard(mask: &Grid2D, truth: &Grid2D) -> Result<f64> {
    if mask.side() != truth.side() {
        return Err(Error::DimensionMismatch(format!(
            "mask side {} vs truth side {}",
            mask.side(),
            truth.side()
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&m, &t) in mask.values().iter().zip(truth.values()) {
        let (m, t) = (m != 0.0, t != 0.0);
        inter += usize::from(m && t);
        union += usize::from(m || t);
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Head whose mass mask best matches `truth`; the lowest index wins ties.
pub fn best_head_jaccard(heads: &[Grid2D], truth: &Grid2D, fraction: f64) -> Result<(usize, f64)> {
    if heads.is_empty() {
        return Err(Error::NoHeads);
    }
    let mut best = (0, f64::NEG_INFINITY);
    for (i, head) in heads.iter().enumerate() {
        let score = jaccard(&mass_threshold(head, fraction)?.kept, truth)?;
        if score > best.1 {
            best = (i, score);
        }
    }
    Ok(best)
}

/// Sidecar path holding the raw values next to an exported image.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("txt")
}

/// Writes `a` as a binary PGM image, min-max normalized to 0..=255 and
/// upscaled by nearest-neighbor replication, plus a text sidecar with the
/// raw values (see [`sidecar_path`]). A constant map renders as mid-gray.
pub fn export_map(a: &Grid2D, path: &Path, upscale: usize) -> Result<()> {
    if upscale == 0 {
        return Err(Error::InvalidArgument("upscale factor must be at least 1".into()));
    }
    let (lo, hi) = a
        .values()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let level = |v: f64| -> u8 {
        if hi > lo {
            ((v - lo) / (hi - lo) * 255.0).round() as u8
        } else {
            128
        }
    };
    let k = a.side();
    let n = k * upscale;
    let mut pixels = Vec::with_capacity(n * n);
    for r in 0..n {
        for c in 0..n {
            pixels.push(level(a.get(r / upscale, c / upscale)));
        }
    }
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(file, "P5\n{n} {n}\n255\n")?;
    file.write_all(&pixels)?;
    file.flush()?;
    a.write_file(sidecar_path(path))
}

/// Reads back a binary PGM written by [`export_map`]: `(width, height, pixels)`.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = std::fs::read(path)?;
    let bad = |m: &str| Error::Parse { line: 1, message: m.to_string() };
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated PGM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(bad("not a binary PGM"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("bad PGM dimension"));
    let (w, h) = (parse(&fields[1])?, parse(&fields[2])?);
    let data = bytes.get(pos + 1..).ok_or_else(|| bad("missing pixel data"))?;
    if data.len() != w * h {
        return Err(bad("pixel count does not match header"));
    }
    Ok((w, h, data.to_vec()))
}
