//! Synthetic grayscale shape images with patch-level foreground masks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sar_core::Grid2D;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Rectangle,
    Ellipse,
    Cross,
    Triangle,
}

/// An axis-aligned shape placed inside an image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlacedShape {
    pub kind: ShapeKind,
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
    pub intensity: f64,
}

impl PlacedShape {
    /// Whether pixel `(r, c)` belongs to the shape.
    pub fn contains(&self, r: usize, c: usize) -> bool {
        if r < self.top || c < self.left || r >= self.top + self.height || c >= self.left + self.width {
            return false;
        }
        let (y, x) = ((r - self.top) as f64, (c - self.left) as f64);
        let (h, w) = (self.height as f64, self.width as f64);
        match self.kind {
            ShapeKind::Rectangle => true,
            ShapeKind::Ellipse => {
                let dy = (y + 0.5 - h / 2.0) / (h / 2.0);
                let dx = (x + 0.5 - w / 2.0) / (w / 2.0);
                dy * dy + dx * dx <= 1.0
            }
            ShapeKind::Cross => {
                let t = (self.height.min(self.width) as f64 / 3.0).ceil().max(2.0);
                let in_band = |pos: f64, len: f64| (pos + 0.5 - len / 2.0).abs() <= t / 2.0;
                in_band(y, h) || in_band(x, w)
            }
            ShapeKind::Triangle => {
                let half = (y + 1.0) / h * w / 2.0;
                (x + 0.5 - w / 2.0).abs() <= half
            }
        }
    }

    fn overlaps(&self, other: &PlacedShape, margin: usize) -> bool {
        let sep_rows = self.top + self.height + margin <= other.top || other.top + other.height + margin <= self.top;
        let sep_cols = self.left + self.width + margin <= other.left || other.left + other.width + margin <= self.left;
        !(sep_rows || sep_cols)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    /// Class `i` draws shapes of kind `classes[i]`.
    pub classes: Vec<ShapeKind>,
    pub samples: usize,
    pub image_size: usize,
    pub patch_size: usize,
    /// Standard deviation of additive Gaussian pixel noise.
    pub noise: f64,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Bounding-box side range, in pixels.
    pub min_extent: usize,
    pub max_extent: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            classes: vec![ShapeKind::Rectangle, ShapeKind::Ellipse, ShapeKind::Cross],
            samples: 2000,
            image_size: 56,
            patch_size: 4,
            noise: 0.1,
            min_shapes: 1,
            max_shapes: 3,
            min_extent: 10,
            max_extent: 22,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Dataset(m));
        if self.classes.is_empty() {
            return bad("no classes".into());
        }
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(format!("image size {} is not a multiple of patch size {}", self.image_size, self.patch_size));
        }
        if self.min_extent < 3 || self.min_extent > self.max_extent {
            return bad(format!("extent range {}..={} is empty or below 3 pixels", self.min_extent, self.max_extent));
        }
        if self.max_extent > self.image_size {
            return bad(format!("shape extent {} exceeds image size {}", self.max_extent, self.image_size));
        }
        if self.min_shapes == 0 || self.min_shapes > self.max_shapes || self.max_shapes > 3 {
            return bad(format!("shape count range {}..={} must lie within 1..=3", self.min_shapes, self.max_shapes));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return bad(format!("noise level {} must be finite and non-negative", self.noise));
        }
        Ok(())
    }

    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapeSample {
    /// Row-major `image_size x image_size` pixels.
    pub image: Vec<f64>,
    pub label: usize,
    /// 1 on patches with at least half of their pixels in the foreground.
    pub mask: Grid2D,
    pub shapes: Vec<PlacedShape>,
}

/// Draws `spec.samples` samples. Labels cycle through the classes, so class
/// counts differ by at most one; each sample has its own random stream.
pub fn generate_dataset(spec: &DatasetSpec, seed: u64) -> Result<Vec<ShapeSample>> {
    spec.validate()?;
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::Dataset(e.to_string()))?;
    (0..spec.samples)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let label = i % spec.classes.len();
            let shapes = place_shapes(spec, spec.classes[label], &mut rng);
            render_sample(spec, label, &shapes, &noise, &mut rng)
        })
        .collect()
}

fn place_shapes(spec: &DatasetSpec, kind: ShapeKind, rng: &mut ChaCha8Rng) -> Vec<PlacedShape> {
    let count = rng.gen_range(spec.min_shapes..=spec.max_shapes);
    let mut shapes: Vec<PlacedShape> = Vec::with_capacity(count);
    for _ in 0..count {
        for _ in 0..100 {
            let height = rng.gen_range(spec.min_extent..=spec.max_extent);
            let width = rng.gen_range(spec.min_extent..=spec.max_extent);
            let s = PlacedShape {
                kind,
                top: rng.gen_range(0..=spec.image_size - height),
                left: rng.gen_range(0..=spec.image_size - width),
                height,
                width,
                intensity: rng.gen_range(0.6..1.0),
            };
            if shapes.iter().all(|o| !o.overlaps(&s, spec.patch_size)) {
                shapes.push(s);
                break;
            }
        }
    }
    shapes
}

/// Renders shapes over a zero background, adds noise and derives the mask.
pub fn render_sample<D: Distribution<f64>>(
    spec: &DatasetSpec,
    label: usize,
    shapes: &[PlacedShape],
    noise: &D,
    rng: &mut impl Rng,
) -> Result<ShapeSample> {
    let n = spec.image_size;
    let p = spec.patch_size;
    let mut image = vec![0.0; n * n];
    let mut fg = vec![false; n * n];
    for s in shapes {
        if s.top + s.height > n || s.left + s.width > n {
            return Err(Error::Dataset(format!("shape {s:?} does not fit in a {n}x{n} image")));
        }
        for r in s.top..s.top + s.height {
            for c in s.left..s.left + s.width {
                if s.contains(r, c) {
                    fg[r * n + c] = true;
                    image[r * n + c] = f64::max(image[r * n + c], s.intensity);
                }
            }
        }
    }
    if spec.noise > 0.0 {
        for v in &mut image {
            *v += noise.sample(rng);
        }
    }
    let k = n / p;
    let mask = Grid2D::from_fn(k, |pr, pc| {
        let covered = (0..p).flat_map(|dr| (0..p).map(move |dc| (dr, dc))).filter(|(dr, dc)| fg[(pr * p + dr) * n + pc * p + dc]).count();
        if 2 * covered >= p * p {
            1.0
        } else {
            0.0
        }
    })?;
    Ok(ShapeSample { image, label, mask, shapes: shapes.to_vec() })
}
