//! Synthetic shapes detection data, the detector trainer, and on-disk formats.

mod container;
mod io;
mod train;

pub use container::{load_model, load_quantized, save_model, save_quantized, CONTAINER_VERSION};
pub use io::{load_calibration_images, load_dataset, save_dataset, save_dataset_with, DATASET_VERSION};
pub use train::{train_toy, TrainConfig, TrainReport};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::toydet::{BBox, GroundTruth, GtBox};

pub const CLASS_NAMES: [&str; 3] = ["circle", "square", "triangle"];

/// Base RGB per class before jitter.
const CLASS_COLORS: [[f64; 3]; 3] = [[0.85, 0.25, 0.20], [0.20, 0.75, 0.30], [0.25, 0.35, 0.90]];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub canvas: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Shape extent (diameter / side) range in pixels.
    pub min_size: f64,
    pub max_size: f64,
    pub color_jitter: f64,
    pub noise: f64,
    /// Empty margin kept between every box and the canvas edge.
    pub margin: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            canvas: 64,
            min_shapes: 1,
            max_shapes: 5,
            min_size: 8.0,
            max_size: 30.0,
            color_jitter: 0.12,
            noise: 0.06,
            margin: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    pub fn class_id(self) -> usize {
        self as usize
    }

    fn from_class(c: usize) -> Self {
        [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle][c]
    }
}

/// One placed shape: center and extent in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Shape {
    pub kind: ShapeKind,
    pub cx: f64,
    pub cy: f64,
    pub size: f64,
    pub color: [f64; 3],
}

impl Shape {
    pub fn bbox(&self) -> BBox {
        BBox::from_center(self.cx, self.cy, self.size, self.size)
    }

    /// Whether the pixel center `(px, py)` is covered.
    fn covers(&self, px: f64, py: f64) -> bool {
        let h = self.size / 2.0;
        match self.kind {
            ShapeKind::Circle => (px - self.cx).powi(2) + (py - self.cy).powi(2) <= h * h,
            ShapeKind::Square => (px - self.cx).abs() <= h && (py - self.cy).abs() <= h,
            ShapeKind::Triangle => {
                // apex at top center, base along the bottom edge
                let t = (py - (self.cy - h)) / self.size;
                (0.0..=1.0).contains(&t) && (px - self.cx).abs() <= t * h
            }
        }
    }
}

/// Rendered images (CHW, values `u8 / 255`) with their ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub images: Vec<Tensor>,
    pub groundtruth: Vec<GroundTruth>,
}

/// Unlabeled images used for calibration. Carries no ground truth by
/// construction.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSet {
    pub images: Vec<Tensor>,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Drops the labels, keeping the first `n` images.
    pub fn calibration(&self, n: usize) -> CalibrationSet {
        CalibrationSet {
            images: self.images.iter().take(n).cloned().collect(),
        }
    }

    pub fn split(&self, at: usize) -> (LabeledSet, LabeledSet) {
        let at = at.min(self.len());
        (
            LabeledSet {
                images: self.images[..at].to_vec(),
                groundtruth: self.groundtruth[..at].to_vec(),
            },
            LabeledSet {
                images: self.images[at..].to_vec(),
                groundtruth: self.groundtruth[at..].to_vec(),
            },
        )
    }
}

impl CalibrationSet {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Renders shapes over a noisy, smoothly varying background into 8-bit RGB.
pub fn render(spec: &SceneSpec, shapes: &[Shape], rng: &mut ChaCha8Rng) -> Vec<u8> {
    let n = spec.canvas;
    let base: f64 = rng.gen_range(0.3..0.6);
    let (fx, fy): (f64, f64) = (rng.gen_range(0.05..0.3), rng.gen_range(0.05..0.3));
    let (phx, phy): (f64, f64) = (rng.gen_range(0.0..6.3), rng.gen_range(0.0..6.3));
    let tint: [f64; 3] = [rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05)];
    let mut px = vec![0u8; 3 * n * n];
    for y in 0..n {
        for x in 0..n {
            let texture = 0.08 * ((x as f64 * fx + phx).sin() * (y as f64 * fy + phy).cos());
            let (cxp, cyp) = (x as f64 + 0.5, y as f64 + 0.5);
            let cover = shapes.iter().rev().find(|s| s.covers(cxp, cyp));
            for c in 0..3 {
                let v = match cover {
                    Some(s) => s.color[c],
                    None => base + texture + tint[c],
                } + spec.noise * (rng.gen::<f64>() - 0.5) * 2.0;
                px[(c * n + y) * n + x] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
    px
}

pub fn pixels_to_tensor(px: &[u8], canvas: usize) -> Tensor {
    Tensor::from_parts(vec![3, canvas, canvas], px.iter().map(|&v| v as f64 / 255.0).collect())
}

fn place_shapes(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Vec<Shape> {
    let count = rng.gen_range(spec.min_shapes..=spec.max_shapes);
    let canvas = spec.canvas as f64;
    let mut shapes: Vec<Shape> = Vec::new();
    for _ in 0..count {
        let kind = ShapeKind::from_class(rng.gen_range(0..CLASS_NAMES.len()));
        let mut color = CLASS_COLORS[kind.class_id()];
        for c in &mut color {
            *c = (*c + rng.gen_range(-spec.color_jitter..=spec.color_jitter)).clamp(0.0, 1.0);
        }
        for _attempt in 0..30 {
            let size = rng.gen_range(spec.min_size..=spec.max_size);
            let lo = spec.margin + size / 2.0;
            let hi = canvas - spec.margin - size / 2.0;
            let cx = rng.gen_range(lo..=hi);
            let cy = rng.gen_range(lo..=hi);
            let cand = Shape {
                kind,
                cx,
                cy,
                size,
                color,
            };
            let b = cand.bbox();
            let clear = shapes.iter().all(|s| {
                let o = s.bbox();
                b.x2 + 1.0 <= o.x1 || o.x2 + 1.0 <= b.x1 || b.y2 + 1.0 <= o.y1 || o.y2 + 1.0 <= b.y1
            });
            if clear {
                shapes.push(cand);
                break;
            }
        }
    }
    shapes
}

/// One image and its boxes from a dedicated random stream.
pub fn generate_image(spec: &SceneSpec, seed: u64, index: u64) -> (Vec<u8>, GroundTruth) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let shapes = place_shapes(spec, &mut rng);
    let px = render(spec, &shapes, &mut rng);
    let gt = GroundTruth {
        boxes: shapes
            .iter()
            .map(|s| GtBox {
                bbox: s.bbox(),
                class_id: s.kind.class_id(),
            })
            .collect(),
    };
    (px, gt)
}

fn validate_spec(spec: &SceneSpec) -> Result<()> {
    let room = spec.canvas as f64 - 2.0 * spec.margin;
    if !(spec.min_size > 0.0 && spec.min_size <= spec.max_size) {
        return Err(Error::InvalidArgument(format!(
            "shape size range [{}, {}] is empty",
            spec.min_size, spec.max_size
        )));
    }
    if spec.max_size > room {
        return Err(Error::InvalidArgument(format!(
            "shapes up to {} px cannot fit in a {} px canvas with margin {}",
            spec.max_size, spec.canvas, spec.margin
        )));
    }
    if spec.min_shapes == 0 || spec.min_shapes > spec.max_shapes {
        return Err(Error::InvalidArgument("shape count range is empty".into()));
    }
    Ok(())
}

/// Deterministic dataset for `(spec, seed)`; image `i` depends only on
/// `(spec, seed, i)`.
pub fn generate_dataset(spec: &SceneSpec, n_images: usize, seed: u64) -> Result<LabeledSet> {
    validate_spec(spec)?;
    if n_images == 0 {
        return Err(Error::InvalidArgument("n_images must be >= 1".into()));
    }
    let mut images = Vec::with_capacity(n_images);
    let mut groundtruth = Vec::with_capacity(n_images);
    for i in 0..n_images {
        let (px, gt) = generate_image(spec, seed, i as u64);
        images.push(pixels_to_tensor(&px, spec.canvas));
        groundtruth.push(gt);
    }
    Ok(LabeledSet { images, groundtruth })
}
