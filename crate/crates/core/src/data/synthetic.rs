//! Procedural stand-in for a captioned flower or bird dataset: colored shapes
//! on plain backgrounds, with caption embeddings that encode shape and color.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{CaptionedImage, Dataset};
use crate::error::{ensure_arg, Result};
use crate::rng::{fork, normal_tensor, seeded, standard_normal, Rng};
use crate::tensor::Tensor;

pub const SHAPES: [&str; 6] = ["disk", "square", "triangle", "ring", "cross", "diamond"];
pub const COLORS: [(&str, [f64; 3]); 6] = [
    ("red", [0.9, -0.8, -0.8]),
    ("green", [-0.8, 0.8, -0.8]),
    ("blue", [-0.8, -0.7, 0.9]),
    ("yellow", [0.9, 0.85, -0.8]),
    ("magenta", [0.85, -0.8, 0.85]),
    ("cyan", [-0.8, 0.85, 0.9]),
];

const CAPTIONS_PER_IMAGE: usize = 5;
const CAPTION_NOISE: f64 = 0.5;
const SUPERSAMPLE: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub images_per_class: usize,
    pub image_size: usize,
    pub embedding_dim: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        ensure_arg!(self.num_classes > 0, "num_classes must be positive");
        ensure_arg!(
            self.num_classes <= SHAPES.len() * COLORS.len(),
            "at most {} distinct (shape, color) classes",
            SHAPES.len() * COLORS.len()
        );
        ensure_arg!(self.images_per_class > 0, "images_per_class must be positive");
        ensure_arg!(self.image_size >= 4, "image_size must be at least 4");
        ensure_arg!(
            self.embedding_dim >= self.num_classes,
            "embedding_dim ({}) must be at least num_classes ({})",
            self.embedding_dim,
            self.num_classes
        );
        Ok(())
    }
}

/// Class `k` draws shape `k mod 6` and color `(k + k / 6) mod 6`, so every
/// class has its own pair and the first six differ in both attributes.
fn attributes(class: usize) -> (usize, usize) {
    (class % SHAPES.len(), (class + class / SHAPES.len()) % COLORS.len())
}

fn inside(shape: usize, u: f64, v: f64) -> bool {
    match shape {
        0 => u * u + v * v <= 1.0,
        1 => u.abs() <= 0.85 && v.abs() <= 0.85,
        2 => v <= 0.8 && v >= -1.0 + 1.8 * u.abs(),
        3 => {
            let r2 = u * u + v * v;
            (0.45..=1.0).contains(&r2)
        }
        4 => (u.abs() <= 0.3 && v.abs() <= 1.0) || (v.abs() <= 0.3 && u.abs() <= 1.0),
        _ => u.abs() + v.abs() <= 1.0,
    }
}

fn render(shape: usize, color: [f64; 3], size: usize, rng: &mut Rng) -> Tensor {
    let s = size as f64;
    let background: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..-0.3)).collect();
    let radius = s * rng.random_range(0.26..0.36);
    let cy = s * (0.5 + rng.random_range(-0.12..0.12));
    let cx = s * (0.5 + rng.random_range(-0.12..0.12));
    let shade = rng.random_range(0.85..1.0);
    let mut out = Vec::with_capacity(size * size * 3);
    let sub = 1.0 / SUPERSAMPLE as f64;
    for y in 0..size {
        for x in 0..size {
            let mut cover = 0.0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let py = y as f64 + (sy as f64 + 0.5) * sub;
                    let px = x as f64 + (sx as f64 + 0.5) * sub;
                    if inside(shape, (px - cx) / radius, (py - cy) / radius) {
                        cover += 1.0;
                    }
                }
            }
            cover /= (SUPERSAMPLE * SUPERSAMPLE) as f64;
            for c in 0..3 {
                let v = cover * color[c] * shade + (1.0 - cover) * background[c];
                out.push(v.clamp(-1.0, 1.0));
            }
        }
    }
    Tensor::from_vec(&[size, size, 3], out)
}

/// Generates `num_classes · images_per_class` images. Caption embeddings are
/// noisy copies of a class prototype built from a shape code, a color code
/// and a class-specific axis.
pub fn make_synthetic_dataset(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let d = spec.embedding_dim;
    let mut root = seeded(spec.seed);
    let mut code_rng = fork(&mut root);
    let scale = 1.0 / (d as f64).sqrt();
    let shape_codes: Vec<Tensor> = (0..SHAPES.len()).map(|_| normal_tensor(&mut code_rng, &[d], scale)).collect();
    let color_codes: Vec<Tensor> = (0..COLORS.len()).map(|_| normal_tensor(&mut code_rng, &[d], scale)).collect();
    let mut images = Vec::with_capacity(spec.num_classes * spec.images_per_class);
    for class in 0..spec.num_classes {
        let (shape, color) = attributes(class);
        let mut proto: Vec<f64> = shape_codes[shape]
            .data()
            .iter()
            .zip(color_codes[color].data())
            .map(|(a, b)| a + b)
            .collect();
        proto[class] += 0.5;
        let mut class_rng = fork(&mut root);
        for _ in 0..spec.images_per_class {
            let pixels = render(shape, COLORS[color].1, spec.image_size, &mut class_rng);
            let captions = (0..CAPTIONS_PER_IMAGE)
                .map(|_| {
                    proto
                        .iter()
                        .map(|p| p + CAPTION_NOISE * scale * standard_normal(&mut class_rng))
                        .collect()
                })
                .collect();
            images.push(CaptionedImage::new(pixels, captions, class as u32)?);
        }
    }
    Dataset::new(images)
}

/// Generates one dataset and splits it by class: the last `test_classes`
/// classes form the test split.
pub fn make_synthetic_splits(spec: &SyntheticSpec, test_classes: usize) -> Result<(Dataset, Dataset)> {
    ensure_arg!(
        test_classes > 0 && test_classes < spec.num_classes,
        "test_classes must leave at least one class on each side"
    );
    let all = make_synthetic_dataset(spec)?;
    let cut = (spec.num_classes - test_classes) as u32;
    let (train, test): (Vec<_>, Vec<_>) = all.images().iter().cloned().partition(|im| im.class_id < cut);
    Ok((Dataset::new(train)?, Dataset::new(test)?))
}
