//! Captioned image datasets, deterministic augmentation and batch sampling
//! of matched and mismatched image-embedding pairs.

mod augment;
mod io;
mod synthetic;

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_arg, Error, Result};
use crate::rng::{normal_tensor, Rng};
use crate::tensor::Tensor;

pub use augment::{augment, flip_image, AUGMENT_VARIANTS, CROP_MARGIN, FLIP_STATES, SHIFT_OFFSETS};
pub use io::{load_dataset, read_embeddings, read_png, save_dataset, write_embeddings, write_png, MANIFEST_FILE};
pub use synthetic::{make_synthetic_dataset, make_synthetic_splits, SyntheticSpec, COLORS, SHAPES};

/// One image with pixels in `[-1, 1]`, shape `(H, W, 3)`, and its captions.
#[derive(Clone, Debug, PartialEq)]
pub struct CaptionedImage {
    pub pixels: Tensor,
    pub embeddings: Vec<Vec<f64>>,
    pub class_id: u32,
}

impl CaptionedImage {
    pub fn new(pixels: Tensor, embeddings: Vec<Vec<f64>>, class_id: u32) -> Result<Self> {
        ensure_arg!(
            pixels.ndim() == 3 && pixels.shape()[2] == 3,
            "pixels must be (H, W, 3), got {:?}",
            pixels.shape()
        );
        ensure_arg!(
            pixels.data().iter().all(|v| (-1.0..=1.0).contains(v)),
            "pixel values must lie in [-1, 1]"
        );
        ensure_arg!(!embeddings.is_empty(), "an image needs at least one caption embedding");
        let dim = embeddings[0].len();
        ensure_arg!(
            dim > 0 && embeddings.iter().all(|e| e.len() == dim),
            "caption embeddings must share one positive dimension"
        );
        ensure_arg!(
            embeddings.iter().flatten().all(|v| v.is_finite()),
            "caption embeddings must be finite"
        );
        Ok(Self {
            pixels,
            embeddings,
            class_id,
        })
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn embedding_dim(&self) -> usize {
        self.embeddings[0].len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Description of a dataset directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub split: Split,
    pub image_size: usize,
    pub embedding_dim: usize,
    pub class_ids: BTreeSet<u32>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        ensure_arg!(self.image_size > 0, "image_size must be positive");
        ensure_arg!(self.embedding_dim > 0, "embedding_dim must be positive");
        ensure_arg!(!self.class_ids.is_empty(), "manifest lists no classes");
        Ok(())
    }
}

/// Fails unless the two manifests describe a train and a test split over
/// disjoint class sets.
pub fn check_disjoint_splits(train: &DatasetManifest, test: &DatasetManifest) -> Result<()> {
    ensure_arg!(
        train.split == Split::Train && test.split == Split::Test,
        "expected one train and one test manifest"
    );
    let shared: Vec<u32> = train.class_ids.intersection(&test.class_ids).copied().collect();
    ensure_arg!(shared.is_empty(), "train and test share classes {shared:?}");
    Ok(())
}

/// An immutable collection of same-sized captioned images.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Vec<CaptionedImage>,
    image_size: usize,
    embedding_dim: usize,
    by_class: BTreeMap<u32, Vec<usize>>,
}

impl Dataset {
    pub fn new(images: Vec<CaptionedImage>) -> Result<Self> {
        ensure_arg!(!images.is_empty(), "dataset is empty");
        let image_size = images[0].height();
        let embedding_dim = images[0].embedding_dim();
        let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, im) in images.iter().enumerate() {
            ensure_arg!(
                im.height() == image_size && im.width() == image_size,
                "image {i} is {}x{}, expected square {image_size}",
                im.height(),
                im.width()
            );
            ensure_arg!(
                im.embedding_dim() == embedding_dim,
                "image {i} has embedding dimension {}, expected {embedding_dim}",
                im.embedding_dim()
            );
            by_class.entry(im.class_id).or_default().push(i);
        }
        Ok(Self {
            images,
            image_size,
            embedding_dim,
            by_class,
        })
    }

    pub fn images(&self) -> &[CaptionedImage] {
        &self.images
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    pub fn embedding_dim(&self) -> usize {
        self.embedding_dim
    }

    pub fn class_ids(&self) -> BTreeSet<u32> {
        self.by_class.keys().copied().collect()
    }

    pub fn num_classes(&self) -> usize {
        self.by_class.len()
    }

    /// Indices of the images of one class.
    pub fn class_members(&self, class_id: u32) -> &[usize] {
        self.by_class.get(&class_id).map_or(&[], Vec::as_slice)
    }

    pub fn manifest(&self, root: PathBuf, split: Split) -> DatasetManifest {
        DatasetManifest {
            root,
            split,
            image_size: self.image_size,
            embedding_dim: self.embedding_dim,
            class_ids: self.class_ids(),
        }
    }

    /// The same dataset at another resolution: box-filter averaging when
    /// shrinking by an integer factor, nearest-neighbor when growing by one.
    pub fn at_resolution(&self, size: usize) -> Result<Dataset> {
        if size == self.image_size {
            return Ok(self.clone());
        }
        let images = self
            .images
            .iter()
            .map(|im| {
                Ok(CaptionedImage {
                    pixels: resize_image(&im.pixels, size)?,
                    embeddings: im.embeddings.clone(),
                    class_id: im.class_id,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(images)
    }

    /// All pixels stacked into `(N, H, W, 3)`.
    pub fn pixel_tensor(&self) -> Tensor {
        let pixels: Vec<Tensor> = self.images.iter().map(|im| im.pixels.clone()).collect();
        Tensor::stack(&pixels).expect("dataset images share a shape")
    }
}

/// Resizes a square `(S, S, 3)` image to `(size, size, 3)`.
pub fn resize_image(pixels: &Tensor, size: usize) -> Result<Tensor> {
    let s = pixels.shape()[0];
    ensure_arg!(size > 0, "target size must be positive");
    let src = pixels.data();
    let mut out = vec![0.0; size * size * 3];
    if s % size == 0 {
        let f = s / size;
        let norm = 1.0 / (f * f) as f64;
        for y in 0..size {
            for x in 0..size {
                for dy in 0..f {
                    for dx in 0..f {
                        let base = ((y * f + dy) * s + x * f + dx) * 3;
                        for c in 0..3 {
                            out[(y * size + x) * 3 + c] += src[base + c] * norm;
                        }
                    }
                }
            }
        }
    } else if size % s == 0 {
        let f = size / s;
        for y in 0..size {
            for x in 0..size {
                let base = ((y / f) * s + x / f) * 3;
                out[(y * size + x) * 3..(y * size + x) * 3 + 3].copy_from_slice(&src[base..base + 3]);
            }
        }
    } else {
        return Err(Error::InvalidArgument(format!(
            "cannot resize {s}x{s} to {size}x{size}: sizes must differ by an integer factor"
        )));
    }
    Ok(Tensor::from_vec(&[size, size, 3], out))
}

/// Aligned arrays for one training step.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchingBatch {
    /// `(B, H, W, 3)`.
    pub images: Tensor,
    /// `(B, N_phi)`.
    pub matched_embeddings: Tensor,
    /// `(B, N_phi)`, each row a caption of an image from another class.
    pub mismatched_embeddings: Tensor,
    /// `(B, N_z)`, standard normal.
    pub noise: Tensor,
    pub class_ids: Vec<u32>,
    pub mismatched_class_ids: Vec<u32>,
}

impl MatchingBatch {
    pub fn len(&self) -> usize {
        self.class_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_ids.is_empty()
    }
}

/// Draws a batch without augmentation.
pub fn sample_batch(dataset: &Dataset, batch_size: usize, noise_dim: usize, rng: &mut Rng) -> Result<MatchingBatch> {
    sample_batch_with(dataset, batch_size, noise_dim, false, rng)
}

/// Draws images uniformly with replacement, one caption per image, and a
/// caption of a uniformly chosen image of another class for the mismatched
/// stream. With `augmented`, each image passes through a random crop/flip
/// variant.
pub fn sample_batch_with(
    dataset: &Dataset,
    batch_size: usize,
    noise_dim: usize,
    augmented: bool,
    rng: &mut Rng,
) -> Result<MatchingBatch> {
    ensure_arg!(batch_size > 0, "batch_size must be positive");
    if dataset.num_classes() < 2 {
        return Err(Error::CannotFormMismatch(format!(
            "dataset has {} class(es); at least 2 are needed",
            dataset.num_classes()
        )));
    }
    let n = dataset.len();
    let s = dataset.image_size();
    let d = dataset.embedding_dim();
    let mut pixels = Vec::with_capacity(batch_size * s * s * 3);
    let mut matched = Vec::with_capacity(batch_size * d);
    let mut mismatched = Vec::with_capacity(batch_size * d);
    let mut class_ids = Vec::with_capacity(batch_size);
    let mut mis_ids = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let im = &dataset.images[rng.random_range(0..n)];
        if augmented {
            let v = rng.random_range(0..AUGMENT_VARIANTS);
            pixels.extend_from_slice(augment(im, v)?.pixels.data());
        } else {
            pixels.extend_from_slice(im.pixels.data());
        }
        matched.extend_from_slice(&im.embeddings[rng.random_range(0..im.embeddings.len())]);
        let other = loop {
            let j = rng.random_range(0..n);
            if dataset.images[j].class_id != im.class_id {
                break &dataset.images[j];
            }
        };
        mismatched.extend_from_slice(&other.embeddings[rng.random_range(0..other.embeddings.len())]);
        class_ids.push(im.class_id);
        mis_ids.push(other.class_id);
    }
    Ok(MatchingBatch {
        images: Tensor::from_vec(&[batch_size, s, s, 3], pixels),
        matched_embeddings: Tensor::from_vec(&[batch_size, d], matched),
        mismatched_embeddings: Tensor::from_vec(&[batch_size, d], mismatched),
        noise: normal_tensor(rng, &[batch_size, noise_dim], 1.0),
        class_ids,
        mismatched_class_ids: mis_ids,
    })
}
