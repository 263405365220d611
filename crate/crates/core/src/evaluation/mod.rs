//! Sample quality and memorization probes: Inception Score over a small
//! stand-in classifier, embedding interpolation sweeps and nearest-neighbor
//! lookups, plus PNG mosaics with a metadata sidecar.
//!
//! KL terms use the natural logarithm.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autograd::{no_grad, Var};
use crate::data::{flip_image, write_png, Dataset};
use crate::error::{ensure_arg, Result};
use crate::networks::{Generator, LayerKind, LayerSpec, SegmentStyle, Sequential, StageView};
use crate::nn::{Activation, Mode, NormKind, ParamStore, Session};
use crate::optim::Adam;
use crate::rng::{normal_tensor, seeded, Rng};
use crate::tensor::Tensor;
use crate::training::param_grads;

pub const DEFAULT_SPLITS: usize = 10;
/// Sample count used at desk scale; full-scale runs score 50,000 images.
pub const DESK_SAMPLE_COUNT: usize = 5_000;
pub const FULL_SAMPLE_COUNT: usize = 50_000;
/// Held-out accuracy below which scores carry a reliability warning.
pub const ACCURACY_THRESHOLD: f64 = 0.9;

/// Published full-scale scores as `(label, mean, std)`, for documentation.
pub const REFERENCE_SCORES: [(&str, f64, f64); 3] = [
    ("flowers 64x64", 3.70, 0.03),
    ("flowers 256x256", 3.86, 0.02),
    ("birds 256x256", 4.09, 0.03),
];

const ROW_SUM_TOLERANCE: f64 = 1e-6;

/// `N × C` class posteriors, one distribution per row.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassProbabilities {
    probs: Tensor,
}

impl ClassProbabilities {
    pub fn new(probs: Tensor) -> Result<Self> {
        ensure_arg!(probs.ndim() == 2, "class probabilities must be a matrix, got shape {:?}", probs.shape());
        let c = probs.shape()[1];
        ensure_arg!(c > 0, "class probabilities need at least one class");
        for (i, row) in probs.data().chunks_exact(c).enumerate() {
            ensure_arg!(row.iter().all(|&p| p >= 0.0 && p.is_finite()), "row {i} has a negative or non-finite entry");
            let s: f64 = row.iter().sum();
            ensure_arg!((s - 1.0).abs() <= ROW_SUM_TOLERANCE, "row {i} sums to {s}");
        }
        Ok(Self { probs })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let c = rows.first().map_or(0, Vec::len);
        ensure_arg!(rows.iter().all(|r| r.len() == c), "rows differ in length");
        Self::new(Tensor::from_vec(&[rows.len(), c], rows.concat()))
    }

    pub fn num_rows(&self) -> usize {
        self.probs.shape()[0]
    }

    pub fn num_classes(&self) -> usize {
        self.probs.shape()[1]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.num_classes();
        &self.probs.data()[i * c..(i + 1) * c]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.probs
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InceptionScoreReport {
    pub mean: f64,
    /// Population standard deviation over splits.
    pub std: f64,
    pub per_split: Vec<f64>,
    pub num_samples: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub classifier_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

impl InceptionScoreReport {
    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("report serializes")
    }
}

/// `exp(mean KL(row ‖ marginal))` over one set of rows.
fn split_score(p: &ClassProbabilities, rows: &[usize]) -> f64 {
    let c = p.num_classes();
    // Accumulating deviations from the first row keeps the marginal exact
    // when all rows agree, so such splits score exactly one.
    let first = p.row(rows[0]);
    let mut dev = vec![0.0; c];
    for &i in &rows[1..] {
        for (d, (a, b)) in dev.iter_mut().zip(p.row(i).iter().zip(first)) {
            *d += a - b;
        }
    }
    let n = rows.len() as f64;
    let marginal: Vec<f64> = first.iter().zip(&dev).map(|(f, d)| f + d / n).collect();
    let mut total = 0.0;
    for &i in rows {
        let kl: f64 = p
            .row(i)
            .iter()
            .zip(&marginal)
            .filter(|(&q, _)| q > 0.0)
            .map(|(&q, &m)| q * (q / m).ln())
            .sum();
        total += kl.max(0.0);
    }
    (total / n).exp()
}

/// Shuffles the rows, scores `n_splits` equal sets and reports their mean and
/// standard deviation.
pub fn inception_score(probs: &ClassProbabilities, n_splits: usize, rng: &mut Rng) -> Result<InceptionScoreReport> {
    let n = probs.num_rows();
    ensure_arg!(n_splits > 0, "n_splits must be positive");
    ensure_arg!(n > 0 && n % n_splits == 0, "{n} rows cannot be split into {n_splits} equal sets");
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let per_split: Vec<f64> = order.chunks(n / n_splits).map(|rows| split_score(probs, rows)).collect();
    let k = per_split.len() as f64;
    let mean = per_split.iter().sum::<f64>() / k;
    let std = (per_split.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / k).sqrt();
    Ok(InceptionScoreReport {
        mean,
        std,
        per_split,
        num_samples: n,
        classifier_accuracy: None,
        warning: None,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub width: usize,
    /// Every `holdout_every`-th image of each class is kept for validation.
    pub holdout_every: usize,
    pub seed: u64,
}

impl Default for ClassifierOptions {
    fn default() -> Self {
        Self {
            epochs: 8,
            batch_size: 32,
            learning_rate: 2e-3,
            width: 16,
            holdout_every: 5,
            seed: 0,
        }
    }
}

/// Small convolutional classifier with a softmax head.
#[derive(Clone, Debug)]
pub struct Classifier {
    store: ParamStore,
    body: Sequential,
    /// Dataset class id of each output column.
    pub class_ids: Vec<u32>,
}

impl Classifier {
    fn build(image_size: usize, class_ids: Vec<u32>, width: usize, rng: &mut Rng) -> Result<Self> {
        ensure_arg!(class_ids.len() >= 2, "a classifier needs at least two classes");
        ensure_arg!(
            image_size >= 4 && image_size.is_power_of_two(),
            "classifier input must be a power of two of at least 4, got {image_size}"
        );
        let mut specs = Vec::new();
        let mut r = image_size;
        loop {
            specs.push(LayerSpec::conv(3, width, 1));
            specs.push(LayerSpec::act(Activation::Relu));
            if r == 4 {
                break;
            }
            specs.push(LayerSpec::new(LayerKind::DownsampleAverage));
            r /= 2;
        }
        specs.push(LayerSpec::dense(1, class_ids.len()));
        let style = SegmentStyle {
            norm: NormKind::None,
            activation: Activation::Relu,
            noise_strength: 0.0,
        };
        let mut store = ParamStore::new();
        let body = Sequential::build(&mut store, rng, "classifier", [image_size, image_size, 3], &specs, style, 0)?;
        Ok(Self { store, body, class_ids })
    }

    pub fn image_size(&self) -> usize {
        self.body.input_shape()[0]
    }

    fn logits(&self, s: &mut Session, images: &Var) -> Var {
        let b = images.shape()[0];
        self.body.forward(s, images, None).reshape(&[b, self.class_ids.len()])
    }

    /// Softmax posteriors for `(N, S, S, 3)` images.
    pub fn probabilities(&self, images: &Tensor) -> Result<ClassProbabilities> {
        let s = self.image_size();
        ensure_arg!(
            images.ndim() == 4 && images.shape()[1..] == [s, s, 3],
            "classifier expects (N, {s}, {s}, 3) images, got {:?}",
            images.shape()
        );
        let c = self.class_ids.len();
        let logits = no_grad(|| {
            let mut sess = Session::new(&self.store, Mode::Eval);
            self.logits(&mut sess, &Var::constant(images.clone())).value().clone()
        });
        let mut out = Vec::with_capacity(logits.len());
        for row in logits.data().chunks_exact(c) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
            let z: f64 = e.iter().sum();
            out.extend(e.iter().map(|v| v / z));
        }
        ClassProbabilities::new(Tensor::from_vec(&[images.shape()[0], c], out))
    }

    /// Fraction of images whose most probable class is their label.
    pub fn accuracy(&self, dataset: &Dataset) -> Result<f64> {
        let probs = self.probabilities(&dataset.pixel_tensor())?;
        let hits = dataset
            .images()
            .iter()
            .enumerate()
            .filter(|(i, im)| self.class_ids[argmax(probs.row(*i))] == im.class_id)
            .count();
        Ok(hits as f64 / dataset.len() as f64)
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug)]
pub struct TrainedClassifier {
    pub classifier: Classifier,
    pub held_out_accuracy: f64,
    /// Set when accuracy falls short of [`ACCURACY_THRESHOLD`].
    pub warning: Option<String>,
}

/// Trains a classifier on `dataset` minus a per-class holdout and measures
/// accuracy on that holdout.
pub fn train_eval_classifier(dataset: &Dataset, opts: &ClassifierOptions) -> Result<TrainedClassifier> {
    ensure_arg!(opts.epochs > 0 && opts.batch_size > 0, "epochs and batch_size must be positive");
    ensure_arg!(opts.holdout_every >= 2, "holdout_every must be at least 2");
    let class_ids: Vec<u32> = dataset.class_ids().into_iter().collect();
    let mut train_idx = Vec::new();
    let mut held_idx = Vec::new();
    for &c in &class_ids {
        for (k, &i) in dataset.class_members(c).iter().enumerate() {
            if k % opts.holdout_every == opts.holdout_every - 1 {
                held_idx.push(i);
            } else {
                train_idx.push(i);
            }
        }
    }
    ensure_arg!(!held_idx.is_empty(), "dataset too small for a holdout split");
    let subset = |idx: &[usize]| Dataset::new(idx.iter().map(|&i| dataset.images()[i].clone()).collect());
    let held_out = subset(&held_idx)?;

    let mut rng = seeded(opts.seed);
    let mut classifier = Classifier::build(dataset.image_size(), class_ids.clone(), opts.width, &mut rng)?;
    let column = |id: u32| class_ids.binary_search(&id).expect("known class");
    let mut adam = Adam::new(0.9, 0.999);
    let s = dataset.image_size();
    let c = class_ids.len();
    for _ in 0..opts.epochs {
        train_idx.shuffle(&mut rng);
        for chunk in train_idx.chunks(opts.batch_size) {
            let mut pixels = Vec::with_capacity(chunk.len() * s * s * 3);
            let mut onehot = vec![0.0; chunk.len() * c];
            for (row, &i) in chunk.iter().enumerate() {
                let im = &dataset.images()[i];
                if rng.random_bool(0.5) {
                    pixels.extend_from_slice(flip_image(&im.pixels).data());
                } else {
                    pixels.extend_from_slice(im.pixels.data());
                }
                onehot[row * c + column(im.class_id)] = 1.0;
            }
            let b = chunk.len();
            let x = Var::constant(Tensor::from_vec(&[b, s, s, 3], pixels));
            let y = Var::constant(Tensor::from_vec(&[b, c], onehot));
            let mut sess = Session::new(&classifier.store, Mode::Train);
            let loss = cross_entropy(&classifier.logits(&mut sess, &x), &y);
            let (grads, _) = param_grads(&loss, &sess);
            drop(sess);
            adam.step(&mut classifier.store, &grads, opts.learning_rate);
        }
    }
    let held_out_accuracy = classifier.accuracy(&held_out)?;
    let warning = (held_out_accuracy < ACCURACY_THRESHOLD).then(|| {
        format!("evaluation unreliable: classifier held-out accuracy {held_out_accuracy:.3} is below {ACCURACY_THRESHOLD}")
    });
    Ok(TrainedClassifier {
        classifier,
        held_out_accuracy,
        warning,
    })
}

/// Mean softmax cross-entropy of `(B, C)` logits against one-hot targets.
fn cross_entropy(logits: &Var, onehot: &Var) -> Var {
    let [b, c] = [logits.shape()[0], logits.shape()[1]];
    let maxes: Vec<f64> = logits
        .value()
        .data()
        .chunks_exact(c)
        .map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let z = logits.sub(&Var::constant(Tensor::from_vec(&[b, 1], maxes)));
    let lse = z.exp().sum_to(&[b, 1]).log();
    let picked = z.mul(onehot).sum_to(&[b, 1]);
    lse.sub(&picked).mean()
}

/// How the conditioning augmentation is driven at evaluation time.
pub enum CaNoise<'a> {
    /// `ε = 0`: the generator sees the augmentation mean.
    Mean,
    Sample(&'a mut Rng),
}

impl CaNoise<'_> {
    fn epsilon(&mut self, rows: usize, dim: usize) -> Tensor {
        match self {
            CaNoise::Mean => Tensor::zeros(&[rows, dim]),
            CaNoise::Sample(rng) => normal_tensor(rng, &[rows, dim], 1.0),
        }
    }
}

/// Images `G(z, (1 − t)·e1 + t·e2)` for `steps` evenly spaced `t` in `[0, 1]`,
/// with `z` and the augmentation noise held fixed.
pub fn interpolation_sweep(
    generator: &Generator,
    z: &[f64],
    e1: &[f64],
    e2: &[f64],
    steps: usize,
    view: StageView,
    mut ca: CaNoise,
) -> Result<Vec<Tensor>> {
    let cfg = &generator.config;
    ensure_arg!(steps >= 2, "an interpolation needs at least 2 steps, got {steps}");
    ensure_arg!(z.len() == cfg.noise_dim, "noise has {} entries, expected {}", z.len(), cfg.noise_dim);
    ensure_arg!(
        e1.len() == cfg.embedding_dim && e2.len() == cfg.embedding_dim,
        "embeddings must have {} entries",
        cfg.embedding_dim
    );
    let mut noise = Vec::with_capacity(steps * z.len());
    let mut emb = Vec::with_capacity(steps * e1.len());
    for k in 0..steps {
        let t = k as f64 / (steps - 1) as f64;
        noise.extend_from_slice(z);
        emb.extend(e1.iter().zip(e2).map(|(a, b)| (1.0 - t) * a + t * b));
    }
    let eps_row = ca.epsilon(1, cfg.compressed_embed_dim);
    let eps = Tensor::from_vec(&[steps, cfg.compressed_embed_dim], eps_row.data().repeat(steps));
    let images = generator.generate(
        &Tensor::from_vec(&[steps, z.len()], noise),
        &Tensor::from_vec(&[steps, e1.len()], emb),
        &eps,
        view,
    );
    Ok((0..steps).map(|k| images.row(k)).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub index: usize,
    pub distance: f64,
}

/// For every sample, the training image at the smallest Euclidean pixel
/// distance; ties go to the lower index.
pub fn nearest_neighbor_analysis(samples: &Tensor, train_images: &Tensor) -> Result<Vec<Neighbor>> {
    ensure_arg!(samples.ndim() == 4 && train_images.ndim() == 4, "expected (N, H, W, 3) image stacks");
    ensure_arg!(train_images.shape()[0] > 0, "training set is empty");
    ensure_arg!(
        samples.shape()[1..] == train_images.shape()[1..],
        "resolution mismatch: samples {:?} vs training images {:?}",
        &samples.shape()[1..],
        &train_images.shape()[1..]
    );
    let d: usize = samples.shape()[1..].iter().product();
    let train: Vec<&[f64]> = train_images.data().chunks_exact(d).collect();
    Ok(samples
        .data()
        .chunks_exact(d)
        .map(|s| {
            let mut best = Neighbor {
                index: 0,
                distance: f64::INFINITY,
            };
            for (j, t) in train.iter().enumerate() {
                let sq: f64 = s.iter().zip(*t).map(|(a, b)| (a - b) * (a - b)).sum();
                if sq < best.distance {
                    best = Neighbor { index: j, distance: sq };
                }
            }
            best.distance = best.distance.sqrt();
            best
        })
        .collect())
}

/// Draws `n` caption embeddings: a random image, then one of its captions.
pub fn sample_captions(dataset: &Dataset, n: usize, rng: &mut Rng) -> Tensor {
    let d = dataset.embedding_dim();
    let mut out = Vec::with_capacity(n * d);
    for _ in 0..n {
        let im = &dataset.images()[rng.random_range(0..dataset.len())];
        out.extend_from_slice(&im.embeddings[rng.random_range(0..im.embeddings.len())]);
    }
    Tensor::from_vec(&[n, d], out)
}

/// Generates one image per embedding row, in batches.
pub fn generate_images(
    generator: &Generator,
    embeddings: &Tensor,
    view: StageView,
    batch_size: usize,
    rng: &mut Rng,
    mut ca: CaNoise,
) -> Tensor {
    let cfg = &generator.config;
    let n = embeddings.shape()[0];
    let mut chunks = Vec::new();
    for start in (0..n).step_by(batch_size.max(1)) {
        let b = batch_size.min(n - start);
        let rows: Vec<Tensor> = (start..start + b).map(|i| embeddings.row(i)).collect();
        let z = normal_tensor(rng, &[b, cfg.noise_dim], 1.0);
        let eps = ca.epsilon(b, cfg.compressed_embed_dim);
        chunks.push(generator.generate(&z, &Tensor::stack(&rows).expect("rows share a shape"), &eps, view));
    }
    let r = generator.output_resolution(view);
    let data: Vec<f64> = chunks.iter().flat_map(|c| c.data().iter().copied()).collect();
    Tensor::from_vec(&[n, r, r, 3], data)
}

/// Scores `images` with `trained`, attaching its accuracy and any warning.
pub fn score_images(
    trained: &TrainedClassifier,
    images: &Tensor,
    n_splits: usize,
    rng: &mut Rng,
) -> Result<InceptionScoreReport> {
    let probs = trained.classifier.probabilities(images)?;
    let mut report = inception_score(&probs, n_splits, rng)?;
    report.classifier_accuracy = Some(trained.held_out_accuracy);
    report.warning = trained.warning.clone();
    Ok(report)
}

/// Grid layout recorded next to a mosaic PNG.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MosaicMeta {
    pub rows: usize,
    pub cols: usize,
    pub cell_size: usize,
    pub gap: usize,
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
}

const MOSAIC_GAP: usize = 1;

/// Tiles equally sized `(S, S, 3)` cells row-major into one image with a
/// one-pixel white gap.
pub fn mosaic(cells: &[Tensor], cols: usize) -> Result<Tensor> {
    ensure_arg!(!cells.is_empty() && cols > 0, "a mosaic needs cells and columns");
    let s = cells[0].shape()[0];
    ensure_arg!(
        cells.iter().all(|c| c.shape() == [s, s, 3]),
        "mosaic cells must share an (S, S, 3) shape"
    );
    let rows = cells.len().div_ceil(cols);
    let (h, w) = (rows * (s + MOSAIC_GAP) - MOSAIC_GAP, cols * (s + MOSAIC_GAP) - MOSAIC_GAP);
    let mut out = vec![1.0; h * w * 3];
    for (k, cell) in cells.iter().enumerate() {
        let (oy, ox) = ((k / cols) * (s + MOSAIC_GAP), (k % cols) * (s + MOSAIC_GAP));
        for y in 0..s {
            let dst = ((oy + y) * w + ox) * 3;
            out[dst..dst + s * 3].copy_from_slice(&cell.data()[y * s * 3..(y + 1) * s * 3]);
        }
    }
    Ok(Tensor::from_vec(&[h, w, 3], out))
}

/// Sidecar path for a mosaic: `grid.png` → `grid.layout.toml`.
pub fn sidecar_path(png: &Path) -> PathBuf {
    png.with_extension("layout.toml")
}

/// Writes the mosaic PNG and its sidecar; returns the sidecar path.
pub fn write_mosaic(
    path: &Path,
    cells: &[Tensor],
    cols: usize,
    row_labels: Vec<String>,
    col_labels: Vec<String>,
) -> Result<PathBuf> {
    let image = mosaic(cells, cols)?;
    write_png(path, &image)?;
    let meta = MosaicMeta {
        rows: cells.len().div_ceil(cols),
        cols,
        cell_size: cells[0].shape()[0],
        gap: MOSAIC_GAP,
        row_labels,
        col_labels,
    };
    let side = sidecar_path(path);
    fs::write(&side, toml::to_string(&meta).expect("metadata serializes"))?;
    Ok(side)
}
