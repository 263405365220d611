//! Alternating critic/generator updates and the run loop around them.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autograd::{grad, no_grad, Var};
use crate::config::{ExperimentConfig, LossConfig, OptimizerConfig};
use crate::data::{sample_batch_with, Dataset, MatchingBatch};
use crate::error::{ensure_arg, Error, Result};
use crate::losses::graph;
use crate::networks::{
    build_discriminator, build_generator, load_checkpoint, save_checkpoint, Checkpoint, CheckpointHeader, Critic, Generator, LossFamily,
    StageView,
};
use crate::nn::{Mode, ParamId, Session};
use crate::optim::Adam;
use crate::progressive::{GrowthState, Phase};
use crate::rng::{fork, normal_tensor, seeded, Rng};
use crate::tensor::Tensor;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TIMING_FILE: &str = "timing.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoints";
/// Consecutive non-finite steps after which a run is abandoned.
pub const DIVERGENCE_PATIENCE: u32 = 3;

/// One line of the metrics log. Critic statistics describe the last critic
/// update of the step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub stage: usize,
    pub resolution: usize,
    pub alpha: f64,
    pub batch_size: usize,
    pub lr_generator: f64,
    pub lr_critic: f64,
    pub critic_updates: u64,
    pub generator_updates: u64,
    pub critic_loss: f64,
    pub critic_adversarial: f64,
    pub penalty: f64,
    pub generator_loss: f64,
    pub generator_adversarial: f64,
    pub kl: f64,
    pub d_matched: f64,
    pub d_fake: f64,
    pub d_mismatched: f64,
    /// `mean D(matched) - mean D(mismatched)`.
    pub matching_gap: f64,
    /// `mean D(matched) - mean D(fake)`.
    pub wasserstein_estimate: f64,
    /// Mean per-sample input-gradient norms at the penalty points.
    pub grad_norm_images: f64,
    pub grad_norm_embeddings: f64,
    /// Global parameter-gradient norms.
    pub critic_grad_norm: f64,
    pub generator_grad_norm: f64,
    /// Set when the step was rejected; names the non-finite quantity.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diverged: Option<String>,
}

#[derive(Default)]
struct CriticStats {
    loss: f64,
    adversarial: f64,
    penalty: f64,
    d_matched: f64,
    d_fake: f64,
    d_mismatched: f64,
    norm_x: f64,
    norm_e: f64,
    grad_norm: f64,
}

/// Both models with their optimizers and the stream used for augmentation
/// noise, penalty interpolation and stochastic layers.
#[derive(Debug)]
pub struct Trainer {
    pub generator: Generator,
    pub critic: Critic,
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
    pub n_critic: usize,
    opt_g: Adam,
    opt_d: Adam,
    rng: Rng,
    pub step: u64,
    pub critic_updates: u64,
    pub generator_updates: u64,
}

fn concat_rows(parts: &[&Tensor]) -> Tensor {
    let rows: usize = parts.iter().map(|t| t.shape()[0]).sum();
    let mut shape = parts[0].shape().to_vec();
    shape[0] = rows;
    let data = parts.iter().flat_map(|t| t.data().iter().copied()).collect();
    Tensor::from_vec(&shape, data)
}

fn diverged(component: &str, step: u64) -> Error {
    Error::TrainingDiverged {
        component: component.to_string(),
        step,
    }
}

/// Gradients of `loss` for every trainable parameter used in `s`, with
/// their global norm.
pub(crate) fn param_grads(loss: &Var, s: &Session) -> (Vec<(ParamId, Tensor)>, f64) {
    let used = s.used_params();
    let vars: Vec<&Var> = used.iter().map(|(_, v)| v).collect();
    let grads: Vec<(ParamId, Tensor)> = grad(loss, &vars, false)
        .into_iter()
        .zip(&used)
        .map(|(g, (id, v))| (*id, g.map_or_else(|| Tensor::zeros(v.shape()), |g| g.value().clone())))
        .collect();
    let norm = grads.iter().map(|(_, g)| g.data().iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
    (grads, norm)
}

impl Trainer {
    pub fn new(generator: Generator, critic: Critic, loss: LossConfig, optimizer: OptimizerConfig, n_critic: usize, rng: Rng) -> Self {
        Self {
            generator,
            critic,
            opt_g: Adam::new(optimizer.beta1, optimizer.beta2),
            opt_d: Adam::new(optimizer.beta1, optimizer.beta2),
            loss,
            optimizer,
            n_critic,
            rng,
            step: 0,
            critic_updates: 0,
            generator_updates: 0,
        }
    }

    fn epsilon(&mut self, rows: usize) -> Tensor {
        normal_tensor(&mut self.rng, &[rows, self.generator.config.compressed_embed_dim], 1.0)
    }

    fn check_batch(&self, batch: &MatchingBatch, view: StageView) -> Result<()> {
        let r = self.critic.input_resolution(view);
        let cfg = &self.generator.config;
        let b = batch.len();
        ensure_arg!(b > 0, "empty batch");
        ensure_arg!(
            batch.images.shape() == [b, r, r, 3],
            "batch images {:?} do not match resolution {r}",
            batch.images.shape()
        );
        ensure_arg!(
            batch.matched_embeddings.shape() == [b, cfg.embedding_dim]
                && batch.mismatched_embeddings.shape() == [b, cfg.embedding_dim],
            "batch embeddings must be {b}x{}",
            cfg.embedding_dim
        );
        ensure_arg!(batch.noise.shape() == [b, cfg.noise_dim], "batch noise must be {b}x{}", cfg.noise_dim);
        Ok(())
    }

    /// `n_critic` critic updates, one per batch, then one generator update
    /// on the last batch. Learning rates are the configured ones times
    /// `lr_scale`. A non-finite loss or gradient aborts the update it occurs
    /// in and is reported as [`Error::TrainingDiverged`].
    pub fn train_step(&mut self, batches: &[MatchingBatch], view: StageView, lr_scale: f64) -> Result<StepMetrics> {
        ensure_arg!(
            batches.len() == self.n_critic,
            "expected {} batches (one per critic update), got {}",
            self.n_critic,
            batches.len()
        );
        for b in batches {
            self.check_batch(b, view)?;
        }
        self.step += 1;
        let lr_d = self.optimizer.lr_critic * lr_scale;
        let lr_g = self.optimizer.lr_generator * lr_scale;
        let mut stats = CriticStats::default();
        for batch in batches {
            stats = self.critic_update(batch, view, lr_d)?;
        }
        let last = batches.last().unwrap();
        let (g_loss, g_adv, kl, g_norm) = self.generator_update(last, view, lr_g)?;
        Ok(StepMetrics {
            step: self.step,
            stage: view.stage,
            resolution: self.critic.input_resolution(view),
            alpha: view.alpha,
            batch_size: last.len(),
            lr_generator: lr_g,
            lr_critic: lr_d,
            critic_updates: self.critic_updates,
            generator_updates: self.generator_updates,
            critic_loss: stats.loss,
            critic_adversarial: stats.adversarial,
            penalty: stats.penalty,
            generator_loss: g_loss,
            generator_adversarial: g_adv,
            kl,
            d_matched: stats.d_matched,
            d_fake: stats.d_fake,
            d_mismatched: stats.d_mismatched,
            matching_gap: stats.d_matched - stats.d_mismatched,
            wasserstein_estimate: stats.d_matched - stats.d_fake,
            grad_norm_images: stats.norm_x,
            grad_norm_embeddings: stats.norm_e,
            critic_grad_norm: stats.grad_norm,
            generator_grad_norm: g_norm,
            diverged: None,
        })
    }

    fn critic_update(&mut self, batch: &MatchingBatch, view: StageView, lr: f64) -> Result<CriticStats> {
        let b = batch.len();
        let eps = self.epsilon(b);
        let fake = no_grad(|| {
            let mut s = Session::new(&self.generator.store, Mode::Train).with_frozen_params();
            self.generator
                .forward(
                    &mut s,
                    &Var::constant(batch.noise.clone()),
                    &Var::constant(batch.matched_embeddings.clone()),
                    &eps,
                    view,
                )
                .images
                .value()
                .clone()
        });
        let x = concat_rows(&[&batch.images, &fake, &batch.images]);
        let e = concat_rows(&[&batch.matched_embeddings, &batch.matched_embeddings, &batch.mismatched_embeddings]);
        let t: Vec<f64> = (0..b).map(|_| self.rng.random::<f64>()).collect();
        let noise_rng = fork(&mut self.rng);
        let step = self.step;
        let cfg = &self.loss;
        let critic = &self.critic;

        let mut s = Session::new(&critic.store, Mode::Train).with_noise(noise_rng);
        let out = critic.forward(&mut s, &Var::constant(x), &Var::constant(e), view);
        let matched = out.score.slice_last(0, b);
        let fake_s = out.score.slice_last(b, b);
        let mis = out.score.slice_last(2 * b, b);
        let adversarial = match cfg.kind {
            LossFamily::Gan => graph::gan_cls_discriminator(&matched, &fake_s, &mis),
            LossFamily::WassersteinLp | LossFamily::WassersteinGp => {
                graph::wgan_cls_critic(&matched, &fake_s, &mis, cfg.alpha_match)
            }
            LossFamily::LeastSquares => graph::least_squares(&matched, &fake_s, Some(&mis), cfg.ls_a, cfg.ls_b, cfg.ls_c).0,
        };
        let mut stats = CriticStats {
            adversarial: adversarial.item(),
            d_matched: matched.value().mean(),
            d_fake: fake_s.value().mean(),
            d_mismatched: mis.value().mean(),
            ..CriticStats::default()
        };
        let mut loss = adversarial;
        if cfg.kind.uses_gradient_penalty() {
            let real = Var::constant(batch.images.clone());
            let xhat = Var::parameter(graph::interpolate(&real, &Var::constant(fake), &t).value().clone());
            let ematch = Var::constant(batch.matched_embeddings.clone());
            let pout = critic.forward(&mut s, &xhat, &ematch, view);
            let (nx, ne) = graph::input_gradient_norms(&pout.score, &xhat, &pout.embedding);
            let (penalty, weight) = if cfg.kind == LossFamily::WassersteinLp {
                (graph::lipschitz_penalty(&nx, &ne), cfg.lambda_lp)
            } else {
                (graph::gradient_penalty(&nx), cfg.lambda_gp)
            };
            stats.penalty = penalty.item();
            stats.norm_x = nx.value().mean();
            stats.norm_e = ne.value().mean();
            if !stats.penalty.is_finite() {
                return Err(diverged("penalty", step));
            }
            loss = loss.add(&penalty.mul_scalar(weight));
        }
        stats.loss = loss.item();
        if !stats.adversarial.is_finite() {
            return Err(diverged("critic_adversarial", step));
        }
        if !stats.loss.is_finite() {
            return Err(diverged("critic_loss", step));
        }
        let (grads, norm) = param_grads(&loss, &s);
        if !norm.is_finite() {
            return Err(diverged("critic_gradients", step));
        }
        stats.grad_norm = norm;
        let buffers = s.take_buffer_updates();
        drop(s);
        self.opt_d.step(&mut self.critic.store, &grads, lr);
        for (id, v) in buffers {
            self.critic.store.set(id, v);
        }
        self.critic_updates += 1;
        Ok(stats)
    }

    fn generator_update(&mut self, batch: &MatchingBatch, view: StageView, lr: f64) -> Result<(f64, f64, f64, f64)> {
        let eps = self.epsilon(batch.len());
        let noise_rng = fork(&mut self.rng);
        let step = self.step;
        let cfg = &self.loss;
        let e = Var::constant(batch.matched_embeddings.clone());
        let mut s = Session::new(&self.generator.store, Mode::Train);
        let out = self.generator.forward(&mut s, &Var::constant(batch.noise.clone()), &e, &eps, view);
        let mut cs = Session::new(&self.critic.store, Mode::Train)
            .with_frozen_params()
            .with_noise(noise_rng);
        let score = self.critic.forward(&mut cs, &out.images, &e, view).score;
        let adversarial = match cfg.kind {
            LossFamily::Gan => graph::gan_generator_nonsaturating(&score),
            LossFamily::WassersteinLp | LossFamily::WassersteinGp => score.mean().neg(),
            LossFamily::LeastSquares => score.add_scalar(-cfg.ls_c).square().mean(),
        };
        let kl = out.ca.as_ref().map_or_else(|| Var::scalar(0.0), |ca| ca.kl(cfg.kl_direction));
        let loss = adversarial.add(&kl.mul_scalar(cfg.rho_kl));
        let (adv_v, kl_v, loss_v) = (adversarial.item(), kl.item(), loss.item());
        for (name, v) in [("generator_adversarial", adv_v), ("kl", kl_v), ("generator_loss", loss_v)] {
            if !v.is_finite() {
                return Err(diverged(name, step));
            }
        }
        let (grads, norm) = param_grads(&loss, &s);
        if !norm.is_finite() {
            return Err(diverged("generator_gradients", step));
        }
        let buffers = s.take_buffer_updates();
        drop(s);
        drop(cs);
        self.opt_g.step(&mut self.generator.store, &grads, lr);
        for (id, v) in buffers {
            self.generator.store.set(id, v);
        }
        self.generator_updates += 1;
        Ok((loss_v, adv_v, kl_v, norm))
    }
}

/// Result of [`train`].
#[derive(Debug)]
pub struct TrainingRun {
    pub trainer: Trainer,
    pub metrics: Vec<StepMetrics>,
    pub checkpoints: Vec<PathBuf>,
    /// Final cursor of a progressive run.
    pub growth: Option<GrowthState>,
}

struct RunFiles {
    metrics: BufWriter<File>,
    timing: BufWriter<File>,
    checkpoints: PathBuf,
}

impl RunFiles {
    fn create(dir: &Path) -> Result<Self> {
        let checkpoints = dir.join(CHECKPOINT_DIR);
        fs::create_dir_all(&checkpoints)?;
        Ok(Self {
            metrics: BufWriter::new(File::create(dir.join(METRICS_FILE))?),
            timing: BufWriter::new(File::create(dir.join(TIMING_FILE))?),
            checkpoints,
        })
    }

    fn record(&mut self, m: &StepMetrics, elapsed: f64) -> Result<()> {
        serde_json::to_writer(&mut self.metrics, m).map_err(|e| Error::Format(e.to_string()))?;
        self.metrics.write_all(b"\n")?;
        writeln!(self.timing, "{{\"step\":{},\"elapsed_seconds\":{elapsed:.3}}}", m.step)?;
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        self.metrics.flush()?;
        self.timing.flush()?;
        Ok(())
    }
}

/// The stage a checkpoint was taken at: its recorded growth cursor for
/// progressive models, the full model otherwise.
pub fn checkpoint_view(header: &CheckpointHeader) -> StageView {
    let growth: Option<GrowthState> = header
        .state
        .get("growth")
        .and_then(|g| serde_json::from_value(g.clone()).ok());
    match growth {
        Some(g) if header.architecture.family.is_progressive() => StageView::new(g.stage, g.fade_alpha()),
        _ => StageView::full(&header.architecture),
    }
}

/// Steps of a single-resolution run.
pub fn planned_steps(cfg: &ExperimentConfig, dataset_len: usize) -> u64 {
    match (cfg.schedule.total_steps, cfg.schedule.epochs) {
        (Some(s), _) => s,
        (None, Some(e)) => (e * dataset_len as u64).div_ceil(cfg.schedule.batch_size as u64),
        (None, None) => 0,
    }
}

/// Learning-rate factor at `step`: halved every `lr_halving_period` epochs.
pub fn lr_scale(cfg: &ExperimentConfig, dataset_len: usize, step: u64) -> f64 {
    match cfg.schedule.lr_halving_period {
        Some(p) => {
            let period = (p * dataset_len as u64).div_ceil(cfg.schedule.batch_size as u64).max(1);
            0.5f64.powi((step / period) as i32)
        }
        None => 1.0,
    }
}

/// Builds the models and trainer for `cfg`, drawing every random stream
/// from `cfg.seed`. Returns the stream left for data sampling.
pub fn build_trainer(cfg: &ExperimentConfig) -> Result<(Trainer, Rng)> {
    cfg.validate()?;
    let mut root = seeded(cfg.seed);
    let mut g_rng = fork(&mut root);
    let mut c_rng = fork(&mut root);
    let data_rng = fork(&mut root);
    let train_rng = fork(&mut root);
    let mut generator = build_generator(&cfg.model, &mut g_rng)?;
    if let Some(path) = &cfg.init.stage1_checkpoint {
        let (stage1, _) = load_checkpoint(path)?.restore()?;
        generator.load_stage1(&stage1)?;
    }
    let critic = build_discriminator(&cfg.model, cfg.loss.kind, &mut c_rng)?;
    let trainer = Trainer::new(generator, critic, cfg.loss.clone(), cfg.optimizer.clone(), cfg.schedule.n_critic, train_rng);
    Ok((trainer, data_rng))
}

/// Runs the configured schedule on `data`. With `out_dir`, writes the
/// metrics log, a wall-clock sidecar and checkpoints (every
/// `checkpoint_every` steps, at every phase boundary and at the end).
pub fn train(cfg: &ExperimentConfig, data: &Dataset, out_dir: Option<&Path>) -> Result<TrainingRun> {
    let (mut trainer, mut data_rng) = build_trainer(cfg)?;
    let model = &cfg.model;
    ensure_arg!(
        data.embedding_dim() == model.embedding_dim,
        "dataset embeddings have dimension {}, model expects {}",
        data.embedding_dim(),
        model.embedding_dim
    );
    let mut files = out_dir.map(RunFiles::create).transpose()?;
    let progressive = model.family.is_progressive();
    let max_stage = model.num_stages();
    let mut growth = if progressive {
        Some(GrowthState::new(cfg.schedule.images_per_phase)?)
    } else {
        None
    };
    let total = if progressive {
        cfg.schedule.total_steps.unwrap_or(u64::MAX)
    } else {
        planned_steps(cfg, data.len())
    };
    let mut cache: BTreeMap<usize, Dataset> = BTreeMap::new();
    let mut metrics = Vec::new();
    let mut checkpoints = Vec::new();
    let mut failures = 0;
    let started = Instant::now();
    let mut step = 0u64;
    while step < total {
        let (view, res) = match growth {
            Some(g) => (StageView::new(g.stage, g.fade_alpha()), g.resolution(model.base_resolution)),
            None => (StageView::full(model), model.output_resolution()),
        };
        if let std::collections::btree_map::Entry::Vacant(slot) = cache.entry(res) {
            slot.insert(data.at_resolution(res)?);
        }
        let ds = &cache[&res];
        let bs = cfg.batch_size_at(res);
        let batches = (0..cfg.schedule.n_critic)
            .map(|_| sample_batch_with(ds, bs, model.noise_dim, cfg.data.augment, &mut data_rng))
            .collect::<Result<Vec<_>>>()?;
        let scale = lr_scale(cfg, data.len(), step);
        let record = match trainer.train_step(&batches, view, scale) {
            Ok(m) => {
                failures = 0;
                m
            }
            Err(Error::TrainingDiverged { component, step: at }) => {
                failures += 1;
                let m = StepMetrics {
                    step: at,
                    stage: view.stage,
                    resolution: res,
                    alpha: view.alpha,
                    batch_size: bs,
                    critic_updates: trainer.critic_updates,
                    generator_updates: trainer.generator_updates,
                    diverged: Some(component.clone()),
                    ..StepMetrics::default()
                };
                if failures >= DIVERGENCE_PATIENCE {
                    if let Some(f) = files.as_mut() {
                        f.record(&m, started.elapsed().as_secs_f64())?;
                        f.flush()?;
                    }
                    return Err(Error::TrainingDiverged { component, step: at });
                }
                m
            }
            Err(e) => return Err(e),
        };
        if let Some(f) = files.as_mut() {
            f.record(&record, started.elapsed().as_secs_f64())?;
        }
        metrics.push(record);
        step += 1;

        let mut boundary = false;
        let mut finished = step >= total;
        if let Some(g) = growth.as_mut() {
            let before = (g.stage, g.phase);
            *g = g.advance((bs * cfg.schedule.n_critic) as u64, max_stage);
            boundary = (g.stage, g.phase) != before;
            // Without a step budget the run ends with the last stabilization;
            // with one it keeps training the full-size model.
            let done = g.stage == max_stage && g.phase == Phase::Stabilization && g.images_seen_in_phase == g.images_per_phase;
            finished |= done && cfg.schedule.total_steps.is_none();
        }
        if let Some(f) = files.as_mut() {
            if step % cfg.schedule.checkpoint_every == 0 || boundary || finished {
                f.flush()?;
                let state = serde_json::json!({ "growth": growth, "critic_updates": trainer.critic_updates });
                let ckpt = Checkpoint::from_models(&trainer.generator, &trainer.critic, step, state);
                let path = f.checkpoints.join(format!("step_{step:07}.ckpt"));
                save_checkpoint(&path, &ckpt)?;
                checkpoints.push(path);
            }
        }
        if finished {
            break;
        }
    }
    if let Some(f) = files.as_mut() {
        f.flush()?;
    }
    Ok(TrainingRun {
        trainer,
        metrics,
        checkpoints,
        growth,
    })
}
