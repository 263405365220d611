//! Generator and critic builders for every model family.
//!
//! Models are assembled from [`plan::LayerSpec`] lists, so each family's
//! layer table is data and its shape contract can be checked without running
//! a forward pass.

mod checkpoint;
mod families;
pub mod plan;

use serde::{Deserialize, Serialize};

use crate::autograd::{no_grad, Var};
use crate::conditioning::{CaOutput, ConditioningAugmentation, EmbeddingCompressor};
use crate::error::{ensure_arg, Error, Result};
use crate::nn::{Activation, Mode, NormKind, ParamStore, Session};
use crate::rng::{normal_tensor, Rng};
use crate::tensor::Tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointHeader, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use plan::{LayerKind, LayerSpec, SegmentStyle, Sequential};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    GanCls,
    StackganStage1,
    StackganStage2,
    WganCls,
    Cpggan,
}

impl Family {
    pub fn as_str(self) -> &'static str {
        match self {
            Family::GanCls => "gan-cls",
            Family::StackganStage1 => "stackgan-stage1",
            Family::StackganStage2 => "stackgan-stage2",
            Family::WganCls => "wgan-cls",
            Family::Cpggan => "cpggan",
        }
    }

    pub fn is_progressive(self) -> bool {
        self == Family::Cpggan
    }

    /// Whether the generator samples its conditioning vector through the
    /// augmentation module rather than a plain compression layer.
    pub fn uses_conditioning_augmentation(self) -> bool {
        self != Family::GanCls
    }
}

/// The objective the critic is trained with, which fixes its output head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossFamily {
    /// Probability head and the matching-aware cross-entropy losses.
    Gan,
    /// Linear head, Wasserstein losses with the one-sided penalty.
    WassersteinLp,
    /// Linear head, Wasserstein losses with the two-sided penalty.
    WassersteinGp,
    /// Linear head, least-squares losses.
    LeastSquares,
}

impl LossFamily {
    pub fn as_str(self) -> &'static str {
        match self {
            LossFamily::Gan => "gan",
            LossFamily::WassersteinLp => "wasserstein-lp",
            LossFamily::WassersteinGp => "wasserstein-gp",
            LossFamily::LeastSquares => "least-squares",
        }
    }

    pub fn uses_gradient_penalty(self) -> bool {
        matches!(self, LossFamily::WassersteinLp | LossFamily::WassersteinGp)
    }

    pub fn head(self) -> Activation {
        match self {
            LossFamily::Gan => Activation::Sigmoid,
            _ => Activation::Linear,
        }
    }
}

/// Declarative description of a generator/critic pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureConfig {
    pub family: Family,
    /// Projection size for single-stage families, stage-1 output size for
    /// Stage II, first-stage resolution for the progressive family.
    pub base_resolution: usize,
    pub max_resolution: usize,
    pub noise_dim: usize,
    pub compressed_embed_dim: usize,
    /// Width of the precomputed caption embeddings.
    pub embedding_dim: usize,
    /// Channels at resolutions 4, 8, 16, …
    pub channel_schedule: Vec<usize>,
    pub generator_norm: NormKind,
    /// `None` picks the family default for the loss.
    #[serde(default)]
    pub critic_norm: Option<NormKind>,
    #[serde(default)]
    pub noise_hack: bool,
    #[serde(default = "default_noise_strength")]
    pub noise_strength: f64,
}

fn default_noise_strength() -> f64 {
    0.2
}

const DC_FULL_CHANNELS: [usize; 7] = [512, 256, 128, 64, 32, 16, 8];
const PROGRESSIVE_FULL_CHANNELS: [usize; 7] = [512, 512, 512, 512, 256, 128, 64];
/// Default reduction of the full channel counts for CPU-sized models.
pub const DESK_CHANNEL_DIVISOR: usize = 8;

impl ArchitectureConfig {
    /// Paper resolutions and layer widths.
    pub fn full(family: Family) -> Self {
        let (base, max, channels, gnorm) = match family {
            Family::GanCls | Family::StackganStage1 | Family::WganCls => (4, 64, DC_FULL_CHANNELS, NormKind::Batch),
            Family::StackganStage2 => (64, 256, DC_FULL_CHANNELS, NormKind::Batch),
            Family::Cpggan => (4, 256, PROGRESSIVE_FULL_CHANNELS, NormKind::Layer),
        };
        Self {
            family,
            base_resolution: base,
            max_resolution: max,
            noise_dim: 128,
            compressed_embed_dim: 128,
            embedding_dim: 1024,
            channel_schedule: channels.to_vec(),
            generator_norm: gnorm,
            critic_norm: None,
            noise_hack: false,
            noise_strength: default_noise_strength(),
        }
    }

    /// Paper resolutions with channel counts divided by
    /// [`DESK_CHANNEL_DIVISOR`] (at least 4).
    pub fn desk(family: Family) -> Self {
        let mut cfg = Self::full(family);
        for c in &mut cfg.channel_schedule {
            *c = (*c / DESK_CHANNEL_DIVISOR).max(4);
        }
        cfg
    }

    /// Number of resolution stages of a progressive model.
    pub fn num_stages(&self) -> usize {
        (self.max_resolution / self.base_resolution).trailing_zeros() as usize + 1
    }

    pub fn stage_resolution(&self, stage: usize) -> usize {
        self.base_resolution << (stage - 1)
    }

    /// Generator output size.
    pub fn output_resolution(&self) -> usize {
        self.max_resolution
    }

    pub(crate) fn channels(&self, resolution: usize) -> usize {
        self.channel_schedule[(resolution / 4).trailing_zeros() as usize]
    }

    pub fn validate(&self) -> Result<()> {
        let pow2 = |v: usize| v >= 4 && v.is_power_of_two();
        ensure_arg!(
            pow2(self.base_resolution) && pow2(self.max_resolution),
            "resolutions must be powers of two of at least 4, got {} and {}",
            self.base_resolution,
            self.max_resolution
        );
        ensure_arg!(
            self.max_resolution >= self.base_resolution,
            "max_resolution {} is below base_resolution {}",
            self.max_resolution,
            self.base_resolution
        );
        ensure_arg!(
            self.noise_dim > 0 && self.compressed_embed_dim > 0 && self.embedding_dim > 0,
            "noise, embedding and compressed dimensions must be positive"
        );
        match self.family {
            Family::GanCls | Family::StackganStage1 | Family::WganCls => ensure_arg!(
                self.base_resolution == 4 && self.max_resolution >= 8,
                "{} projects to 4x4 and needs an output of at least 8x8",
                self.family.as_str()
            ),
            Family::StackganStage2 => ensure_arg!(
                self.base_resolution >= 8 && self.max_resolution == 4 * self.base_resolution,
                "stackgan-stage2 upscales its input by exactly 4"
            ),
            Family::Cpggan => ensure_arg!(self.base_resolution == 4, "cpggan starts at 4x4"),
        }
        let needed = (self.max_resolution / 4).trailing_zeros() as usize + 1;
        ensure_arg!(
            self.channel_schedule.len() >= needed,
            "channel_schedule lists {} widths but resolutions up to {} need {needed}",
            self.channel_schedule.len(),
            self.max_resolution
        );
        ensure_arg!(self.channel_schedule.iter().all(|&c| c > 0), "channel widths must be positive");
        ensure_arg!(self.noise_strength >= 0.0, "noise_strength must be nonnegative");
        Ok(())
    }

    /// Critic normalization for `loss`. Batch statistics couple the samples
    /// of a batch, so batch norm cannot be combined with a per-sample
    /// gradient penalty.
    pub fn resolve_critic_norm(&self, loss: LossFamily) -> Result<NormKind> {
        match self.critic_norm {
            Some(NormKind::Batch) if loss.uses_gradient_penalty() => Err(Error::InvalidConfig(
                "batch normalization in the critic cannot be combined with a gradient penalty".into(),
            )),
            Some(n) => Ok(n),
            None => Ok(match (self.family, loss) {
                (_, l) if l.uses_gradient_penalty() => NormKind::None,
                (Family::Cpggan, _) => NormKind::Layer,
                _ => NormKind::Batch,
            }),
        }
    }
}

/// Which stage a progressive model runs at and how far the newest stage is
/// faded in. Single-stage models ignore it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StageView {
    pub stage: usize,
    pub alpha: f64,
}

impl StageView {
    pub fn new(stage: usize, alpha: f64) -> Self {
        Self { stage, alpha }
    }

    /// Fully grown view of a model.
    pub fn full(cfg: &ArchitectureConfig) -> Self {
        Self {
            stage: if cfg.family.is_progressive() { cfg.num_stages() } else { 1 },
            alpha: 1.0,
        }
    }
}

/// Multiplies activations by `1 + strength·g` with `g` standard normal.
pub fn apply_multiplicative_noise(x: &Var, strength: f64, rng: &mut Rng) -> Var {
    if strength == 0.0 {
        return x.clone();
    }
    let g = normal_tensor(rng, x.shape(), strength).map(|v| 1.0 + v);
    x.mul(&Var::constant(g))
}

#[derive(Clone, Debug)]
pub(crate) enum Conditioner {
    Compress(EmbeddingCompressor),
    Augment(ConditioningAugmentation),
}

impl Conditioner {
    fn forward(&self, s: &mut Session, e: &Var, epsilon: &Tensor) -> (Var, Option<CaOutput>) {
        match self {
            Conditioner::Compress(c) => (c.forward(s, e), None),
            Conditioner::Augment(ca) => {
                let out = ca.forward(s, e, epsilon);
                (out.sample.clone(), Some(out))
            }
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) enum GeneratorNet {
    Single {
        cond: Conditioner,
        body: Sequential,
    },
    Refiner {
        stage1_cond: Conditioner,
        stage1_body: Sequential,
        ca: ConditioningAugmentation,
        body: Sequential,
    },
    Progressive {
        ca: ConditioningAugmentation,
        stages: Vec<Sequential>,
        to_rgb: Vec<Sequential>,
    },
}

#[derive(Clone, Debug)]
pub struct GeneratorOutput {
    /// `(B, R, R, 3)` in `[-1, 1]`.
    pub images: Var,
    /// Statistics of the trainable augmentation module, when there is one.
    pub ca: Option<CaOutput>,
}

/// Generator with its parameters.
#[derive(Clone, Debug)]
pub struct Generator {
    pub config: ArchitectureConfig,
    pub store: ParamStore,
    pub(crate) net: GeneratorNet,
}

/// Name prefix of the frozen first stage inside a Stage II generator.
pub const STAGE1_PREFIX: &str = "stage1.";

impl Generator {
    pub fn conditioning_dim(&self) -> usize {
        self.config.compressed_embed_dim
    }

    pub fn output_resolution(&self, view: StageView) -> usize {
        match self.net {
            GeneratorNet::Progressive { .. } => self.config.stage_resolution(view.stage),
            _ => self.config.output_resolution(),
        }
    }

    /// `noise: (B, N_z)`, `embedding: (B, N_phi)`, `epsilon: (B, N_c)`.
    pub fn forward(&self, s: &mut Session, noise: &Var, embedding: &Var, epsilon: &Tensor, view: StageView) -> GeneratorOutput {
        match &self.net {
            GeneratorNet::Single { cond, body } => {
                let (c, ca) = cond.forward(s, embedding, epsilon);
                let images = body.forward(s, &Var::concat_last(&[noise.clone(), c]), None);
                GeneratorOutput { images, ca }
            }
            GeneratorNet::Refiner {
                stage1_cond,
                stage1_body,
                ca,
                body,
            } => {
                // The frozen first stage always uses its running statistics.
                let mode = std::mem::replace(&mut s.mode, Mode::Eval);
                let (c1, _) = stage1_cond.forward(s, embedding, epsilon);
                let low = stage1_body.forward(s, &Var::concat_last(&[noise.clone(), c1]), None);
                s.mode = mode;
                let out = ca.forward(s, embedding, epsilon);
                let images = body.forward(s, &low, Some(&out.sample));
                GeneratorOutput { images, ca: Some(out) }
            }
            GeneratorNet::Progressive { .. } => {
                let (prev, new, ca) = self.stage_outputs(s, noise, embedding, epsilon, view.stage, view.alpha < 1.0);
                let images = match prev {
                    Some(p) => crate::progressive::blend_generator_output_var(&p, &new, view.alpha),
                    None => new,
                };
                GeneratorOutput { images, ca: Some(ca) }
            }
        }
    }

    /// RGB outputs of the previous stage (when `with_previous` and
    /// `stage > 1`) and of stage `stage` of a progressive generator.
    pub fn stage_outputs(
        &self,
        s: &mut Session,
        noise: &Var,
        embedding: &Var,
        epsilon: &Tensor,
        stage: usize,
        with_previous: bool,
    ) -> (Option<Var>, Var, CaOutput) {
        let GeneratorNet::Progressive { ca, stages, to_rgb } = &self.net else {
            panic!("stage_outputs needs a progressive generator");
        };
        assert!((1..=stages.len()).contains(&stage), "stage {stage} out of range");
        let out = ca.forward(s, embedding, epsilon);
        let mut h = stages[0].forward(s, &Var::concat_last(&[noise.clone(), out.sample.clone()]), None);
        let mut prev = None;
        for k in 1..stage {
            if k == stage - 1 && with_previous {
                prev = Some(to_rgb[k - 1].forward(s, &h, None));
            }
            h = stages[k].forward(s, &h, None);
        }
        (prev, to_rgb[stage - 1].forward(s, &h, None), out)
    }

    /// Evaluation-mode images without a graph.
    pub fn generate(&self, noise: &Tensor, embedding: &Tensor, epsilon: &Tensor, view: StageView) -> Tensor {
        no_grad(|| {
            let mut s = Session::new(&self.store, Mode::Eval);
            self.forward(
                &mut s,
                &Var::constant(noise.clone()),
                &Var::constant(embedding.clone()),
                epsilon,
                view,
            )
            .images
            .value()
            .clone()
        })
    }

    /// Copies the parameters of a trained Stage I generator into the frozen
    /// first stage of a Stage II generator.
    pub fn load_stage1(&mut self, stage1: &Generator) -> Result<()> {
        ensure_arg!(
            matches!(self.net, GeneratorNet::Refiner { .. }),
            "only stackgan-stage2 generators embed a first stage"
        );
        let renamed = stage1
            .store
            .named_tensors()
            .into_iter()
            .map(|(k, v)| (format!("{STAGE1_PREFIX}{k}"), v))
            .collect();
        self.store.load_named_subset(&renamed)
    }

    /// Per-segment layer specs, for documentation and shape checks.
    pub fn segments(&self) -> Vec<(&'static str, &Sequential)> {
        match &self.net {
            GeneratorNet::Single { body, .. } => vec![("body", body)],
            GeneratorNet::Refiner { stage1_body, body, .. } => vec![("stage1", stage1_body), ("stage2", body)],
            GeneratorNet::Progressive { stages, to_rgb, .. } => stages
                .iter()
                .map(|s| ("stage", s))
                .chain(to_rgb.iter().map(|s| ("to_rgb", s)))
                .collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) enum CriticNet {
    Single {
        embed: EmbeddingCompressor,
        body: Sequential,
    },
    Progressive {
        embed: EmbeddingCompressor,
        from_rgb: Vec<Sequential>,
        stages: Vec<Sequential>,
    },
}

#[derive(Clone, Debug)]
pub struct CriticOutput {
    /// One score per sample, `(B)`.
    pub score: Var,
    /// The compressed embedding the critic conditions on, `(B, N_c)`.
    pub embedding: Var,
}

/// Critic (discriminator) with its parameters.
#[derive(Clone, Debug)]
pub struct Critic {
    pub config: ArchitectureConfig,
    pub loss: LossFamily,
    pub store: ParamStore,
    pub(crate) net: CriticNet,
}

impl Critic {
    pub fn input_resolution(&self, view: StageView) -> usize {
        match self.net {
            CriticNet::Progressive { .. } => self.config.stage_resolution(view.stage),
            _ => self.config.output_resolution(),
        }
    }

    /// `images: (B, R, R, 3)`, `embedding: (B, N_phi)`.
    pub fn forward(&self, s: &mut Session, images: &Var, embedding: &Var, view: StageView) -> CriticOutput {
        let b = images.shape()[0];
        let (raw, e) = match &self.net {
            CriticNet::Single { embed, body } => {
                let e = embed.forward(s, embedding);
                (body.forward(s, images, Some(&e)), e)
            }
            CriticNet::Progressive { embed, from_rgb, stages } => {
                let e = embed.forward(s, embedding);
                let k = view.stage;
                assert!((1..=stages.len()).contains(&k), "stage {k} out of range");
                let mut h = if k > 1 && view.alpha < 1.0 {
                    let (full, down) = self.junction(s, images, k);
                    crate::progressive::mix_junction(&full, &down, view.alpha)
                } else {
                    let h = from_rgb[k - 1].forward(s, images, None);
                    stages[k - 1].forward(s, &h, Some(&e))
                };
                if k > 1 {
                    for j in (0..k - 1).rev() {
                        h = stages[j].forward(s, &h, Some(&e));
                    }
                }
                (h, e)
            }
        };
        let score = self.loss.head().apply(&raw.reshape(&[b]));
        CriticOutput { score, embedding: e }
    }

    /// The two inputs of the junction below stage `stage`: the new stage
    /// applied to its fromRGB features, and the previous stage's fromRGB of
    /// the pooled image.
    pub fn junction(&self, s: &mut Session, images: &Var, stage: usize) -> (Var, Var) {
        let CriticNet::Progressive { from_rgb, stages, .. } = &self.net else {
            panic!("junction needs a progressive critic");
        };
        assert!(stage >= 2, "stage 1 has no junction");
        let features = from_rgb[stage - 1].forward(s, images, None);
        let full = stages[stage - 1].forward(s, &features, None);
        let down = from_rgb[stage - 2].forward(s, &crate::nn::avg_pool2(images), None);
        (full, down)
    }

    /// Evaluation-mode scores without a graph.
    pub fn score(&self, images: &Tensor, embedding: &Tensor, view: StageView) -> Tensor {
        no_grad(|| {
            let mut s = Session::new(&self.store, Mode::Eval);
            self.forward(&mut s, &Var::constant(images.clone()), &Var::constant(embedding.clone()), view)
                .score
                .value()
                .clone()
        })
    }

    pub fn segments(&self) -> Vec<(&'static str, &Sequential)> {
        match &self.net {
            CriticNet::Single { body, .. } => vec![("body", body)],
            CriticNet::Progressive { from_rgb, stages, .. } => from_rgb
                .iter()
                .map(|s| ("from_rgb", s))
                .chain(stages.iter().map(|s| ("stage", s)))
                .collect(),
        }
    }
}

/// Builds the generator described by `cfg`.
pub fn build_generator(cfg: &ArchitectureConfig, rng: &mut Rng) -> Result<Generator> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let net = families::generator(cfg, &mut store, rng)?;
    if cfg.family == Family::StackganStage2 {
        store.freeze_prefix(STAGE1_PREFIX);
    }
    Ok(Generator {
        config: cfg.clone(),
        store,
        net,
    })
}

/// Builds the critic for `cfg` trained with `loss`.
pub fn build_discriminator(cfg: &ArchitectureConfig, loss: LossFamily, rng: &mut Rng) -> Result<Critic> {
    cfg.validate()?;
    let norm = cfg.resolve_critic_norm(loss)?;
    let mut store = ParamStore::new();
    let net = families::critic(cfg, norm, &mut store, rng)?;
    Ok(Critic {
        config: cfg.clone(),
        loss,
        store,
        net,
    })
}
