//! Experiment configuration: a sectioned TOML file plus `section.key=value`
//! overrides.
//!
//! ```toml
//! seed = 7
//!
//! [model]
//! family = "wgan-cls"
//! base_resolution = 4
//! max_resolution = 16
//! # ...
//!
//! [loss]
//! kind = "wasserstein-lp"
//! alpha_match = 1.0
//! lambda_lp = 150.0
//! rho_kl = 10.0
//!
//! [optimizer]
//! lr_generator = 1e-4
//! lr_critic = 3e-4
//! beta1 = 0.0
//! beta2 = 0.99
//!
//! [schedule]
//! n_critic = 1
//! batch_size = 64
//! total_steps = 120000
//!
//! [data]
//! manifest = "data/train/manifest.toml"
//! ```

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::conditioning::KlDirection;
use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::networks::{ArchitectureConfig, Family, LossFamily};
use crate::progressive::BatchSchedule;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub kind: LossFamily,
    /// Weight of the mismatched-pair term.
    #[serde(default = "one")]
    pub alpha_match: f64,
    /// Weight of the one-sided penalty.
    #[serde(default = "lambda_lp")]
    pub lambda_lp: f64,
    /// Weight of the two-sided penalty.
    #[serde(default = "lambda_gp")]
    pub lambda_gp: f64,
    /// Weight of the conditioning-augmentation KL term in the generator loss.
    #[serde(default = "one")]
    pub rho_kl: f64,
    #[serde(default)]
    pub kl_direction: KlDirection,
    /// Least-squares labels: fake, real, generator target.
    #[serde(default)]
    pub ls_a: f64,
    #[serde(default = "one")]
    pub ls_b: f64,
    #[serde(default = "one")]
    pub ls_c: f64,
}

fn one() -> f64 {
    1.0
}

fn lambda_lp() -> f64 {
    150.0
}

fn lambda_gp() -> f64 {
    10.0
}

impl LossConfig {
    pub fn new(kind: LossFamily) -> Self {
        Self {
            kind,
            alpha_match: 1.0,
            lambda_lp: lambda_lp(),
            lambda_gp: lambda_gp(),
            rho_kl: 1.0,
            kl_direction: KlDirection::default(),
            ls_a: 0.0,
            ls_b: 1.0,
            ls_c: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub lr_generator: f64,
    pub lr_critic: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.lr_generator > 0.0 && self.lr_critic > 0.0) {
            problems.push("learning rates must be positive".to_string());
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                problems.push(format!("{name} = {b} is outside [0, 1)"));
            }
        }
        invalid(problems)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    #[serde(default = "one_usize")]
    pub n_critic: usize,
    /// Batch size of single-resolution families.
    pub batch_size: usize,
    /// Exactly one of `total_steps` and `epochs` bounds a single-resolution
    /// run; a progressive run ends after its last stabilization phase or at
    /// `total_steps`, whichever comes first.
    #[serde(default)]
    pub total_steps: Option<u64>,
    #[serde(default)]
    pub epochs: Option<u64>,
    /// Halve both learning rates every this many epochs.
    #[serde(default)]
    pub lr_halving_period: Option<u64>,
    /// Real images the critic sees per transition or stabilization phase.
    #[serde(default = "images_per_phase")]
    pub images_per_phase: u64,
    /// Per-resolution batch sizes of progressive runs.
    #[serde(default)]
    pub batch_schedule: Option<BatchSchedule>,
    #[serde(default = "checkpoint_every")]
    pub checkpoint_every: u64,
}

fn one_usize() -> usize {
    1
}

fn images_per_phase() -> u64 {
    crate::progressive::DESK_IMAGES_PER_PHASE
}

fn checkpoint_every() -> u64 {
    500
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    /// Dataset manifest; relative paths resolve against the config file.
    #[serde(default)]
    pub manifest: Option<PathBuf>,
    /// Generate a synthetic dataset in memory instead.
    #[serde(default)]
    pub synthetic: Option<SyntheticSpec>,
    /// Sample random crop/flip variants of the training images.
    #[serde(default)]
    pub augment: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InitConfig {
    /// Trained Stage I checkpoint loaded into a Stage II generator.
    #[serde(default)]
    pub stage1_checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub model: ArchitectureConfig,
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub init: InitConfig,
}

fn invalid(problems: Vec<String>) -> Result<()> {
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::InvalidConfig(problems.join("; ")))
    }
}

impl ExperimentConfig {
    /// Paper hyperparameters for `family` at desk-scale widths. `cpggan`
    /// takes the Wasserstein loss; switch `loss.kind` to least squares for
    /// the other variant (see [`ExperimentConfig::preset_with_loss`]).
    pub fn preset(family: Family) -> Self {
        let loss = match family {
            Family::WganCls | Family::Cpggan => LossFamily::WassersteinLp,
            _ => LossFamily::Gan,
        };
        Self::preset_with_loss(family, loss)
    }

    pub fn preset_with_loss(family: Family, loss_kind: LossFamily) -> Self {
        let mut loss = LossConfig::new(loss_kind);
        let dc_optimizer = OptimizerConfig {
            lr_generator: 2e-4,
            lr_critic: 2e-4,
            beta1: 0.5,
            beta2: 0.9,
        };
        let mut schedule = ScheduleConfig {
            n_critic: 1,
            batch_size: 64,
            total_steps: None,
            epochs: Some(600),
            lr_halving_period: None,
            images_per_phase: images_per_phase(),
            batch_schedule: None,
            checkpoint_every: checkpoint_every(),
        };
        let optimizer = match family {
            Family::GanCls => dc_optimizer,
            Family::StackganStage1 | Family::StackganStage2 => {
                schedule.lr_halving_period = Some(100);
                if family == Family::StackganStage2 {
                    schedule.batch_size = 32;
                }
                dc_optimizer
            }
            Family::WganCls => {
                loss.rho_kl = 10.0;
                schedule.epochs = None;
                schedule.total_steps = Some(120_000);
                OptimizerConfig {
                    lr_generator: 1e-4,
                    lr_critic: 3e-4,
                    beta1: 0.0,
                    beta2: 0.99,
                }
            }
            Family::Cpggan => {
                loss.rho_kl = 8.0;
                schedule.epochs = None;
                schedule.batch_size = BatchSchedule::default().small;
                schedule.batch_schedule = Some(BatchSchedule::default());
                let (beta1, beta2) = if loss_kind == LossFamily::LeastSquares { (0.5, 0.9) } else { (0.0, 0.99) };
                OptimizerConfig {
                    lr_generator: 1e-4,
                    lr_critic: 1e-4,
                    beta1,
                    beta2,
                }
            }
        };
        Self {
            seed: 0,
            model: ArchitectureConfig::desk(family),
            loss,
            optimizer,
            schedule,
            data: DataConfig::default(),
            init: InitConfig::default(),
        }
    }

    /// Parses and validates. Every unknown key is reported in one error.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::InvalidConfig(e.message().to_string()))?;
        Self::from_table(table)
    }

    /// Like [`ExperimentConfig::from_toml_str`], applying `section.key=value`
    /// overrides to the parsed file first. Values parse as TOML and fall
    /// back to plain strings.
    pub fn from_toml_str_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::InvalidConfig(e.message().to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        Self::from_table(table)
    }

    fn from_table(table: toml::Table) -> Result<Self> {
        let table = fill_from_preset(table);
        let mut unknown = Vec::new();
        let cfg: Self = serde_ignored::deserialize(toml::Value::Table(table), |path| unknown.push(path.to_string()))
            .map_err(|e: toml::de::Error| Error::InvalidConfig(e.message().to_string()))?;
        if !unknown.is_empty() {
            return Err(Error::InvalidConfig(format!("unknown keys: {}", unknown.join(", "))));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("configs serialize")
    }

    pub fn validate(&self) -> Result<()> {
        self.model
            .validate()
            .map_err(|e| Error::InvalidConfig(e.to_string().trim_start_matches("invalid argument: ").to_string()))?;
        self.optimizer.validate()?;
        let mut problems = Vec::new();
        let family = self.model.family;
        let allowed: &[LossFamily] = match family {
            Family::GanCls | Family::StackganStage1 | Family::StackganStage2 => &[LossFamily::Gan],
            Family::WganCls => &[LossFamily::WassersteinLp, LossFamily::WassersteinGp],
            Family::Cpggan => &[LossFamily::WassersteinLp, LossFamily::WassersteinGp, LossFamily::LeastSquares],
        };
        if !allowed.contains(&self.loss.kind) {
            problems.push(format!(
                "family {} requires loss kind {}, got {}",
                family.as_str(),
                allowed.iter().map(|l| l.as_str()).collect::<Vec<_>>().join(" or "),
                self.loss.kind.as_str()
            ));
        }
        if let Err(e) = self.model.resolve_critic_norm(self.loss.kind) {
            problems.push(e.to_string());
        }
        for (name, v) in [
            ("alpha_match", self.loss.alpha_match),
            ("lambda_lp", self.loss.lambda_lp),
            ("lambda_gp", self.loss.lambda_gp),
            ("rho_kl", self.loss.rho_kl),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                problems.push(format!("{name} must be finite and nonnegative"));
            }
        }
        let s = &self.schedule;
        if s.n_critic == 0 {
            problems.push("n_critic must be at least 1".into());
        }
        if s.batch_size == 0 {
            problems.push("batch_size must be positive".into());
        }
        if s.images_per_phase == 0 {
            problems.push("images_per_phase must be positive".into());
        }
        if s.checkpoint_every == 0 {
            problems.push("checkpoint_every must be positive".into());
        }
        if family.is_progressive() {
            if s.epochs.is_some() {
                problems.push("progressive runs are bounded by images_per_phase and total_steps, not epochs".into());
            }
        } else if s.total_steps.is_some() == s.epochs.is_some() {
            problems.push("set exactly one of total_steps and epochs".into());
        }
        if s.lr_halving_period == Some(0) {
            problems.push("lr_halving_period must be positive".into());
        }
        if self.data.manifest.is_some() && self.data.synthetic.is_some() {
            problems.push("set at most one of data.manifest and data.synthetic".into());
        }
        if self.init.stage1_checkpoint.is_some() && family != Family::StackganStage2 {
            problems.push("init.stage1_checkpoint only applies to stackgan-stage2".into());
        }
        invalid(problems)
    }

    /// Batch size at `resolution`.
    pub fn batch_size_at(&self, resolution: usize) -> usize {
        match (self.model.family.is_progressive(), self.schedule.batch_schedule) {
            (true, Some(b)) => b.batch_size(resolution),
            _ => self.schedule.batch_size,
        }
    }
}

/// Keys the file leaves out take the preset of its `model.family` (and
/// `loss.kind`, when given). Without a readable family the table is left
/// alone so deserialization reports the problem.
fn fill_from_preset(table: toml::Table) -> toml::Table {
    let field = |section: &str, key: &str| table.get(section).and_then(|s| s.get(key)).cloned();
    let Some(family) = field("model", "family").and_then(|v| v.try_into::<Family>().ok()) else {
        return table;
    };
    let preset = match field("loss", "kind").and_then(|v| v.try_into::<LossFamily>().ok()) {
        Some(kind) => ExperimentConfig::preset_with_loss(family, kind),
        None => ExperimentConfig::preset(family),
    };
    let Ok(toml::Value::Table(mut base)) = toml::Value::try_from(&preset) else {
        return table;
    };
    // The two run-length keys are alternatives: naming either replaces both.
    let names_budget = ["total_steps", "epochs"].iter().any(|k| field("schedule", k).is_some());
    if let (true, Some(toml::Value::Table(sched))) = (names_budget, base.get_mut("schedule")) {
        sched.remove("total_steps");
        sched.remove("epochs");
    }
    merge(&mut base, table);
    base
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn apply_override(table: &mut toml::Table, text: &str) -> Result<()> {
    let (path, raw) = text
        .split_once('=')
        .ok_or_else(|| Error::InvalidConfig(format!("override {text:?} is not key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::InvalidConfig(format!("override {text:?} has an empty key")));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut node = table;
    for k in &keys[..keys.len() - 1] {
        node = node
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::InvalidConfig(format!("override {text:?}: {k} is not a section")))?;
    }
    node.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}
