//! Progressive growing: the phase state machine, fade-in weights and the
//! blends that attach a new resolution stage.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{ensure_arg, Result};
use crate::nn::{avg_pool2, upsample_nearest};
use crate::tensor::Tensor;

/// Phase length used by default at desk scale.
pub const DESK_IMAGES_PER_PHASE: u64 = 20_000;
/// Phase length of the full-scale schedule.
pub const FULL_IMAGES_PER_PHASE: u64 = 600_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Transition,
    Stabilization,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Transition => "transition",
            Phase::Stabilization => "stabilization",
        }
    }
}

/// Cursor of a progressive run. Stage 1 starts directly in stabilization.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GrowthState {
    pub stage: usize,
    pub phase: Phase,
    pub images_seen_in_phase: u64,
    pub images_per_phase: u64,
}

impl GrowthState {
    pub fn new(images_per_phase: u64) -> Result<Self> {
        ensure_arg!(images_per_phase > 0, "images_per_phase must be positive");
        Ok(Self {
            stage: 1,
            phase: Phase::Stabilization,
            images_seen_in_phase: 0,
            images_per_phase,
        })
    }

    /// Fade weight: linear in images seen during a transition, 1 otherwise.
    pub fn fade_alpha(&self) -> f64 {
        match self.phase {
            Phase::Transition => self.images_seen_in_phase as f64 / self.images_per_phase as f64,
            Phase::Stabilization => 1.0,
        }
    }

    /// Accounts for `n_images` more real images. Finished phases hand their
    /// excess to the next one; at the last stage the stabilization phase
    /// saturates with its counter capped.
    pub fn advance(mut self, mut n_images: u64, max_stage: usize) -> GrowthState {
        loop {
            let remaining = self.images_per_phase - self.images_seen_in_phase;
            let last = self.stage >= max_stage && self.phase == Phase::Stabilization;
            if n_images < remaining || last {
                self.images_seen_in_phase = (self.images_seen_in_phase + n_images.min(remaining)).min(self.images_per_phase);
                return self;
            }
            n_images -= remaining;
            self.images_seen_in_phase = 0;
            match self.phase {
                Phase::Transition => self.phase = Phase::Stabilization,
                Phase::Stabilization => {
                    self.stage += 1;
                    self.phase = Phase::Transition;
                }
            }
        }
    }

    pub fn resolution(&self, base_resolution: usize) -> usize {
        base_resolution << (self.stage - 1)
    }

    /// Whether the previous stage still contributes to the output.
    pub fn is_blending(&self) -> bool {
        self.phase == Phase::Transition && self.stage > 1
    }

    /// Images seen since the start of training.
    pub fn total_images(&self) -> u64 {
        let completed = match self.phase {
            Phase::Stabilization => 2 * (self.stage as u64 - 1),
            Phase::Transition => 2 * (self.stage as u64 - 1) - 1,
        };
        completed * self.images_per_phase + self.images_seen_in_phase
    }
}

/// Batch size as a function of resolution: `small` up to and including
/// `threshold`, `large` above it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchSchedule {
    pub small: usize,
    pub large: usize,
    pub threshold: usize,
}

impl Default for BatchSchedule {
    fn default() -> Self {
        Self {
            small: 16,
            large: 8,
            threshold: 64,
        }
    }
}

impl BatchSchedule {
    pub fn batch_size(&self, resolution: usize) -> usize {
        if resolution <= self.threshold {
            self.small
        } else {
            self.large
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhaseRow {
    pub stage: usize,
    pub resolution: usize,
    pub phase: Phase,
    pub images_start: u64,
    pub images_end: u64,
    pub alpha_start: f64,
    pub alpha_end: f64,
    pub batch_size: usize,
}

/// Every phase from scratch to the end of stage `max_stage`'s
/// stabilization, enumerated by walking the state machine.
pub fn phase_table(
    images_per_phase: u64,
    max_stage: usize,
    base_resolution: usize,
    batches: BatchSchedule,
) -> Result<Vec<PhaseRow>> {
    ensure_arg!(max_stage >= 1, "max_stage must be at least 1");
    let mut state = GrowthState::new(images_per_phase)?;
    let mut rows = Vec::with_capacity(2 * max_stage - 1);
    let mut start = 0;
    loop {
        let resolution = state.resolution(base_resolution);
        let (alpha_start, alpha_end) = match state.phase {
            Phase::Transition => (0.0, 1.0),
            Phase::Stabilization => (1.0, 1.0),
        };
        rows.push(PhaseRow {
            stage: state.stage,
            resolution,
            phase: state.phase,
            images_start: start,
            images_end: start + images_per_phase,
            alpha_start,
            alpha_end,
            batch_size: batches.batch_size(resolution),
        });
        start += images_per_phase;
        let next = state.advance(images_per_phase, max_stage);
        if (next.stage, next.phase) == (state.stage, state.phase) {
            break;
        }
        state = next;
    }
    Ok(rows)
}

pub const PHASE_TABLE_HEADER: &str =
    "# stage\tresolution\tphase\timages_start\timages_end\talpha_start\talpha_end\tbatch_size";

/// Tab-separated rendering with a `#` header line.
pub fn format_phase_table(rows: &[PhaseRow]) -> String {
    let mut out = String::from(PHASE_TABLE_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.stage,
            r.resolution,
            r.phase.as_str(),
            r.images_start,
            r.images_end,
            r.alpha_start,
            r.alpha_end,
            r.batch_size
        );
    }
    out
}

/// `(1-α)·upscale(prev) + α·new` for `(B, H, W, C)` tensors.
pub fn blend_generator_output(prev_rgb: &Tensor, new_rgb: &Tensor, alpha: f64) -> Result<Tensor> {
    check_alpha(alpha)?;
    let (p, n) = (prev_rgb.shape(), new_rgb.shape());
    ensure_arg!(
        p.len() == 4 && n.len() == 4 && p[0] == n[0] && p[3] == n[3] && 2 * p[1] == n[1] && 2 * p[2] == n[2],
        "previous output {p:?} must be half the resolution of {n:?}"
    );
    Ok(crate::autograd::no_grad(|| {
        blend_generator_output_var(&Var::constant(prev_rgb.clone()), &Var::constant(new_rgb.clone()), alpha)
    })
    .value()
    .clone())
}

/// Differentiable form of [`blend_generator_output`].
pub fn blend_generator_output_var(prev_rgb: &Var, new_rgb: &Var, alpha: f64) -> Var {
    upsample_nearest(prev_rgb, 2)
        .mul_scalar(1.0 - alpha)
        .add(&new_rgb.mul_scalar(alpha))
}

/// Inputs of the two critic paths during a transition.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorBlend {
    /// Image at the new resolution, for the new stage's fromRGB.
    pub full_resolution: Tensor,
    /// Average-pooled image, for the previous stage's fromRGB.
    pub downscaled: Tensor,
    pub alpha: f64,
}

pub fn blend_discriminator_input(image: &Tensor, alpha: f64) -> Result<DiscriminatorBlend> {
    check_alpha(alpha)?;
    let s = image.shape();
    ensure_arg!(
        s.len() == 4 && s[1] % 2 == 0 && s[2] % 2 == 0,
        "expected (B, H, W, C) with even H and W, got {s:?}"
    );
    let downscaled = crate::autograd::no_grad(|| avg_pool2(&Var::constant(image.clone())))
        .value()
        .clone();
    Ok(DiscriminatorBlend {
        full_resolution: image.clone(),
        downscaled,
        alpha,
    })
}

/// `α·full + (1-α)·down` at the junction of the newest critic stage.
pub fn mix_junction(full: &Var, down: &Var, alpha: f64) -> Var {
    full.mul_scalar(alpha).add(&down.mul_scalar(1.0 - alpha))
}

fn check_alpha(alpha: f64) -> Result<()> {
    ensure_arg!((0.0..=1.0).contains(&alpha), "fade weight {alpha} outside [0, 1]");
    Ok(())
}
