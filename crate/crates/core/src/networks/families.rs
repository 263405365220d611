//! Layer tables of each model family.

use super::plan::{conv_block, push_norm, LayerKind, LayerSpec, SegmentStyle, Sequential};
use super::{ArchitectureConfig, Conditioner, CriticNet, Family, GeneratorNet};
use crate::conditioning::{ConditioningAugmentation, EmbeddingCompressor};
use crate::error::Result;
use crate::nn::{Activation, NormKind, ParamStore};
use crate::rng::Rng;

fn generator_style(cfg: &ArchitectureConfig) -> SegmentStyle {
    SegmentStyle {
        norm: cfg.generator_norm,
        activation: Activation::Relu,
        noise_strength: 0.0,
    }
}

fn conditioner(cfg: &ArchitectureConfig, store: &mut ParamStore, rng: &mut Rng, name: &str) -> Conditioner {
    let (e, c) = (cfg.embedding_dim, cfg.compressed_embed_dim);
    if cfg.family.uses_conditioning_augmentation() {
        Conditioner::Augment(ConditioningAugmentation::new(store, rng, name, e, c))
    } else {
        Conditioner::Compress(EmbeddingCompressor::new(store, rng, name, e, c))
    }
}

/// Projection to 4×4 followed by upsample-conv blocks up to the output
/// size; one residual block at 4×4 and one at 8×8.
pub(crate) fn dc_generator_specs(cfg: &ArchitectureConfig) -> Vec<LayerSpec> {
    let style = generator_style(cfg);
    let mut specs = vec![LayerSpec::dense(4, cfg.channels(4))];
    push_norm(&mut specs, style.norm);
    specs.push(LayerSpec::act(Activation::Relu));
    specs.push(LayerSpec::new(LayerKind::ResidualBlock));
    let mut r = 8;
    while r <= cfg.max_resolution {
        specs.push(LayerSpec::new(LayerKind::UpsampleNearest));
        conv_block(&mut specs, 3, cfg.channels(r), 1, &style);
        if r == 8 {
            specs.push(LayerSpec::new(LayerKind::ResidualBlock));
        }
        r *= 2;
    }
    specs.push(LayerSpec::conv(3, 3, 1));
    specs.push(LayerSpec::act(Activation::Tanh));
    specs
}

/// Stride-2 convolutions down to 4×4, one residual block, the embedding
/// concatenated in depth, then a 1×1 and a 4×4 valid convolution.
pub(crate) fn dc_critic_specs(cfg: &ArchitectureConfig, norm: NormKind) -> Vec<LayerSpec> {
    let style = SegmentStyle {
        norm,
        activation: Activation::LeakyRelu,
        noise_strength: cfg.noise_strength,
    };
    let mut specs = Vec::new();
    let mut r = cfg.max_resolution;
    while r > 4 {
        specs.push(LayerSpec::conv(4, cfg.channels(r / 2), 2));
        if r != cfg.max_resolution {
            push_norm(&mut specs, norm);
        }
        specs.push(LayerSpec::act(Activation::LeakyRelu));
        if cfg.noise_hack {
            specs.push(LayerSpec::new(LayerKind::MultiplicativeNoise));
        }
        r /= 2;
    }
    specs.push(LayerSpec::new(LayerKind::ResidualBlock));
    specs.push(LayerSpec::new(LayerKind::EmbedConcatDepth));
    conv_block(&mut specs, 1, cfg.channels(4), 1, &style);
    specs.push(LayerSpec::conv_valid(4, 1));
    specs
}

/// Stage II: downsample the low-resolution image to 4×4, append the
/// conditioning vector, refine with three residual blocks, upsample to
/// four times the input size.
pub(crate) fn refiner_specs(cfg: &ArchitectureConfig) -> Vec<LayerSpec> {
    let style = generator_style(cfg);
    let b = cfg.base_resolution;
    let mut specs = vec![LayerSpec::conv(3, cfg.channels(b), 1), LayerSpec::act(Activation::Relu)];
    let mut r = b;
    while r > 4 {
        conv_block(&mut specs, 4, cfg.channels(r / 2), 2, &style);
        r /= 2;
    }
    specs.push(LayerSpec::new(LayerKind::EmbedConcatDepth));
    conv_block(&mut specs, 3, cfg.channels(4), 1, &style);
    specs.extend([LayerSpec::new(LayerKind::ResidualBlock); 3]);
    while r < cfg.max_resolution {
        r *= 2;
        specs.push(LayerSpec::new(LayerKind::UpsampleNearest));
        conv_block(&mut specs, 3, cfg.channels(r), 1, &style);
    }
    specs.push(LayerSpec::conv(3, 3, 1));
    specs.push(LayerSpec::act(Activation::Tanh));
    specs
}

/// The Stage I configuration embedded in a Stage II model.
pub(crate) fn stage1_config(cfg: &ArchitectureConfig) -> ArchitectureConfig {
    ArchitectureConfig {
        family: Family::StackganStage1,
        base_resolution: 4,
        max_resolution: cfg.base_resolution,
        ..cfg.clone()
    }
}

/// Critic width entering the block at resolution `r`: the generator width
/// one resolution up, or half the generator width at the top.
fn critic_width(cfg: &ArchitectureConfig, r: usize) -> usize {
    let idx = (r / 4).trailing_zeros() as usize + 1;
    match cfg.channel_schedule.get(idx) {
        Some(&c) if 2 * r <= cfg.max_resolution => c,
        _ => (cfg.channels(r) / 2).max(1),
    }
}

pub(crate) fn generator(cfg: &ArchitectureConfig, store: &mut ParamStore, rng: &mut Rng) -> Result<GeneratorNet> {
    let z_in = [1, 1, cfg.noise_dim + cfg.compressed_embed_dim];
    let style = generator_style(cfg);
    Ok(match cfg.family {
        Family::GanCls | Family::StackganStage1 | Family::WganCls => {
            let cond = conditioner(cfg, store, rng, "ca");
            let body = Sequential::build(store, rng, "body", z_in, &dc_generator_specs(cfg), style, 0)?;
            GeneratorNet::Single { cond, body }
        }
        Family::StackganStage2 => {
            let s1 = stage1_config(cfg);
            let stage1_cond = conditioner(&s1, store, rng, "stage1.ca");
            let stage1_body =
                Sequential::build(store, rng, "stage1.body", z_in, &dc_generator_specs(&s1), generator_style(&s1), 0)?;
            let ca = ConditioningAugmentation::new(store, rng, "ca", cfg.embedding_dim, cfg.compressed_embed_dim);
            let b = cfg.base_resolution;
            let body = Sequential::build(
                store,
                rng,
                "body",
                [b, b, 3],
                &refiner_specs(cfg),
                style,
                cfg.compressed_embed_dim,
            )?;
            GeneratorNet::Refiner {
                stage1_cond,
                stage1_body,
                ca,
                body,
            }
        }
        Family::Cpggan => {
            let ca = ConditioningAugmentation::new(store, rng, "ca", cfg.embedding_dim, cfg.compressed_embed_dim);
            let mut stages = Vec::new();
            let mut to_rgb = Vec::new();
            for k in 1..=cfg.num_stages() {
                let r = cfg.stage_resolution(k);
                let g = cfg.channels(r);
                let (input, mut specs) = if k == 1 {
                    (z_in, vec![LayerSpec::dense(4, g)])
                } else {
                    let h = r / 2;
                    (
                        [h, h, cfg.channels(h)],
                        vec![LayerSpec::new(LayerKind::UpsampleNearest)],
                    )
                };
                conv_block(&mut specs, 3, g, 1, &style);
                conv_block(&mut specs, 3, g, 1, &style);
                stages.push(Sequential::build(store, rng, &format!("stage{k}"), input, &specs, style, 0)?);
                to_rgb.push(Sequential::build(
                    store,
                    rng,
                    &format!("to_rgb{k}"),
                    [r, r, g],
                    &[LayerSpec::new(LayerKind::ToRgb)],
                    style,
                    0,
                )?);
            }
            GeneratorNet::Progressive { ca, stages, to_rgb }
        }
    })
}

pub(crate) fn critic(cfg: &ArchitectureConfig, norm: NormKind, store: &mut ParamStore, rng: &mut Rng) -> Result<CriticNet> {
    let embed = EmbeddingCompressor::new(store, rng, "embed", cfg.embedding_dim, cfg.compressed_embed_dim);
    let n_c = cfg.compressed_embed_dim;
    if !cfg.family.is_progressive() {
        let r = cfg.max_resolution;
        let body = Sequential::build(
            store,
            rng,
            "body",
            [r, r, 3],
            &dc_critic_specs(cfg, norm),
            SegmentStyle {
                norm,
                activation: Activation::LeakyRelu,
                noise_strength: cfg.noise_strength,
            },
            n_c,
        )?;
        return Ok(CriticNet::Single { embed, body });
    }
    let style = SegmentStyle {
        norm,
        activation: Activation::Relu,
        noise_strength: cfg.noise_strength,
    };
    let noise = |specs: &mut Vec<LayerSpec>| {
        if cfg.noise_hack {
            specs.push(LayerSpec::new(LayerKind::MultiplicativeNoise));
        }
    };
    let mut from_rgb = Vec::new();
    let mut stages = Vec::new();
    for k in 1..=cfg.num_stages() {
        let r = cfg.stage_resolution(k);
        let d = critic_width(cfg, r);
        from_rgb.push(Sequential::build(
            store,
            rng,
            &format!("from_rgb{k}"),
            [r, r, 3],
            &[LayerSpec::with_filters(LayerKind::FromRgb, d)],
            style,
            0,
        )?);
        let mut specs = Vec::new();
        if k == 1 {
            specs.push(LayerSpec::new(LayerKind::EmbedConcatDepth));
            conv_block(&mut specs, 3, d, 1, &style);
            noise(&mut specs);
            specs.push(LayerSpec::conv_valid(4, d));
            specs.push(LayerSpec::act(Activation::Relu));
            specs.push(LayerSpec::dense(1, 1));
        } else {
            conv_block(&mut specs, 3, d, 1, &style);
            noise(&mut specs);
            conv_block(&mut specs, 3, critic_width(cfg, r / 2), 1, &style);
            noise(&mut specs);
            specs.push(LayerSpec::new(LayerKind::DownsampleAverage));
        }
        stages.push(Sequential::build(store, rng, &format!("stage{k}"), [r, r, d], &specs, style, n_c)?);
    }
    Ok(CriticNet::Progressive { embed, from_rgb, stages })
}
