//! Layer vocabulary and a sequential interpreter: a model segment is a list
//! of [`LayerSpec`]s instantiated against a running `(H, W, C)` shape.

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{ensure_arg, Result};
use crate::nn::{
    avg_pool2, replicate_spatial, upsample_nearest, Activation, Conv2d, Linear, Norm, NormKind, ParamStore,
    ResidualBlock, Session,
};
use crate::rng::Rng;

use super::apply_multiplicative_noise;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerKind {
    /// Zero-padded "same" convolution (output `ceil(in / stride)`).
    Conv,
    /// Unpadded convolution.
    ConvValid,
    UpsampleNearest,
    DownsampleAverage,
    /// Flattens the input and projects it to `kernel × kernel × filters`.
    FullyConnected,
    ResidualBlock,
    BatchNorm,
    LayerNorm,
    Activation(Activation),
    /// Spatially replicates the conditioning vector and appends it in depth.
    EmbedConcatDepth,
    /// 2×2 conv with ReLU to 9 channels, then 1×1 conv to RGB and tanh.
    ToRgb,
    /// 1×1 conv from RGB to `filters` channels followed by the segment
    /// activation.
    FromRgb,
    MultiplicativeNoise,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub kernel: usize,
    pub filters: usize,
    pub stride: usize,
}

impl LayerSpec {
    pub fn new(kind: LayerKind) -> Self {
        Self {
            kind,
            kernel: 1,
            filters: 0,
            stride: 1,
        }
    }

    pub fn conv(kernel: usize, filters: usize, stride: usize) -> Self {
        Self {
            kind: LayerKind::Conv,
            kernel,
            filters,
            stride,
        }
    }

    pub fn conv_valid(kernel: usize, filters: usize) -> Self {
        Self {
            kind: LayerKind::ConvValid,
            kernel,
            filters,
            stride: 1,
        }
    }

    pub fn dense(spatial: usize, filters: usize) -> Self {
        Self {
            kind: LayerKind::FullyConnected,
            kernel: spatial,
            filters,
            stride: 1,
        }
    }

    pub fn act(a: Activation) -> Self {
        Self::new(LayerKind::Activation(a))
    }

    pub fn with_filters(kind: LayerKind, filters: usize) -> Self {
        Self { filters, ..Self::new(kind) }
    }
}

/// Shared settings of one segment.
#[derive(Clone, Copy, Debug)]
pub struct SegmentStyle {
    pub norm: NormKind,
    pub activation: Activation,
    pub noise_strength: f64,
}

#[derive(Clone, Debug)]
enum Layer {
    Conv(Conv2d),
    Upsample,
    Downsample,
    Dense(Linear, [usize; 3]),
    Residual(ResidualBlock),
    Norm(Norm),
    Act(Activation),
    EmbedConcat,
    ToRgb(Conv2d, Conv2d),
    FromRgb(Conv2d, Activation),
    Noise(f64),
}

/// An instantiated list of layers with its shape contract.
#[derive(Clone, Debug)]
pub struct Sequential {
    specs: Vec<LayerSpec>,
    layers: Vec<Layer>,
    input: [usize; 3],
    shapes: Vec<[usize; 3]>,
}

fn same_padding(input: usize, kernel: usize, stride: usize) -> (usize, usize) {
    let out = input.div_ceil(stride);
    let total = ((out - 1) * stride + kernel).saturating_sub(input);
    (total / 2, total - total / 2)
}

impl Sequential {
    /// Instantiates `specs` for inputs of shape `input = [H, W, C]`.
    /// `embed_dim` is the width appended by an embed-concat layer.
    pub fn build(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        input: [usize; 3],
        specs: &[LayerSpec],
        style: SegmentStyle,
        embed_dim: usize,
    ) -> Result<Self> {
        let mut shape = input;
        let mut layers = Vec::with_capacity(specs.len());
        let mut shapes = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            let [h, w, c] = shape;
            let lname = format!("{name}.{i}");
            let (layer, next) = match spec.kind {
                LayerKind::Conv => {
                    ensure_arg!(spec.kernel > 0 && spec.filters > 0 && spec.stride > 0, "{lname}: bad conv spec");
                    let (pt, pb) = same_padding(h, spec.kernel, spec.stride);
                    let (pl, pr) = same_padding(w, spec.kernel, spec.stride);
                    let conv = Conv2d::with_geometry(
                        store,
                        rng,
                        &format!("{lname}.conv"),
                        c,
                        spec.filters,
                        spec.kernel,
                        spec.stride,
                        (pt, pl, pb, pr),
                    );
                    (Layer::Conv(conv), [h.div_ceil(spec.stride), w.div_ceil(spec.stride), spec.filters])
                }
                LayerKind::ConvValid => {
                    ensure_arg!(spec.kernel <= h && spec.kernel <= w, "{lname}: kernel larger than input");
                    let conv = Conv2d::valid(store, rng, &format!("{lname}.conv"), c, spec.filters, spec.kernel);
                    (Layer::Conv(conv), [h - spec.kernel + 1, w - spec.kernel + 1, spec.filters])
                }
                LayerKind::UpsampleNearest => (Layer::Upsample, [2 * h, 2 * w, c]),
                LayerKind::DownsampleAverage => {
                    ensure_arg!(h % 2 == 0 && w % 2 == 0, "{lname}: cannot halve {h}x{w}");
                    (Layer::Downsample, [h / 2, w / 2, c])
                }
                LayerKind::FullyConnected => {
                    let out = [spec.kernel, spec.kernel, spec.filters];
                    let fc = Linear::new(store, rng, &format!("{lname}.fc"), h * w * c, out.iter().product());
                    (Layer::Dense(fc, out), out)
                }
                LayerKind::ResidualBlock => (
                    Layer::Residual(ResidualBlock::new(
                        store,
                        rng,
                        &format!("{lname}.res"),
                        c,
                        style.norm,
                        style.activation,
                    )),
                    shape,
                ),
                LayerKind::BatchNorm => (Layer::Norm(Norm::new(NormKind::Batch, store, &format!("{lname}.bn"), c)), shape),
                LayerKind::LayerNorm => (Layer::Norm(Norm::new(NormKind::Layer, store, &format!("{lname}.ln"), c)), shape),
                LayerKind::Activation(a) => (Layer::Act(a), shape),
                LayerKind::EmbedConcatDepth => {
                    ensure_arg!(embed_dim > 0, "{lname}: segment has no conditioning input");
                    (Layer::EmbedConcat, [h, w, c + embed_dim])
                }
                LayerKind::ToRgb => {
                    let a = Conv2d::same(store, rng, &format!("{lname}.rgb_hidden"), c, 9, 2);
                    let b = Conv2d::same(store, rng, &format!("{lname}.rgb_out"), 9, 3, 1);
                    (Layer::ToRgb(a, b), [h, w, 3])
                }
                LayerKind::FromRgb => {
                    ensure_arg!(c == 3, "{lname}: fromRGB expects 3 channels, got {c}");
                    let conv = Conv2d::same(store, rng, &format!("{lname}.from_rgb"), 3, spec.filters, 1);
                    (Layer::FromRgb(conv, style.activation), [h, w, spec.filters])
                }
                LayerKind::MultiplicativeNoise => (Layer::Noise(style.noise_strength), shape),
            };
            layers.push(layer);
            shapes.push(next);
            shape = next;
        }
        Ok(Self {
            specs: specs.to_vec(),
            layers,
            input,
            shapes,
        })
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input
    }

    /// Per-sample output shape of every layer.
    pub fn layer_shapes(&self) -> &[[usize; 3]] {
        &self.shapes
    }

    pub fn output_shape(&self) -> [usize; 3] {
        *self.shapes.last().unwrap_or(&self.input)
    }

    /// `x: (B, H, W, C)` (or `(B, n)` for a vector input); `embed: (B, E)`.
    pub fn forward(&self, s: &mut Session, x: &Var, embed: Option<&Var>) -> Var {
        let b = x.shape()[0];
        let [h0, w0, c0] = self.input;
        let mut h = x.reshape(&[b, h0, w0, c0]);
        for layer in &self.layers {
            h = match layer {
                Layer::Conv(conv) => conv.forward(s, &h),
                Layer::Upsample => upsample_nearest(&h, 2),
                Layer::Downsample => avg_pool2(&h),
                Layer::Dense(fc, [oh, ow, oc]) => {
                    let flat: usize = h.shape()[1..].iter().product();
                    fc.forward(s, &h.reshape(&[b, flat])).reshape(&[b, *oh, *ow, *oc])
                }
                Layer::Residual(block) => block.forward(s, &h),
                Layer::Norm(n) => n.forward(s, &h),
                Layer::Act(a) => a.apply(&h),
                Layer::EmbedConcat => {
                    let e = embed.expect("segment needs a conditioning vector");
                    let (hh, ww) = (h.shape()[1], h.shape()[2]);
                    Var::concat_last(&[h.clone(), replicate_spatial(e, hh, ww)])
                }
                Layer::ToRgb(a, c) => {
                    let hidden = a.forward(s, &h).relu();
                    c.forward(s, &hidden).tanh()
                }
                Layer::FromRgb(conv, act) => act.apply(&conv.forward(s, &h)),
                Layer::Noise(strength) => {
                    if *strength > 0.0 && s.is_training() {
                        match s.noise_rng() {
                            Some(rng) => apply_multiplicative_noise(&h, *strength, rng),
                            None => h,
                        }
                    } else {
                        h
                    }
                }
            };
        }
        h
    }
}

/// Appends `conv → norm → activation` (norm skipped for [`NormKind::None`]).
pub fn conv_block(out: &mut Vec<LayerSpec>, kernel: usize, filters: usize, stride: usize, style: &SegmentStyle) {
    out.push(LayerSpec::conv(kernel, filters, stride));
    push_norm(out, style.norm);
    out.push(LayerSpec::act(style.activation));
}

pub fn push_norm(out: &mut Vec<LayerSpec>, norm: NormKind) {
    match norm {
        NormKind::None => {}
        NormKind::Batch => out.push(LayerSpec::new(LayerKind::BatchNorm)),
        NormKind::Layer => out.push(LayerSpec::new(LayerKind::LayerNorm)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Mode;
    use crate::rng::{normal_tensor, seeded};

    #[test]
    fn same_padding_matches_conventions() {
        assert_eq!(same_padding(16, 3, 1), (1, 1));
        assert_eq!(same_padding(16, 4, 2), (1, 1));
        assert_eq!(same_padding(16, 2, 1), (0, 1));
        assert_eq!(same_padding(16, 1, 1), (0, 0));
    }

    #[test]
    fn shapes_follow_the_specs() {
        let style = SegmentStyle {
            norm: NormKind::Layer,
            activation: Activation::Relu,
            noise_strength: 0.0,
        };
        let specs = [
            LayerSpec::dense(4, 8),
            LayerSpec::new(LayerKind::UpsampleNearest),
            LayerSpec::conv(3, 6, 1),
            LayerSpec::new(LayerKind::LayerNorm),
            LayerSpec::new(LayerKind::ResidualBlock),
            LayerSpec::new(LayerKind::EmbedConcatDepth),
            LayerSpec::conv(4, 5, 2),
            LayerSpec::new(LayerKind::ToRgb),
        ];
        let mut store = ParamStore::new();
        let mut rng = seeded(0);
        let seq = Sequential::build(&mut store, &mut rng, "g", [1, 1, 10], &specs, style, 3).unwrap();
        assert_eq!(
            seq.layer_shapes(),
            &[[4, 4, 8], [8, 8, 8], [8, 8, 6], [8, 8, 6], [8, 8, 6], [8, 8, 9], [4, 4, 5], [4, 4, 3]]
        );
        let mut s = Session::new(&store, Mode::Train);
        let x = Var::constant(normal_tensor(&mut rng, &[2, 10], 1.0));
        let e = Var::constant(normal_tensor(&mut rng, &[2, 3], 1.0));
        let y = seq.forward(&mut s, &x, Some(&e));
        assert_eq!(y.shape(), &[2, 4, 4, 3]);
        assert!(y.value().data().iter().all(|v| v.abs() <= 1.0));
    }
}
