use serde::{Deserialize, Serialize};

use super::{init_weight, ParamId, ParamStore, Session};
use crate::autograd::index::{self, ConvGeometry};
use crate::autograd::Var;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Relu,
    LeakyRelu,
    Tanh,
    Sigmoid,
    Linear,
}

/// Slope of the negative half of every leaky ReLU in the crate.
pub const LEAKY_SLOPE: f64 = 0.2;

impl Activation {
    pub fn apply(self, x: &Var) -> Var {
        match self {
            Activation::Relu => x.relu(),
            Activation::LeakyRelu => x.leaky_relu(LEAKY_SLOPE),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => x.sigmoid(),
            Activation::Linear => x.clone(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, input: usize, output: usize) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            init_weight(rng, &[input, output], input),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[output]));
        Self {
            weight,
            bias,
            in_features: input,
            out_features: output,
        }
    }

    /// `(B, in) -> (B, out)`.
    pub fn forward(&self, s: &mut Session, x: &Var) -> Var {
        assert_eq!(x.shape().len(), 2, "linear expects (B, features)");
        assert_eq!(x.shape()[1], self.in_features, "linear input width");
        let w = s.param(self.weight);
        let b = s.param(self.bias);
        x.matmul(&w).add(&b)
    }
}

/// 2-D convolution over NHWC tensors, lowered to im2col and a matrix product.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    /// (top, left, bottom, right)
    pub padding: (usize, usize, usize, usize),
}

impl Conv2d {
    /// Stride-1 convolution that preserves spatial size. Even kernels pad one
    /// more on the bottom/right.
    pub fn same(store: &mut ParamStore, rng: &mut Rng, name: &str, cin: usize, cout: usize, kernel: usize) -> Self {
        let before = (kernel - 1) / 2;
        let after = kernel - 1 - before;
        Self::with_geometry(store, rng, name, cin, cout, kernel, 1, (before, before, after, after))
    }

    /// Unpadded convolution.
    pub fn valid(store: &mut ParamStore, rng: &mut Rng, name: &str, cin: usize, cout: usize, kernel: usize) -> Self {
        Self::with_geometry(store, rng, name, cin, cout, kernel, 1, (0, 0, 0, 0))
    }

    /// 4×4 stride-2 convolution halving the resolution.
    pub fn down(store: &mut ParamStore, rng: &mut Rng, name: &str, cin: usize, cout: usize) -> Self {
        Self::with_geometry(store, rng, name, cin, cout, 4, 2, (1, 1, 1, 1))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_geometry(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: (usize, usize, usize, usize),
    ) -> Self {
        let fan_in = kernel * kernel * cin;
        let weight = store.add(
            format!("{name}.weight"),
            init_weight(rng, &[fan_in, cout], fan_in),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Self {
            weight,
            bias,
            in_channels: cin,
            out_channels: cout,
            kernel,
            stride,
            padding,
        }
    }

    pub fn geometry(&self, input_shape: &[usize]) -> ConvGeometry {
        assert_eq!(input_shape.len(), 4, "conv expects NHWC input");
        assert_eq!(input_shape[3], self.in_channels, "conv input channels");
        let (t, l, b, r) = self.padding;
        ConvGeometry {
            batch: input_shape[0],
            height: input_shape[1],
            width: input_shape[2],
            channels: input_shape[3],
            kernel_h: self.kernel,
            kernel_w: self.kernel,
            stride: self.stride,
            pad_top: t,
            pad_left: l,
            pad_bottom: b,
            pad_right: r,
        }
    }

    pub fn forward(&self, s: &mut Session, x: &Var) -> Var {
        let g = self.geometry(x.shape());
        let (ho, wo) = (g.out_height(), g.out_width());
        let cols = self.kernel * self.kernel * self.in_channels;
        let patches = x.gather(index::im2col(&g), &[g.batch * ho * wo, cols]);
        let w = s.param(self.weight);
        let b = s.param(self.bias);
        patches
            .matmul(&w)
            .add(&b)
            .reshape(&[g.batch, ho, wo, self.out_channels])
    }
}

/// Normalizes each sample over all of its non-batch axes, with a learned
/// per-channel gain and bias.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub channels: usize,
}

pub const NORM_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::ones(&[channels])),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[channels])),
            channels,
        }
    }

    pub fn forward(&self, s: &mut Session, x: &Var) -> Var {
        let shape = x.shape().to_vec();
        let b = shape[0];
        let n = x.value().len() / b;
        let flat = x.reshape(&[b, n]);
        let mean = flat.sum_to(&[b, 1]).mul_scalar(1.0 / n as f64);
        let centered = flat.sub(&mean);
        let var = centered.square().sum_to(&[b, 1]).mul_scalar(1.0 / n as f64);
        let normed = centered.div(&var.add_scalar(NORM_EPS).sqrt()).reshape(&shape);
        normed.mul(&s.param(self.gain)).add(&s.param(self.bias))
    }
}

/// Per-channel batch normalization. Training passes use batch statistics and
/// record running averages; evaluation passes use the running averages.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::ones(&[channels])),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[channels])),
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::ones(&[channels])),
            channels,
            momentum: 0.1,
        }
    }

    pub fn forward(&self, s: &mut Session, x: &Var) -> Var {
        let shape = x.shape().to_vec();
        let c = self.channels;
        assert_eq!(*shape.last().unwrap(), c, "batch norm channels");
        let rows = x.value().len() / c;
        let flat = x.reshape(&[rows, c]);
        let normed = if s.is_training() {
            let mean = flat.sum_to(&[1, c]).mul_scalar(1.0 / rows as f64);
            let centered = flat.sub(&mean);
            let var = centered.square().sum_to(&[1, c]).mul_scalar(1.0 / rows as f64);
            let m = self.momentum;
            let rm = s.store().get(self.running_mean).clone();
            let rv = s.store().get(self.running_var).clone();
            let new_mean = rm.zip_map(&mean.value().reshape(&[c]).unwrap(), |r, b| (1.0 - m) * r + m * b);
            let new_var = rv.zip_map(&var.value().reshape(&[c]).unwrap(), |r, b| (1.0 - m) * r + m * b);
            s.record_buffer(self.running_mean, new_mean);
            s.record_buffer(self.running_var, new_var);
            centered.div(&var.add_scalar(NORM_EPS).sqrt())
        } else {
            let mean = s.param(self.running_mean);
            let var = s.param(self.running_var);
            flat.sub(&mean).div(&var.add_scalar(NORM_EPS).sqrt())
        };
        normed
            .mul(&s.param(self.gain))
            .add(&s.param(self.bias))
            .reshape(&shape)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormKind {
    None,
    Batch,
    Layer,
}

#[derive(Clone, Debug)]
pub enum Norm {
    None,
    Batch(BatchNorm),
    Layer(LayerNorm),
}

impl Norm {
    pub fn new(kind: NormKind, store: &mut ParamStore, name: &str, channels: usize) -> Self {
        match kind {
            NormKind::None => Norm::None,
            NormKind::Batch => Norm::Batch(BatchNorm::new(store, name, channels)),
            NormKind::Layer => Norm::Layer(LayerNorm::new(store, name, channels)),
        }
    }

    pub fn forward(&self, s: &mut Session, x: &Var) -> Var {
        match self {
            Norm::None => x.clone(),
            Norm::Batch(bn) => bn.forward(s, x),
            Norm::Layer(ln) => ln.forward(s, x),
        }
    }
}

/// `act(x + norm(conv(act(norm(conv(x))))))` with 3×3 convolutions.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    conv1: Conv2d,
    norm1: Norm,
    conv2: Conv2d,
    norm2: Norm,
    act: Activation,
}

impl ResidualBlock {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        channels: usize,
        norm: NormKind,
        act: Activation,
    ) -> Self {
        Self {
            conv1: Conv2d::same(store, rng, &format!("{name}.conv1"), channels, channels, 3),
            norm1: Norm::new(norm, store, &format!("{name}.norm1"), channels),
            conv2: Conv2d::same(store, rng, &format!("{name}.conv2"), channels, channels, 3),
            norm2: Norm::new(norm, store, &format!("{name}.norm2"), channels),
            act,
        }
    }

    pub fn forward(&self, s: &mut Session, x: &Var) -> Var {
        let h = self.conv1.forward(s, x);
        let h = self.act.apply(&self.norm1.forward(s, &h));
        let h = self.conv2.forward(s, &h);
        let h = self.norm2.forward(s, &h);
        self.act.apply(&x.add(&h))
    }
}

fn nhwc(x: &Var) -> (usize, usize, usize, usize) {
    let s = x.shape();
    assert_eq!(s.len(), 4, "expected NHWC tensor, got {s:?}");
    (s[0], s[1], s[2], s[3])
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample_nearest(x: &Var, factor: usize) -> Var {
    let (b, h, w, c) = nhwc(x);
    x.gather(index::upsample(b, h, w, c, factor), &[b, h * factor, w * factor, c])
}

/// 2×2 average pooling.
pub fn avg_pool2(x: &Var) -> Var {
    let (b, h, w, c) = nhwc(x);
    assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even spatial size");
    x.scatter_add(index::upsample(b, h / 2, w / 2, c, 2), &[b, h / 2, w / 2, c])
        .mul_scalar(0.25)
}

/// `(B, C) -> (B, H, W, C)` by spatial replication.
pub fn replicate_spatial(e: &Var, h: usize, w: usize) -> Var {
    let (b, c) = (e.shape()[0], e.shape()[1]);
    e.reshape(&[b, 1, 1, c]).expand(&[b, h, w, c])
}

pub fn flip_horizontal(x: &Var) -> Var {
    let (b, h, w, c) = nhwc(x);
    x.gather(index::flip_width(b, h, w, c), &[b, h, w, c])
}
