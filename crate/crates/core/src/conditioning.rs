//! Text-embedding compression and conditioning augmentation: a Gaussian
//! around each embedding, sampled with the reparametrization trick and pulled
//! towards the standard normal by a KL regularizer.

use serde::{Deserialize, Serialize};

use crate::autograd::{no_grad, Var};
use crate::error::{ensure_arg, Result};
use crate::nn::{Linear, ParamStore, Session, LEAKY_SLOPE};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Dense weights `[in, out]` and bias `[out]` for the pure-function API.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseWeights {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl DenseWeights {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        ensure_arg!(weight.ndim() == 2, "weight must be a matrix, got {:?}", weight.shape());
        ensure_arg!(
            bias.shape() == [weight.shape()[1]],
            "bias {:?} does not match weight {:?}",
            bias.shape(),
            weight.shape()
        );
        Ok(Self { weight, bias })
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[input, output]),
            bias: Tensor::zeros(&[output]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    fn apply(&self, e: &[f64]) -> Result<Vec<f64>> {
        ensure_arg!(
            e.len() == self.input_dim(),
            "embedding has dimension {}, weights expect {}",
            e.len(),
            self.input_dim()
        );
        let out = self.output_dim();
        let w = self.weight.data();
        let mut y = self.bias.data().to_vec();
        for (i, &x) in e.iter().enumerate() {
            for (j, yj) in y.iter_mut().enumerate() {
                *yj += x * w[i * out + j];
            }
        }
        Ok(y)
    }
}

fn leaky(x: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

/// Affine map followed by a leaky ReLU.
pub fn compress_embedding(e: &[f64], weights: &DenseWeights) -> Result<Vec<f64>> {
    Ok(weights.apply(e)?.into_iter().map(leaky).collect())
}

/// Weights of the two heads of the augmentation module. Each head is a
/// fully connected layer with a leaky ReLU; the second produces the
/// log-variance.
#[derive(Clone, Debug, PartialEq)]
pub struct CaWeights {
    pub mu: DenseWeights,
    pub log_var: DenseWeights,
}

/// Reparametrized conditioning vector with the statistics it was drawn from.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedEmbedding {
    pub sample: Vec<f64>,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub epsilon: Vec<f64>,
}

/// `sample = mu + sigma ∘ epsilon` with `sigma = exp(log_var / 2)`.
pub fn augment_embedding(e: &[f64], weights: &CaWeights, epsilon: &[f64]) -> Result<AugmentedEmbedding> {
    ensure_arg!(
        weights.mu.output_dim() == weights.log_var.output_dim(),
        "mean and log-variance heads differ in width"
    );
    ensure_arg!(
        epsilon.len() == weights.mu.output_dim(),
        "epsilon has dimension {}, expected {}",
        epsilon.len(),
        weights.mu.output_dim()
    );
    ensure_arg!(epsilon.iter().all(|v| v.is_finite()), "epsilon has a non-finite entry");
    let mu = compress_embedding(e, &weights.mu)?;
    let sigma: Vec<f64> = compress_embedding(e, &weights.log_var)?
        .into_iter()
        .map(|lv| (0.5 * lv).exp())
        .collect();
    let sample = mu
        .iter()
        .zip(&sigma)
        .zip(epsilon)
        .map(|((m, s), eps)| m + s * eps)
        .collect();
    Ok(AugmentedEmbedding {
        sample,
        mu,
        sigma,
        epsilon: epsilon.to_vec(),
    })
}

/// Argument order of the KL regularizer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KlDirection {
    /// `KL(N(0, I) ‖ N(μ, σ²))`.
    #[default]
    StandardFirst,
    /// `KL(N(μ, σ²) ‖ N(0, I))`, the usual VAE order.
    ConditionalFirst,
}

/// Closed-form KL divergence between the standard normal and the diagonal
/// normal `N(mu, sigma²)`, in the requested order.
pub fn ca_kl_regularizer(mu: &[f64], sigma: &[f64], direction: KlDirection) -> Result<f64> {
    ensure_arg!(mu.len() == sigma.len(), "mu and sigma lengths differ");
    ensure_arg!(
        sigma.iter().all(|&s| s > 0.0 && s.is_finite()),
        "sigma must be positive and finite"
    );
    ensure_arg!(mu.iter().all(|m| m.is_finite()), "mu has a non-finite entry");
    let log_var: Vec<f64> = sigma.iter().map(|s| 2.0 * s.ln()).collect();
    let mu = Var::constant(Tensor::from_vec(&[1, mu.len()], mu.to_vec()));
    let lv = Var::constant(Tensor::from_vec(&[1, log_var.len()], log_var));
    Ok(no_grad(|| kl_from_log_var(&mu, &lv, direction)).item().max(0.0))
}

/// Differentiable KL over a batch `(B, N_c)` of means and log-variances:
/// the per-row divergence averaged over rows.
pub fn kl_from_log_var(mu: &Var, log_var: &Var, direction: KlDirection) -> Var {
    let rows = mu.shape()[0] as f64;
    let mu2 = mu.square();
    let terms = match direction {
        KlDirection::StandardFirst => log_var
            .add(&mu2.add_scalar(1.0).mul(&log_var.neg().exp()))
            .add_scalar(-1.0),
        KlDirection::ConditionalFirst => mu2.add(&log_var.exp()).sub(log_var).add_scalar(-1.0),
    };
    terms.sum().mul_scalar(0.5 / rows)
}

/// Graph outputs of the augmentation module for a batch.
#[derive(Clone, Debug)]
pub struct CaOutput {
    pub sample: Var,
    pub mu: Var,
    pub log_var: Var,
}

impl CaOutput {
    pub fn kl(&self, direction: KlDirection) -> Var {
        kl_from_log_var(&self.mu, &self.log_var, direction)
    }
}

/// Trainable conditioning-augmentation module.
#[derive(Clone, Debug)]
pub struct ConditioningAugmentation {
    pub mu: Linear,
    pub log_var: Linear,
}

impl ConditioningAugmentation {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, embed_dim: usize, out_dim: usize) -> Self {
        Self {
            mu: Linear::new(store, rng, &format!("{name}.mu"), embed_dim, out_dim),
            log_var: Linear::new(store, rng, &format!("{name}.log_var"), embed_dim, out_dim),
        }
    }

    pub fn output_dim(&self) -> usize {
        self.mu.out_features
    }

    /// `e: (B, N_phi)`, `epsilon: (B, N_c)`; epsilon is data and never
    /// receives a gradient.
    pub fn forward(&self, s: &mut Session, e: &Var, epsilon: &Tensor) -> CaOutput {
        let mu = self.mu.forward(s, e).leaky_relu(LEAKY_SLOPE);
        let log_var = self.log_var.forward(s, e).leaky_relu(LEAKY_SLOPE);
        let sigma = log_var.mul_scalar(0.5).exp();
        let sample = mu.add(&sigma.mul(&Var::constant(epsilon.clone())));
        CaOutput { sample, mu, log_var }
    }
}

/// Trainable compression layer: fully connected plus leaky ReLU.
#[derive(Clone, Debug)]
pub struct EmbeddingCompressor {
    pub fc: Linear,
}

impl EmbeddingCompressor {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, embed_dim: usize, out_dim: usize) -> Self {
        Self {
            fc: Linear::new(store, rng, name, embed_dim, out_dim),
        }
    }

    pub fn forward(&self, s: &mut Session, e: &Var) -> Var {
        self.fc.forward(s, e).leaky_relu(LEAKY_SLOPE)
    }
}
