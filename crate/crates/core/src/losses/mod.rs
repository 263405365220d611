//! Adversarial losses as pure functions of critic outputs and gradient norms.
//!
//! The scalar functions here validate their inputs and evaluate the same
//! expressions as the differentiable forms in [`graph`], which the training
//! loops use directly.

pub mod graph;
pub mod theory;

use crate::autograd::{no_grad, Var};
use crate::error::{ensure_arg, Result};
use crate::tensor::Tensor;

pub use theory::{
    discrete_wasserstein_1d, js_divergence, kl_divergence, optimal_discriminator_discrete,
    value_function_discrete, DiscreteDistributionPair,
};

/// Critic outputs on the three streams of a matching-aware batch.
#[derive(Clone, Debug, PartialEq)]
pub struct CriticOutputs {
    pub on_real_matched: Vec<f64>,
    pub on_fake: Vec<f64>,
    pub on_real_mismatched: Vec<f64>,
}

impl CriticOutputs {
    pub fn new(on_real_matched: Vec<f64>, on_fake: Vec<f64>, on_real_mismatched: Vec<f64>) -> Result<Self> {
        ensure_arg!(
            !on_real_matched.is_empty()
                && on_real_matched.len() == on_fake.len()
                && on_fake.len() == on_real_mismatched.len(),
            "critic output streams must be non-empty and of equal length"
        );
        Ok(Self {
            on_real_matched,
            on_fake,
            on_real_mismatched,
        })
    }

    /// All three streams filled with the same value.
    pub fn constant(value: f64, len: usize) -> Self {
        Self {
            on_real_matched: vec![value; len],
            on_fake: vec![value; len],
            on_real_mismatched: vec![value; len],
        }
    }

    fn check_probabilities(&self) -> Result<()> {
        for (name, s) in [
            ("on_real_matched", &self.on_real_matched),
            ("on_fake", &self.on_fake),
            ("on_real_mismatched", &self.on_real_mismatched),
        ] {
            check_open_unit(name, s)?;
        }
        Ok(())
    }
}

/// Inputs of the gradient-based penalties.
#[derive(Clone, Debug)]
pub struct PenaltyInputs {
    /// Interpolated images `(B, H, W, 3)`.
    pub interpolated_points: Tensor,
    /// Matching embeddings paired with the interpolated images.
    pub embeddings: Tensor,
    pub gradient_norms_x: Vec<f64>,
    pub gradient_norms_e: Vec<f64>,
}

impl PenaltyInputs {
    pub fn lipschitz_penalty(&self) -> Result<f64> {
        lipschitz_penalty_lp(&self.gradient_norms_x, &self.gradient_norms_e)
    }
}

fn check_open_unit(name: &str, v: &[f64]) -> Result<()> {
    ensure_arg!(!v.is_empty(), "{name} is empty");
    ensure_arg!(
        v.iter().all(|&x| x > 0.0 && x < 1.0),
        "{name} must lie strictly inside (0, 1)"
    );
    Ok(())
}

fn check_norms(name: &str, v: &[f64]) -> Result<()> {
    ensure_arg!(!v.is_empty(), "{name} is empty");
    ensure_arg!(
        v.iter().all(|&x| x >= 0.0 && x.is_finite()),
        "{name} must be finite and nonnegative"
    );
    Ok(())
}

fn vector(v: &[f64]) -> Var {
    Var::constant(Tensor::from_vec(&[v.len()], v.to_vec()))
}

fn eval(f: impl FnOnce() -> Var) -> f64 {
    no_grad(f).item()
}

/// Non-saturating generator loss `-mean(log D(G(z)))`.
pub fn gan_generator_loss_nonsaturating(on_fake: &[f64]) -> Result<f64> {
    check_open_unit("on_fake", on_fake)?;
    Ok(eval(|| graph::gan_generator_nonsaturating(&vector(on_fake))))
}

/// Unconditional discriminator loss `-mean log D(x) - mean log(1-D(G(z)))`.
pub fn gan_discriminator_loss(on_real: &[f64], on_fake: &[f64]) -> Result<f64> {
    check_open_unit("on_real", on_real)?;
    check_open_unit("on_fake", on_fake)?;
    Ok(eval(|| graph::gan_discriminator(&vector(on_real), &vector(on_fake))))
}

/// Matching-aware discriminator loss: real matched pairs are pushed to 1,
/// generated and mismatched pairs share the push to 0.
pub fn gan_cls_discriminator_loss(c: &CriticOutputs) -> Result<f64> {
    c.check_probabilities()?;
    Ok(eval(|| {
        graph::gan_cls_discriminator(
            &vector(&c.on_real_matched),
            &vector(&c.on_fake),
            &vector(&c.on_real_mismatched),
        )
    }))
}

/// Conditional Wasserstein critic loss
/// `mean(fake) + α·mean(mis) - (1+α)·mean(mat) + λ·penalty`.
pub fn wgan_cls_critic_loss(c: &CriticOutputs, alpha: f64, lambda: f64, penalty: f64) -> Result<f64> {
    ensure_arg!(alpha >= 0.0, "alpha must be nonnegative, got {alpha}");
    ensure_arg!(lambda >= 0.0, "lambda must be nonnegative, got {lambda}");
    ensure_arg!(penalty >= 0.0, "penalty must be nonnegative, got {penalty}");
    let core = eval(|| {
        graph::wgan_cls_critic(
            &vector(&c.on_real_matched),
            &vector(&c.on_fake),
            &vector(&c.on_real_mismatched),
            alpha,
        )
    });
    Ok(core + lambda * penalty)
}

/// Unconditional Wasserstein critic loss `mean(fake) - mean(real) + λ·penalty`.
pub fn wgan_critic_loss(on_real: &[f64], on_fake: &[f64], lambda: f64, penalty: f64) -> Result<f64> {
    ensure_arg!(
        !on_real.is_empty() && on_real.len() == on_fake.len(),
        "real and fake streams must be non-empty and of equal length"
    );
    let c = CriticOutputs::new(on_real.to_vec(), on_fake.to_vec(), vec![0.0; on_real.len()])?;
    wgan_cls_critic_loss(&c, 0.0, lambda, penalty)
}

/// Conditional Wasserstein generator loss `-mean(fake) + ρ·KL`.
pub fn wgan_cls_generator_loss(on_fake: &[f64], kl_term: f64, rho: f64) -> Result<f64> {
    ensure_arg!(!on_fake.is_empty(), "on_fake is empty");
    ensure_arg!(kl_term >= 0.0, "kl_term must be nonnegative, got {kl_term}");
    Ok(eval(|| {
        graph::wgan_cls_generator(&vector(on_fake), &Var::scalar(kl_term), rho)
    }))
}

/// One-sided Lipschitz penalty on image and embedding gradient norms.
pub fn lipschitz_penalty_lp(norms_x: &[f64], norms_e: &[f64]) -> Result<f64> {
    check_norms("norms_x", norms_x)?;
    check_norms("norms_e", norms_e)?;
    ensure_arg!(
        norms_x.len() == norms_e.len(),
        "norms_x and norms_e lengths differ"
    );
    Ok(eval(|| graph::lipschitz_penalty(&vector(norms_x), &vector(norms_e))))
}

/// Two-sided gradient penalty `mean((|∇|-1)²)`.
pub fn gradient_penalty_gp(norms: &[f64]) -> Result<f64> {
    check_norms("norms", norms)?;
    Ok(eval(|| graph::gradient_penalty(&vector(norms))))
}

/// Rowwise convex combination `t·fake + (1-t)·real`.
pub fn interpolate_real_fake(real: &Tensor, fake: &Tensor, t: &[f64]) -> Result<Tensor> {
    ensure_arg!(
        real.shape() == fake.shape(),
        "real {:?} and fake {:?} shapes differ",
        real.shape(),
        fake.shape()
    );
    ensure_arg!(
        real.ndim() >= 1 && t.len() == real.shape()[0],
        "need one interpolation weight per row"
    );
    ensure_arg!(
        t.iter().all(|v| (0.0..=1.0).contains(v)),
        "interpolation weights must lie in [0, 1]"
    );
    Ok(no_grad(|| {
        graph::interpolate(&Var::constant(real.clone()), &Var::constant(fake.clone()), t)
    })
    .value()
    .clone())
}

/// Least-squares losses `(critic, generator)` with labels `a` (fake),
/// `b` (real), `cc` (generator target).
pub fn lsgan_losses(c: &CriticOutputs, a: f64, b: f64, cc: f64, conditional: bool) -> (f64, f64) {
    let (critic, generator) = no_grad(|| {
        let mis = vector(&c.on_real_mismatched);
        graph::least_squares(
            &vector(&c.on_real_matched),
            &vector(&c.on_fake),
            conditional.then_some(&mis),
            a,
            b,
            cc,
        )
    });
    (critic.item(), generator.item())
}

#[cfg(test)]
mod tests {
    use super::*;

    const LN2: f64 = std::f64::consts::LN_2;

    #[test]
    fn nonsaturating_generator_examples() {
        assert!((gan_generator_loss_nonsaturating(&[0.5; 4]).unwrap() - LN2).abs() < 1e-12);
        assert!((gan_generator_loss_nonsaturating(&[0.25, 0.25]).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert!(gan_generator_loss_nonsaturating(&[1.0 - 1e-12]).unwrap() < 1e-11);
        assert!(gan_generator_loss_nonsaturating(&[1.0]).is_err());
        assert!(gan_generator_loss_nonsaturating(&[0.0]).is_err());
    }

    #[test]
    fn gan_cls_discriminator_examples() {
        let half = CriticOutputs::constant(0.5, 3);
        assert!((gan_cls_discriminator_loss(&half).unwrap() - 2.0 * LN2).abs() < 1e-12);
        let tiny = 1e-12;
        let ideal = CriticOutputs::new(vec![1.0 - tiny], vec![tiny], vec![tiny]).unwrap();
        assert!(gan_cls_discriminator_loss(&ideal).unwrap() < 1e-10);
        let c = CriticOutputs::new(vec![0.5], vec![tiny], vec![tiny]).unwrap();
        assert!((gan_cls_discriminator_loss(&c).unwrap() - LN2).abs() < 1e-10);
        let bad = CriticOutputs::new(vec![1.2], vec![0.5], vec![0.5]).unwrap();
        assert!(gan_cls_discriminator_loss(&bad).is_err());
    }

    #[test]
    fn wgan_cls_critic_examples() {
        for alpha in [0.0, 0.5, 1.0, 3.0] {
            let v = wgan_cls_critic_loss(&CriticOutputs::constant(2.7, 5), alpha, 0.0, 0.0).unwrap();
            assert!(v.abs() < 1e-12);
        }
        let c = CriticOutputs::new(vec![0.9], vec![0.2], vec![0.3]).unwrap();
        assert!((wgan_cls_critic_loss(&c, 1.0, 0.0, 0.0).unwrap() + 1.3).abs() < 1e-12);
        // alpha = 0 drops the mismatched stream entirely
        let c2 = CriticOutputs::new(vec![0.9], vec![0.2], vec![100.0]).unwrap();
        let a0 = wgan_cls_critic_loss(&c2, 0.0, 2.0, 0.25).unwrap();
        assert!((a0 - (0.2 - 0.9 + 0.5)).abs() < 1e-12);
        assert!((wgan_critic_loss(&[0.9], &[0.2], 2.0, 0.25).unwrap() - a0).abs() < 1e-12);
        assert!(wgan_cls_critic_loss(&c, -1.0, 0.0, 0.0).is_err());
        assert!(wgan_cls_critic_loss(&c, 1.0, -1.0, 0.0).is_err());
    }

    #[test]
    fn wgan_cls_generator_examples() {
        assert_eq!(wgan_cls_generator_loss(&[1.0, -1.0], 0.0, 10.0).unwrap(), 0.0);
        assert!((wgan_cls_generator_loss(&[2.5], 0.1, 10.0).unwrap() + 1.5).abs() < 1e-12);
        assert!((wgan_cls_generator_loss(&[1.0, 2.0], 5.0, 0.0).unwrap() + 1.5).abs() < 1e-12);
        assert!(wgan_cls_generator_loss(&[1.0], -0.1, 1.0).is_err());
    }

    #[test]
    fn penalty_examples() {
        assert_eq!(lipschitz_penalty_lp(&[0.5; 3], &[0.5; 3]).unwrap(), 0.0);
        assert!((lipschitz_penalty_lp(&[2.0; 3], &[2.0; 3]).unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(lipschitz_penalty_lp(&[1.0], &[1.0]).unwrap(), 0.0);
        assert!(lipschitz_penalty_lp(&[-0.1], &[1.0]).is_err());
        assert_eq!(gradient_penalty_gp(&[1.0; 2]).unwrap(), 0.0);
        assert!((gradient_penalty_gp(&[0.5; 2]).unwrap() - 0.25).abs() < 1e-12);
        assert_eq!(gradient_penalty_gp(&[0.0; 2]).unwrap(), 1.0);
        assert!(gradient_penalty_gp(&[-1.0]).is_err());
    }

    #[test]
    fn interpolation_examples() {
        let real = Tensor::full(&[2, 2, 2, 3], -1.0);
        let fake = Tensor::full(&[2, 2, 2, 3], 1.0);
        assert_eq!(interpolate_real_fake(&real, &fake, &[0.0, 0.0]).unwrap(), real);
        assert_eq!(interpolate_real_fake(&real, &fake, &[1.0, 1.0]).unwrap(), fake);
        let mid = interpolate_real_fake(&real, &fake, &[0.5, 0.5]).unwrap();
        assert!(mid.data().iter().all(|&v| v == 0.0));
        assert!(interpolate_real_fake(&real, &fake, &[1.5, 0.0]).is_err());
        assert!(interpolate_real_fake(&real, &fake, &[0.5]).is_err());
    }

    #[test]
    fn least_squares_examples() {
        let (a, b, c) = (-1.0, 1.0, 0.0);
        let at_labels = CriticOutputs::new(vec![b; 2], vec![a; 2], vec![a; 2]).unwrap();
        assert_eq!(lsgan_losses(&at_labels, a, b, c, true).0, 0.0);
        let fake_at_c = CriticOutputs::new(vec![0.3], vec![c], vec![0.7]).unwrap();
        assert_eq!(lsgan_losses(&fake_at_c, a, b, c, true).1, 0.0);
        let zeros = CriticOutputs::constant(0.0, 4);
        assert_eq!(lsgan_losses(&zeros, a, b, c, true), (3.0, 0.0));
        assert_eq!(lsgan_losses(&zeros, a, b, c, false), (2.0, 0.0));
    }
}
