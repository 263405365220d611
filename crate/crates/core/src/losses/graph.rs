//! Differentiable forms of the adversarial losses. Inputs are per-sample
//! critic outputs of shape `(B)`; outputs are scalars.

use crate::autograd::{grad_dense, Var};

/// Added under the square root of gradient norms so their derivative exists
/// at zero.
pub const NORM_EPS: f64 = 1e-12;

/// `-mean(log D(fake))`.
pub fn gan_generator_nonsaturating(on_fake: &Var) -> Var {
    on_fake.log().mean().neg()
}

/// `-mean log D(real) - mean log(1 - D(fake))`.
pub fn gan_discriminator(on_real: &Var, on_fake: &Var) -> Var {
    let real = on_real.log().mean();
    let fake = on_fake.neg().add_scalar(1.0).log().mean();
    real.add(&fake).neg()
}

/// Matching-aware discriminator loss over matched, generated and mismatched
/// pairs.
pub fn gan_cls_discriminator(matched: &Var, fake: &Var, mismatched: &Var) -> Var {
    let real = matched.log().mean();
    let fake = fake.neg().add_scalar(1.0).log().mean();
    let mis = mismatched.neg().add_scalar(1.0).log().mean();
    real.neg().sub(&fake.add(&mis).mul_scalar(0.5))
}

/// Conditional Wasserstein critic loss without the penalty term:
/// `mean(fake) + alpha·mean(mismatched) - (1+alpha)·mean(matched)`.
pub fn wgan_cls_critic(matched: &Var, fake: &Var, mismatched: &Var, alpha: f64) -> Var {
    fake.mean()
        .add(&mismatched.mean().mul_scalar(alpha))
        .sub(&matched.mean().mul_scalar(1.0 + alpha))
}

/// `-mean(fake) + rho·kl`.
pub fn wgan_cls_generator(fake: &Var, kl: &Var, rho: f64) -> Var {
    fake.mean().neg().add(&kl.mul_scalar(rho))
}

/// One-sided penalty: `mean(max(0, |∇x|-1)² + max(0, |∇e|-1)²)`.
pub fn lipschitz_penalty(norms_x: &Var, norms_e: &Var) -> Var {
    let over_x = norms_x.add_scalar(-1.0).relu().square();
    let over_e = norms_e.add_scalar(-1.0).relu().square();
    over_x.add(&over_e).mean()
}

/// Two-sided penalty: `mean((|∇|-1)²)`.
pub fn gradient_penalty(norms: &Var) -> Var {
    norms.add_scalar(-1.0).square().mean()
}

/// Least-squares critic and generator losses with labels `a` (fake), `b`
/// (real) and `c` (generator target). The conditional form also pushes
/// mismatched pairs towards `a`.
pub fn least_squares(
    matched: &Var,
    fake: &Var,
    mismatched: Option<&Var>,
    a: f64,
    b: f64,
    c: f64,
) -> (Var, Var) {
    let mut critic = matched
        .add_scalar(-b)
        .square()
        .mean()
        .add(&fake.add_scalar(-a).square().mean());
    if let Some(mis) = mismatched {
        critic = critic.add(&mis.add_scalar(-a).square().mean());
    }
    let generator = fake.add_scalar(-c).square().mean();
    (critic, generator)
}

/// Rowwise `t·fake + (1-t)·real` with one `t` per sample.
pub fn interpolate(real: &Var, fake: &Var, t: &[f64]) -> Var {
    let b = real.shape()[0];
    assert_eq!(t.len(), b, "one interpolation weight per row");
    let mut tshape = vec![1; real.shape().len()];
    tshape[0] = b;
    let tv = Var::constant(crate::tensor::Tensor::from_vec(&tshape, t.to_vec()));
    let one_minus = tv.neg().add_scalar(1.0);
    fake.mul(&tv).add(&real.mul(&one_minus))
}

/// Per-sample gradient norms of `critic_out` with respect to its image and
/// embedding inputs, kept differentiable for the penalty's backward pass.
pub fn input_gradient_norms(critic_out: &Var, images: &Var, embeddings: &Var) -> (Var, Var) {
    let mut g = grad_dense(&critic_out.sum(), &[images, embeddings], true);
    let ge = g.pop().unwrap();
    let gx = g.pop().unwrap();
    (gx.row_norms(NORM_EPS), ge.row_norms(NORM_EPS))
}
