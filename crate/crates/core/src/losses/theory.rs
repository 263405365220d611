//! Closed-form results for discrete distributions: the optimal discriminator,
//! the minimax value function, Jensen-Shannon divergence and the exact 1-D
//! earth mover's distance.

use crate::error::{ensure_arg, invalid_arg, Result};

/// Two distributions over a shared finite support.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteDistributionPair {
    pub support: Vec<f64>,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
}

const MASS_TOL: f64 = 1e-9;

fn check_distribution(name: &str, v: &[f64]) -> Result<()> {
    ensure_arg!(
        v.iter().all(|&x| x >= 0.0 && x.is_finite()),
        "{name} has a negative or non-finite entry"
    );
    let total: f64 = v.iter().sum();
    ensure_arg!(
        (total - 1.0).abs() <= MASS_TOL,
        "{name} sums to {total}, not 1"
    );
    Ok(())
}

impl DiscreteDistributionPair {
    pub fn new(support: Vec<f64>, p: Vec<f64>, q: Vec<f64>) -> Result<Self> {
        ensure_arg!(!support.is_empty(), "empty support");
        ensure_arg!(
            support.len() == p.len() && p.len() == q.len(),
            "support, p and q lengths differ ({}, {}, {})",
            support.len(),
            p.len(),
            q.len()
        );
        check_distribution("p", &p)?;
        check_distribution("q", &q)?;
        Ok(Self { support, p, q })
    }

    /// Pair on the support `0, 1, …, K-1`.
    pub fn on_integers(p: Vec<f64>, q: Vec<f64>) -> Result<Self> {
        let support = (0..p.len()).map(|i| i as f64).collect();
        Self::new(support, p, q)
    }

    pub fn len(&self) -> usize {
        self.support.len()
    }

    pub fn is_empty(&self) -> bool {
        self.support.is_empty()
    }
}

/// `D*(x) = p(x) / (p(x) + q(x))` at every support point.
pub fn optimal_discriminator_discrete(d: &DiscreteDistributionPair) -> Result<Vec<f64>> {
    d.p.iter()
        .zip(&d.q)
        .enumerate()
        .map(|(i, (&p, &q))| {
            if p + q > 0.0 {
                Ok(p / (p + q))
            } else {
                Err(invalid_arg!("support point {i} has no mass under p or q"))
            }
        })
        .collect()
}

/// `Σ p log D + Σ q log(1-D)`, with `0·log 0 = 0`.
pub fn value_function_discrete(d: &DiscreteDistributionPair, disc: &[f64]) -> Result<f64> {
    ensure_arg!(
        disc.len() == d.len(),
        "discriminator has {} entries for a support of {}",
        disc.len(),
        d.len()
    );
    let mut v = 0.0;
    for (i, ((&p, &q), &di)) in d.p.iter().zip(&d.q).zip(disc).enumerate() {
        ensure_arg!(
            (0.0..=1.0).contains(&di),
            "discriminator output {di} at point {i} is outside [0, 1]"
        );
        if p > 0.0 {
            ensure_arg!(di > 0.0, "D = 0 at point {i} where p has mass");
            v += p * di.ln();
        }
        if q > 0.0 {
            ensure_arg!(di < 1.0, "D = 1 at point {i} where q has mass");
            v += q * (1.0 - di).ln();
        }
    }
    Ok(v)
}

/// `KL(p ‖ q)` in nats; infinite when `p` puts mass where `q` has none.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| {
            if qi > 0.0 {
                pi * (pi / qi).ln()
            } else {
                f64::INFINITY
            }
        })
        .sum()
}

/// Jensen-Shannon divergence `½KL(p‖m) + ½KL(q‖m)`, `m = (p+q)/2`.
pub fn js_divergence(p: &[f64], q: &[f64]) -> f64 {
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    0.5 * kl_divergence(p, &m) + 0.5 * kl_divergence(q, &m)
}

/// Exact earth mover's distance on a sorted 1-D support:
/// `Σ |F_p(x_i) - F_q(x_i)| (x_{i+1} - x_i)`.
pub fn discrete_wasserstein_1d(d: &DiscreteDistributionPair) -> Result<f64> {
    ensure_arg!(
        d.support.windows(2).all(|w| w[0] <= w[1]),
        "support must be sorted in nondecreasing order"
    );
    let mut cdf_gap = 0.0;
    let mut total = 0.0;
    for i in 0..d.len() - 1 {
        cdf_gap += d.p[i] - d.q[i];
        total += cdf_gap.abs() * (d.support[i + 1] - d.support[i]);
    }
    Ok(total)
}
