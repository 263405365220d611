//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero when any fails. Pass criterion numbers as arguments to run a
//! subset, e.g. `cargo test --release --test acceptance -- 3 4`.

use std::f64::consts::{E, LN_2};
use std::fmt::Write as _;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::Rng as _;

use cwgan::autograd::{grad_dense, no_grad};
use cwgan::conditioning::{augment_embedding, ca_kl_regularizer, compress_embedding, CaWeights, DenseWeights, KlDirection};
use cwgan::config::{ExperimentConfig, LossConfig};
use cwgan::data::{make_synthetic_dataset, Dataset, SyntheticSpec};
use cwgan::evaluation::{inception_score, ClassProbabilities};
use cwgan::losses::{
    discrete_wasserstein_1d, gan_cls_discriminator_loss, gan_generator_loss_nonsaturating, gradient_penalty_gp, graph,
    lipschitz_penalty_lp, lsgan_losses, optimal_discriminator_discrete, value_function_discrete, wgan_cls_critic_loss,
    wgan_cls_generator_loss, CriticOutputs, DiscreteDistributionPair,
};
use cwgan::networks::{build_discriminator, build_generator, ArchitectureConfig, Critic, Family, Generator, LossFamily, StageView};
use cwgan::nn::{Activation, Linear, Mode, ParamId, ParamStore, Session};
use cwgan::optim::Adam;
use cwgan::rng::{normal_tensor, seeded, standard_normal, Rng};
use cwgan::training::{train, TrainingRun};
use cwgan::{Tensor, Var};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn close(got: f64, want: f64, tol: f64) -> bool {
    (got - want).abs() <= tol
}

// ---------------------------------------------------------------------------
// 1. Loss and conditioning oracles

/// Monte-Carlo estimate of `KL(N(0,1) ‖ N(mu, sigma²))` from `draws`
/// standard-normal samples, taken in antithetic pairs.
fn mc_kl(mu: f64, sigma: f64, draws: usize, rng: &mut Rng) -> f64 {
    let log_ratio = |x: f64| -0.5 * x * x + sigma.ln() + (x - mu).powi(2) / (2.0 * sigma * sigma);
    let mut total = 0.0;
    for _ in 0..draws / 2 {
        let x = standard_normal(rng);
        total += log_ratio(x) + log_ratio(-x);
    }
    total / (draws / 2 * 2) as f64
}

/// Maximizer of `p·log d + q·log(1-d)` over `d ∈ (0, 1)` by ternary search.
fn maximize_pointwise(p: f64, q: f64) -> f64 {
    let f = |d: f64| p * d.ln() + q * (1.0 - d).ln();
    let (mut lo, mut hi) = (1e-12, 1.0 - 1e-12);
    for _ in 0..200 {
        let a = lo + (hi - lo) / 3.0;
        let b = hi - (hi - lo) / 3.0;
        if f(a) < f(b) {
            lo = a;
        } else {
            hi = b;
        }
    }
    0.5 * (lo + hi)
}

/// Cheapest transport plan between two two-point distributions, found by
/// scanning the plan's single free coordinate.
fn enumerate_transport(src: [(f64, f64); 2], dst: [(f64, f64); 2]) -> f64 {
    let ([(x0, p0), (x1, p1)], [(y0, q0), (y1, q1)]) = (src, dst);
    let lo = (p0 - q1).max(0.0);
    let hi = p0.min(q0);
    let n = 10_000;
    (0..=n)
        .map(|i| {
            let s = lo + (hi - lo) * i as f64 / n as f64;
            let plan = [[s, p0 - s], [q0 - s, p1 - q0 + s]];
            plan[0][0] * (x0 - y0).abs() + plan[0][1] * (x0 - y1).abs() + plan[1][0] * (x1 - y0).abs() + plan[1][1] * (x1 - y1).abs()
        })
        .fold(f64::INFINITY, f64::min)
}

fn expect_close(fails: &mut Vec<String>, name: &str, got: f64, want: f64, tol: f64) {
    if !close(got, want, tol) {
        fails.push(format!("{name}: got {got}, want {want}"));
    }
}

fn loss_oracles() -> Outcome {
    let mut fails = Vec::new();

    // Compression: identity weights, input −1 → leaky slope times −1.
    let n = 5;
    let mut eye = Tensor::zeros(&[n, n]);
    for i in 0..n {
        eye.data_mut()[i * n + i] = 1.0;
    }
    let w = DenseWeights::new(eye, Tensor::zeros(&[n])).unwrap();
    for v in compress_embedding(&vec![-1.0; n], &w).unwrap() {
        expect_close(&mut fails, "compress(-1)", v, -0.2, 1e-12);
    }

    // Reparametrized sampling: Monte-Carlo moments over 100,000 draws.
    let mut rng = seeded(1);
    let mu_w = DenseWeights::new(Tensor::from_vec(&[1, 2], vec![1.5, -2.0]), Tensor::zeros(&[2])).unwrap();
    let lv_w = DenseWeights::new(Tensor::from_vec(&[1, 2], vec![0.4, 1.2]), Tensor::zeros(&[2])).unwrap();
    let ca = CaWeights { mu: mu_w, log_var: lv_w };
    let draws = 100_000;
    let mut sum = [0.0; 2];
    let mut sq = [0.0; 2];
    let mut stats = None;
    for _ in 0..draws {
        let eps = [standard_normal(&mut rng), standard_normal(&mut rng)];
        let a = augment_embedding(&[1.0], &ca, &eps).unwrap();
        for j in 0..2 {
            sum[j] += a.sample[j];
            sq[j] += a.sample[j] * a.sample[j];
        }
        stats = Some(a);
    }
    let a = stats.unwrap();
    for j in 0..2 {
        let mean = sum[j] / draws as f64;
        let std = (sq[j] / draws as f64 - mean * mean).sqrt();
        expect_close(&mut fails, "sample mean / mu", mean / a.mu[j], 1.0, 0.01);
        expect_close(&mut fails, "sample std / sigma", std / a.sigma[j], 1.0, 0.01);
    }

    // Closed-form KL against Monte Carlo: the two listed examples and 20
    // random pairs, 10⁶ draws each.
    let mut worst: f64 = 0.0;
    let mut kl_check = |mu: f64, sigma: f64, rng: &mut Rng| -> (f64, f64) {
        let closed = ca_kl_regularizer(&[mu], &[sigma], KlDirection::StandardFirst).unwrap();
        let mc = mc_kl(mu, sigma, 1_000_000, rng);
        worst = worst.max((closed - mc).abs() / mc);
        (closed, mc)
    };
    let (k1, m1) = kl_check(1.0, 1.0, &mut rng);
    expect_close(&mut fails, "KL(mu=1, sigma=1) vs MC", k1 / m1, 1.0, 0.01);
    expect_close(&mut fails, "KL(mu=1, sigma=1)", k1, 0.5, 1e-12);
    let (k2, m2) = kl_check(0.0, E, &mut rng);
    expect_close(&mut fails, "KL(mu=0, sigma=e) vs MC", k2 / m2, 1.0, 0.01);
    expect_close(&mut fails, "KL(mu=0, sigma=e)", k2, 0.5 * (1.0 + E.powi(-2)), 1e-12);
    let mut pairs = 0;
    while pairs < 20 {
        let mu = rng.random_range(-1.5..1.5);
        let sigma: f64 = rng.random_range(0.5..2.0);
        // Near-zero divergences make a relative tolerance meaningless.
        if ca_kl_regularizer(&[mu], &[sigma], KlDirection::StandardFirst).unwrap() < 0.1 {
            continue;
        }
        let (k, m) = kl_check(mu, sigma, &mut rng);
        expect_close(&mut fails, &format!("KL(mu={mu:.3}, sigma={sigma:.3}) vs MC"), k / m, 1.0, 0.01);
        pairs += 1;
    }

    // Adversarial losses by direct evaluation.
    expect_close(&mut fails, "L_G(0.5)", gan_generator_loss_nonsaturating(&[0.5; 4]).unwrap(), -(0.5f64).ln(), 1e-12);
    expect_close(&mut fails, "L_G(0.25)", gan_generator_loss_nonsaturating(&[0.25, 0.25]).unwrap(), -(0.25f64).ln(), 1e-12);
    let half = -(0.5f64).ln() - 0.5 * ((0.5f64).ln() + (0.5f64).ln());
    expect_close(&mut fails, "GAN-CLS(0.5)", gan_cls_discriminator_loss(&CriticOutputs::constant(0.5, 3)).unwrap(), half, 1e-12);
    let tiny = 1e-15;
    let c = CriticOutputs::new(vec![0.5; 2], vec![tiny; 2], vec![tiny; 2]).unwrap();
    expect_close(&mut fails, "GAN-CLS(0.5, 0, 0)", gan_cls_discriminator_loss(&c).unwrap(), LN_2, 1e-9);
    let c = CriticOutputs::new(vec![0.8, 1.0], vec![0.1, 0.3], vec![0.2, 0.4]).unwrap();
    expect_close(&mut fails, "WGAN-CLS critic", wgan_cls_critic_loss(&c, 1.0, 0.0, 0.0).unwrap(), 0.2 + 1.0 * 0.3 - 2.0 * 0.9, 1e-12);
    expect_close(&mut fails, "WGAN-CLS generator", wgan_cls_generator_loss(&[2.0, 3.0], 0.1, 10.0).unwrap(), -2.5 + 10.0 * 0.1, 1e-12);
    expect_close(&mut fails, "L_LP(2, 2)", lipschitz_penalty_lp(&[2.0; 3], &[2.0; 3]).unwrap(), (2.0f64 - 1.0).powi(2) * 2.0, 1e-12);
    expect_close(&mut fails, "L_GP(0.5)", gradient_penalty_gp(&[0.5; 3]).unwrap(), (0.5f64 - 1.0).powi(2), 1e-12);
    let (ld, lg) = lsgan_losses(&CriticOutputs::constant(0.0, 4), -1.0, 1.0, 0.0, true);
    expect_close(&mut fails, "LS critic", ld, (0.0f64 - 1.0).powi(2) + (0.0f64 + 1.0).powi(2) + (0.0f64 + 1.0).powi(2), 1e-12);
    expect_close(&mut fails, "LS generator", lg, 0.0, 1e-12);

    // Optimal discriminator against pointwise numerical maximization.
    let d = DiscreteDistributionPair::on_integers(vec![0.75, 0.25], vec![0.25, 0.75]).unwrap();
    let opt = optimal_discriminator_discrete(&d).unwrap();
    for i in 0..2 {
        expect_close(&mut fails, "D* vs numerical maximum", opt[i], maximize_pointwise(d.p[i], d.q[i]), 1e-6);
    }
    let v_opt = value_function_discrete(&d, &opt).unwrap();
    for i in 1..100 {
        for j in 1..100 {
            let alt = [i as f64 / 100.0, j as f64 / 100.0];
            if value_function_discrete(&d, &alt).unwrap() > v_opt + 1e-12 {
                fails.push(format!("value at {alt:?} beats D*"));
            }
        }
    }

    // Earth mover's distance against transport-plan enumeration.
    let masses = DiscreteDistributionPair::new(vec![0.0, 3.0], vec![1.0, 0.0], vec![0.0, 1.0]).unwrap();
    expect_close(
        &mut fails,
        "W1(δ0, δ3)",
        discrete_wasserstein_1d(&masses).unwrap(),
        enumerate_transport([(0.0, 1.0), (3.0, 0.0)], [(0.0, 0.0), (3.0, 1.0)]),
        1e-9,
    );
    let shifted = DiscreteDistributionPair::on_integers(vec![0.5, 0.5, 0.0], vec![0.0, 0.5, 0.5]).unwrap();
    expect_close(
        &mut fails,
        "W1 shifted pair",
        discrete_wasserstein_1d(&shifted).unwrap(),
        enumerate_transport([(0.0, 0.5), (1.0, 0.5)], [(1.0, 0.5), (2.0, 0.5)]),
        1e-9,
    );

    check(fails.is_empty(), if fails.is_empty() { format!("worst KL/MC relative gap {worst:.2e}") } else { fails.join("; ") })
}

// ---------------------------------------------------------------------------
// 2. Optimal discriminator and the Jensen-Shannon identity

fn random_masses(rng: &mut Rng, k: usize, zero_prob: f64) -> Vec<f64> {
    let w: Vec<f64> = (0..k).map(|_| if rng.random::<f64>() < zero_prob { 0.0 } else { rng.random_range(0.01..1.0) }).collect();
    let t: f64 = w.iter().sum();
    w.into_iter().map(|x| x / t).collect()
}

/// `JSD(p ‖ q)` in nats by direct summation.
fn jsd(p: &[f64], q: &[f64]) -> f64 {
    let term = |a: f64, m: f64| if a > 0.0 { a * (a / m).ln() } else { 0.0 };
    p.iter().zip(q).map(|(&a, &b)| 0.5 * term(a, 0.5 * (a + b)) + 0.5 * term(b, 0.5 * (a + b))).sum()
}

fn theorem_suite() -> Outcome {
    let mut rng = seeded(2);
    let mut worst_grid: f64 = f64::NEG_INFINITY;
    let mut worst_identity: f64 = 0.0;
    let grid: Vec<f64> = (1..1000).map(|i| i as f64 / 1000.0).collect();
    for _ in 0..50 {
        let k = rng.random_range(1..=8);
        let (p, q) = loop {
            let p = random_masses(&mut rng, k, 0.15);
            let q = random_masses(&mut rng, k, 0.15);
            if p.iter().zip(&q).all(|(a, b)| a + b > 0.0) {
                break (p, q);
            }
        };
        let d = DiscreteDistributionPair::on_integers(p.clone(), q.clone()).map_err(|e| e.to_string())?;
        let opt = optimal_discriminator_discrete(&d).map_err(|e| e.to_string())?;
        let v = value_function_discrete(&d, &opt).map_err(|e| e.to_string())?;
        // The value separates over support points, so the dense grid maximum
        // is the sum of per-point grid maxima.
        let grid_max: f64 = (0..k)
            .map(|i| grid.iter().map(|&g| d.p[i] * g.ln() + d.q[i] * (1.0 - g).ln()).fold(f64::NEG_INFINITY, f64::max))
            .sum();
        worst_grid = worst_grid.max(grid_max - v);
        for _ in 0..200 {
            let alt: Vec<f64> = (0..k).map(|_| rng.random_range(1e-3..1.0 - 1e-3)).collect();
            worst_grid = worst_grid.max(value_function_discrete(&d, &alt).unwrap() - v);
        }
        worst_identity = worst_identity.max((v - (-(4f64).ln() + 2.0 * jsd(&p, &q))).abs());
    }
    check(
        worst_grid <= 1e-3 && worst_identity <= 1e-6,
        format!("max grid excess {worst_grid:.2e}, max |V(D*) + log 4 - 2 JSD| {worst_identity:.2e}"),
    )
}

// ---------------------------------------------------------------------------
// 3. Dual estimates of the 1-D earth mover's distance

struct Mlp {
    store: ParamStore,
    layers: Vec<Linear>,
}

impl Mlp {
    fn new(widths: &[usize], rng: &mut Rng) -> Self {
        let mut store = ParamStore::new();
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(&mut store, rng, &format!("l{i}"), w[0], w[1]))
            .collect::<Vec<Linear>>();
        // Spread the first layer's kinks over [-1, 1] instead of stacking
        // them all at the origin.
        let first = &layers[0];
        let w = store.get(first.weight).clone();
        let bias: Vec<f64> = w.data().iter().map(|wj| -wj * rng.random_range(-1.0..1.0)).collect();
        store.set(first.bias, Tensor::from_vec(&[bias.len()], bias));
        Self { store, layers }
    }

    fn forward(&self, s: &mut Session, x: &Var) -> Var {
        let mut h = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(s, &h);
            if i + 1 < self.layers.len() {
                h = Activation::LeakyRelu.apply(&h);
            }
        }
        h.reshape(&[x.shape()[0]])
    }

    fn eval(&self, xs: &[f64]) -> Vec<f64> {
        no_grad(|| {
            let mut s = Session::new(&self.store, Mode::Eval);
            self.forward(&mut s, &Var::constant(Tensor::from_vec(&[xs.len(), 1], xs.to_vec())))
                .value()
                .data()
                .to_vec()
        })
    }
}

fn draw(rng: &mut Rng, d: &[f64], support: &[f64]) -> f64 {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (w, x) in d.iter().zip(support) {
        acc += w;
        if u < acc {
            return *x;
        }
    }
    *support.last().unwrap()
}

/// Trains a small critic with the one-sided penalty and returns its dual
/// objective `E_p f - E_q f`.
fn dual_estimate(pair: &DiscreteDistributionPair, seed: u64, steps: usize, lambda: f64) -> f64 {
    let mut rng = seeded(seed);
    let mut critic = Mlp::new(&[1, 32, 32, 1], &mut rng);
    let mut adam = Adam::new(0.5, 0.9);
    let k = pair.len();
    let xs = Var::constant(Tensor::from_vec(&[k, 1], pair.support.clone()));
    let p = Var::constant(Tensor::from_vec(&[k], pair.p.clone()));
    let q = Var::constant(Tensor::from_vec(&[k], pair.q.clone()));
    let b = 128;
    for step in 0..steps {
        let t: Vec<f64> = (0..b).map(|_| rng.random()).collect();
        let real: Vec<f64> = (0..b).map(|_| draw(&mut rng, &pair.p, &pair.support)).collect();
        let fake: Vec<f64> = (0..b).map(|_| draw(&mut rng, &pair.q, &pair.support)).collect();
        let mut s = Session::new(&critic.store, Mode::Train);
        let f = critic.forward(&mut s, &xs);
        // Exact expectations stand in for the sample means.
        let ep = f.mul(&p).sum();
        let eq = f.mul(&q).sum();
        let adversarial = graph::wgan_cls_critic(&ep, &eq, &ep, 0.0);
        let xhat = graph::interpolate(
            &Var::constant(Tensor::from_vec(&[b, 1], real)),
            &Var::constant(Tensor::from_vec(&[b, 1], fake)),
            &t,
        );
        let xhat = Var::parameter(xhat.value().clone());
        let out = critic.forward(&mut s, &xhat);
        let gx = grad_dense(&out.sum(), &[&xhat], true).pop().unwrap();
        let nx = gx.row_norms(graph::NORM_EPS);
        let ne = Var::constant(Tensor::zeros(&[b]));
        let loss = adversarial.add(&graph::lipschitz_penalty(&nx, &ne).mul_scalar(lambda));
        let used = s.used_params();
        let vars: Vec<&Var> = used.iter().map(|(_, v)| v).collect();
        let grads: Vec<_> = grad_dense(&loss, &vars, false)
            .into_iter()
            .zip(&used)
            .map(|(g, (id, _))| (*id, g.value().clone()))
            .collect();
        drop(s);
        let lr = if step < steps * 3 / 4 { 2e-3 } else { 2e-4 };
        adam.step(&mut critic.store, &grads, lr);
    }
    let f = critic.eval(&pair.support);
    let dot = |w: &[f64]| f.iter().zip(w).map(|(a, b)| a * b).sum::<f64>();
    dot(&pair.p) - dot(&pair.q)
}

fn primal_dual() -> Outcome {
    let lambda = LossConfig::new(LossFamily::WassersteinLp).lambda_lp;
    let mut rng = seeded(30);
    let mut ok = true;
    let mut detail = format!("lambda {lambda}:");
    for i in 0..5 {
        let k = rng.random_range(3..=8);
        let mut support: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
        support.sort_by(f64::total_cmp);
        let p = random_masses(&mut rng, k, 0.0);
        let q = random_masses(&mut rng, k, 0.0);
        let pair = DiscreteDistributionPair::new(support, p, q).unwrap();
        let w = discrete_wasserstein_1d(&pair).unwrap();
        let est = dual_estimate(&pair, 100 + i, 4000, lambda);
        ok &= (est - w).abs() <= 0.1 * w && est <= 1.01 * w;
        write!(detail, " {est:.4}/{w:.4}").unwrap();
    }
    check(ok, detail)
}

// ---------------------------------------------------------------------------
// 4. Finite-difference gradient checks through the real networks

fn tiny_arch(family: Family) -> ArchitectureConfig {
    let mut cfg = ArchitectureConfig::desk(family);
    cfg.max_resolution = 8;
    cfg.noise_dim = 4;
    cfg.compressed_embed_dim = 4;
    cfg.embedding_dim = 6;
    cfg.channel_schedule = vec![8, 4];
    cfg
}

struct GradCheck {
    relative: f64,
    loss: f64,
}

/// Compares autodiff gradients of `loss` with central differences on
/// `samples` randomly chosen parameter entries.
fn grad_check<M>(
    model: &mut M,
    store: impl Fn(&mut M) -> &mut ParamStore,
    loss: impl Fn(&M) -> (Var, Vec<(ParamId, Var)>),
    samples: usize,
    rng: &mut Rng,
) -> GradCheck {
    let (l, used) = loss(model);
    let vars: Vec<&Var> = used.iter().map(|(_, v)| v).collect();
    let analytic: Vec<Tensor> = grad_dense(&l, &vars, false).into_iter().map(|g| g.value().clone()).collect();
    let value = l.item();
    drop((l, vars));
    let h = 1e-5;
    let (mut diff, mut norm_a, mut norm_n) = (0.0, 0.0, 0.0);
    for _ in 0..samples {
        let j = rng.random_range(0..used.len());
        let (id, _) = used[j];
        let idx = rng.random_range(0..analytic[j].len());
        let orig = store(model).get(id).data()[idx];
        let mut at = |x: f64| {
            store(model).value_mut(id).data_mut()[idx] = x;
            loss(model).0.item()
        };
        let numeric = (at(orig + h) - at(orig - h)) / (2.0 * h);
        store(model).value_mut(id).data_mut()[idx] = orig;
        let a = analytic[j].data()[idx];
        diff += (a - numeric).powi(2);
        norm_a += a * a;
        norm_n += numeric * numeric;
    }
    GradCheck {
        relative: diff.sqrt() / norm_a.sqrt().max(norm_n.sqrt()).max(1e-300),
        loss: value,
    }
}

/// Critic inputs for a matching-aware batch of `b` rows plus the penalty's
/// interpolates.
struct CriticInputs {
    images: Tensor,
    embeddings: Tensor,
    xhat: Tensor,
    matched: Tensor,
    b: usize,
}

fn critic_inputs(cfg: &ArchitectureConfig, b: usize, rng: &mut Rng) -> CriticInputs {
    let r = cfg.max_resolution;
    let real = normal_tensor(rng, &[b, r, r, 3], 0.5);
    let fake = normal_tensor(rng, &[b, r, r, 3], 0.5);
    let matched = normal_tensor(rng, &[b, cfg.embedding_dim], 1.0);
    let mismatched = normal_tensor(rng, &[b, cfg.embedding_dim], 1.0);
    let t: Vec<f64> = (0..b).map(|_| rng.random()).collect();
    let xhat = no_grad(|| graph::interpolate(&Var::constant(real.clone()), &Var::constant(fake.clone()), &t).value().clone());
    let cat = |parts: &[&Tensor]| {
        let rows: Vec<Tensor> = parts.iter().flat_map(|p| (0..p.shape()[0]).map(|i| p.row(i))).collect();
        Tensor::stack(&rows).unwrap()
    };
    CriticInputs {
        images: cat(&[&real, &fake, &real]),
        embeddings: cat(&[&matched, &matched, &mismatched]),
        xhat,
        matched,
        b,
    }
}

#[derive(Clone, Copy)]
enum CriticLoss {
    Lipschitz,
    TwoSided,
    GanCls,
    WganCls,
    LeastSquaresConditional,
    LeastSquares,
}

fn critic_loss(c: &Critic, inp: &CriticInputs, which: CriticLoss, loss: &LossConfig) -> (Var, Vec<(ParamId, Var)>) {
    let view = StageView::full(&c.config);
    let b = inp.b;
    let mut s = Session::new(&c.store, Mode::Train);
    let out = c.forward(&mut s, &Var::constant(inp.images.clone()), &Var::constant(inp.embeddings.clone()), view);
    let matched = out.score.slice_last(0, b);
    let fake = out.score.slice_last(b, b);
    let mis = out.score.slice_last(2 * b, b);
    let mut penalty = |two_sided: bool| {
        let xhat = Var::parameter(inp.xhat.clone());
        let pout = c.forward(&mut s, &xhat, &Var::constant(inp.matched.clone()), view);
        let (nx, ne) = graph::input_gradient_norms(&pout.score, &xhat, &pout.embedding);
        if two_sided {
            graph::gradient_penalty(&nx)
        } else {
            graph::lipschitz_penalty(&nx, &ne)
        }
    };
    let l = match which {
        CriticLoss::Lipschitz => penalty(false),
        CriticLoss::TwoSided => penalty(true),
        CriticLoss::GanCls => graph::gan_cls_discriminator(&matched, &fake, &mis),
        CriticLoss::WganCls => {
            graph::wgan_cls_critic(&matched, &fake, &mis, loss.alpha_match).add(&penalty(false).mul_scalar(loss.lambda_lp))
        }
        CriticLoss::LeastSquaresConditional => graph::least_squares(&matched, &fake, Some(&mis), loss.ls_a, loss.ls_b, loss.ls_c).0,
        CriticLoss::LeastSquares => graph::least_squares(&matched, &fake, None, loss.ls_a, loss.ls_b, loss.ls_c).0,
    };
    (l, s.used_params())
}

/// Scales every parameter so that input-gradient norms exceed one and the
/// one-sided penalty is active.
fn amplify(store: &mut ParamStore, factor: f64) {
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        for v in store.value_mut(id).data_mut() {
            *v *= factor;
        }
    }
}

fn gradient_checks() -> Outcome {
    let mut rng = seeded(4);
    let mut worst: f64 = 0.0;
    let mut detail = String::new();
    let mut ok = true;
    let mut record = |name: &str, g: GradCheck| {
        ok &= g.relative <= 1e-4 && g.loss.is_finite() && g.loss != 0.0;
        worst = worst.max(g.relative);
        write!(detail, "{name} {:.1e} ", g.relative).unwrap();
    };
    let samples = 40;

    let wcfg = tiny_arch(Family::WganCls);
    let inp = critic_inputs(&wcfg, 3, &mut rng);
    for (name, kind, which) in [
        ("L_LP", LossFamily::WassersteinLp, CriticLoss::Lipschitz),
        ("L_GP", LossFamily::WassersteinGp, CriticLoss::TwoSided),
        ("WGAN-CLS", LossFamily::WassersteinLp, CriticLoss::WganCls),
        ("LS-cond", LossFamily::LeastSquares, CriticLoss::LeastSquaresConditional),
        ("LS", LossFamily::LeastSquares, CriticLoss::LeastSquares),
    ] {
        let mut critic = build_discriminator(&wcfg, kind, &mut rng).map_err(|e| e.to_string())?;
        if matches!(which, CriticLoss::Lipschitz | CriticLoss::WganCls) {
            amplify(&mut critic.store, 2.0);
        }
        let cfg = LossConfig::new(kind);
        let g = grad_check(&mut critic, |c| &mut c.store, |c| critic_loss(c, &inp, which, &cfg), samples, &mut rng);
        record(name, g);
    }

    let gcfg = tiny_arch(Family::GanCls);
    let ginp = critic_inputs(&gcfg, 3, &mut rng);
    let mut critic = build_discriminator(&gcfg, LossFamily::Gan, &mut rng).map_err(|e| e.to_string())?;
    let cfg = LossConfig::new(LossFamily::Gan);
    record("GAN-CLS", grad_check(&mut critic, |c| &mut c.store, |c| critic_loss(c, &ginp, CriticLoss::GanCls, &cfg), samples, &mut rng));

    // Generator-side losses, differentiated with respect to the generator.
    for (name, kind) in [("LS-generator", LossFamily::LeastSquares), ("WGAN-CLS-generator", LossFamily::WassersteinLp)] {
        let critic = build_discriminator(&wcfg, kind, &mut rng).map_err(|e| e.to_string())?;
        let mut generator = build_generator(&wcfg, &mut rng).map_err(|e| e.to_string())?;
        let cfg = LossConfig::new(kind);
        let noise = normal_tensor(&mut rng, &[3, wcfg.noise_dim], 1.0);
        let emb = normal_tensor(&mut rng, &[3, wcfg.embedding_dim], 1.0);
        let eps = normal_tensor(&mut rng, &[3, wcfg.compressed_embed_dim], 1.0);
        let loss = |g: &Generator| {
            let view = StageView::full(&g.config);
            let e = Var::constant(emb.clone());
            let mut s = Session::new(&g.store, Mode::Train);
            let out = g.forward(&mut s, &Var::constant(noise.clone()), &e, &eps, view);
            let mut cs = Session::new(&critic.store, Mode::Train).with_frozen_params();
            let score = critic.forward(&mut cs, &out.images, &e, view).score;
            let l = match kind {
                LossFamily::LeastSquares => graph::least_squares(&score, &score, None, cfg.ls_a, cfg.ls_b, cfg.ls_c).1,
                _ => {
                    let kl = out.ca.as_ref().unwrap().kl(cfg.kl_direction);
                    graph::wgan_cls_generator(&score, &kl, cfg.rho_kl)
                }
            };
            (l, s.used_params())
        };
        record(name, grad_check(&mut generator, |g| &mut g.store, loss, samples, &mut rng));
    }
    check(ok, format!("max relative error {worst:.1e}: {}", detail.trim_end()))
}

// ---------------------------------------------------------------------------
// 5. Progressive schedule through the command-line tool

fn inspect_schedule(dir: &Path, max_resolution: usize, probes: &[u64]) -> Result<String, String> {
    let cfg = dir.join(format!("grow{max_resolution}.toml"));
    fs::write(&cfg, format!("[model]\nfamily = \"cpggan\"\nmax_resolution = {max_resolution}\n")).unwrap();
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_cwgan"));
    cmd.arg("inspect-schedule").arg("--config").arg(&cfg).args(["--set", "schedule.images_per_phase=600000"]);
    for p in probes {
        cmd.args(["--probe", &p.to_string()]);
    }
    let out = cmd.output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(String::from_utf8_lossy(&out.stderr).into_owned());
    }
    String::from_utf8(out.stdout).map_err(|e| e.to_string())
}

fn schedule_golden() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let phase = 600_000u64;
    let mut detail = String::new();
    let mut ok = true;
    for k in 3..=7usize {
        // 300,000 images into every transition.
        let probes: Vec<u64> = (1..k as u64).map(|j| (2 * j - 1) * phase + phase / 2).collect();
        let a = inspect_schedule(dir.path(), 4 << (k - 1), &probes)?;
        let b = inspect_schedule(dir.path(), 4 << (k - 1), &probes)?;
        let rows = a.lines().filter(|l| !l.starts_with('#') && !l.starts_with("probe")).count();
        let probe_lines: Vec<Vec<&str>> = a.lines().filter(|l| l.starts_with("probe\t")).map(|l| l.split('\t').collect()).collect();
        let halves = probe_lines
            .iter()
            .filter(|f| f[4] == "transition" && f[5] == "300000" && f[6].parse::<f64>() == Ok(0.5))
            .count();
        ok &= a == b && rows == 2 * k - 1 && halves == k - 1;
        write!(detail, "k={k}: {rows} rows, {halves}/{} at 0.5{}; ", k - 1, if a == b { "" } else { ", output differs" }).unwrap();
    }
    check(ok, detail.trim_end_matches("; ").to_string())
}

// ---------------------------------------------------------------------------
// 6. Fade-in boundaries of a five-stage generator

fn upsample2(x: &Tensor) -> Tensor {
    let [b, h, w, c] = <[usize; 4]>::try_from(x.shape()).unwrap();
    let mut out = Tensor::zeros(&[b, 2 * h, 2 * w, c]);
    let src = x.data();
    let dst = out.data_mut();
    for n in 0..b {
        for y in 0..2 * h {
            for xx in 0..2 * w {
                for ch in 0..c {
                    dst[((n * 2 * h + y) * 2 * w + xx) * c + ch] = src[((n * h + y / 2) * w + xx / 2) * c + ch];
                }
            }
        }
    }
    out
}

fn fade_boundaries() -> Outcome {
    let mut cfg = ArchitectureConfig::desk(Family::Cpggan);
    cfg.max_resolution = 64;
    cfg.noise_dim = 8;
    cfg.embedding_dim = 8;
    cfg.compressed_embed_dim = 4;
    let mut rng = seeded(6);
    let g = build_generator(&cfg, &mut rng).map_err(|e| e.to_string())?;
    let stages = cfg.num_stages();
    let z = normal_tensor(&mut rng, &[2, cfg.noise_dim], 1.0);
    let e = normal_tensor(&mut rng, &[2, cfg.embedding_dim], 1.0);
    let eps = Tensor::zeros(&[2, cfg.compressed_embed_dim]);
    let mut worst: f64 = 0.0;
    for k in 1..=stages {
        let at_one = g.generate(&z, &e, &eps, StageView::new(k, 1.0));
        let new = no_grad(|| {
            let mut s = Session::new(&g.store, Mode::Eval);
            g.stage_outputs(&mut s, &Var::constant(z.clone()), &Var::constant(e.clone()), &eps, k, false).1.value().clone()
        });
        worst = worst.max(at_one.max_abs_diff(&new));
        if k > 1 {
            let at_zero = g.generate(&z, &e, &eps, StageView::new(k, 0.0));
            let previous = g.generate(&z, &e, &eps, StageView::new(k - 1, 1.0));
            worst = worst.max(at_zero.max_abs_diff(&upsample2(&previous)));
        }
    }
    check(stages == 5 && worst <= 1e-6, format!("{stages} stages, max abs difference {worst:.1e}"))
}

// ---------------------------------------------------------------------------
// 7. Inception Score analytic cases

fn one_hot(c: usize, k: usize) -> Vec<f64> {
    let mut v = vec![0.0; c];
    v[k] = 1.0;
    v
}

fn inception_suite() -> Outcome {
    let mut rng = seeded(7);
    let score = |rows: &[Vec<f64>], splits: usize, rng: &mut Rng| {
        inception_score(&ClassProbabilities::from_rows(rows).unwrap(), splits, rng).unwrap().mean
    };
    let mut fails = Vec::new();
    for row in [vec![0.1, 0.2, 0.3, 0.4], one_hot(10, 3), vec![0.5, 0.5]] {
        let s = score(&vec![row; 50], 10, &mut rng);
        if s != 1.0 {
            fails.push(format!("identical rows scored {s}"));
        }
    }
    let balanced: Vec<Vec<f64>> = (0..1000).map(|i| one_hot(10, i % 10)).collect();
    let s10 = score(&balanced, 1, &mut rng);
    if !close(s10, 10.0, 1e-6) {
        fails.push(format!("balanced one-hot scored {s10}"));
    }
    let mut last = f64::INFINITY;
    for step in 0..=10 {
        let frac = step as f64 / 10.0;
        let rows: Vec<Vec<f64>> = balanced.iter().map(|r| r.iter().map(|x| (1.0 - frac) * x + frac / 10.0).collect()).collect();
        let s = score(&rows, 1, &mut rng);
        if s >= last {
            fails.push(format!("mixing {frac}: {s} >= {last}"));
        }
        last = s;
    }
    check(fails.is_empty(), if fails.is_empty() { format!("one-hot score {s10:.9}, monotone over 11 mixtures") } else { fails.join("; ") })
}

// ---------------------------------------------------------------------------
// 8 and 9. Smoke training and determinism

fn smoke_config(family: Family) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::preset(family);
    cfg.model.max_resolution = 16;
    cfg.model.noise_dim = 16;
    cfg.model.compressed_embed_dim = 16;
    cfg.model.embedding_dim = 16;
    cfg.model.channel_schedule = vec![32, 16, 8];
    cfg.schedule.batch_size = 16;
    cfg.seed = 1;
    match family {
        Family::Cpggan => {
            cfg.schedule.total_steps = None;
            cfg.schedule.batch_schedule = None;
            cfg.schedule.images_per_phase = 200 * 16 * cfg.schedule.n_critic as u64;
        }
        _ => cfg.schedule.total_steps = Some(2000),
    }
    cfg
}

fn smoke_dataset() -> Dataset {
    make_synthetic_dataset(&SyntheticSpec {
        num_classes: 4,
        images_per_class: 64,
        image_size: 16,
        embedding_dim: 16,
        seed: 1,
    })
    .unwrap()
}

struct SmokeRuns {
    _dir: tempfile::TempDir,
    wgan: [Result<TrainingRun, String>; 2],
    cpggan: [Result<TrainingRun, String>; 2],
    logs: Vec<Vec<u8>>,
    seconds: f64,
}

fn smoke_runs() -> SmokeRuns {
    let dir = tempfile::tempdir().unwrap();
    let data = smoke_dataset();
    let started = Instant::now();
    let mut logs = Vec::new();
    let mut run = |family: Family, name: &str| {
        let out = dir.path().join(name);
        let r = train(&smoke_config(family), &data, Some(&out)).map_err(|e| e.to_string());
        logs.push(fs::read(out.join("metrics.jsonl")).unwrap_or_default());
        r
    };
    let wgan = [run(Family::WganCls, "wgan-a"), run(Family::WganCls, "wgan-b")];
    let cpggan = [run(Family::Cpggan, "cpggan-a"), run(Family::Cpggan, "cpggan-b")];
    SmokeRuns {
        _dir: dir,
        wgan,
        cpggan,
        logs,
        seconds: started.elapsed().as_secs_f64(),
    }
}

fn all_finite(run: &TrainingRun) -> bool {
    run.metrics.iter().all(|m| {
        m.diverged.is_none()
            && [m.critic_loss, m.generator_loss, m.critic_adversarial, m.generator_adversarial, m.penalty, m.kl]
                .iter()
                .all(|v| v.is_finite())
    })
}

fn smoke_training(runs: &SmokeRuns) -> Outcome {
    let wgan = runs.wgan[0].as_ref().map_err(|e| format!("wgan-cls: {e}"))?;
    let cpggan = runs.cpggan[0].as_ref().map_err(|e| format!("cpggan: {e}"))?;
    let n = wgan.metrics.len();
    let tail = &wgan.metrics[n.saturating_sub(200)..];
    let positive = tail.iter().filter(|m| m.matching_gap > 0.0).count();
    let since = wgan.metrics.iter().rposition(|m| m.matching_gap <= 0.0).map_or(1, |i| i as u64 + 2);
    let g = cpggan.growth.ok_or("cpggan run has no growth state")?;
    let top = cpggan.metrics.last().map_or(0, |m| m.resolution);
    let grown = g.stage == 3 && top == 16;
    let ok = n == 2000 && positive == tail.len() && all_finite(wgan) && all_finite(cpggan) && grown;
    check(
        ok,
        format!(
            "wgan-cls {n} steps, gap positive on {positive}/{} final steps (from step {since}), finite {}; \
             cpggan {} steps reaching stage {} at {top}x{top}, finite {}; {:.0}s for four runs",
            tail.len(),
            all_finite(wgan),
            cpggan.metrics.len(),
            g.stage,
            all_finite(cpggan),
            runs.seconds
        ),
    )
}

fn determinism(runs: &SmokeRuns) -> Outcome {
    let same_wgan = !runs.logs[0].is_empty() && runs.logs[0] == runs.logs[1];
    let same_cpggan = !runs.logs[2].is_empty() && runs.logs[2] == runs.logs[3];
    check(
        same_wgan && same_cpggan,
        format!(
            "wgan-cls logs identical: {same_wgan} ({} bytes); cpggan logs identical: {same_cpggan} ({} bytes)",
            runs.logs[0].len(),
            runs.logs[2].len()
        ),
    )
}

// ---------------------------------------------------------------------------

fn main() {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |n: usize| selected.is_empty() || selected.contains(&n);
    let mut smoke: Option<SmokeRuns> = None;
    let mut failed = 0;
    let names = [
        "loss oracles",
        "optimal discriminator",
        "primal-dual Wasserstein",
        "gradient checks",
        "schedule golden",
        "fade boundaries",
        "Inception Score",
        "smoke training",
        "determinism",
    ];
    for (i, name) in names.iter().enumerate() {
        let n = i + 1;
        if !wanted(n) {
            continue;
        }
        let started = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(|| match n {
            1 => loss_oracles(),
            2 => theorem_suite(),
            3 => primal_dual(),
            4 => gradient_checks(),
            5 => schedule_golden(),
            6 => fade_boundaries(),
            7 => inception_suite(),
            8 => smoke_training(smoke.get_or_insert_with(smoke_runs)),
            _ => determinism(smoke.get_or_insert_with(smoke_runs)),
        }))
        .unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = started.elapsed().as_secs_f64();
        let (status, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {n} ({name}): {status} [{secs:.1}s] {detail}");
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
