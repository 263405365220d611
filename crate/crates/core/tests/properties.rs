use proptest::prelude::*;

use cwgan::autograd::{grad_dense, Var};
use cwgan::conditioning::{augment_embedding, ca_kl_regularizer, kl_from_log_var, CaWeights, DenseWeights, KlDirection};
use cwgan::data::{make_synthetic_dataset, sample_batch, SyntheticSpec};
use cwgan::evaluation::{inception_score, ClassProbabilities};
use cwgan::losses::{
    discrete_wasserstein_1d, gradient_penalty_gp, graph, lipschitz_penalty_lp, optimal_discriminator_discrete,
    value_function_discrete, wgan_cls_critic_loss, CriticOutputs, DiscreteDistributionPair,
};
use cwgan::progressive::{phase_table, BatchSchedule, GrowthState, Phase};
use cwgan::rng::seeded;
use cwgan::Tensor;

const DIRECTIONS: [KlDirection; 2] = [KlDirection::StandardFirst, KlDirection::ConditionalFirst];

fn normalized(w: Vec<f64>) -> Vec<f64> {
    let t: f64 = w.iter().sum();
    w.into_iter().map(|x| x / t).collect()
}

/// Probability vector of length `k` with strictly positive entries.
fn simplex(k: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01f64..1.0, k).prop_map(normalized)
}

fn row(v: &[f64]) -> Var {
    Var::parameter(Tensor::from_vec(&[v.len()], v.to_vec()))
}

/// Norm-wise relative error between the autodiff gradient of `f` and
/// central differences, over every input coordinate.
fn fd_error(inputs: &[Vec<f64>], f: impl Fn(&[Var]) -> Var) -> f64 {
    let vars: Vec<Var> = inputs.iter().map(|v| row(v)).collect();
    let refs: Vec<&Var> = vars.iter().collect();
    let analytic = grad_dense(&f(&vars), &refs, false);
    let value = |xs: &[Vec<f64>]| f(&xs.iter().map(|v| row(v)).collect::<Vec<_>>()).item();
    let h = 1e-6;
    let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[i][j] += h;
            let mut minus = inputs.to_vec();
            minus[i][j] -= h;
            let numeric = (value(&plus) - value(&minus)) / (2.0 * h);
            let a = analytic[i].value().data()[j];
            diff += (a - numeric).powi(2);
            na += a * a;
            nn += numeric * numeric;
        }
    }
    let scale = na.sqrt().max(nn.sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff.sqrt() / scale
    }
}

/// `W1` as the integral of the gap between the two quantile functions.
fn quantile_wasserstein(support: &[f64], p: &[f64], q: &[f64]) -> f64 {
    let cum = |w: &[f64]| {
        let mut acc = 0.0;
        w.iter().map(|x| {
            acc += x;
            acc
        }).collect::<Vec<f64>>()
    };
    let (cp, cq) = (cum(p), cum(q));
    let mut cuts: Vec<f64> = cp.iter().chain(&cq).copied().chain([0.0, 1.0]).map(|u| u.min(1.0)).collect();
    cuts.sort_by(f64::total_cmp);
    let quantile = |c: &[f64], u: f64| support[c.iter().position(|&x| x > u).unwrap_or(support.len() - 1)];
    cuts.windows(2)
        .filter(|w| w[1] > w[0])
        .map(|w| {
            let mid = 0.5 * (w[0] + w[1]);
            (quantile(&cp, mid) - quantile(&cq, mid)).abs() * (w[1] - w[0])
        })
        .sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kl_is_nonnegative_and_vanishes_only_at_the_standard_normal(
        mu in prop::collection::vec(-2.0f64..2.0, 1..6),
        log_sigma in prop::collection::vec(-1.0f64..1.0, 6),
    ) {
        let sigma: Vec<f64> = log_sigma[..mu.len()].iter().map(|l| l.exp()).collect();
        let standard = mu.iter().all(|&m| m == 0.0) && sigma.iter().all(|&s| s == 1.0);
        for d in DIRECTIONS {
            let kl = ca_kl_regularizer(&mu, &sigma, d).unwrap();
            prop_assert!(kl >= 0.0);
            prop_assert!(standard || kl > 0.0, "{kl}");
            prop_assert_eq!(ca_kl_regularizer(&vec![0.0; mu.len()], &vec![1.0; mu.len()], d).unwrap(), 0.0);
        }
    }

    #[test]
    fn kl_ignores_coordinate_order(
        pairs in prop::collection::vec((-2.0f64..2.0, 0.2f64..3.0), 1..8),
        shift in 0usize..8,
    ) {
        let (mu, sigma): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
        let mut rotated = pairs.clone();
        rotated.rotate_left(shift % pairs.len());
        let (mu_r, sigma_r): (Vec<f64>, Vec<f64>) = rotated.into_iter().unzip();
        for d in DIRECTIONS {
            let a = ca_kl_regularizer(&mu, &sigma, d).unwrap();
            let b = ca_kl_regularizer(&mu_r, &sigma_r, d).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
        }
    }

    #[test]
    fn kl_gradient_matches_finite_differences(
        mu in prop::collection::vec(-2.0f64..2.0, 4),
        log_sigma in prop::collection::vec(-1.0f64..1.0, 4),
    ) {
        for d in DIRECTIONS {
            let err = fd_error(&[mu.clone(), log_sigma.clone()], |v| {
                let m = v[0].reshape(&[1, 4]);
                let log_var = v[1].reshape(&[1, 4]).mul_scalar(2.0);
                kl_from_log_var(&m, &log_var, d)
            });
            prop_assert!(err <= 1e-4, "{err}");
        }
    }

    #[test]
    fn augmented_sample_is_mean_plus_scaled_noise(
        e in prop::collection::vec(-1.0f64..1.0, 3),
        w in prop::collection::vec(-1.0f64..1.0, 12),
        b in prop::collection::vec(-1.0f64..1.0, 4),
        eps in prop::collection::vec(-3.0f64..3.0, 2),
    ) {
        let head = |ws: &[f64], bs: &[f64]| {
            DenseWeights::new(Tensor::from_vec(&[3, 2], ws.to_vec()), Tensor::from_vec(&[2], bs.to_vec())).unwrap()
        };
        let weights = CaWeights { mu: head(&w[..6], &b[..2]), log_var: head(&w[6..], &b[2..]) };
        let a = augment_embedding(&e, &weights, &eps).unwrap();
        for i in 0..2 {
            prop_assert!(a.sigma[i] > 0.0);
            prop_assert_eq!(a.sample[i], a.mu[i] + a.sigma[i] * eps[i]);
        }
        prop_assert_eq!(a.epsilon, eps);
    }

    #[test]
    fn penalties_are_nonnegative_and_one_sided(
        nx in prop::collection::vec(0.0f64..3.0, 1..10),
        scale in 0.0f64..1.0,
    ) {
        let ne: Vec<f64> = nx.iter().rev().copied().collect();
        let lp = lipschitz_penalty_lp(&nx, &ne).unwrap();
        let two_sided = gradient_penalty_gp(&nx).unwrap() + gradient_penalty_gp(&ne).unwrap();
        prop_assert!(lp >= 0.0 && two_sided >= 0.0);
        prop_assert!(lp <= two_sided + 1e-12);

        let below: Vec<f64> = nx.iter().map(|n| (n / 3.0) * scale).collect();
        prop_assert_eq!(lipschitz_penalty_lp(&below, &below).unwrap(), 0.0);
        let above: Vec<f64> = nx.iter().map(|n| 1.0 + n).collect();
        let lp_above = lipschitz_penalty_lp(&above, &above).unwrap();
        prop_assert!((lp_above - 2.0 * gradient_penalty_gp(&above).unwrap()).abs() <= 1e-12 * lp_above.max(1.0));
    }

    #[test]
    fn zero_matching_weight_drops_the_mismatched_stream(
        streams in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0, -5.0f64..5.0, -5.0f64..5.0), 1..8),
        lambda in 0.0f64..200.0,
        penalty in 0.0f64..2.0,
    ) {
        let matched: Vec<f64> = streams.iter().map(|s| s.0).collect();
        let fake: Vec<f64> = streams.iter().map(|s| s.1).collect();
        let mis_a: Vec<f64> = streams.iter().map(|s| s.2).collect();
        let mis_b: Vec<f64> = streams.iter().map(|s| s.3).collect();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let want = mean(&fake) - mean(&matched) + lambda * penalty;
        for mis in [mis_a, mis_b] {
            let c = CriticOutputs::new(matched.clone(), fake.clone(), mis).unwrap();
            let got = wgan_cls_critic_loss(&c, 0.0, lambda, penalty).unwrap();
            prop_assert!((got - want).abs() <= 1e-9 * want.abs().max(1.0));
        }
    }

    #[test]
    fn loss_gradients_match_finite_differences(
        probs in prop::collection::vec((0.05f64..0.95, 0.05f64..0.95, 0.05f64..0.95), 1..6),
        scores in prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0, -3.0f64..3.0), 1..6),
        norms in prop::collection::vec((0.0f64..3.0, 0.0f64..3.0), 1..6),
        alpha in 0.0f64..2.0,
        rho in 0.0f64..20.0,
    ) {
        let split = |v: &[(f64, f64, f64)]| -> Vec<Vec<f64>> {
            vec![v.iter().map(|x| x.0).collect(), v.iter().map(|x| x.1).collect(), v.iter().map(|x| x.2).collect()]
        };
        let p = split(&probs);
        let s = split(&scores);
        // Keep the one-sided penalty away from its kink at 1.
        let n: Vec<Vec<f64>> = vec![
            norms.iter().map(|x| if (x.0 - 1.0).abs() < 1e-3 { 1.5 } else { x.0 }).collect(),
            norms.iter().map(|x| if (x.1 - 1.0).abs() < 1e-3 { 1.5 } else { x.1 }).collect(),
        ];
        let checks: Vec<(&str, f64)> = vec![
            ("gan generator", fd_error(&p[1..2], |v| graph::gan_generator_nonsaturating(&v[0]))),
            ("gan discriminator", fd_error(&p[..2], |v| graph::gan_discriminator(&v[0], &v[1]))),
            ("gan-cls", fd_error(&p, |v| graph::gan_cls_discriminator(&v[0], &v[1], &v[2]))),
            ("wgan-cls critic", fd_error(&s, |v| graph::wgan_cls_critic(&v[0], &v[1], &v[2], alpha))),
            ("wgan-cls generator", fd_error(&[s[1].clone(), vec![0.3]], |v| graph::wgan_cls_generator(&v[0], &v[1].sum(), rho))),
            ("lipschitz", fd_error(&n, |v| graph::lipschitz_penalty(&v[0], &v[1]))),
            ("gradient penalty", fd_error(&n[..1], |v| graph::gradient_penalty(&v[0]))),
            ("ls critic", fd_error(&s, |v| graph::least_squares(&v[0], &v[1], Some(&v[2]), -1.0, 1.0, 0.0).0)),
            ("ls generator", fd_error(&s, |v| graph::least_squares(&v[0], &v[1], None, -1.0, 1.0, 0.0).1)),
        ];
        for (name, err) in checks {
            prop_assert!(err <= 1e-4, "{name}: {err}");
        }
    }

    #[test]
    fn optimal_discriminator_beats_alternatives(
        (p, q, alts) in (1usize..=8).prop_flat_map(|k| (
            simplex(k),
            simplex(k),
            prop::collection::vec(prop::collection::vec(0.001f64..0.999, k), 20),
        )),
    ) {
        let d = DiscreteDistributionPair::on_integers(p.clone(), q.clone()).unwrap();
        let opt = optimal_discriminator_discrete(&d).unwrap();
        let v = value_function_discrete(&d, &opt).unwrap();
        for alt in &alts {
            prop_assert!(value_function_discrete(&d, alt).unwrap() <= v + 1e-12);
        }
        let m: Vec<f64> = p.iter().zip(&q).map(|(a, b)| 0.5 * (a + b)).collect();
        let kl = |a: &[f64]| a.iter().zip(&m).map(|(x, y)| x * (x / y).ln()).sum::<f64>();
        let jsd = 0.5 * kl(&p) + 0.5 * kl(&q);
        prop_assert!((v - (-(4f64).ln() + 2.0 * jsd)).abs() <= 1e-9);
    }

    #[test]
    fn wasserstein_matches_the_quantile_integral(
        (gaps, p, q) in (1usize..=8).prop_flat_map(|k| (prop::collection::vec(0.0f64..2.0, k), simplex(k), simplex(k))),
        start in -3.0f64..3.0,
    ) {
        let support: Vec<f64> = gaps.iter().scan(start, |x, g| { *x += g; Some(*x) }).collect();
        let forward = DiscreteDistributionPair::new(support.clone(), p.clone(), q.clone()).unwrap();
        let backward = DiscreteDistributionPair::new(support.clone(), q.clone(), p.clone()).unwrap();
        let w = discrete_wasserstein_1d(&forward).unwrap();
        prop_assert!(w >= 0.0);
        prop_assert!((w - discrete_wasserstein_1d(&backward).unwrap()).abs() <= 1e-12);
        prop_assert!((w - quantile_wasserstein(&support, &p, &q)).abs() <= 1e-9, "{w}");
        let same = DiscreteDistributionPair::new(support, p.clone(), p).unwrap();
        prop_assert!(discrete_wasserstein_1d(&same).unwrap().abs() <= 1e-12);
    }

    #[test]
    fn growth_cursor_stays_in_bounds_and_alpha_rises_within_a_stage(
        per_phase in 1u64..500,
        max_stage in 1usize..7,
        steps in prop::collection::vec(0u64..300, 1..60),
    ) {
        let mut g = GrowthState::new(per_phase).unwrap();
        let mut fed = 0u64;
        for n in steps {
            let next = g.advance(n, max_stage);
            fed += n;
            prop_assert!(next.images_seen_in_phase <= per_phase);
            prop_assert!(next.stage >= g.stage && next.stage <= max_stage);
            prop_assert!(!(next.stage == 1 && next.phase == Phase::Transition));
            if next.stage == g.stage {
                prop_assert!(next.fade_alpha() >= g.fade_alpha());
            }
            let cap = (2 * max_stage as u64 - 1) * per_phase;
            prop_assert_eq!(next.total_images(), fed.min(cap));
            g = next;
        }
    }

    #[test]
    fn phase_table_has_two_k_minus_one_rows(per_phase in 1u64..1_000_000, k in 1usize..8) {
        let batches = BatchSchedule { small: 16, large: 8, threshold: 64 };
        let rows = phase_table(per_phase, k, 4, batches).unwrap();
        prop_assert_eq!(rows.len(), 2 * k - 1);
        for r in &rows {
            prop_assert_eq!(r.batch_size, if r.resolution <= 64 { 16 } else { 8 });
        }
        prop_assert_eq!(rows.last().unwrap().images_end, (2 * k as u64 - 1) * per_phase);
    }

    #[test]
    fn inception_score_lies_between_one_and_the_class_count(
        (rows, splits) in (2usize..8, 1usize..5, 1usize..6).prop_flat_map(|(c, per, splits)| {
            (prop::collection::vec(prop::collection::vec(0.0f64..1.0, c), per * splits), Just(splits))
        }),
        seed in 0u64..1000,
    ) {
        let c = rows[0].len();
        let rows: Vec<Vec<f64>> = rows
            .into_iter()
            .map(|r| if r.iter().sum::<f64>() > 1e-6 { normalized(r) } else { vec![1.0 / c as f64; c] })
            .collect();
        let probs = ClassProbabilities::from_rows(&rows).unwrap();
        let report = inception_score(&probs, splits, &mut seeded(seed)).unwrap();
        for s in report.per_split.iter().chain([&report.mean]) {
            prop_assert!(*s >= 1.0 - 1e-12 && *s <= c as f64 + 1e-9, "{s}");
        }
        let mut reversed = rows.clone();
        reversed.reverse();
        let a = inception_score(&probs, 1, &mut seeded(seed)).unwrap().mean;
        let b = inception_score(&ClassProbabilities::from_rows(&reversed).unwrap(), 1, &mut seeded(seed + 1)).unwrap().mean;
        prop_assert!((a - b).abs() <= 1e-12 * a);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn mismatched_captions_come_from_other_classes(classes in 2usize..6, seed in 0u64..10_000, batch in 1usize..40) {
        let ds = make_synthetic_dataset(&SyntheticSpec {
            num_classes: classes,
            images_per_class: 3,
            image_size: 4,
            embedding_dim: 6,
            seed,
        })
        .unwrap();
        let b = sample_batch(&ds, batch, 2, &mut seeded(seed)).unwrap();
        prop_assert_eq!(b.len(), batch);
        for (own, other) in b.class_ids.iter().zip(&b.mismatched_class_ids) {
            prop_assert_ne!(own, other);
        }
    }
}
