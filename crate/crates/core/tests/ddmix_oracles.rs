mod common;

use ndarray::{Array1, Array2};
use netdemix::ddmix::{
    bce_loss, deprojection, kl_gaussian, l2_penalty, locality_penalty, posterior_network, prior_network, DDmix,
    DDmixConfig, DDmixParams, LatentDistribution,
};
use netdemix::graph::Graph;
use netdemix::nn::gradcheck::{grad_check_with, GradCheckOptions};
use netdemix::nn::layers::standard_normal;
use netdemix::nn::{adam_step, AdamConfig, GraphContext, Mat, OptimizerState, PoolConnectivity, Tape, Var};
use netdemix::sirs::{generate_dataset, SirsParams, SourceRule};
use netdemix::Model;
use proptest::prelude::*;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

fn ctx(g: &Graph) -> GraphContext {
    GraphContext::new(g, PoolConnectivity::Squared)
}

fn log_normal_pdf(z: f64, mu: f64, sigma: f64) -> f64 {
    -0.5 * (2.0 * std::f64::consts::PI).ln() - sigma.ln() - (z - mu).powi(2) / (2.0 * sigma * sigma)
}

fn random_distribution(shape: (usize, usize), rng: &mut netdemix::rng::Rng) -> LatentDistribution {
    LatentDistribution::new(common::uniform(shape, -1.0, 1.0, rng), common::uniform(shape, 0.5, 2.0, rng)).unwrap()
}

#[test]
fn kl_matches_monte_carlo() {
    let mut rng = common::seeded(1);
    let samples = 100_000;
    for _ in 0..20 {
        let q = random_distribution((4, 5), &mut rng);
        let p = random_distribution((4, 5), &mut rng);
        let mut acc = 0.0;
        for _ in 0..samples {
            for ((i, t), &mq) in q.mu.indexed_iter() {
                let eps: f64 = StandardNormal.sample(&mut rng);
                let z = mq + q.sigma[[i, t]] * eps;
                acc += log_normal_pdf(z, mq, q.sigma[[i, t]]) - log_normal_pdf(z, p.mu[[i, t]], p.sigma[[i, t]]);
            }
        }
        let mc = acc / samples as f64;
        let closed = kl_gaussian(&q, &p).unwrap();
        assert!(((closed - mc) / closed).abs() < 1e-2, "closed {closed} vs mc {mc}");
    }
    let q = random_distribution((3, 3), &mut rng);
    assert!(kl_gaussian(&q, &q.clone()).unwrap().abs() < 1e-12);
}

#[test]
fn bce_matches_entrywise_formula() {
    let mut rng = common::seeded(2);
    let y_hat = common::uniform((7, 4), 1e-9, 1.0 - 1e-9, &mut rng);
    let y = Array2::from_shape_fn((7, 4), |_| if rng.random_bool(0.5) { 1.0 } else { 0.0 });
    let mut acc = 0.0;
    for (&p, &t) in y_hat.iter().zip(&y) {
        let p = p.clamp(1e-7, 1.0 - 1e-7);
        acc -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
    }
    assert!((bce_loss(&y_hat, &y).unwrap() - acc / 28.0).abs() < 1e-12);
    assert!(bce_loss(&y_hat, &Mat::zeros((7, 3))).is_err());
    assert!(bce_loss(&y.mapv(|v| v.clamp(1e-7, 1.0 - 1e-7)), &y).unwrap() <= 1e-6);
}

#[test]
fn l2_is_sum_of_squares_over_all_groups() {
    for seed in 0..3 {
        let params = DDmixParams::init(4, seed).unwrap();
        let mut acc = 0.0;
        for store in params.stores() {
            for (_, v) in store.iter() {
                acc += v.iter().map(|w| w * w).sum::<f64>();
            }
        }
        assert!((l2_penalty(&params) - acc).abs() < 1e-12);
    }
}

fn locality_oracle(y_hat: &Mat, a: &Mat) -> f64 {
    let (n, t) = y_hat.dim();
    let mut acc = 0.0;
    for s in 1..t {
        for i in 0..n {
            let reach: f64 = y_hat[[i, s - 1]] + (0..n).map(|j| a[[i, j]] * y_hat[[j, s - 1]]).sum::<f64>();
            acc += (y_hat[[i, s]] - reach).max(0.0);
        }
    }
    acc
}

#[test]
fn locality_matches_hinge_formula() {
    let mut rng = common::seeded(3);
    for seed in 0..10 {
        let g = common::rgg(12, 0.4, seed);
        let y_hat = common::uniform((12, 6), 0.0, 1.0, &mut rng).mapv(|v| v * v * v);
        let got = locality_penalty(&y_hat, g.adjacency()).unwrap();
        assert!((got - locality_oracle(&y_hat, g.adjacency())).abs() < 1e-12);
    }
    assert_eq!(locality_penalty(&Mat::ones((5, 4)), common::rgg(5, 0.0, 0).adjacency()).unwrap(), 0.0);
}

fn toy() -> (Graph, DDmix, Array1<f64>, Mat, Mat) {
    let g = common::rgg(6, 0.55, 4);
    let model = DDmix::new(DDmixConfig::new(3), 5).unwrap();
    let ds = generate_dataset(
        &g,
        &SirsParams::new(0.6, 0.2, 0.1).unwrap(),
        3,
        1,
        &SourceRule::Fixed(vec![0, 3]),
        6,
    )
    .unwrap();
    let s = &ds.samples[0];
    let eps = standard_normal((6, 3), &mut common::seeded(7));
    (g, model, s.x.x.clone(), s.trajectory.y_f64(), eps)
}

#[test]
fn full_loss_passes_gradient_check() {
    let (g, model, x, y, eps) = toy();
    let c = ctx(&g);
    let report = grad_check_with(
        |t: &mut Tape, v: &[Var]| model.loss_from_inputs(t, v, &c, &x, &y, eps.clone()),
        &model.flat_parameters(),
        1e-3,
        GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
    assert!(report.entries > 100);
}

#[test]
fn networks_are_permutation_equivariant() {
    let mut rng = common::seeded(8);
    for inst in 0..10 {
        let n = rng.random_range(3..14);
        let t = 4;
        let g = common::rgg(n, 0.5, 50 + inst);
        let model = DDmix::new(DDmixConfig::new(t), inst).unwrap();
        let perm = common::permutation(n, &mut rng);
        let gp = common::permute_graph(&g, &perm);
        let (c, cp) = (ctx(&g), ctx(&gp));
        let x = common::uniform((n, 1), 0.05, 1.0, &mut rng);
        let xp = common::permute_rows(&x, &perm);
        let (x, xp) = (x.column(0).to_owned(), xp.column(0).to_owned());
        // continuous input keeps the posterior's pooling scores tie-free
        let y = common::uniform((n, t), 0.05, 1.0, &mut rng);
        let z = standard_normal((n, t), &mut rng);

        let prior = prior_network(&x, &c, &model.params).unwrap();
        let prior_p = prior_network(&xp, &cp, &model.params).unwrap();
        assert!(common::max_abs_diff(&prior_p.mu, &common::permute_rows(&prior.mu, &perm)) < 1e-9);
        assert!(common::max_abs_diff(&prior_p.sigma, &common::permute_rows(&prior.sigma, &perm)) < 1e-9);

        let post = posterior_network(&y, &c, &model.params).unwrap();
        let post_p = posterior_network(&common::permute_rows(&y, &perm), &cp, &model.params).unwrap();
        assert!(common::max_abs_diff(&post_p.mu, &common::permute_rows(&post.mu, &perm)) < 1e-9);

        let dec = deprojection(&x, &z, &c, &model.params).unwrap();
        let dec_p = deprojection(&xp, &common::permute_rows(&z, &perm), &cp, &model.params).unwrap();
        assert!(common::max_abs_diff(&dec_p, &common::permute_rows(&dec, &perm)) < 1e-9);
        assert!(dec.iter().all(|&v| v > 0.0 && v < 1.0));

        let y_hat = model.decode_with_noise(&c, &x, std::slice::from_ref(&z)).unwrap().remove(0);
        let y_hat_p = model.decode_with_noise(&cp, &xp, &[common::permute_rows(&z, &perm)]).unwrap().remove(0);
        assert!(common::max_abs_diff(&y_hat_p, &common::permute_rows(&y_hat, &perm)) < 1e-6);
    }
}

fn mean_loss(model: &DDmix, c: &GraphContext, ds: &netdemix::sirs::Dataset) -> f64 {
    let total: f64 = ds
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            model
                .loss_value(c, &s.x.x, &s.trajectory.y_f64(), &mut common::seeded(1000 + i as u64))
                .unwrap()
                .total
        })
        .sum();
    total / ds.len() as f64
}

#[test]
fn loss_decreases_over_fifty_adam_steps() {
    let g = common::rgg(15, 0.45, 9);
    let c = ctx(&g);
    let ds = generate_dataset(&g, &SirsParams::default(), 5, 20, &SourceRule::default(), 10).unwrap();
    let mut model = DDmix::new(DDmixConfig::new(5), 11).unwrap();
    let before = mean_loss(&model, &c, &ds);
    let cfg = AdamConfig::default();
    let mut states: Vec<OptimizerState> = model.stores().iter().map(|s| OptimizerState::for_store(s)).collect();
    let mut rng = common::seeded(12);
    for _ in 0..50 {
        model.zero_grad();
        for s in &ds.samples {
            model.accumulate_gradients(&c, s, 1.0 / 20.0, &mut rng).unwrap();
        }
        for (store, state) in model.stores_mut().into_iter().zip(&mut states) {
            adam_step(store, state, &cfg).unwrap();
        }
    }
    let after = mean_loss(&model, &c, &ds);
    assert!(after < before, "{before} -> {after}");
}

#[test]
fn batch_gradients_ignore_sample_order() {
    let g = common::rgg(10, 0.5, 13);
    let c = ctx(&g);
    let ds = generate_dataset(&g, &SirsParams::default(), 4, 4, &SourceRule::default(), 14).unwrap();
    let run = |order: &[usize]| {
        let mut model = DDmix::new(DDmixConfig::new(4), 15).unwrap();
        let mut loss = 0.0;
        for &i in order {
            let mut rng = common::seeded(100 + i as u64);
            loss += model.accumulate_gradients(&c, &ds.samples[i], 0.25, &mut rng).unwrap() * 0.25;
        }
        let grads: Vec<Mat> = model
            .stores()
            .iter()
            .flat_map(|s| s.names().iter().map(|n| s.grad(n).unwrap().clone()).collect::<Vec<_>>())
            .collect();
        (loss, grads)
    };
    let (la, ga) = run(&[0, 1, 2, 3]);
    let (lb, gb) = run(&[3, 1, 0, 2]);
    assert!((la - lb).abs() < 1e-12);
    for (a, b) in ga.iter().zip(&gb) {
        assert!(common::max_abs_diff(a, b) < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kl_is_nonnegative_and_zero_only_at_equality(seed in any::<u64>(), shift in 1e-3f64..1.0) {
        let mut rng = common::seeded(seed);
        let q = random_distribution((3, 4), &mut rng);
        let p = random_distribution((3, 4), &mut rng);
        prop_assert!(kl_gaussian(&q, &p).unwrap() >= 0.0);
        prop_assert!(kl_gaussian(&q, &q.clone()).unwrap().abs() < 1e-9);
        let mut moved = q.clone();
        moved.mu[[0, 0]] += shift;
        prop_assert!(kl_gaussian(&moved, &q).unwrap() > 1e-9);
    }

    #[test]
    fn locality_is_positive_exactly_when_an_infection_is_orphaned(seed in any::<u64>()) {
        let mut rng = common::seeded(seed);
        let g = common::rgg(8, 0.45, seed);
        let y = Array2::from_shape_fn((8, 5), |_| if rng.random_bool(0.3) { 1.0 } else { 0.0 });
        let closed = g.closed_adjacency();
        let orphan = (1..5).any(|t| (0..8).any(|i| y[[i, t]] == 1.0 && (0..8).all(|j| closed[[i, j]] * y[[j, t - 1]] == 0.0)));
        let pen = locality_penalty(&y, g.adjacency()).unwrap();
        prop_assert_eq!(pen > 0.0, orphan);
        prop_assert!((pen - locality_oracle(&y, g.adjacency())).abs() < 1e-12);
    }

    #[test]
    fn prior_sigma_is_positive(seed in any::<u64>(), scale in 0.0f64..50.0) {
        let g = common::rgg(9, 0.5, seed);
        let params = DDmixParams::init(3, seed).unwrap();
        let x = common::uniform((9, 1), 0.0, 1.0, &mut common::seeded(seed)).column(0).mapv(|v| v * scale);
        let prior = prior_network(&x, &ctx(&g), &params).unwrap();
        prop_assert_eq!(prior.mu.dim(), (9, 3));
        prop_assert!(prior.sigma.iter().all(|&s| s > 0.0));
    }
}
