mod common;

use ndarray::Array2;
use netdemix::harness::{
    build_model, evaluate, evaluate_mse, export_report, parse_csv, run_experiment, source_class_ranking,
    stopping_point, to_csv, train, ExperimentConfig, ExperimentKind, TrainConfig,
};
use netdemix::nn::GraphContext;
use netdemix::sirs::{generate_dataset, SirsParams, SourceRule};
use netdemix::{Error, ModelKind};
use proptest::prelude::*;

fn small_config(kind: ExperimentKind) -> ExperimentConfig {
    ExperimentConfig {
        experiment: kind,
        num_nodes: 12,
        radius: 0.5,
        density_multipliers: vec![1.0, 0.7],
        sizes: vec![10, 16],
        size_radii: vec![0.55, 0.45],
        train_sizes: vec![0, 8],
        horizons: vec![4],
        train_samples: 16,
        test_samples: 6,
        models: vec![ModelKind::CnnNodes, ModelKind::DDmix],
        max_epochs: 2,
        patience: 1,
        seed: 3,
        record_wall_time: false,
        ..ExperimentConfig::default()
    }
}

#[test]
fn training_lowers_the_training_loss() {
    let g = common::rgg(20, 0.45, 1);
    let ds = generate_dataset(&g, &SirsParams::default(), 6, 50, &SourceRule::default(), 2).unwrap();
    let cfg = ExperimentConfig {
        max_epochs: 6,
        patience: 6,
        ..ExperimentConfig::default()
    };
    let ctx = GraphContext::new(&g, cfg.pool_connectivity);
    for kind in [ModelKind::DDmix, ModelKind::CnnNodes] {
        let mut model = build_model(kind, 20, 6, &cfg, 4).unwrap();
        let report = train(model.as_mut(), &ctx, &ds.samples, &TrainConfig::from(&cfg), 5, None).unwrap();
        let losses = &report.train_losses;
        assert!(losses.iter().all(|l| l.is_finite()));
        assert!(losses.last().unwrap() < &losses[0], "{kind}: {losses:?}");
        assert!(report.stopping_epoch <= 6 && report.best_epoch <= report.stopping_epoch);
    }
}

#[test]
fn mse_is_the_mean_squared_frobenius_distance() {
    let mut rng = common::seeded(7);
    for (n, t) in [(1, 1), (5, 3), (30, 20)] {
        let a = common::uniform((n, t), 0.0, 1.0, &mut rng);
        let b = common::uniform((n, t), 0.0, 1.0, &mut rng);
        let fro = (&a - &b).mapv(|v| v * v).sum().sqrt();
        let expect = fro * fro / (n * t) as f64;
        assert!((evaluate_mse(&a, &b).unwrap() - expect).abs() < 1e-14);
    }
}

#[test]
fn csv_and_export_are_stable() {
    let out = run_experiment(&small_config(ExperimentKind::Density), None).unwrap();
    let rows: Vec<_> = out.reports.iter().map(|r| r.row.clone()).collect();
    let text = to_csv(&rows).unwrap();
    assert_eq!(parse_csv(&text).unwrap(), rows);

    let dir = tempfile::tempdir().unwrap();
    let first = export_report(&out.reports, &out.manifest, dir.path()).unwrap();
    let snapshot: Vec<Vec<u8>> = first.iter().map(|p| std::fs::read(p).unwrap()).collect();
    let second = export_report(&out.reports, &out.manifest, dir.path()).unwrap();
    assert_eq!(first, second);
    for (p, bytes) in second.iter().zip(&snapshot) {
        assert_eq!(&std::fs::read(p).unwrap(), bytes, "{}", p.display());
    }
    assert!(first.iter().any(|p| p.ends_with("metrics.csv")));
    assert!(first.iter().any(|p| p.ends_with("manifest.json")));
}

#[test]
fn experiments_are_bitwise_reproducible() {
    let cfg = small_config(ExperimentKind::Density);
    let a = run_experiment(&cfg, None).unwrap();
    let b = run_experiment(&cfg, None).unwrap();
    assert_eq!(a.reports.len(), 2 * 2);
    let csv = |o: &netdemix::harness::ExperimentOutput| {
        to_csv(&o.reports.iter().map(|r| r.row.clone()).collect::<Vec<_>>()).unwrap()
    };
    assert_eq!(csv(&a), csv(&b));
    for (x, y) in a.reports.iter().zip(&b.reports) {
        let bits = |v: &[f64]| v.iter().map(|f| f.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&x.per_sample_mse), bits(&y.per_sample_mse));
    }
    assert!(a.reports.iter().all(|r| r.row.wall_s == 0.0));
}

#[test]
fn size_experiment_rejects_the_mlp() {
    let mut cfg = small_config(ExperimentKind::Size);
    cfg.models = vec![ModelKind::Mlp];
    assert!(matches!(run_experiment(&cfg, None), Err(Error::Capability(_))));
    cfg.models = vec![ModelKind::CnnNodes];
    let out = run_experiment(&cfg, None).unwrap();
    let sizes: Vec<usize> = out.reports.iter().map(|r| r.row.num_nodes).collect();
    assert_eq!(sizes, vec![10, 16]);
}

#[test]
fn zero_training_samples_leave_the_model_untrained() {
    let mut cfg = small_config(ExperimentKind::Trainsize);
    let a = run_experiment(&cfg, None).unwrap();
    cfg.lr = 0.5;
    let b = run_experiment(&cfg, None).unwrap();
    for (x, y) in a.reports.iter().zip(&b.reports) {
        if x.row.train_samples == 0 {
            assert_eq!(x.row.epochs, 0);
            assert_eq!(x.row.mse.to_bits(), y.row.mse.to_bits());
        } else {
            assert!(x.row.epochs > 0);
            assert_ne!(x.row.mse.to_bits(), y.row.mse.to_bits());
        }
    }
}

#[test]
fn single_run_writes_one_row_and_a_manifest() {
    let mut cfg = small_config(ExperimentKind::Trainsize);
    cfg.train_sizes = vec![8];
    cfg.models = vec![ModelKind::CnnNodes];
    let dir = tempfile::tempdir().unwrap();
    let out = run_experiment(&cfg, Some(dir.path())).unwrap();
    export_report(&out.reports, &out.manifest, dir.path()).unwrap();
    let rows = parse_csv(&std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap()).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!((rows[0].model.as_str(), rows[0].train_samples), ("cnn_nodes", 8));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["checkpoints"].as_array().unwrap().len(), 1);
    assert_eq!(manifest["config"]["experiment"], "trainsize");
}

#[test]
fn evaluation_reports_topk_only_with_classes() {
    let g = common::rgg(12, 0.5, 2);
    let ds = generate_dataset(&g, &SirsParams::default(), 4, 5, &SourceRule::default(), 3).unwrap();
    let cfg = ExperimentConfig::default();
    let model = build_model(ModelKind::CnnNodes, 12, 4, &cfg, 1).unwrap();
    let plain = evaluate(model.as_ref(), &g, &ds.samples, cfg.pool_connectivity, 0).unwrap();
    assert!(plain.topk.is_none());
    let classes: Vec<String> = (0..12).map(|i| format!("c{}", i % 3)).collect();
    let labelled = g.clone().with_classes(classes).unwrap();
    let e = evaluate(model.as_ref(), &labelled, &ds.samples, cfg.pool_connectivity, 0).unwrap();
    let [t1, t3, t5] = e.topk.unwrap();
    assert!(t1 <= t3 && t3 <= t5);
    assert_eq!(t3, 1.0);
    assert_eq!(e.mse.to_bits(), plain.mse.to_bits());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn stopping_respects_budget_and_patience(
        trace in prop::collection::vec(0.0f64..10.0, 1..80),
        patience in 1usize..8,
        max_epochs in 1usize..60,
    ) {
        let (stop, best) = stopping_point(&trace, patience, max_epochs);
        prop_assert!(stop <= max_epochs.min(trace.len()));
        prop_assert!(best >= 1 && best <= stop);
        prop_assert!(stop - best <= patience);
        let min = trace[..stop].iter().copied().fold(f64::INFINITY, f64::min);
        prop_assert_eq!(trace[best - 1], min);
        prop_assert!(trace[..best - 1].iter().all(|&v| v > min));
        if stop < max_epochs.min(trace.len()) {
            prop_assert_eq!(stop - best, patience);
        }
    }

    #[test]
    fn topk_hits_are_monotone_in_k(
        seed in any::<u64>(),
        n in 2usize..20,
        t in 1usize..6,
        num_classes in 1usize..6,
    ) {
        let mut rng = common::seeded(seed);
        let y = common::uniform((n, t), 0.0, 1.0, &mut rng);
        let classes: Vec<String> = (0..n).map(|i| (i % num_classes).to_string()).collect();
        let r = source_class_ranking(&y, &classes).unwrap();
        prop_assert_eq!(r.ranked.len(), num_classes.min(n));
        prop_assert!(r.scores.windows(2).all(|w| w[0] >= w[1]));
        for c in &classes {
            for k in 1..num_classes + 1 {
                prop_assert!(!r.hit(c, k) || r.hit(c, k + 1));
            }
            prop_assert!(r.hit(c, num_classes));
        }
    }

    #[test]
    fn mse_is_zero_only_on_equal_inputs(seed in any::<u64>(), n in 1usize..10, t in 1usize..10) {
        let mut rng = common::seeded(seed);
        let a = common::uniform((n, t), 0.0, 1.0, &mut rng);
        prop_assert_eq!(evaluate_mse(&a, &a).unwrap(), 0.0);
        let mut b: Array2<f64> = a.clone();
        b[[n - 1, t - 1]] += 0.5;
        prop_assert!((evaluate_mse(&a, &b).unwrap() - 0.25 / (n * t) as f64).abs() < 1e-15);
    }
}
