mod common;

use std::rc::Rc;

use ndarray::{Array1, Array2};
use netdemix::baselines::{CnnNodes, CnnNodesConfig, CnnTime, CnnTimeConfig, Mlp, MlpConfig, TimeBlock};
use netdemix::nn::layers::depthwise_channel_map;
use netdemix::nn::tape::{sigmoid, TransposedConv, BN_EPS};
use netdemix::nn::{grad_check, Mat, Tape, Var};
use netdemix::Model;
use proptest::prelude::*;
use rand::Rng as _;

fn column(x: &Array1<f64>) -> Mat {
    x.clone().insert_axis(ndarray::Axis(1))
}

#[test]
fn mlp_parameter_count_matches_layer_by_layer_tally() {
    for (n, t) in [(5usize, 4), (7, 3), (50, 10), (100, 20)] {
        let nt = n * t;
        let h = nt.div_ceil(4);
        let tally = (n * h + h) + (h * h + h) + (h * nt + nt) + (nt * nt + nt);
        let cfg = MlpConfig { num_nodes: n, horizon: t };
        assert_eq!(cfg.num_parameters(), tally);
        if nt <= 200 {
            assert_eq!(Mlp::new(cfg, 0).unwrap().num_parameters(), tally);
        }
    }
}

#[test]
fn mlp_output_is_the_column_major_reshape() {
    let (n, t) = (4, 3);
    let mut mlp = Mlp::new(MlpConfig { num_nodes: n, horizon: t }, 1).unwrap();
    let bias = Array2::from_shape_fn((1, n * t), |(_, k)| k as f64 / 10.0 - 0.5);
    *mlp.params.get_mut("out.w").unwrap() = Mat::zeros((n * t, n * t));
    *mlp.params.get_mut("out.b").unwrap() = bias.clone();
    let y = mlp.forward_value(&Array1::linspace(0.0, 1.0, n)).unwrap();
    for i in 0..n {
        for s in 0..t {
            assert!((y[[i, s]] - sigmoid(bias[[0, s * n + i]])).abs() < 1e-15);
        }
    }
}

#[test]
fn cnn_nodes_matches_stagewise_sliding_window() {
    let mut rng = common::seeded(2);
    for t in [4, 10, 20] {
        let model = CnnNodes::new(CnnNodesConfig::new(t), 3).unwrap();
        let x = common::uniform((13, 1), 0.0, 1.0, &mut rng).column(0).to_owned();
        let ch = model.config.channels();
        let mut h = column(&x);
        for stage in 1..ch.len() {
            let w = model.params.get(&format!("conv{stage}.w")).unwrap();
            let b = model.params.get(&format!("conv{stage}.b")).unwrap();
            h = common::naive_depthwise(&h, w, b, &depthwise_channel_map(ch[stage - 1], ch[stage]));
            if stage + 1 < ch.len() {
                h.mapv_inplace(|v| v.max(0.0));
            }
        }
        let expect = h.mapv(sigmoid);
        let got = model.forward_value(&x).unwrap();
        assert_eq!(got.dim(), (13, t));
        assert!(common::max_abs_diff(&got, &expect) < 1e-10);
    }
}

#[test]
fn cnn_nodes_depends_on_node_order() {
    let model = CnnNodes::new(CnnNodesConfig::new(8), 4).unwrap();
    let x = Array1::from_iter((0..12).map(|i| if i < 3 { 1.0 } else { 0.0 }));
    let reversed = Array1::from_iter(x.iter().rev().copied());
    let a = model.forward_value(&x).unwrap();
    let b = model.forward_value(&reversed).unwrap();
    let b_back = Array2::from_shape_fn(b.dim(), |(i, s)| b[[11 - i, s]]);
    assert!(common::max_abs_diff(&a, &b_back) > 1e-6);
}

fn expected_lengths(blocks: &[TimeBlock]) -> Vec<usize> {
    let mut len = 1;
    blocks
        .iter()
        .map(|b| {
            let up = (len - 1) * b.stride + 1;
            len = up + b.kernel - 1 - 2 * b.padding;
            len
        })
        .collect()
}

#[test]
fn cnn_time_plan_lengths_follow_insert_zeros_arithmetic() {
    let cfg = CnnTimeConfig::default_plan(20, 16).unwrap();
    assert_eq!(cfg.lengths().unwrap(), vec![2, 4, 8, 16, 20, 20]);
    for t in [1, 3, 10, 20, 33, 64] {
        let cfg = CnnTimeConfig::default_plan(t, 4).unwrap();
        assert_eq!(cfg.lengths().unwrap(), expected_lengths(&cfg.blocks));
        assert_eq!(*cfg.lengths().unwrap().last().unwrap(), t);
    }
    let mut bad = CnnTimeConfig::default_plan(20, 4).unwrap();
    bad.blocks[4].kernel = 3;
    assert!(bad.validate().is_err());
    assert!(CnnTime::new(bad, 0).is_err());
}

/// Evaluation-mode forward built from the insert-zeros oracle and the
/// model's running statistics.
fn cnn_time_oracle(model: &CnnTime, x: &Array1<f64>) -> Mat {
    let mut h = column(x);
    for (k, g) in model.config.geometry().unwrap().iter().enumerate() {
        let p = |s: &str| model.params.get(&format!("block{}.{s}", k + 1)).unwrap();
        let conv = common::insert_zeros_oracle(&h, p("w"), p("b"), g);
        let len = g.out_len();
        h = Array2::from_shape_fn(conv.dim(), |(r, col)| {
            let c = col / len;
            let stats = &model.running[k];
            let v = (conv[[r, col]] - stats.mean[c]) / (stats.var[c] + BN_EPS).sqrt();
            (p("gamma")[[0, c]] * v + p("beta")[[0, c]]).max(0.0)
        });
    }
    let t = model.config.horizon;
    let head = TransposedConv {
        in_channels: model.config.blocks.last().unwrap().channels,
        out_channels: 1,
        in_len: t,
        kernel: 1,
        stride: 1,
        padding: 0,
    };
    common::insert_zeros_oracle(&h, model.params.get("head.w").unwrap(), model.params.get("head.b").unwrap(), &head)
        .mapv(sigmoid)
}

#[test]
fn cnn_time_matches_oracle_forward() {
    let mut rng = common::seeded(5);
    for t in [10, 20] {
        let mut model = CnnTime::new(CnnTimeConfig::default_plan(t, 6).unwrap(), 6).unwrap();
        for (k, r) in model.running.iter_mut().enumerate() {
            r.mean.iter_mut().for_each(|m| *m = 0.1 * k as f64);
            r.var.iter_mut().for_each(|v| *v = 0.5 + 0.1 * k as f64);
        }
        let x = common::uniform((7, 1), 0.0, 1.0, &mut rng).column(0).to_owned();
        let got = model.forward_value(&x).unwrap();
        assert_eq!(got.dim(), (7, t));
        assert!(common::max_abs_diff(&got, &cnn_time_oracle(&model, &x)) < 1e-10);
    }
}

fn bce_gradcheck(inputs: Vec<Mat>, y: Mat, forward: impl Fn(&mut Tape, &[Var]) -> netdemix::Result<Var>) {
    let target = Rc::new(y);
    let report = grad_check(
        |t: &mut Tape, v: &[Var]| {
            let out = forward(t, v)?;
            t.bce(out, target.clone())
        },
        &inputs,
        1e-3,
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

fn binary(shape: (usize, usize), seed: u64) -> Mat {
    let mut rng = common::seeded(seed);
    Array2::from_shape_fn(shape, |_| if rng.random_bool(0.4) { 1.0 } else { 0.0 })
}

#[test]
fn baselines_pass_gradient_check_with_bce() {
    let x = Array1::from(vec![0.0, 0.2, 0.6, 0.1, 1.0, 0.3]);

    let mlp = Mlp::new(MlpConfig { num_nodes: 6, horizon: 3 }, 7).unwrap();
    bce_gradcheck(mlp.params.values().to_vec(), binary((6, 3), 1), |t, v| mlp.forward_from_inputs(t, v, &x));

    let cnn = CnnNodes::new(CnnNodesConfig::new(4), 8).unwrap();
    bce_gradcheck(cnn.params.values().to_vec(), binary((6, 4), 2), |t, v| cnn.forward_from_inputs(t, v, &x));

    let mut time = CnnTime::new(CnnTimeConfig::default_plan(5, 3).unwrap(), 9).unwrap();
    for r in time.running.iter_mut() {
        r.var.iter_mut().for_each(|v| *v = 0.05);
    }
    // zero biases put the x = 0 row exactly on ReLU kinks; move off them
    let mut rng = common::seeded(10);
    let generic: Vec<Mat> = time
        .params
        .values()
        .iter()
        .map(|v| v + &common::uniform(v.dim(), -0.3, 0.3, &mut rng))
        .collect();
    for training in [true, false] {
        bce_gradcheck(generic.clone(), binary((6, 5), 3), |t, v| {
            time.forward_from_inputs(t, v, &x, training)
        });
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn mlp_shape_and_range(n in 1usize..8, t in 1usize..6, seed in any::<u64>(), scale in 0.0f64..100.0) {
        let mlp = Mlp::new(MlpConfig { num_nodes: n, horizon: t }, seed).unwrap();
        let x = common::uniform((n, 1), 0.0, 1.0, &mut common::seeded(seed)).column(0).mapv(|v| v * scale);
        let y = mlp.forward_value(&x).unwrap();
        prop_assert_eq!(y.dim(), (n, t));
        prop_assert!(y.iter().all(|&v| (0.0..=1.0).contains(&v)));
        prop_assert!(mlp.forward_value(&Array1::zeros(n + 1)).is_err());
    }

    #[test]
    fn cnn_time_is_node_separable(seed in any::<u64>(), n in 2usize..10, j in 0usize..10, value in 0.0f64..1.0) {
        let j = j % n;
        let model = CnnTime::new(CnnTimeConfig::default_plan(10, 4).unwrap(), seed).unwrap();
        let mut rng = common::seeded(seed);
        let x = common::uniform((n, 1), 0.0, 1.0, &mut rng).column(0).to_owned();
        let base = model.forward_value(&x).unwrap();
        let mut changed = x.clone();
        changed[j] = value;
        let out = model.forward_value(&changed).unwrap();
        for i in (0..n).filter(|&i| i != j) {
            prop_assert_eq!(out.row(i), base.row(i));
        }
        let perm = common::permutation(n, &mut rng);
        let xp = common::permute_rows(&column(&x), &perm).column(0).to_owned();
        let outp = model.forward_value(&xp).unwrap();
        prop_assert!(common::max_abs_diff(&outp, &common::permute_rows(&base, &perm)) < 1e-15);
    }
}
