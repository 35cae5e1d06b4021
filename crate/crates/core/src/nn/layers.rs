//! Layer-level forward passes built on the [`Tape`].

use std::rc::Rc;

use ndarray::Array2;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::params::{glorot, unit_projection, Bound, ParameterStore};
use super::tape::{DepthwiseConv, Mat, Tape, TransposedConv, Var};
use crate::error::{Error, Result};
use crate::graph::{normalize_adjacency, renormalize, Graph};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, v: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(v),
            Activation::Identity => v,
        }
    }
}

/// Connectivity of the graph a pooled node subset lives on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolConnectivity {
    /// Edges of `A` among the kept nodes.
    Induced,
    /// Edges of the two-hop graph `(A + I)^2` among the kept nodes.
    #[default]
    Squared,
}

impl std::str::FromStr for PoolConnectivity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "induced" => Ok(Self::Induced),
            "squared" => Ok(Self::Squared),
            other => Err(Error::Config(format!("unknown pool connectivity `{other}`"))),
        }
    }
}

/// Per-graph matrices shared by every forward pass on that graph.
#[derive(Debug, Clone)]
pub struct GraphContext {
    pub graph_id: String,
    /// `D^{-1/2}(A + I)D^{-1/2}`.
    pub norm: Rc<Mat>,
    /// `A + I`.
    pub closed: Rc<Mat>,
    /// Binary adjacency (no self-loops) restricted by pooling.
    pool_base: Mat,
    pub connectivity: PoolConnectivity,
}

impl GraphContext {
    pub fn new(g: &Graph, connectivity: PoolConnectivity) -> Self {
        let n = g.num_nodes();
        let closed = g.closed_adjacency();
        let pool_base = match connectivity {
            PoolConnectivity::Induced => g.adjacency().clone(),
            PoolConnectivity::Squared => {
                let two_hop = closed.dot(&closed);
                Array2::from_shape_fn((n, n), |(i, j)| {
                    if i != j && two_hop[[i, j]] > 0.0 {
                        1.0
                    } else {
                        0.0
                    }
                })
            }
        };
        Self {
            graph_id: g.id().to_string(),
            norm: Rc::new(normalize_adjacency(g).matrix),
            closed: Rc::new(closed),
            pool_base,
            connectivity,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.norm.nrows()
    }

    /// Normalized adjacency of the pooled graph on `selected`.
    pub fn pooled(&self, selected: &[usize]) -> Mat {
        renormalize(&self.pool_base.select(ndarray::Axis(0), selected).select(ndarray::Axis(1), selected))
    }
}

/// `act(A_norm · h · w)`.
pub fn gcn(tape: &mut Tape, norm: Var, h: Var, w: Var, act: Activation) -> Result<Var> {
    let hw = tape.matmul(h, w)?;
    let out = tape.matmul(norm, hw)?;
    Ok(act.apply(tape, out))
}

/// Which nodes a gPool layer kept.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolRecord {
    /// Kept nodes in increasing index order.
    pub selected_indices: Vec<usize>,
    pub scores: Vec<f64>,
    pub parent_size: usize,
}

/// Top-`k` nodes by score; ties go to the lower index. Returned ascending.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = order.into_iter().take(k).collect();
    kept.sort_unstable();
    kept
}

pub struct Pooled {
    pub features: Var,
    pub norm: Mat,
    pub record: PoolRecord,
}

/// gPool: scores `h p / |p|`, keep the top `k`, gate kept rows by
/// `sigmoid(score)`, and connect the kept nodes per `ctx`.
pub fn gpool(tape: &mut Tape, ctx: &GraphContext, h: Var, p: Var, k: usize) -> Result<Pooled> {
    let n = tape.shape(h).0;
    if k < 1 || k > n {
        return Err(Error::InvalidArgument(format!("pool size {k} for {n} nodes")));
    }
    if ctx.num_nodes() != n {
        return Err(Error::Dimension(format!(
            "{n} feature rows on a {}-node graph",
            ctx.num_nodes()
        )));
    }
    let scores = tape.project(h, p)?;
    let score_vals: Vec<f64> = tape.value(scores).iter().copied().collect();
    let selected = top_k(&score_vals, k);
    let rows = tape.gather_rows(h, &selected)?;
    let kept_scores = tape.gather_rows(scores, &selected)?;
    let gate = tape.sigmoid(kept_scores);
    let features = tape.scale_rows(rows, gate)?;
    Ok(Pooled {
        features,
        norm: ctx.pooled(&selected),
        record: PoolRecord {
            selected_indices: selected,
            scores: score_vals,
            parent_size: n,
        },
    })
}

/// gUnpool: kept rows back at their original indices, zeros elsewhere.
pub fn gunpool(tape: &mut Tape, pooled: Var, record: &PoolRecord) -> Result<Var> {
    if tape.shape(pooled).0 != record.selected_indices.len() {
        return Err(Error::Dimension(format!(
            "{} pooled rows for {} selected nodes",
            tape.shape(pooled).0,
            record.selected_indices.len()
        )));
    }
    tape.scatter_rows(pooled, &record.selected_indices, record.parent_size)
}

/// Parameter names of a depth-one graph U-Net block.
#[derive(Debug, Clone)]
pub struct GUNetBlock {
    pub prefix: String,
    pub in_features: usize,
    pub out_features: usize,
    pub out_activation: Activation,
}

impl GUNetBlock {
    pub fn new(prefix: &str, in_features: usize, out_features: usize, out_activation: Activation) -> Self {
        Self {
            prefix: prefix.to_string(),
            in_features,
            out_features,
            out_activation,
        }
    }

    fn name(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }

    pub fn init(&self, store: &mut ParameterStore, rng: &mut Rng) -> Result<()> {
        let (fi, fo) = (self.in_features, self.out_features);
        store.insert(self.name("down"), glorot(fi, fo, rng))?;
        store.insert(self.name("proj"), unit_projection(fo, rng))?;
        store.insert(self.name("bottom"), glorot(fo, fo, rng))?;
        store.insert(self.name("up"), glorot(fo, fo, rng))?;
        Ok(())
    }

    /// GCN → gPool(⌈N/2⌉) → GCN on the pooled graph → gUnpool → add the
    /// pre-pool features → GCN.
    pub fn forward(
        &self,
        tape: &mut Tape,
        ctx: &GraphContext,
        norm: Var,
        input: Var,
        store: &ParameterStore,
        bound: &Bound,
    ) -> Result<Var> {
        let (n, f) = tape.shape(input);
        if f != self.in_features {
            return Err(Error::Dimension(format!(
                "block `{}` expects {} features, got {f}",
                self.prefix, self.in_features
            )));
        }
        let w_down = bound.var(store, &self.name("down"))?;
        let proj = bound.var(store, &self.name("proj"))?;
        let w_bottom = bound.var(store, &self.name("bottom"))?;
        let w_up = bound.var(store, &self.name("up"))?;

        let skip = gcn(tape, norm, input, w_down, Activation::Relu)?;
        let pooled = gpool(tape, ctx, skip, proj, n.div_ceil(2))?;
        let pooled_norm = tape.constant(pooled.norm);
        let bottom = gcn(tape, pooled_norm, pooled.features, w_bottom, Activation::Relu)?;
        let restored = gunpool(tape, bottom, &pooled.record)?;
        let fused = tape.add(restored, skip)?;
        gcn(tape, norm, fused, w_up, self.out_activation)
    }
}

/// `act(v W + b)` for a `1 x in` row.
pub fn dense(tape: &mut Tape, v: Var, w: Var, b: Var, act: Activation) -> Result<Var> {
    let lin = tape.matmul(v, w)?;
    let out = tape.add_bias(lin, b)?;
    Ok(act.apply(tape, out))
}

/// Channel map for a depthwise stage growing `cin` to `cout` channels:
/// output channel `c` reads input channel `c * cin / cout`.
pub fn depthwise_channel_map(cin: usize, cout: usize) -> Vec<usize> {
    (0..cout).map(|c| c * cin / cout).collect()
}

/// Length-preserving depthwise convolution (kernel 3, stride 1, padding 1)
/// over the row axis of an `N x C` activation.
pub fn conv1d_depthwise(
    tape: &mut Tape,
    h: Var,
    weight: Var,
    bias: Var,
    source_channel: Vec<usize>,
    act: Activation,
) -> Result<Var> {
    let kernel = tape.shape(weight).1;
    let geom = Rc::new(DepthwiseConv {
        kernel,
        padding: kernel / 2,
        source_channel,
    });
    let out = tape.depthwise_conv(h, weight, bias, geom)?;
    Ok(act.apply(tape, out))
}

/// Running statistics of one batch-norm layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub momentum: f64,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            momentum: 0.1,
        }
    }

    /// Exponential average with the unbiased batch variance.
    pub fn update(&mut self, batch: &super::tape::BatchStats, count: usize) {
        let correction = if count > 1 {
            count as f64 / (count - 1) as f64
        } else {
            1.0
        };
        for c in 0..self.mean.len() {
            self.mean[c] = (1.0 - self.momentum) * self.mean[c] + self.momentum * batch.mean[c];
            self.var[c] =
                (1.0 - self.momentum) * self.var[c] + self.momentum * batch.var[c] * correction;
        }
    }
}

/// Transposed convolution → batch norm → ReLU. In training mode batch
/// statistics are used and folded into `running`.
#[allow(clippy::too_many_arguments)]
pub fn conv1d_transposed_block(
    tape: &mut Tape,
    input: Var,
    weight: Var,
    bias: Var,
    gamma: Var,
    beta: Var,
    geom: TransposedConv,
    running: &mut RunningStats,
    training: bool,
) -> Result<Var> {
    let conv = tape.transposed_conv(input, weight, bias, geom)?;
    let frozen = super::tape::BatchStats {
        mean: running.mean.clone(),
        var: running.var.clone(),
    };
    let (normed, stats) = tape.batch_norm(
        conv,
        gamma,
        beta,
        geom.out_channels,
        (!training).then_some(&frozen),
    )?;
    if training {
        running.update(&stats, tape.shape(conv).0 * geom.out_len());
    }
    Ok(tape.relu(normed))
}

/// Standard normal noise of the given shape.
pub fn standard_normal(shape: (usize, usize), rng: &mut Rng) -> Mat {
    Array2::from_shape_fn(shape, |_| StandardNormal.sample(rng))
}

/// Reparametrized draw `mu + sigma * eps` for fixed noise `eps`.
pub fn reparametrize(tape: &mut Tape, mu: Var, sigma: Var, eps: Mat) -> Result<Var> {
    if tape.value(sigma).iter().any(|&s| !(s > 0.0)) {
        return Err(Error::Domain("sigma must be positive".into()));
    }
    let noise = tape.constant(eps);
    let scaled = tape.mul(sigma, noise)?;
    tape.add(mu, scaled)
}

/// Value-level reparametrized sample.
pub fn gaussian_sample(mu: &Mat, sigma: &Mat, rng: &mut Rng) -> Result<Mat> {
    if mu.dim() != sigma.dim() {
        return Err(Error::Dimension("mu and sigma differ in shape".into()));
    }
    if sigma.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::Domain("sigma must be positive".into()));
    }
    let eps = standard_normal(mu.dim(), rng);
    Ok(mu + &(sigma * &eps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{random_geometric_graph, RggSpec};
    use crate::rng;
    use ndarray::arr2;

    fn ctx_for(n: usize) -> GraphContext {
        let g = Graph::from_edges("path", n, (1..n).map(|i| (i - 1, i))).unwrap();
        GraphContext::new(&g, PoolConnectivity::Squared)
    }

    #[test]
    fn gcn_identity_case() {
        let mut tape = Tape::new();
        let h0 = arr2(&[[1.0, 2.0], [0.5, 0.0], [3.0, 1.0]]);
        let a = tape.constant(Mat::eye(3));
        let h = tape.constant(h0.clone());
        let w = tape.constant(Mat::eye(2));
        let out = gcn(&mut tape, a, h, w, Activation::Relu).unwrap();
        assert_eq!(tape.value(out), &h0);
    }

    #[test]
    fn gcn_shape_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(Mat::eye(3));
        let h = tape.constant(Mat::ones((3, 2)));
        let w = tape.constant(Mat::ones((3, 2)));
        assert!(matches!(
            gcn(&mut tape, a, h, w, Activation::Relu),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn gpool_selects_top_scores_and_gates() {
        let ctx = ctx_for(4);
        let mut tape = Tape::new();
        let h = tape.constant(arr2(&[[4.0, 0.0], [3.0, 1.0], [2.0, 5.0], [1.0, 1.0]]));
        let p = tape.constant(arr2(&[[1.0], [0.0]]));
        let pooled = gpool(&mut tape, &ctx, h, p, 2).unwrap();
        assert_eq!(pooled.record.selected_indices, vec![0, 1]);
        let f = tape.value(pooled.features);
        let s4 = crate::nn::tape::sigmoid(4.0);
        let s3 = crate::nn::tape::sigmoid(3.0);
        assert_eq!(f.row(0).to_vec(), vec![4.0 * s4, 0.0]);
        assert_eq!(f.row(1).to_vec(), vec![3.0 * s3, s3]);
    }

    #[test]
    fn gpool_ties_go_to_lower_index() {
        assert_eq!(top_k(&[1.0, 1.0, 1.0, 1.0], 2), vec![0, 1]);
        assert_eq!(top_k(&[0.0, 2.0, 2.0, 5.0], 2), vec![1, 3]);
    }

    #[test]
    fn gpool_keep_all_gates_every_row() {
        let ctx = ctx_for(3);
        let mut tape = Tape::new();
        let hv = arr2(&[[1.0, -1.0], [0.2, 0.3], [-2.0, 0.5]]);
        let h = tape.constant(hv.clone());
        let p = tape.constant(arr2(&[[3.0], [4.0]]));
        let pooled = gpool(&mut tape, &ctx, h, p, 3).unwrap();
        let f = tape.value(pooled.features);
        for i in 0..3 {
            let s = (hv[[i, 0]] * 3.0 + hv[[i, 1]] * 4.0) / 5.0;
            for j in 0..2 {
                assert!((f[[i, j]] - hv[[i, j]] * crate::nn::tape::sigmoid(s)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn unpool_rejects_inconsistent_record() {
        let mut tape = Tape::new();
        let h = tape.constant(Mat::ones((2, 3)));
        let record = PoolRecord {
            selected_indices: vec![0, 1, 2],
            scores: vec![0.0; 4],
            parent_size: 4,
        };
        assert!(gunpool(&mut tape, h, &record).is_err());
    }

    #[test]
    fn squared_connectivity_links_two_hop_nodes() {
        let ctx = ctx_for(3);
        // path 0-1-2; keeping {0, 2} leaves them connected via the two-hop rule
        let m = ctx.pooled(&[0, 2]);
        assert!((m[[0, 1]] - 0.5).abs() < 1e-15);
        let g = Graph::from_edges("path", 3, [(0, 1), (1, 2)]).unwrap();
        let induced = GraphContext::new(&g, PoolConnectivity::Induced).pooled(&[0, 2]);
        assert_eq!(induced, Mat::eye(2));
    }

    #[test]
    fn gunet_block_shapes() {
        let g = random_geometric_graph(&RggSpec::new(9, 0.5, 2)).unwrap();
        let ctx = GraphContext::new(&g, PoolConnectivity::Squared);
        let block = GUNetBlock::new("b", 2, 5, Activation::Relu);
        let mut store = ParameterStore::new(1);
        block.init(&mut store, &mut rng::root(1)).unwrap();
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let norm = tape.constant_rc(ctx.norm.clone());
        let x = tape.constant(Mat::from_shape_fn((9, 2), |(i, j)| (i * 2 + j) as f64 / 10.0));
        let out = block.forward(&mut tape, &ctx, norm, x, &store, &bound).unwrap();
        assert_eq!(tape.shape(out), (9, 5));

        let single = Graph::from_edges("one", 1, []).unwrap();
        let ctx1 = GraphContext::new(&single, PoolConnectivity::Squared);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let norm = tape.constant_rc(ctx1.norm.clone());
        let x = tape.constant(Mat::ones((1, 2)));
        let out = block.forward(&mut tape, &ctx1, norm, x, &store, &bound).unwrap();
        assert_eq!(tape.shape(out), (1, 5));
    }

    #[test]
    fn dense_identity_and_zero() {
        let mut tape = Tape::new();
        let v = tape.constant(arr2(&[[1.0, -2.0, 3.0]]));
        let w = tape.constant(Mat::eye(3));
        let b = tape.constant(Mat::zeros((1, 3)));
        let out = dense(&mut tape, v, w, b, Activation::Identity).unwrap();
        assert_eq!(tape.value(out), &arr2(&[[1.0, -2.0, 3.0]]));
        let z = tape.constant(Mat::zeros((1, 3)));
        let out = dense(&mut tape, z, w, b, Activation::Relu).unwrap();
        assert!(tape.value(out).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn delta_kernel_is_identity() {
        let mut tape = Tape::new();
        let hv = arr2(&[[1.0], [2.0], [-3.0], [4.0]]);
        let h = tape.constant(hv.clone());
        let w = tape.constant(arr2(&[[0.0, 1.0, 0.0]]));
        let b = tape.constant(Mat::zeros((1, 1)));
        let out = conv1d_depthwise(&mut tape, h, w, b, vec![0], Activation::Identity).unwrap();
        assert_eq!(tape.value(out), &hv);
    }

    #[test]
    fn constant_input_interior_is_kernel_sum() {
        let mut tape = Tape::new();
        let h = tape.constant(Mat::from_elem((6, 1), 2.0));
        let w = tape.constant(arr2(&[[0.5, 1.5, -1.0]]));
        let b = tape.constant(Mat::zeros((1, 1)));
        let out = conv1d_depthwise(&mut tape, h, w, b, vec![0], Activation::Identity).unwrap();
        let v = tape.value(out);
        for i in 1..5 {
            assert!((v[[i, 0]] - 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn single_tap_transposed_expansion() {
        let mut tape = Tape::new();
        let x = tape.constant(arr2(&[[3.0]]));
        let w = tape.constant(arr2(&[[1.0, 1.0]]));
        let b = tape.constant(Mat::zeros((1, 1)));
        let geom = TransposedConv {
            in_channels: 1,
            out_channels: 1,
            in_len: 1,
            kernel: 2,
            stride: 2,
            padding: 0,
        };
        let out = tape.transposed_conv(x, w, b, geom).unwrap();
        assert_eq!(tape.value(out), &arr2(&[[3.0, 3.0]]));
    }

    #[test]
    fn batch_norm_of_constant_batch_is_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(Mat::from_elem((4, 3), 7.0));
        let g = tape.constant(Mat::ones((1, 1)));
        let b = tape.constant(Mat::zeros((1, 1)));
        let (out, stats) = tape.batch_norm(x, g, b, 1, None).unwrap();
        assert!(tape.value(out).iter().all(|&v| v == 0.0));
        assert_eq!(stats.var, vec![0.0]);
    }

    #[test]
    fn reparametrization() {
        let mu = arr2(&[[1.0, -2.0]]);
        let tiny = Mat::from_elem((1, 2), 1e-300);
        let z = gaussian_sample(&mu, &tiny, &mut rng::root(0)).unwrap();
        assert_eq!(z, mu);
        assert!(gaussian_sample(&mu, &Mat::zeros((1, 2)), &mut rng::root(0)).is_err());

        let mut tape = Tape::new();
        let m = tape.input(mu.clone());
        let s = tape.input(Mat::ones((1, 2)));
        let eps = standard_normal((1, 2), &mut rng::root(5));
        let z = reparametrize(&mut tape, m, s, eps.clone()).unwrap();
        let total = tape.sum(z);
        let grads = tape.backward(total).unwrap();
        assert_eq!(grads.get(m, (1, 2)), Mat::ones((1, 2)));
        assert_eq!(grads.get(s, (1, 2)), eps);
    }
}
