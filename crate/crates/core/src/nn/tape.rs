//! Reverse-mode differentiation over a fixed set of matrix operations.
//!
//! A [`Tape`] records every value produced during a forward pass together
//! with the operation that produced it. [`Tape::backward`] walks the record
//! in reverse and returns the gradient of a scalar node with respect to
//! every node that depends on a leaf marked as trainable.

use std::rc::Rc;

use ndarray::{s, Array2, Axis, Zip};

use crate::error::{Error, Result};

pub type Mat = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of a depthwise 1-D convolution along the row axis.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthwiseConv {
    pub kernel: usize,
    pub padding: usize,
    /// Input channel read by each output channel.
    pub source_channel: Vec<usize>,
}

/// Geometry of a batched 1-D transposed convolution. Activations are laid
/// out one sequence per row, channel-major (`column = c * len + l`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransposedConv {
    pub in_channels: usize,
    pub out_channels: usize,
    pub in_len: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl TransposedConv {
    pub fn out_len(&self) -> usize {
        ((self.in_len - 1) * self.stride + self.kernel).saturating_sub(2 * self.padding)
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    ScaleRows(Var, Var),
    GatherRows(Var, Rc<[usize]>),
    ScatterRows(Var, Rc<[usize]>),
    ConcatCols(Var, Var),
    Project(Var, Var),
    ReshapeColMajor(Var),
    DepthwiseConv {
        input: Var,
        weight: Var,
        bias: Var,
        geom: Rc<DepthwiseConv>,
    },
    TransposedConv {
        input: Var,
        weight: Var,
        bias: Var,
        geom: TransposedConv,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        channels: usize,
        // per-channel normalized activations and 1/sqrt(var + eps)
        xhat: Rc<Mat>,
        inv_std: Rc<Vec<f64>>,
        batch_stats: bool,
    },
    SumWeighted(Var, Rc<Mat>),
    SumSquares(Var),
    Bce(Var, Rc<Mat>),
    Kl {
        mu_q: Var,
        sigma_q: Var,
        mu_p: Var,
        sigma_p: Var,
    },
    Locality(Var, Rc<Mat>),
    Combine(Vec<(Var, f64)>),
}

struct Node {
    value: Rc<Mat>,
    op: Op,
    needs_grad: bool,
}

/// Statistics computed by a training-mode batch norm, for running averages.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub const BCE_CLAMP: f64 = 1e-7;
pub const BN_EPS: f64 = 1e-5;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn dim_err(what: &str, a: (usize, usize), b: (usize, usize)) -> Error {
    Error::Dimension(format!("{what}: {}x{} vs {}x{}", a.0, a.1, b.0, b.1))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.push_rc(Rc::new(value), op, needs_grad)
    }

    fn push_rc(&mut self, value: Rc<Mat>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    /// A value no gradient flows into.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn constant_rc(&mut self, value: Rc<Mat>) -> Var {
        self.push_rc(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is reported by [`Tape::backward`].
    pub fn input(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.0 {
            return Err(dim_err("matmul", sa, sb));
        }
        let v = self.value(a).dot(self.value(b));
        let ng = self.needs(&[a, b]);
        Ok(self.push(v, Op::MatMul(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(dim_err("add", sa, sb));
        }
        let v = self.value(a) + self.value(b);
        let ng = self.needs(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), ng))
    }

    /// `a + 1 b` for a `1 x F` row `b`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(bias));
        if sb.0 != 1 || sa.1 != sb.1 {
            return Err(dim_err("add_bias", sa, sb));
        }
        let v = self.value(a) + self.value(bias);
        let ng = self.needs(&[a, bias]);
        Ok(self.push(v, Op::AddBias(a, bias), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(dim_err("mul", sa, sb));
        }
        let v = self.value(a) * self.value(b);
        let ng = self.needs(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), ng))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        let ng = self.needs(&[a]);
        self.push(v, Op::Relu(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        let ng = self.needs(&[a]);
        self.push(v, Op::Sigmoid(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::exp);
        let ng = self.needs(&[a]);
        self.push(v, Op::Exp(a), ng)
    }

    /// Row `i` of `a` multiplied by `gate[i, 0]`.
    pub fn scale_rows(&mut self, a: Var, gate: Var) -> Result<Var> {
        let (sa, sg) = (self.shape(a), self.shape(gate));
        if sg != (sa.0, 1) {
            return Err(dim_err("scale_rows", sa, sg));
        }
        let v = self.value(a) * self.value(gate);
        let ng = self.needs(&[a, gate]);
        Ok(self.push(v, Op::ScaleRows(a, gate), ng))
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let n = self.shape(a).0;
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::Dimension(format!("row {bad} out of {n}")));
        }
        let v = self.value(a).select(Axis(0), rows);
        let ng = self.needs(&[a]);
        Ok(self.push(v, Op::GatherRows(a, rows.into()), ng))
    }

    /// Places row `k` of `a` at row `rows[k]` of an `n`-row zero matrix.
    pub fn scatter_rows(&mut self, a: Var, rows: &[usize], n: usize) -> Result<Var> {
        let (k, f) = self.shape(a);
        if rows.len() != k || rows.iter().any(|&r| r >= n) {
            return Err(Error::Dimension(format!(
                "cannot scatter {k} rows to {:?} within {n}",
                rows
            )));
        }
        let mut v = Mat::zeros((n, f));
        let src = self.value(a);
        for (r, &dst) in rows.iter().enumerate() {
            v.row_mut(dst).assign(&src.row(r));
        }
        let ng = self.needs(&[a]);
        Ok(self.push(v, Op::ScatterRows(a, rows.into()), ng))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.0 != sb.0 {
            return Err(dim_err("concat_cols", sa, sb));
        }
        let v = ndarray::concatenate(Axis(1), &[self.value(a).view(), self.value(b).view()])
            .expect("row counts checked");
        let ng = self.needs(&[a, b]);
        Ok(self.push(v, Op::ConcatCols(a, b), ng))
    }

    /// Scores `h p / |p|` for an `F x 1` projection `p`.
    pub fn project(&mut self, h: Var, p: Var) -> Result<Var> {
        let (sh, sp) = (self.shape(h), self.shape(p));
        if sp != (sh.1, 1) {
            return Err(dim_err("project", sh, sp));
        }
        let norm = self.value(p).iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::DegenerateProjection);
        }
        let v = self.value(h).dot(self.value(p)) / norm;
        let ng = self.needs(&[h, p]);
        Ok(self.push(v, Op::Project(h, p), ng))
    }

    /// Reshapes a `1 x (n*t)` row into `n x t`, filling columns first.
    pub fn reshape_col_major(&mut self, a: Var, n: usize, t: usize) -> Result<Var> {
        let sa = self.shape(a);
        if sa != (1, n * t) {
            return Err(dim_err("reshape", sa, (1, n * t)));
        }
        let src = self.value(a);
        let v = Mat::from_shape_fn((n, t), |(i, j)| src[[0, j * n + i]]);
        let ng = self.needs(&[a]);
        Ok(self.push(v, Op::ReshapeColMajor(a), ng))
    }

    /// Depthwise convolution along rows: `out[i, c] = b[c] + sum_k w[c, k] *
    /// in[i + k - pad, src(c)]`, zero outside the input.
    pub fn depthwise_conv(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        geom: Rc<DepthwiseConv>,
    ) -> Result<Var> {
        let (n, cin) = self.shape(input);
        let cout = geom.source_channel.len();
        if self.shape(weight) != (cout, geom.kernel) || self.shape(bias) != (1, cout) {
            return Err(Error::Dimension("depthwise conv parameters".into()));
        }
        if geom.source_channel.iter().any(|&c| c >= cin) {
            return Err(Error::Dimension("depthwise conv channel map".into()));
        }
        let out_len = (n + 2 * geom.padding + 1).saturating_sub(geom.kernel);
        if n == 0 || out_len == 0 {
            return Err(Error::Dimension(format!("sequence of length {n} too short")));
        }
        let (x, w, b) = (self.value(input), self.value(weight), self.value(bias));
        let mut v = Mat::zeros((out_len, cout));
        for c in 0..cout {
            let src = geom.source_channel[c];
            for i in 0..out_len {
                let mut acc = b[[0, c]];
                for k in 0..geom.kernel {
                    let pos = i as isize + k as isize - geom.padding as isize;
                    if pos >= 0 && (pos as usize) < n {
                        acc += w[[c, k]] * x[[pos as usize, src]];
                    }
                }
                v[[i, c]] = acc;
            }
        }
        let ng = self.needs(&[input, weight, bias]);
        Ok(self.push(
            v,
            Op::DepthwiseConv {
                input,
                weight,
                bias,
                geom,
            },
            ng,
        ))
    }

    /// Transposed convolution. `weight` is `in_channels x (out_channels *
    /// kernel)`; `bias` is `1 x out_channels`.
    pub fn transposed_conv(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        geom: TransposedConv,
    ) -> Result<Var> {
        let (rows, cols) = self.shape(input);
        if cols != geom.in_channels * geom.in_len {
            return Err(dim_err(
                "transposed conv input",
                (rows, cols),
                (rows, geom.in_channels * geom.in_len),
            ));
        }
        if self.shape(weight) != (geom.in_channels, geom.out_channels * geom.kernel)
            || self.shape(bias) != (1, geom.out_channels)
        {
            return Err(Error::Dimension("transposed conv parameters".into()));
        }
        let out_len = geom.out_len();
        if out_len == 0 {
            return Err(Error::Config("transposed conv produces empty output".into()));
        }
        let (x, w, b) = (self.value(input), self.value(weight), self.value(bias));
        let mut v = Mat::zeros((rows, geom.out_channels * out_len));
        for r in 0..rows {
            for co in 0..geom.out_channels {
                for j in 0..out_len {
                    v[[r, co * out_len + j]] = b[[0, co]];
                }
            }
            for ci in 0..geom.in_channels {
                for l in 0..geom.in_len {
                    let xv = x[[r, ci * geom.in_len + l]];
                    for k in 0..geom.kernel {
                        let Some(j) = tconv_target(l, k, &geom, out_len) else {
                            continue;
                        };
                        for co in 0..geom.out_channels {
                            v[[r, co * out_len + j]] += xv * w[[ci, co * geom.kernel + k]];
                        }
                    }
                }
            }
        }
        let ng = self.needs(&[input, weight, bias]);
        Ok(self.push(
            v,
            Op::TransposedConv {
                input,
                weight,
                bias,
                geom,
            },
            ng,
        ))
    }

    /// Per-channel batch normalization over all rows and positions of a
    /// channel-major activation. With `running = None` the batch statistics
    /// are used (and returned); otherwise the given mean/variance.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        channels: usize,
        running: Option<&BatchStats>,
    ) -> Result<(Var, BatchStats)> {
        let (rows, cols) = self.shape(input);
        if channels == 0 || cols % channels != 0 {
            return Err(Error::Dimension(format!("{cols} columns, {channels} channels")));
        }
        if self.shape(gamma) != (1, channels) || self.shape(beta) != (1, channels) {
            return Err(Error::Dimension("batch norm parameters".into()));
        }
        let len = cols / channels;
        let x = self.value(input);
        let count = (rows * len) as f64;
        let stats = match running {
            Some(s) => s.clone(),
            None => {
                let mut mean = vec![0.0; channels];
                let mut var = vec![0.0; channels];
                for c in 0..channels {
                    let block = x.slice(s![.., c * len..(c + 1) * len]);
                    let m = block.sum() / count;
                    mean[c] = m;
                    var[c] = block.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / count;
                }
                BatchStats { mean, var }
            }
        };
        let inv_std: Vec<f64> = stats.var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut xhat = Mat::zeros((rows, cols));
        let mut v = Mat::zeros((rows, cols));
        for c in 0..channels {
            for r in 0..rows {
                for l in 0..len {
                    let col = c * len + l;
                    let h = (x[[r, col]] - stats.mean[c]) * inv_std[c];
                    xhat[[r, col]] = h;
                    v[[r, col]] = g[[0, c]] * h + b[[0, c]];
                }
            }
        }
        let ng = self.needs(&[input, gamma, beta]);
        let var = self.push(
            v,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                channels,
                xhat: Rc::new(xhat),
                inv_std: Rc::new(inv_std),
                batch_stats: running.is_none(),
            },
            ng,
        );
        Ok((var, stats))
    }

    /// `sum(a * weights)` as a `1 x 1` node.
    pub fn sum_weighted(&mut self, a: Var, weights: Rc<Mat>) -> Result<Var> {
        if self.shape(a) != weights.dim() {
            return Err(dim_err("sum_weighted", self.shape(a), weights.dim()));
        }
        let v = (self.value(a) * &*weights).sum();
        let ng = self.needs(&[a]);
        Ok(self.push(Mat::from_elem((1, 1), v), Op::SumWeighted(a, weights), ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let w = Rc::new(Mat::ones(self.shape(a)));
        self.sum_weighted(a, w).expect("shapes match")
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let v = self.value(a).iter().map(|x| x * x).sum::<f64>();
        let ng = self.needs(&[a]);
        self.push(Mat::from_elem((1, 1), v), Op::SumSquares(a), ng)
    }

    /// Mean binary cross-entropy against a fixed binary target, with
    /// predictions clamped to `[1e-7, 1 - 1e-7]`.
    pub fn bce(&mut self, pred: Var, target: Rc<Mat>) -> Result<Var> {
        if self.shape(pred) != target.dim() {
            return Err(dim_err("bce", self.shape(pred), target.dim()));
        }
        let v = bce_value(self.value(pred), &target);
        let ng = self.needs(&[pred]);
        Ok(self.push(Mat::from_elem((1, 1), v), Op::Bce(pred, target), ng))
    }

    /// `KL(q || p)` between diagonal Gaussians, summed over entries.
    pub fn kl_gaussian(&mut self, mu_q: Var, sigma_q: Var, mu_p: Var, sigma_p: Var) -> Result<Var> {
        let shape = self.shape(mu_q);
        for v in [sigma_q, mu_p, sigma_p] {
            if self.shape(v) != shape {
                return Err(dim_err("kl", shape, self.shape(v)));
            }
        }
        let v = kl_value(
            self.value(mu_q),
            self.value(sigma_q),
            self.value(mu_p),
            self.value(sigma_p),
        )?;
        let ng = self.needs(&[mu_q, sigma_q, mu_p, sigma_p]);
        Ok(self.push(
            Mat::from_elem((1, 1), v),
            Op::Kl {
                mu_q,
                sigma_q,
                mu_p,
                sigma_p,
            },
            ng,
        ))
    }

    /// `sum_{t>=2} sum_i [y(t) - C y(t-1)]_+` with `C` the closed adjacency.
    pub fn locality(&mut self, pred: Var, closed: Rc<Mat>) -> Result<Var> {
        let (n, _) = self.shape(pred);
        if closed.dim() != (n, n) {
            return Err(dim_err("locality", self.shape(pred), closed.dim()));
        }
        let (v, _) = locality_value(self.value(pred), &closed);
        let ng = self.needs(&[pred]);
        Ok(self.push(Mat::from_elem((1, 1), v), Op::Locality(pred, closed), ng))
    }

    /// `sum_k w_k * term_k` over `1 x 1` nodes.
    pub fn combine(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut total = 0.0;
        for &(v, w) in terms {
            if self.shape(v) != (1, 1) {
                return Err(Error::Dimension("combine expects scalars".into()));
            }
            total += w * self.scalar(v);
        }
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let ng = self.needs(&vars);
        Ok(self.push(
            Mat::from_elem((1, 1), total),
            Op::Combine(terms.to_vec()),
            ng,
        ))
    }

    /// Gradients of the scalar `root` with respect to every node.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.shape(root) != (1, 1) {
            return Err(Error::Dimension("backward needs a scalar root".into()));
        }
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Mat::from_elem((1, 1), 1.0));
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Mat, grads: &mut [Option<Mat>]) {
        let val = |v: Var| -> &Mat { &self.nodes[v.0].value };
        let mut acc = |v: Var, d: Mat| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &d,
                slot @ None => *slot = Some(d),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.nodes[a.0].needs_grad {
                    acc(*a, g.dot(&val(*b).t()));
                }
                if self.nodes[b.0].needs_grad {
                    acc(*b, val(*a).t().dot(g));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::AddBias(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::Mul(a, b) => {
                acc(*a, g * val(*b));
                acc(*b, g * val(*a));
            }
            Op::Relu(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(val(*a)).for_each(|d, &x| {
                    if x <= 0.0 {
                        *d = 0.0;
                    }
                });
                acc(*a, d);
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                let mut d = g.clone();
                Zip::from(&mut d).and(&**y).for_each(|d, &y| *d *= y * (1.0 - y));
                acc(*a, d);
            }
            Op::Exp(a) => acc(*a, g * &*node.value),
            Op::ScaleRows(a, gate) => {
                acc(*a, g * val(*gate));
                acc(*gate, (g * val(*a)).sum_axis(Axis(1)).insert_axis(Axis(1)));
            }
            Op::GatherRows(a, rows) => {
                let mut d = Mat::zeros(val(*a).dim());
                for (r, &src) in rows.iter().enumerate() {
                    let mut row = d.row_mut(src);
                    row += &g.row(r);
                }
                acc(*a, d);
            }
            Op::ScatterRows(a, rows) => acc(*a, g.select(Axis(0), rows)),
            Op::ConcatCols(a, b) => {
                let wa = val(*a).ncols();
                acc(*a, g.slice(s![.., ..wa]).to_owned());
                acc(*b, g.slice(s![.., wa..]).to_owned());
            }
            Op::Project(h, p) => {
                let (hv, pv) = (val(*h), val(*p));
                let norm2 = pv.iter().map(|v| v * v).sum::<f64>();
                let norm = norm2.sqrt();
                acc(*h, g.dot(&pv.t()) / norm);
                if self.nodes[p.0].needs_grad {
                    let raw = hv.dot(pv);
                    let coupling = (&raw * g).sum();
                    acc(*p, hv.t().dot(g) / norm - pv * (coupling / (norm2 * norm)));
                }
            }
            Op::ReshapeColMajor(a) => {
                let (n, t) = g.dim();
                let mut d = Mat::zeros((1, n * t));
                for i in 0..n {
                    for j in 0..t {
                        d[[0, j * n + i]] = g[[i, j]];
                    }
                }
                acc(*a, d);
            }
            Op::DepthwiseConv {
                input,
                weight,
                bias,
                geom,
            } => {
                let (x, w) = (val(*input), val(*weight));
                let n = x.nrows();
                let mut dx = Mat::zeros(x.dim());
                let mut dw = Mat::zeros(w.dim());
                for (c, &src) in geom.source_channel.iter().enumerate() {
                    for i in 0..g.nrows() {
                        let gi = g[[i, c]];
                        for k in 0..geom.kernel {
                            let pos = i as isize + k as isize - geom.padding as isize;
                            if pos >= 0 && (pos as usize) < n {
                                dx[[pos as usize, src]] += gi * w[[c, k]];
                                dw[[c, k]] += gi * x[[pos as usize, src]];
                            }
                        }
                    }
                }
                acc(*input, dx);
                acc(*weight, dw);
                acc(*bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::TransposedConv {
                input,
                weight,
                bias,
                geom,
            } => {
                let (x, w) = (val(*input), val(*weight));
                let out_len = geom.out_len();
                let mut dx = Mat::zeros(x.dim());
                let mut dw = Mat::zeros(w.dim());
                let mut db = Mat::zeros((1, geom.out_channels));
                for r in 0..x.nrows() {
                    for co in 0..geom.out_channels {
                        for j in 0..out_len {
                            db[[0, co]] += g[[r, co * out_len + j]];
                        }
                    }
                    for ci in 0..geom.in_channels {
                        for l in 0..geom.in_len {
                            let xv = x[[r, ci * geom.in_len + l]];
                            let mut dxv = 0.0;
                            for k in 0..geom.kernel {
                                let Some(j) = tconv_target(l, k, geom, out_len) else {
                                    continue;
                                };
                                for co in 0..geom.out_channels {
                                    let gv = g[[r, co * out_len + j]];
                                    dxv += gv * w[[ci, co * geom.kernel + k]];
                                    dw[[ci, co * geom.kernel + k]] += gv * xv;
                                }
                            }
                            dx[[r, ci * geom.in_len + l]] = dxv;
                        }
                    }
                }
                acc(*input, dx);
                acc(*weight, dw);
                acc(*bias, db);
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                channels,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let gam = val(*gamma);
                let (rows, cols) = g.dim();
                let len = cols / channels;
                let count = (rows * len) as f64;
                let mut dx = Mat::zeros((rows, cols));
                let mut dgamma = Mat::zeros((1, *channels));
                let mut dbeta = Mat::zeros((1, *channels));
                for c in 0..*channels {
                    let cols = c * len..(c + 1) * len;
                    let gc = g.slice(s![.., cols.clone()]);
                    let hc = xhat.slice(s![.., cols.clone()]);
                    let sum_g = gc.sum();
                    let sum_gh = (&gc * &hc).sum();
                    dbeta[[0, c]] = sum_g;
                    dgamma[[0, c]] = sum_gh;
                    let scale = gam[[0, c]] * inv_std[c];
                    let mut dxc = dx.slice_mut(s![.., cols]);
                    if *batch_stats {
                        Zip::from(&mut dxc).and(&gc).and(&hc).for_each(|d, &gv, &h| {
                            *d = scale * (gv - sum_g / count - h * sum_gh / count);
                        });
                    } else {
                        Zip::from(&mut dxc).and(&gc).for_each(|d, &gv| *d = scale * gv);
                    }
                }
                acc(*input, dx);
                acc(*gamma, dgamma);
                acc(*beta, dbeta);
            }
            Op::SumWeighted(a, w) => acc(*a, &**w * g[[0, 0]]),
            Op::SumSquares(a) => acc(*a, val(*a) * (2.0 * g[[0, 0]])),
            Op::Bce(pred, target) => {
                let p = val(*pred);
                let m = p.len() as f64;
                let scale = g[[0, 0]] / m;
                let d = Mat::from_shape_fn(p.dim(), |ix| {
                    let (pv, y) = (p[ix], target[ix]);
                    if !(BCE_CLAMP..=1.0 - BCE_CLAMP).contains(&pv) {
                        0.0
                    } else {
                        scale * (-y / pv + (1.0 - y) / (1.0 - pv))
                    }
                });
                acc(*pred, d);
            }
            Op::Kl {
                mu_q,
                sigma_q,
                mu_p,
                sigma_p,
            } => {
                let gs = g[[0, 0]];
                let (mq, sq, mp, sp) = (val(*mu_q), val(*sigma_q), val(*mu_p), val(*sigma_p));
                let diff = mq - mp;
                let sp2 = sp * sp;
                let dmu = &diff / &sp2 * gs;
                acc(*mu_p, -&dmu);
                acc(*mu_q, dmu);
                acc(*sigma_q, (sq / &sp2 - sq.mapv(f64::recip)) * gs);
                let num = sq * sq + &diff * &diff;
                acc(*sigma_p, (sp.mapv(f64::recip) - num / (&sp2 * sp)) * gs);
            }
            Op::Locality(pred, closed) => {
                let (_, active) = locality_value(val(*pred), closed);
                let gs = g[[0, 0]];
                // d/dy(t) = active(t); d/dy(t-1) = -C^T active(t)
                let back = closed.t().dot(&active);
                let mut d = Mat::zeros(active.dim());
                let horizon = d.ncols();
                for t in 1..horizon {
                    for i in 0..d.nrows() {
                        d[[i, t]] += gs * active[[i, t]];
                        d[[i, t - 1]] -= gs * back[[i, t]];
                    }
                }
                acc(*pred, d);
            }
            Op::Combine(terms) => {
                for &(v, w) in terms {
                    acc(v, Mat::from_elem((1, 1), w * g[[0, 0]]));
                }
            }
        }
    }
}

fn tconv_target(l: usize, k: usize, geom: &TransposedConv, out_len: usize) -> Option<usize> {
    let j = (l * geom.stride + k) as isize - geom.padding as isize;
    (j >= 0 && (j as usize) < out_len).then_some(j as usize)
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`; zero-filled when `v` does
    /// not influence the root.
    pub fn get(&self, v: Var, shape: (usize, usize)) -> Mat {
        self.grads[v.0].clone().unwrap_or_else(|| Mat::zeros(shape))
    }

    pub fn get_ref(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn bce_value(pred: &Mat, target: &Mat) -> f64 {
    let total: f64 = pred
        .iter()
        .zip(target.iter())
        .map(|(&p, &y)| {
            let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    total / pred.len() as f64
}

pub(crate) fn kl_value(mu_q: &Mat, sigma_q: &Mat, mu_p: &Mat, sigma_p: &Mat) -> Result<f64> {
    if sigma_q.iter().chain(sigma_p.iter()).any(|&s| !(s > 0.0)) {
        return Err(Error::Domain("standard deviations must be positive".into()));
    }
    let mut total = 0.0;
    for (((&mq, &sq), &mp), &sp) in mu_q.iter().zip(sigma_q).zip(mu_p).zip(sigma_p) {
        let d = mq - mp;
        total += (sp / sq).ln() + (sq * sq + d * d) / (2.0 * sp * sp) - 0.5;
    }
    Ok(total)
}

/// Penalty value and the mask of active hinge terms (column 0 always 0).
pub(crate) fn locality_value(pred: &Mat, closed: &Mat) -> (f64, Mat) {
    let (n, horizon) = pred.dim();
    let spread = closed.dot(pred);
    let mut active = Mat::zeros((n, horizon));
    let mut total = 0.0;
    for t in 1..horizon {
        for i in 0..n {
            let excess = pred[[i, t]] - spread[[i, t - 1]];
            if excess > 0.0 {
                total += excess;
                active[[i, t]] = 1.0;
            }
        }
    }
    (total, active)
}
