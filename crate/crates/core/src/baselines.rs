//! Graph-agnostic reference models: a fully connected network over the
//! whole aggregate, a depthwise CNN along the node axis and a per-node
//! transposed CNN along the time axis. All end in a sigmoid and train on the
//! entrywise cross-entropy.

use std::rc::Rc;

use ndarray::{Array1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{export_store, import_store, Model, ModelKind};
use crate::nn::checkpoint::{Manifest, FORMAT_VERSION};
use crate::nn::layers::{conv1d_depthwise, conv1d_transposed_block, dense, depthwise_channel_map, RunningStats};
use crate::nn::params::{glorot, glorot_fans, Bound};
use crate::nn::tape::{bce_value, TransposedConv};
use crate::nn::{Activation, GraphContext, Mat, ParameterStore, Tape, Var};
use crate::rng::{self, Rng};
use crate::sirs::Sample;

fn check_len(x: &Array1<f64>, n: usize) -> Result<()> {
    if x.len() != n {
        return Err(Error::Dimension(format!(
            "observation of length {} on a {n}-node graph",
            x.len()
        )));
    }
    Ok(())
}

/// Mean BCE of `pred` against `y`, with gradients into `store` when
/// `bound` is trainable.
fn bce_step(
    tape: &mut Tape,
    pred: Var,
    y: Mat,
    store: &mut ParameterStore,
    bound: &Bound,
    scale: f64,
) -> Result<f64> {
    let loss = tape.bce(pred, Rc::new(y))?;
    let grads = tape.backward(loss)?;
    store.accumulate(bound, &grads, scale);
    Ok(tape.scalar(loss))
}

fn target(sample: &Sample, n: usize, horizon: usize) -> Result<Mat> {
    let y = sample.trajectory.y_f64();
    if y.dim() != (n, horizon) {
        return Err(Error::Dimension(format!(
            "series of shape {:?}, expected ({n}, {horizon})",
            y.dim()
        )));
    }
    Ok(y)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub num_nodes: usize,
    pub horizon: usize,
}

impl MlpConfig {
    /// Widths of the three hidden layers.
    pub fn hidden(&self) -> [usize; 3] {
        let nt = self.num_nodes * self.horizon;
        let quarter = nt.div_ceil(4);
        [quarter, quarter, nt]
    }

    /// `(fan_in, fan_out)` of each affine layer, input to output.
    pub fn layer_shapes(&self) -> [(usize, usize); 4] {
        let [a, b, c] = self.hidden();
        let nt = self.num_nodes * self.horizon;
        [(self.num_nodes, a), (a, b), (b, c), (c, nt)]
    }

    pub fn num_parameters(&self) -> usize {
        self.layer_shapes().iter().map(|(i, o)| i * o + o).sum()
    }
}

/// Fully connected network `N -> NT/4 -> NT/4 -> NT -> NT`, reshaped
/// column-major to `N x T`.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub config: MlpConfig,
    pub params: ParameterStore,
}

const MLP_LAYERS: [&str; 4] = ["fc1", "fc2", "fc3", "out"];

impl Mlp {
    pub fn new(config: MlpConfig, seed: u64) -> Result<Self> {
        if config.num_nodes < 1 || config.horizon < 1 {
            return Err(Error::Config("MLP needs N >= 1 and T >= 1".into()));
        }
        let mut rng = rng::root(seed);
        let mut params = ParameterStore::new(seed);
        for (name, (fan_in, fan_out)) in MLP_LAYERS.iter().zip(config.layer_shapes()) {
            params.insert(format!("{name}.w"), glorot(fan_in, fan_out, &mut rng))?;
            params.insert(format!("{name}.b"), Mat::zeros((1, fan_out)))?;
        }
        Ok(Self { config, params })
    }

    fn forward(&self, tape: &mut Tape, bound: &Bound, x: &Array1<f64>) -> Result<Var> {
        self.check_num_nodes(x.len())?;
        let mut h = tape.constant(x.clone().insert_axis(Axis(0)));
        for (k, name) in MLP_LAYERS.iter().enumerate() {
            let w = bound.var(&self.params, &format!("{name}.w"))?;
            let b = bound.var(&self.params, &format!("{name}.b"))?;
            let act = if k + 1 < MLP_LAYERS.len() {
                Activation::Relu
            } else {
                Activation::Identity
            };
            h = dense(tape, h, w, b, act)?;
        }
        let grid = tape.reshape_col_major(h, self.config.num_nodes, self.config.horizon)?;
        Ok(tape.sigmoid(grid))
    }

    pub fn forward_value(&self, x: &Array1<f64>) -> Result<Mat> {
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let out = self.forward(&mut tape, &bound, x)?;
        Ok(tape.value(out).clone())
    }

    /// Output as a function of externally supplied parameters, in store
    /// order (for gradient checks).
    pub fn forward_from_inputs(&self, tape: &mut Tape, vars: &[Var], x: &Array1<f64>) -> Result<Var> {
        self.forward(tape, &Bound::from_vars(vars.to_vec()), x)
    }
}

impl Model for Mlp {
    fn kind(&self) -> ModelKind {
        ModelKind::Mlp
    }

    fn horizon(&self) -> usize {
        self.config.horizon
    }

    fn check_num_nodes(&self, n: usize) -> Result<()> {
        if n != self.config.num_nodes {
            return Err(Error::Capability(format!(
                "MLP built for N = {} cannot handle N = {n}",
                self.config.num_nodes
            )));
        }
        Ok(())
    }

    fn accumulate_gradients(&mut self, ctx: &GraphContext, sample: &Sample, scale: f64, _rng: &mut Rng) -> Result<f64> {
        check_len(&sample.x.x, ctx.num_nodes())?;
        let y = target(sample, ctx.num_nodes(), self.config.horizon)?;
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let pred = self.forward(&mut tape, &bound, &sample.x.x)?;
        bce_step(&mut tape, pred, y, &mut self.params, &bound, scale)
    }

    fn eval_loss(&self, ctx: &GraphContext, sample: &Sample, rng: &mut Rng) -> Result<f64> {
        let y = target(sample, ctx.num_nodes(), self.config.horizon)?;
        Ok(bce_value(&self.predict(ctx, &sample.x.x, rng)?, &y))
    }

    fn predict(&self, ctx: &GraphContext, x: &Array1<f64>, _rng: &mut Rng) -> Result<Mat> {
        self.check_num_nodes(ctx.num_nodes())?;
        check_len(x, ctx.num_nodes())?;
        self.forward_value(x)
    }

    fn stores(&self) -> Vec<&ParameterStore> {
        vec![&self.params]
    }

    fn stores_mut(&mut self) -> Vec<&mut ParameterStore> {
        vec![&mut self.params]
    }

    fn manifest(&self) -> Manifest {
        let mut widths = vec![self.config.num_nodes];
        widths.extend(self.config.hidden());
        widths.push(self.config.num_nodes * self.config.horizon);
        Manifest {
            format_version: FORMAT_VERSION,
            model_type: ModelKind::Mlp.as_str().into(),
            feature_widths: widths,
            horizon: self.config.horizon,
            seed: self.params.seed,
            extra: serde_json::json!({ "N": self.config.num_nodes }),
        }
    }

    fn arrays(&self) -> Vec<(String, Mat)> {
        export_store("params", &self.params)
    }

    fn load_arrays(&mut self, arrays: &[(String, Mat)]) -> Result<()> {
        import_store("params", &mut self.params, arrays)
    }

    fn box_clone(&self) -> Box<dyn Model> {
        Box::new(self.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CnnNodesConfig {
    pub horizon: usize,
    pub kernel: usize,
}

impl CnnNodesConfig {
    pub fn new(horizon: usize) -> Self {
        Self { horizon, kernel: 3 }
    }

    /// `[1, ceil(T/4), ceil(T/2), T]`.
    pub fn channels(&self) -> [usize; 4] {
        let t = self.horizon;
        [1, t.div_ceil(4), t.div_ceil(2), t]
    }
}

/// Depthwise convolutions along the node axis, growing 1 channel to `T`.
#[derive(Debug, Clone)]
pub struct CnnNodes {
    pub config: CnnNodesConfig,
    pub params: ParameterStore,
}

impl CnnNodes {
    pub fn new(config: CnnNodesConfig, seed: u64) -> Result<Self> {
        if config.horizon < 1 || config.kernel.is_multiple_of(2) {
            return Err(Error::Config("CNN-nodes needs T >= 1 and an odd kernel".into()));
        }
        let mut rng = rng::root(seed);
        let mut params = ParameterStore::new(seed);
        let k = config.kernel;
        for (stage, cout) in config.channels()[1..].iter().enumerate() {
            params.insert(format!("conv{}.w", stage + 1), glorot_fans(*cout, k, k, k, &mut rng))?;
            params.insert(format!("conv{}.b", stage + 1), Mat::zeros((1, *cout)))?;
        }
        Ok(Self { config, params })
    }

    fn forward(&self, tape: &mut Tape, bound: &Bound, x: &Array1<f64>) -> Result<Var> {
        let mut h = tape.constant(x.clone().insert_axis(Axis(1)));
        let ch = self.config.channels();
        for stage in 1..ch.len() {
            let w = bound.var(&self.params, &format!("conv{stage}.w"))?;
            let b = bound.var(&self.params, &format!("conv{stage}.b"))?;
            let act = if stage + 1 < ch.len() {
                Activation::Relu
            } else {
                Activation::Identity
            };
            h = conv1d_depthwise(tape, h, w, b, depthwise_channel_map(ch[stage - 1], ch[stage]), act)?;
        }
        Ok(tape.sigmoid(h))
    }

    pub fn forward_value(&self, x: &Array1<f64>) -> Result<Mat> {
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let out = self.forward(&mut tape, &bound, x)?;
        Ok(tape.value(out).clone())
    }

    pub fn forward_from_inputs(&self, tape: &mut Tape, vars: &[Var], x: &Array1<f64>) -> Result<Var> {
        self.forward(tape, &Bound::from_vars(vars.to_vec()), x)
    }
}

impl Model for CnnNodes {
    fn kind(&self) -> ModelKind {
        ModelKind::CnnNodes
    }

    fn horizon(&self) -> usize {
        self.config.horizon
    }

    fn accumulate_gradients(&mut self, ctx: &GraphContext, sample: &Sample, scale: f64, _rng: &mut Rng) -> Result<f64> {
        check_len(&sample.x.x, ctx.num_nodes())?;
        let y = target(sample, ctx.num_nodes(), self.config.horizon)?;
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let pred = self.forward(&mut tape, &bound, &sample.x.x)?;
        bce_step(&mut tape, pred, y, &mut self.params, &bound, scale)
    }

    fn eval_loss(&self, ctx: &GraphContext, sample: &Sample, rng: &mut Rng) -> Result<f64> {
        let y = target(sample, ctx.num_nodes(), self.config.horizon)?;
        Ok(bce_value(&self.predict(ctx, &sample.x.x, rng)?, &y))
    }

    fn predict(&self, ctx: &GraphContext, x: &Array1<f64>, _rng: &mut Rng) -> Result<Mat> {
        check_len(x, ctx.num_nodes())?;
        self.forward_value(x)
    }

    fn stores(&self) -> Vec<&ParameterStore> {
        vec![&self.params]
    }

    fn stores_mut(&mut self) -> Vec<&mut ParameterStore> {
        vec![&mut self.params]
    }

    fn manifest(&self) -> Manifest {
        Manifest {
            format_version: FORMAT_VERSION,
            model_type: ModelKind::CnnNodes.as_str().into(),
            feature_widths: self.config.channels().to_vec(),
            horizon: self.config.horizon,
            seed: self.params.seed,
            extra: serde_json::json!({ "kernel": self.config.kernel, "stride": 1, "padding": self.config.kernel / 2 }),
        }
    }

    fn arrays(&self) -> Vec<(String, Mat)> {
        export_store("params", &self.params)
    }

    fn load_arrays(&mut self, arrays: &[(String, Mat)]) -> Result<()> {
        import_store("params", &mut self.params, arrays)
    }

    fn box_clone(&self) -> Box<dyn Model> {
        Box::new(self.clone())
    }
}

/// One transposed-convolution block of the CNN-time plan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeBlock {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub channels: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CnnTimeConfig {
    pub horizon: usize,
    pub blocks: Vec<TimeBlock>,
}

pub const CNN_TIME_BLOCKS: usize = 6;
pub const CNN_TIME_CHANNELS: usize = 16;

impl CnnTimeConfig {
    /// Six blocks: doublings from length 1 while they fit, one stride-1
    /// stretch to `T` if needed, then length-preserving refinements.
    pub fn default_plan(horizon: usize, channels: usize) -> Result<Self> {
        if horizon < 1 {
            return Err(Error::Config("horizon must be >= 1".into()));
        }
        let mut blocks = Vec::new();
        let mut len = 1;
        while 2 * len <= horizon && blocks.len() < CNN_TIME_BLOCKS - 1 {
            blocks.push(TimeBlock { kernel: 2, stride: 2, padding: 0, channels });
            len *= 2;
        }
        if len < horizon {
            blocks.push(TimeBlock { kernel: horizon - len + 1, stride: 1, padding: 0, channels });
        }
        while blocks.len() < CNN_TIME_BLOCKS {
            blocks.push(TimeBlock { kernel: 3, stride: 1, padding: 1, channels });
        }
        let cfg = Self { horizon, blocks };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Per-block geometry, starting from one channel of length 1.
    pub fn geometry(&self) -> Result<Vec<TransposedConv>> {
        let mut out = Vec::with_capacity(self.blocks.len());
        let (mut len, mut ch) = (1usize, 1usize);
        for (k, b) in self.blocks.iter().enumerate() {
            if b.kernel == 0 || b.stride == 0 || b.channels == 0 {
                return Err(Error::Config(format!("block {k} has a zero size")));
            }
            let geom = TransposedConv {
                in_channels: ch,
                out_channels: b.channels,
                in_len: len,
                kernel: b.kernel,
                stride: b.stride,
                padding: b.padding,
            };
            if (len - 1) * b.stride + b.kernel <= 2 * b.padding {
                return Err(Error::Config(format!("block {k} produces an empty sequence")));
            }
            len = geom.out_len();
            ch = b.channels;
            out.push(geom);
        }
        Ok(out)
    }

    /// Sequence lengths after each block.
    pub fn lengths(&self) -> Result<Vec<usize>> {
        Ok(self.geometry()?.iter().map(|g| g.out_len()).collect())
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.len() != CNN_TIME_BLOCKS {
            return Err(Error::Config(format!(
                "CNN-time needs {CNN_TIME_BLOCKS} blocks, got {}",
                self.blocks.len()
            )));
        }
        let last = *self.lengths()?.last().expect("non-empty plan");
        if last != self.horizon {
            return Err(Error::Config(format!(
                "plan composes to length {last}, expected T = {}",
                self.horizon
            )));
        }
        Ok(())
    }
}

/// Per-node stack of transposed convolutions lifting the scalar `x_i` to a
/// length-`T` series, followed by a 1x1 head and a sigmoid.
#[derive(Debug, Clone)]
pub struct CnnTime {
    pub config: CnnTimeConfig,
    pub params: ParameterStore,
    pub running: Vec<RunningStats>,
}

impl CnnTime {
    pub fn new(config: CnnTimeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let geometry = config.geometry()?;
        let mut rng = rng::root(seed);
        let mut params = ParameterStore::new(seed);
        for (k, g) in geometry.iter().enumerate() {
            let (fi, fo) = (g.in_channels * g.kernel, g.out_channels * g.kernel);
            params.insert(
                format!("block{}.w", k + 1),
                glorot_fans(g.in_channels, g.out_channels * g.kernel, fi, fo, &mut rng),
            )?;
            params.insert(format!("block{}.b", k + 1), Mat::zeros((1, g.out_channels)))?;
            params.insert(format!("block{}.gamma", k + 1), Mat::ones((1, g.out_channels)))?;
            params.insert(format!("block{}.beta", k + 1), Mat::zeros((1, g.out_channels)))?;
        }
        let last = geometry.last().expect("non-empty plan").out_channels;
        params.insert("head.w", glorot(last, 1, &mut rng))?;
        params.insert("head.b", Mat::zeros((1, 1)))?;
        let running = geometry.iter().map(|g| RunningStats::new(g.out_channels)).collect();
        Ok(Self {
            config,
            params,
            running,
        })
    }

    fn head_geometry(&self) -> TransposedConv {
        TransposedConv {
            in_channels: self.config.blocks.last().expect("non-empty plan").channels,
            out_channels: 1,
            in_len: self.config.horizon,
            kernel: 1,
            stride: 1,
            padding: 0,
        }
    }

    /// Forward pass over all nodes at once (one row per node). Training mode
    /// normalizes with batch statistics and updates `running`.
    fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: &Array1<f64>,
        running: &mut [RunningStats],
        training: bool,
    ) -> Result<Var> {
        let mut h = tape.constant(x.clone().insert_axis(Axis(1)));
        for (k, g) in self.config.geometry()?.into_iter().enumerate() {
            let p = |s: &str| bound.var(&self.params, &format!("block{}.{s}", k + 1));
            h = conv1d_transposed_block(tape, h, p("w")?, p("b")?, p("gamma")?, p("beta")?, g, &mut running[k], training)?;
        }
        let w = bound.var(&self.params, "head.w")?;
        let b = bound.var(&self.params, "head.b")?;
        let logits = tape.transposed_conv(h, w, b, self.head_geometry())?;
        Ok(tape.sigmoid(logits))
    }

    pub fn forward_value(&self, x: &Array1<f64>) -> Result<Mat> {
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let mut running = self.running.clone();
        let out = self.forward(&mut tape, &bound, x, &mut running, false)?;
        Ok(tape.value(out).clone())
    }

    /// Output for externally supplied parameters, in store order.
    pub fn forward_from_inputs(&self, tape: &mut Tape, vars: &[Var], x: &Array1<f64>, training: bool) -> Result<Var> {
        let mut running = self.running.clone();
        self.forward(tape, &Bound::from_vars(vars.to_vec()), x, &mut running, training)
    }
}

impl Model for CnnTime {
    fn kind(&self) -> ModelKind {
        ModelKind::CnnTime
    }

    fn horizon(&self) -> usize {
        self.config.horizon
    }

    fn accumulate_gradients(&mut self, ctx: &GraphContext, sample: &Sample, scale: f64, _rng: &mut Rng) -> Result<f64> {
        check_len(&sample.x.x, ctx.num_nodes())?;
        let y = target(sample, ctx.num_nodes(), self.config.horizon)?;
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let mut running = self.running.clone();
        let pred = self.forward(&mut tape, &bound, &sample.x.x, &mut running, true)?;
        let loss = bce_step(&mut tape, pred, y, &mut self.params, &bound, scale)?;
        self.running = running;
        Ok(loss)
    }

    fn eval_loss(&self, ctx: &GraphContext, sample: &Sample, rng: &mut Rng) -> Result<f64> {
        let y = target(sample, ctx.num_nodes(), self.config.horizon)?;
        Ok(bce_value(&self.predict(ctx, &sample.x.x, rng)?, &y))
    }

    fn predict(&self, ctx: &GraphContext, x: &Array1<f64>, _rng: &mut Rng) -> Result<Mat> {
        check_len(x, ctx.num_nodes())?;
        self.forward_value(x)
    }

    fn stores(&self) -> Vec<&ParameterStore> {
        vec![&self.params]
    }

    fn stores_mut(&mut self) -> Vec<&mut ParameterStore> {
        vec![&mut self.params]
    }

    fn manifest(&self) -> Manifest {
        let mut widths = vec![1];
        widths.extend(self.config.blocks.iter().map(|b| b.channels));
        widths.push(1);
        Manifest {
            format_version: FORMAT_VERSION,
            model_type: ModelKind::CnnTime.as_str().into(),
            feature_widths: widths,
            horizon: self.config.horizon,
            seed: self.params.seed,
            extra: serde_json::json!({ "plan": self.config.blocks }),
        }
    }

    fn arrays(&self) -> Vec<(String, Mat)> {
        let mut out = export_store("params", &self.params);
        for (k, r) in self.running.iter().enumerate() {
            let c = r.mean.len();
            out.push((format!("running/block{}.mean", k + 1), Mat::from_shape_vec((1, c), r.mean.clone()).expect("row")));
            out.push((format!("running/block{}.var", k + 1), Mat::from_shape_vec((1, c), r.var.clone()).expect("row")));
        }
        out
    }

    fn load_arrays(&mut self, arrays: &[(String, Mat)]) -> Result<()> {
        import_store("params", &mut self.params, arrays)?;
        for (k, r) in self.running.iter_mut().enumerate() {
            for (field, slot) in [("mean", &mut r.mean), ("var", &mut r.var)] {
                let key = format!("running/block{}.{field}", k + 1);
                let (_, v) = arrays
                    .iter()
                    .find(|(n, _)| *n == key)
                    .ok_or_else(|| Error::Checkpoint(format!("missing array `{key}`")))?;
                if v.len() != slot.len() {
                    return Err(Error::Checkpoint(format!("`{key}` has the wrong length")));
                }
                *slot = v.iter().copied().collect();
            }
        }
        Ok(())
    }

    fn box_clone(&self) -> Box<dyn Model> {
        Box::new(self.clone())
    }
}
