//! DDmix: a graph conditional VAE that reconstructs an epidemic's time
//! series from its temporal aggregate.
//!
//! Three networks share one graph context:
//!
//! * the prior `p_phi(z | x)` maps the aggregate (one feature per node) to a
//!   node-wise Gaussian over `T` latent features,
//! * the posterior `q_psi(z | Y)` does the same from the full series and is
//!   only used during training,
//! * the deprojection `g_theta(x, z)` decodes a latent draw, together with
//!   the aggregate, into per-node infection probabilities.
//!
//! Training minimizes `KL(q || p) + eta1 * BCE + eta2 * |params|^2 +
//! eta3 * locality`, where the locality term penalizes infections that
//! appear outside the closed neighbourhood of the previous step's
//! infections.

use std::rc::Rc;

use ndarray::{Array1, Axis};
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{export_store, import_store, Model, ModelKind};
use crate::nn::checkpoint::{Manifest, FORMAT_VERSION};
use crate::nn::layers::{gcn, reparametrize, standard_normal};
use crate::nn::params::{glorot, Bound};
use crate::nn::tape::{bce_value, kl_value, locality_value};
use crate::nn::{Activation, GUNetBlock, GraphContext, Mat, ParameterStore, PoolConnectivity, Tape, Var};
use crate::rng::{self, Rng};
use crate::sirs::Sample;

/// Node-wise diagonal Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentDistribution {
    pub mu: Mat,
    pub sigma: Mat,
}

impl LatentDistribution {
    pub fn new(mu: Mat, sigma: Mat) -> Result<Self> {
        if mu.dim() != sigma.dim() {
            return Err(Error::Dimension("mu and sigma differ in shape".into()));
        }
        if sigma.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Domain("sigma must be positive".into()));
        }
        Ok(Self { mu, sigma })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub eta1: f64,
    pub eta2: f64,
    pub eta3: f64,
    /// Output noise variance of the Gaussian observation model. Carried as
    /// metadata only: the reconstruction term is a cross-entropy.
    pub sigma_y_sq: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            eta1: 1.0,
            eta2: 1e-6,
            eta3: 1.0,
            sigma_y_sq: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.eta1, self.eta2, self.eta3].iter().any(|&e| !(e >= 0.0)) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// The four loss terms and their weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub kl: f64,
    pub bce: f64,
    pub l2: f64,
    pub locality: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn compose(kl: f64, bce: f64, l2: f64, locality: f64, w: &LossWeights) -> Self {
        Self {
            kl,
            bce,
            l2,
            locality,
            total: kl + w.eta1 * bce + w.eta2 * l2 + w.eta3 * locality,
        }
    }
}

/// Parameters of the prior (`phi`), posterior (`psi`) and deprojection
/// (`theta`) networks.
#[derive(Debug, Clone, PartialEq)]
pub struct DDmixParams {
    pub phi: ParameterStore,
    pub psi: ParameterStore,
    pub theta: ParameterStore,
    pub horizon: usize,
}

const PRIOR: &str = "prior";
const POSTERIOR: &str = "posterior";

fn encoder_block(prefix: &str, in_features: usize, horizon: usize) -> GUNetBlock {
    GUNetBlock::new(&format!("{prefix}.unet"), in_features, horizon, Activation::Relu)
}

fn deprojection_blocks(horizon: usize) -> (GUNetBlock, GUNetBlock) {
    (
        GUNetBlock::new("deproj.encode", 1, horizon, Activation::Relu),
        GUNetBlock::new("deproj.decode", 2 * horizon, horizon, Activation::Identity),
    )
}

impl DDmixParams {
    /// Glorot weights, unit-norm projections; deterministic in `seed`.
    pub fn init(horizon: usize, seed: u64) -> Result<Self> {
        if horizon < 1 {
            return Err(Error::InvalidArgument("horizon must be >= 1".into()));
        }
        let mut rng = rng::root(seed);
        let encoder = |prefix: &str, in_features: usize, rng: &mut Rng| -> Result<ParameterStore> {
            let mut s = ParameterStore::new(seed);
            encoder_block(prefix, in_features, horizon).init(&mut s, rng)?;
            s.insert(format!("{prefix}.mu"), glorot(horizon, horizon, rng))?;
            s.insert(format!("{prefix}.log_sigma"), glorot(horizon, horizon, rng))?;
            Ok(s)
        };
        let phi = encoder(PRIOR, 1, &mut rng)?;
        let psi = encoder(POSTERIOR, horizon, &mut rng)?;
        let mut theta = ParameterStore::new(seed);
        let (enc, dec) = deprojection_blocks(horizon);
        enc.init(&mut theta, &mut rng)?;
        dec.init(&mut theta, &mut rng)?;
        Ok(Self {
            phi,
            psi,
            theta,
            horizon,
        })
    }

    /// Sum of squared entries over all three groups.
    pub fn l2_penalty(&self) -> f64 {
        self.phi.sum_squares() + self.psi.sum_squares() + self.theta.sum_squares()
    }

    pub fn stores(&self) -> [&ParameterStore; 3] {
        [&self.phi, &self.psi, &self.theta]
    }
}

/// Parameter groups bound to one tape.
struct BoundParams<'a> {
    params: &'a DDmixParams,
    phi: Bound,
    psi: Bound,
    theta: Bound,
}

impl<'a> BoundParams<'a> {
    fn trainable(tape: &mut Tape, params: &'a DDmixParams) -> Self {
        Self {
            params,
            phi: params.phi.bind(tape),
            psi: params.psi.bind(tape),
            theta: params.theta.bind(tape),
        }
    }

    fn frozen(tape: &mut Tape, params: &'a DDmixParams) -> Self {
        Self {
            params,
            phi: params.phi.bind_frozen(tape),
            psi: params.psi.bind_frozen(tape),
            theta: params.theta.bind_frozen(tape),
        }
    }
}

/// Graph U-Net followed by parallel GCN heads for `mu` and `log sigma`.
fn encode(
    tape: &mut Tape,
    ctx: &GraphContext,
    norm: Var,
    input: Var,
    prefix: &str,
    horizon: usize,
    store: &ParameterStore,
    bound: &Bound,
) -> Result<(Var, Var)> {
    let in_features = tape.shape(input).1;
    let hidden = encoder_block(prefix, in_features, horizon).forward(tape, ctx, norm, input, store, bound)?;
    let w_mu = bound.var(store, &format!("{prefix}.mu"))?;
    let w_sigma = bound.var(store, &format!("{prefix}.log_sigma"))?;
    let mu = gcn(tape, norm, hidden, w_mu, Activation::Identity)?;
    let log_sigma = gcn(tape, norm, hidden, w_sigma, Activation::Identity)?;
    let sigma = tape.exp(log_sigma);
    Ok((mu, sigma))
}

fn deproject(
    tape: &mut Tape,
    ctx: &GraphContext,
    norm: Var,
    x: Var,
    z: Var,
    horizon: usize,
    store: &ParameterStore,
    bound: &Bound,
) -> Result<Var> {
    let (enc, dec) = deprojection_blocks(horizon);
    let encoded = enc.forward(tape, ctx, norm, x, store, bound)?;
    let joined = tape.concat_cols(encoded, z)?;
    let logits = dec.forward(tape, ctx, norm, joined, store, bound)?;
    Ok(tape.sigmoid(logits))
}

fn check_x(x: &Array1<f64>, ctx: &GraphContext) -> Result<Mat> {
    if x.len() != ctx.num_nodes() {
        return Err(Error::Dimension(format!(
            "observation of length {} on a {}-node graph",
            x.len(),
            ctx.num_nodes()
        )));
    }
    Ok(x.clone().insert_axis(Axis(1)))
}

fn check_y(y: &Mat, ctx: &GraphContext, horizon: usize) -> Result<()> {
    if y.dim() != (ctx.num_nodes(), horizon) {
        return Err(Error::Dimension(format!(
            "series of shape {:?}, expected ({}, {horizon})",
            y.dim(),
            ctx.num_nodes()
        )));
    }
    Ok(())
}

fn read_latent(tape: &Tape, mu: Var, sigma: Var) -> LatentDistribution {
    LatentDistribution {
        mu: tape.value(mu).clone(),
        sigma: tape.value(sigma).clone(),
    }
}

/// `p_phi(z | x)`.
pub fn prior_network(x: &Array1<f64>, ctx: &GraphContext, params: &DDmixParams) -> Result<LatentDistribution> {
    let xm = check_x(x, ctx)?;
    let mut tape = Tape::new();
    let bp = BoundParams::frozen(&mut tape, params);
    let norm = tape.constant_rc(ctx.norm.clone());
    let input = tape.constant(xm);
    let (mu, sigma) = encode(&mut tape, ctx, norm, input, PRIOR, params.horizon, &params.phi, &bp.phi)?;
    Ok(read_latent(&tape, mu, sigma))
}

/// `q_psi(z | Y)`.
pub fn posterior_network(y: &Mat, ctx: &GraphContext, params: &DDmixParams) -> Result<LatentDistribution> {
    check_y(y, ctx, params.horizon)?;
    let mut tape = Tape::new();
    let bp = BoundParams::frozen(&mut tape, params);
    let norm = tape.constant_rc(ctx.norm.clone());
    let input = tape.constant(y.clone());
    let (mu, sigma) = encode(&mut tape, ctx, norm, input, POSTERIOR, params.horizon, &params.psi, &bp.psi)?;
    Ok(read_latent(&tape, mu, sigma))
}

/// `g_theta(x, z)`: probabilities in `(0, 1)`.
pub fn deprojection(x: &Array1<f64>, z: &Mat, ctx: &GraphContext, params: &DDmixParams) -> Result<Mat> {
    let xm = check_x(x, ctx)?;
    check_y(z, ctx, params.horizon)?;
    let mut tape = Tape::new();
    let bp = BoundParams::frozen(&mut tape, params);
    let norm = tape.constant_rc(ctx.norm.clone());
    let xv = tape.constant(xm);
    let zv = tape.constant(z.clone());
    let out = deproject(&mut tape, ctx, norm, xv, zv, params.horizon, &params.theta, &bp.theta)?;
    Ok(tape.value(out).clone())
}

/// Closed-form `KL(q || p)` summed over entries.
pub fn kl_gaussian(q: &LatentDistribution, p: &LatentDistribution) -> Result<f64> {
    if q.mu.dim() != p.mu.dim() || q.sigma.dim() != p.sigma.dim() || q.mu.dim() != q.sigma.dim() {
        return Err(Error::Dimension("distributions differ in shape".into()));
    }
    kl_value(&q.mu, &q.sigma, &p.mu, &p.sigma)
}

/// Mean entrywise binary cross-entropy with clamped predictions.
pub fn bce_loss(y_hat: &Mat, y: &Mat) -> Result<f64> {
    if y_hat.dim() != y.dim() {
        return Err(Error::Dimension("prediction and target differ in shape".into()));
    }
    Ok(bce_value(y_hat, y))
}

/// Sum of squares of every parameter.
pub fn l2_penalty(params: &DDmixParams) -> f64 {
    params.l2_penalty()
}

/// `sum_{t>=2} |[y(t) - (A + I) y(t-1)]_+|_1` with the raw adjacency `A`.
pub fn locality_penalty(y_hat: &Mat, adjacency: &Mat) -> Result<f64> {
    let n = y_hat.nrows();
    if adjacency.dim() != (n, n) {
        return Err(Error::Dimension(format!(
            "adjacency {:?} for {n} nodes",
            adjacency.dim()
        )));
    }
    let closed = adjacency + &Mat::eye(n);
    Ok(locality_value(y_hat, &closed).0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DDmixConfig {
    pub horizon: usize,
    pub weights: LossWeights,
    pub connectivity: PoolConnectivity,
    /// Latent draws averaged at test time.
    pub num_draws: usize,
}

impl DDmixConfig {
    pub fn new(horizon: usize) -> Self {
        Self {
            horizon,
            weights: LossWeights::default(),
            connectivity: PoolConnectivity::default(),
            num_draws: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DDmix {
    pub config: DDmixConfig,
    pub params: DDmixParams,
}

impl DDmix {
    pub fn new(config: DDmixConfig, seed: u64) -> Result<Self> {
        config.weights.validate()?;
        if config.num_draws < 1 {
            return Err(Error::Config("num_draws must be >= 1".into()));
        }
        Ok(Self {
            params: DDmixParams::init(config.horizon, seed)?,
            config,
        })
    }

    /// Builds the training loss on `tape` for fixed posterior noise `eps`.
    fn loss_on_tape(
        &self,
        tape: &mut Tape,
        bp: &BoundParams<'_>,
        ctx: &GraphContext,
        x: &Array1<f64>,
        y: &Mat,
        eps: Mat,
    ) -> Result<(Var, [Var; 4])> {
        let horizon = self.config.horizon;
        let xm = check_x(x, ctx)?;
        check_y(y, ctx, horizon)?;
        let params = bp.params;
        let norm = tape.constant_rc(ctx.norm.clone());
        let xv = tape.constant(xm);
        let yv = tape.constant(y.clone());
        let (mu_q, sigma_q) = encode(tape, ctx, norm, yv, POSTERIOR, horizon, &params.psi, &bp.psi)?;
        let (mu_p, sigma_p) = encode(tape, ctx, norm, xv, PRIOR, horizon, &params.phi, &bp.phi)?;
        let z = reparametrize(tape, mu_q, sigma_q, eps)?;
        let y_hat = deproject(tape, ctx, norm, xv, z, horizon, &params.theta, &bp.theta)?;

        let kl = tape.kl_gaussian(mu_q, sigma_q, mu_p, sigma_p)?;
        let bce = tape.bce(y_hat, Rc::new(y.clone()))?;
        let squares: Vec<(Var, f64)> = [&bp.phi, &bp.psi, &bp.theta]
            .iter()
            .flat_map(|b| b.vars().to_vec())
            .map(|v| (tape.sum_squares(v), 1.0))
            .collect();
        let l2 = tape.combine(&squares)?;
        let locality = tape.locality(y_hat, ctx.closed.clone())?;
        let w = &self.config.weights;
        let total = tape.combine(&[(kl, 1.0), (bce, w.eta1), (l2, w.eta2), (locality, w.eta3)])?;
        Ok((total, [kl, bce, l2, locality]))
    }

    /// Training loss for one `(x, Y)` pair with the posterior draw taken
    /// from `rng`. Gradients, scaled by `scale`, are added to the parameter
    /// slots.
    pub fn ddmix_loss(
        &mut self,
        ctx: &GraphContext,
        x: &Array1<f64>,
        y: &Mat,
        scale: f64,
        rng: &mut Rng,
    ) -> Result<LossBreakdown> {
        let eps = standard_normal((ctx.num_nodes(), self.config.horizon), rng);
        let mut tape = Tape::new();
        let params = self.params.clone();
        let bp = BoundParams::trainable(&mut tape, &params);
        let (total, parts) = self.loss_on_tape(&mut tape, &bp, ctx, x, y, eps)?;
        let grads = tape.backward(total)?;
        self.params.phi.accumulate(&bp.phi, &grads, scale);
        self.params.psi.accumulate(&bp.psi, &grads, scale);
        self.params.theta.accumulate(&bp.theta, &grads, scale);
        let [kl, bce, l2, loc] = parts.map(|v| tape.scalar(v));
        Ok(LossBreakdown {
            kl,
            bce,
            l2,
            locality: loc,
            total: tape.scalar(total),
        })
    }

    /// Loss value without gradients.
    pub fn loss_value(&self, ctx: &GraphContext, x: &Array1<f64>, y: &Mat, rng: &mut Rng) -> Result<LossBreakdown> {
        let eps = standard_normal((ctx.num_nodes(), self.config.horizon), rng);
        let mut tape = Tape::new();
        let bp = BoundParams::frozen(&mut tape, &self.params);
        let (total, parts) = self.loss_on_tape(&mut tape, &bp, ctx, x, y, eps)?;
        let [kl, bce, l2, loc] = parts.map(|v| tape.scalar(v));
        Ok(LossBreakdown {
            kl,
            bce,
            l2,
            locality: loc,
            total: tape.scalar(total),
        })
    }

    /// The loss as a function of externally supplied parameter arrays (in
    /// `phi, psi, theta` store order), for gradient checking.
    pub fn loss_from_inputs(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        ctx: &GraphContext,
        x: &Array1<f64>,
        y: &Mat,
        eps: Mat,
    ) -> Result<Var> {
        let (a, b) = (self.params.phi.len(), self.params.psi.len());
        if vars.len() != a + b + self.params.theta.len() {
            return Err(Error::Dimension("parameter count".into()));
        }
        let bp = BoundParams {
            params: &self.params,
            phi: Bound::from_vars(vars[..a].to_vec()),
            psi: Bound::from_vars(vars[a..a + b].to_vec()),
            theta: Bound::from_vars(vars[a + b..].to_vec()),
        };
        Ok(self.loss_on_tape(tape, &bp, ctx, x, y, eps)?.0)
    }

    /// All parameter arrays in `phi, psi, theta` store order.
    pub fn flat_parameters(&self) -> Vec<Mat> {
        self.params
            .stores()
            .iter()
            .flat_map(|s| s.values().to_vec())
            .collect()
    }

    /// Decodes one prior draw per noise matrix.
    pub fn decode_with_noise(&self, ctx: &GraphContext, x: &Array1<f64>, noise: &[Mat]) -> Result<Vec<Mat>> {
        let prior = prior_network(x, ctx, &self.params)?;
        noise
            .iter()
            .map(|eps| {
                let z = &prior.mu + &(&prior.sigma * eps);
                deprojection(x, &z, ctx, &self.params)
            })
            .collect()
    }

    /// Test-time reconstruction: `num_draws` prior draws, each from its own
    /// substream of one seed taken from `rng`, decoded and averaged.
    pub fn reconstruct(
        &self,
        ctx: &GraphContext,
        x: &Array1<f64>,
        rng: &mut Rng,
        num_draws: usize,
    ) -> Result<Mat> {
        let draws = self.reconstruct_draws(ctx, x, rng, num_draws)?;
        let mut mean = Mat::zeros(draws[0].dim());
        for d in &draws {
            mean += d;
        }
        Ok(mean / draws.len() as f64)
    }

    pub fn reconstruct_draws(
        &self,
        ctx: &GraphContext,
        x: &Array1<f64>,
        rng: &mut Rng,
        num_draws: usize,
    ) -> Result<Vec<Mat>> {
        if num_draws < 1 {
            return Err(Error::InvalidArgument("num_draws must be >= 1".into()));
        }
        let base = rng.next_u64();
        let shape = (ctx.num_nodes(), self.config.horizon);
        let noise: Vec<Mat> = (0..num_draws)
            .map(|d| standard_normal(shape, &mut rng::substream(base, d as u64)))
            .collect();
        self.decode_with_noise(ctx, x, &noise)
    }
}

impl Model for DDmix {
    fn kind(&self) -> ModelKind {
        ModelKind::DDmix
    }

    fn horizon(&self) -> usize {
        self.config.horizon
    }

    fn accumulate_gradients(&mut self, ctx: &GraphContext, sample: &Sample, scale: f64, rng: &mut Rng) -> Result<f64> {
        let y = sample.trajectory.y_f64();
        Ok(self.ddmix_loss(ctx, &sample.x.x, &y, scale, rng)?.total)
    }

    fn eval_loss(&self, ctx: &GraphContext, sample: &Sample, rng: &mut Rng) -> Result<f64> {
        let y = sample.trajectory.y_f64();
        Ok(self.loss_value(ctx, &sample.x.x, &y, rng)?.total)
    }

    fn predict(&self, ctx: &GraphContext, x: &Array1<f64>, rng: &mut Rng) -> Result<Mat> {
        self.reconstruct(ctx, x, rng, self.config.num_draws)
    }

    fn stores(&self) -> Vec<&ParameterStore> {
        self.params.stores().to_vec()
    }

    fn stores_mut(&mut self) -> Vec<&mut ParameterStore> {
        vec![&mut self.params.phi, &mut self.params.psi, &mut self.params.theta]
    }

    fn manifest(&self) -> Manifest {
        let t = self.config.horizon;
        Manifest {
            format_version: FORMAT_VERSION,
            model_type: ModelKind::DDmix.as_str().into(),
            feature_widths: vec![1, t, 2 * t, t],
            horizon: t,
            seed: self.params.phi.seed,
            extra: serde_json::json!({
                "eta1": self.config.weights.eta1,
                "eta2": self.config.weights.eta2,
                "eta3": self.config.weights.eta3,
                "sigma_y_sq": self.config.weights.sigma_y_sq,
                "pool_connectivity": self.config.connectivity,
                "num_draws": self.config.num_draws,
            }),
        }
    }

    fn arrays(&self) -> Vec<(String, Mat)> {
        let mut out = export_store("phi", &self.params.phi);
        out.extend(export_store("psi", &self.params.psi));
        out.extend(export_store("theta", &self.params.theta));
        out
    }

    fn load_arrays(&mut self, arrays: &[(String, Mat)]) -> Result<()> {
        import_store("phi", &mut self.params.phi, arrays)?;
        import_store("psi", &mut self.params.psi, arrays)?;
        import_store("theta", &mut self.params.theta, arrays)
    }

    fn box_clone(&self) -> Box<dyn Model> {
        Box::new(self.clone())
    }
}
