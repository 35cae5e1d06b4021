use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Precision};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::{adam_step, checkpoint, AdamConfig, GraphContext, OptimizerState};
use crate::rng;
use crate::sirs::Sample;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub validation_fraction: f64,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            batch_size: 4,
            max_epochs: 50,
            patience: 5,
            validation_fraction: 0.1,
            precision: Precision::F64,
        }
    }
}

impl From<&ExperimentConfig> for TrainConfig {
    fn from(c: &ExperimentConfig) -> Self {
        Self {
            adam: c.adam(),
            batch_size: c.batch_size,
            max_epochs: c.max_epochs,
            patience: c.patience,
            validation_fraction: c.validation_fraction,
            precision: c.precision,
        }
    }
}

/// Patience rule on a stream of validation losses. Only strict decreases
/// count as improvement.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    epochs: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            epochs: 0,
        }
    }

    /// Records the next epoch's loss. Returns `true` when this epoch is a
    /// new best.
    pub fn observe(&mut self, loss: f64) -> bool {
        self.epochs += 1;
        if loss < self.best || self.best_epoch == 0 {
            self.best = loss;
            self.best_epoch = self.epochs;
            true
        } else {
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.epochs - self.best_epoch >= self.patience && self.patience > 0
    }

    /// 1-based epoch of the best loss so far.
    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best(&self) -> f64 {
        self.best
    }
}

/// Replays the stopping rule on a precomputed validation trace. Returns the
/// 1-based `(stopping epoch, best epoch)`.
pub fn stopping_point(val_losses: &[f64], patience: usize, max_epochs: usize) -> (usize, usize) {
    let mut es = EarlyStopping::new(patience);
    let mut stop = 0;
    for &l in val_losses.iter().take(max_epochs) {
        es.observe(l);
        stop += 1;
        if es.should_stop() {
            break;
        }
    }
    (stop, es.best_epoch())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub train_losses: Vec<f64>,
    pub val_losses: Vec<f64>,
    /// Number of epochs run.
    pub stopping_epoch: usize,
    /// Epoch whose parameters were kept (0 when no training happened).
    pub best_epoch: usize,
    pub wall_s: f64,
    pub checkpoint: Option<PathBuf>,
    pub checkpoint_sha256: Option<String>,
}

/// Splits sample indices into training and validation parts by position.
pub fn split_indices(n: usize, validation_fraction: f64) -> (Vec<usize>, Vec<usize>) {
    if n < 2 {
        return ((0..n).collect(), (0..n).collect());
    }
    let n_val = ((n as f64 * validation_fraction).round() as usize).clamp(1, n - 1);
    let n_train = n - n_val;
    ((0..n_train).collect(), (n_train..n).collect())
}

fn mean_eval_loss(model: &dyn Model, ctx: &GraphContext, samples: &[&Sample], seed: u64) -> Result<f64> {
    let mut r = rng::root(seed);
    let mut total = 0.0;
    for s in samples {
        total += model.eval_loss(ctx, s, &mut r)?;
    }
    Ok(total / samples.len() as f64)
}

/// Minibatch Adam with early stopping on the validation loss. The model ends
/// up holding the best-validation parameters. With `checkpoint_path` set they
/// are also written there.
pub fn train(
    model: &mut dyn Model,
    ctx: &GraphContext,
    samples: &[Sample],
    cfg: &TrainConfig,
    seed: u64,
    checkpoint_path: Option<&Path>,
) -> Result<TrainReport> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    if cfg.batch_size < 1 || cfg.max_epochs < 1 {
        return Err(Error::Config("batch_size and max_epochs must be >= 1".into()));
    }
    model.check_num_nodes(ctx.num_nodes())?;
    let start = Instant::now();
    let (train_idx, val_idx) = split_indices(samples.len(), cfg.validation_fraction);
    let val: Vec<&Sample> = val_idx.iter().map(|&i| &samples[i]).collect();
    let mut order = train_idx;

    let mut shuffle_rng = rng::root(rng::derive_seed(seed, 1));
    let mut noise_rng = rng::root(rng::derive_seed(seed, 2));
    let val_seed = rng::derive_seed(seed, 3);
    let mut opt: Vec<OptimizerState> = model.stores().iter().map(|s| OptimizerState::for_store(s)).collect();

    let mut es = EarlyStopping::new(cfg.patience);
    let mut best = model.box_clone();
    let (mut train_losses, mut val_losses) = (Vec::new(), Vec::new());

    for _ in 0..cfg.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            model.zero_grad();
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                epoch_loss += model.accumulate_gradients(ctx, &samples[i], scale, &mut noise_rng)?;
            }
            for (store, state) in model.stores_mut().into_iter().zip(&mut opt) {
                adam_step(store, state, &cfg.adam)?;
                if cfg.precision == Precision::F32 {
                    store.round_to_f32();
                }
            }
        }
        train_losses.push(epoch_loss / order.len() as f64);
        let v = mean_eval_loss(model, ctx, &val, val_seed)?;
        if !v.is_finite() {
            return Err(Error::Domain(format!("validation loss became {v}")));
        }
        val_losses.push(v);
        if es.observe(v) {
            best = model.box_clone();
        }
        if es.should_stop() {
            break;
        }
    }
    let stopping_epoch = val_losses.len();
    model.load_arrays(&best.arrays())?;

    let (checkpoint, checkpoint_sha256) = match checkpoint_path {
        Some(p) => {
            let hash = checkpoint::save(p, &model.manifest(), &model.arrays())?;
            (Some(p.to_path_buf()), Some(hash))
        }
        None => (None, None),
    };
    Ok(TrainReport {
        train_losses,
        val_losses,
        stopping_epoch,
        best_epoch: es.best_epoch(),
        wall_s: start.elapsed().as_secs_f64(),
        checkpoint,
        checkpoint_sha256,
    })
}
