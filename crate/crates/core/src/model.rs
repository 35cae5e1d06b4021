//! Common interface of trainable reconstruction models.

use std::fmt;
use std::str::FromStr;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::checkpoint::Manifest;
use crate::nn::{GraphContext, Mat, ParameterStore};
use crate::rng::Rng;
use crate::sirs::Sample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    #[serde(rename = "ddmix")]
    DDmix,
    Mlp,
    #[serde(alias = "cnn-nodes")]
    CnnNodes,
    #[serde(alias = "cnn-time")]
    CnnTime,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [
        ModelKind::DDmix,
        ModelKind::Mlp,
        ModelKind::CnnNodes,
        ModelKind::CnnTime,
    ];

    /// Identifier used in checkpoints and reports.
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::DDmix => "ddmix",
            ModelKind::Mlp => "mlp",
            ModelKind::CnnNodes => "cnn_nodes",
            ModelKind::CnnTime => "cnn_time",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "ddmix" => Ok(ModelKind::DDmix),
            "mlp" => Ok(ModelKind::Mlp),
            "cnn_nodes" => Ok(ModelKind::CnnNodes),
            "cnn_time" => Ok(ModelKind::CnnTime),
            other => Err(Error::Config(format!("unknown model `{other}`"))),
        }
    }
}

/// A model mapping an aggregated observation to an `N x T` matrix of
/// infection probabilities.
pub trait Model {
    fn kind(&self) -> ModelKind;

    fn horizon(&self) -> usize;

    /// Errors when the model cannot run on an `n`-node graph.
    fn check_num_nodes(&self, _n: usize) -> Result<()> {
        Ok(())
    }

    /// Adds `scale * dLoss/dParams` for one sample to the gradient slots and
    /// returns the (unscaled) training loss.
    fn accumulate_gradients(
        &mut self,
        ctx: &GraphContext,
        sample: &Sample,
        scale: f64,
        rng: &mut Rng,
    ) -> Result<f64>;

    /// Training objective evaluated without gradients or state updates.
    fn eval_loss(&self, ctx: &GraphContext, sample: &Sample, rng: &mut Rng) -> Result<f64>;

    /// Reconstructed `N x T` probabilities.
    fn predict(&self, ctx: &GraphContext, x: &Array1<f64>, rng: &mut Rng) -> Result<Mat>;

    fn stores(&self) -> Vec<&ParameterStore>;

    fn stores_mut(&mut self) -> Vec<&mut ParameterStore>;

    fn manifest(&self) -> Manifest;

    /// Every array needed to restore the model, trainable or not.
    fn arrays(&self) -> Vec<(String, Mat)>;

    fn load_arrays(&mut self, arrays: &[(String, Mat)]) -> Result<()>;

    fn box_clone(&self) -> Box<dyn Model>;

    fn zero_grad(&mut self) {
        for s in self.stores_mut() {
            s.zero_grad();
        }
    }

    fn num_parameters(&self) -> usize {
        self.stores().iter().map(|s| s.num_scalars()).sum()
    }
}

impl Clone for Box<dyn Model> {
    fn clone(&self) -> Self {
        self.box_clone()
    }
}

/// Prefixes store parameter names with `group.` for serialization.
pub(crate) fn export_store(group: &str, store: &ParameterStore) -> Vec<(String, Mat)> {
    store
        .iter()
        .map(|(n, v)| (format!("{group}/{n}"), v.clone()))
        .collect()
}

/// Copies arrays named `group/<name>` back into `store`, checking shapes.
pub(crate) fn import_store(group: &str, store: &mut ParameterStore, arrays: &[(String, Mat)]) -> Result<()> {
    let names: Vec<String> = store.names().to_vec();
    for name in names {
        let key = format!("{group}/{name}");
        let (_, value) = arrays
            .iter()
            .find(|(k, _)| *k == key)
            .ok_or_else(|| Error::Checkpoint(format!("missing array `{key}`")))?;
        let slot = store.get_mut(&name).expect("name from store");
        if slot.dim() != value.dim() {
            return Err(Error::Checkpoint(format!(
                "`{key}` has shape {:?}, expected {:?}",
                value.dim(),
                slot.dim()
            )));
        }
        slot.assign(value);
    }
    Ok(())
}
