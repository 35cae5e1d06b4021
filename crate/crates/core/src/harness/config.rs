use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::ddmix::LossWeights;
use crate::error::{Error, Result};
use crate::model::ModelKind;
use crate::nn::{AdamConfig, PoolConnectivity};
use crate::sirs::SirsParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExperimentKind {
    Density,
    Size,
    Trainsize,
    School,
}

impl ExperimentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentKind::Density => "density",
            ExperimentKind::Size => "size",
            ExperimentKind::Trainsize => "trainsize",
            ExperimentKind::School => "school",
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExperimentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "density" => Ok(ExperimentKind::Density),
            "size" => Ok(ExperimentKind::Size),
            "trainsize" => Ok(ExperimentKind::Trainsize),
            "school" => Ok(ExperimentKind::School),
            other => Err(Error::Config(format!("unknown experiment `{other}`"))),
        }
    }
}

/// Arithmetic precision of trained parameters. `F32` rounds every parameter
/// to single precision after each optimizer step; computation stays in f64.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::Config(format!("unknown precision `{other}`"))),
        }
    }
}

/// Every knob of an experiment run, read from a flat TOML document whose keys
/// are exactly the field names. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,

    /// Nodes of the training graph.
    pub num_nodes: usize,
    /// Connection radius of the training graph.
    pub radius: f64,
    pub dimension: usize,
    /// Radius multipliers of the density experiment's test graphs.
    pub density_multipliers: Vec<f64>,
    /// Test-graph sizes of the size experiment, paired with `size_radii`.
    pub sizes: Vec<usize>,
    pub size_radii: Vec<f64>,
    /// Training-set sizes of the trainsize sweep (0 = untrained).
    pub train_sizes: Vec<usize>,

    /// Contact log of the school experiment.
    pub contact_path: Option<String>,
    /// Contacts per day needed for an edge (strictly more than this).
    pub min_contacts: usize,
    /// Day indices (in chronological order) of the school training and test
    /// graphs.
    pub train_day: usize,
    pub test_day: usize,
    /// Classes whose nodes never seed training epidemics.
    pub dropped_classes: usize,

    pub beta: f64,
    pub delta: f64,
    pub gamma: f64,
    pub horizons: Vec<usize>,

    /// Training plus validation samples.
    pub train_samples: usize,
    pub test_samples: usize,
    pub validation_fraction: f64,

    pub models: Vec<ModelKind>,
    pub eta1: f64,
    pub eta2: f64,
    pub eta3: f64,
    pub sigma_y_sq: f64,
    pub pool_connectivity: PoolConnectivity,
    pub num_draws: usize,
    pub cnn_time_channels: usize,

    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub precision: Precision,

    /// Master seed; repeat `r` uses `seed + r`.
    pub seed: u64,
    pub repeats: usize,
    /// When false, `wall_s` is reported as 0 so reruns are byte-identical.
    pub record_wall_time: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            experiment: ExperimentKind::Density,
            num_nodes: 100,
            radius: 0.25,
            dimension: 3,
            density_multipliers: vec![1.0, 1.2, 0.7],
            sizes: vec![100, 250, 500, 1000],
            size_radii: vec![0.25, 0.15, 0.1, 0.075],
            train_sizes: vec![0, 4, 8, 16, 32, 64, 128, 256, 512, 1024, 2048, 4500],
            contact_path: None,
            min_contacts: 2,
            train_day: 0,
            test_day: 1,
            dropped_classes: 4,
            beta: 0.15,
            delta: 0.1,
            gamma: 0.01,
            horizons: vec![10, 20],
            train_samples: 4500,
            test_samples: 500,
            validation_fraction: 0.1,
            models: ModelKind::ALL.to_vec(),
            eta1: 1.0,
            eta2: 1e-6,
            eta3: 1.0,
            sigma_y_sq: 1.0,
            pool_connectivity: PoolConnectivity::default(),
            num_draws: 1,
            cnn_time_channels: 16,
            lr: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 4,
            max_epochs: 50,
            patience: 5,
            precision: Precision::F64,
            seed: 0,
            repeats: 1,
            record_wall_time: true,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.into()));
        if self.num_nodes < 1 || self.test_samples < 1 || self.repeats < 1 {
            return fail("num_nodes, test_samples and repeats must be >= 1");
        }
        if self.train_samples < 1 && self.experiment != ExperimentKind::Trainsize {
            return fail("train_samples must be >= 1");
        }
        if self.batch_size < 1 || self.max_epochs < 1 {
            return fail("batch_size and max_epochs must be >= 1");
        }
        if self.patience > self.max_epochs {
            return fail("patience must not exceed max_epochs");
        }
        if self.horizons.is_empty() || self.horizons.contains(&0) {
            return fail("horizons must be non-empty and positive");
        }
        if self.models.is_empty() {
            return fail("no models selected");
        }
        if !(self.radius > 0.0) || !(2..=3).contains(&self.dimension) {
            return fail("radius must be positive and dimension 2 or 3");
        }
        if self.sizes.len() != self.size_radii.len() {
            return fail("sizes and size_radii differ in length");
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return fail("validation_fraction must lie in [0, 1)");
        }
        if self.num_draws < 1 || self.cnn_time_channels < 1 {
            return fail("num_draws and cnn_time_channels must be >= 1");
        }
        if !(self.lr >= 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("invalid optimizer settings");
        }
        self.sirs()?;
        self.loss_weights().validate()
    }

    pub fn sirs(&self) -> Result<SirsParams> {
        SirsParams::new(self.beta, self.delta, self.gamma)
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            eta1: self.eta1,
            eta2: self.eta2,
            eta3: self.eta3,
            sigma_y_sq: self.sigma_y_sq,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.repeats as u64).map(|r| self.seed.wrapping_add(r)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_training_protocol() {
        let c = ExperimentConfig::default();
        assert_eq!((c.batch_size, c.max_epochs, c.patience), (4, 50, 5));
        assert_eq!(c.adam(), AdamConfig::default());
        c.validate().unwrap();
    }

    #[test]
    fn toml_round_trip_and_unknown_keys() {
        let c = ExperimentConfig::from_toml_str("num_nodes = 20\nmodels = [\"ddmix\", \"cnn_time\"]\nseed = 9\n").unwrap();
        assert_eq!(c.num_nodes, 20);
        assert_eq!(c.models, vec![ModelKind::DDmix, ModelKind::CnnTime]);
        let again = ExperimentConfig::from_toml_str(&c.to_toml_string().unwrap()).unwrap();
        assert_eq!(again, c);
        assert!(matches!(
            ExperimentConfig::from_toml_str("num_nodez = 3"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn invalid_counts_are_rejected() {
        for text in ["test_samples = 0", "patience = 60", "horizons = []", "batch_size = 0"] {
            assert!(ExperimentConfig::from_toml_str(text).is_err(), "{text}");
        }
        assert!(ExperimentConfig::from_toml_str("experiment = \"trainsize\"\ntrain_samples = 0").is_ok());
    }
}
