use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, ExperimentKind};
use crate::error::{Error, Result};

pub const CSV_HEADER: &str =
    "experiment,model,graph,N,T,density_mult,train_samples,seed,mse,top1,top3,top5,epochs,wall_s";

/// One line of the metrics table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub experiment: String,
    pub model: String,
    pub graph: String,
    #[serde(rename = "N")]
    pub num_nodes: usize,
    #[serde(rename = "T")]
    pub horizon: usize,
    pub density_mult: f64,
    pub train_samples: usize,
    pub seed: u64,
    pub mse: f64,
    pub top1: Option<f64>,
    pub top3: Option<f64>,
    pub top5: Option<f64>,
    pub epochs: usize,
    pub wall_s: f64,
}

/// Evaluation of one trained model on one test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub row: MetricsRow,
    pub per_sample_mse: Vec<f64>,
}

fn csv_err(e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    Error::Parse {
        line,
        message: e.to_string(),
    }
}

/// Metrics table with the fixed header; floats use the shortest
/// representation that parses back to the same value.
pub fn to_csv(rows: &[MetricsRow]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(CSV_HEADER.split(',')).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::InvalidArgument(e.to_string()))
}

pub fn parse_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = r.headers().map_err(csv_err)?.iter().map(String::from).collect();
    if header.join(",") != CSV_HEADER {
        return Err(Error::Parse {
            line: 1,
            message: "missing metrics header".into(),
        });
    }
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub model: String,
    pub horizon: usize,
    pub seed: u64,
    pub train_samples: usize,
    pub path: PathBuf,
    pub sha256: String,
}

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub config: ExperimentConfig,
    pub seeds: Vec<u64>,
    pub checkpoints: Vec<CheckpointEntry>,
    /// School experiment: classes excluded as training sources, per seed.
    pub dropped_classes: BTreeMap<u64, Vec<String>>,
}

impl RunManifest {
    pub fn new(config: &ExperimentConfig) -> Self {
        Self {
            version: env!("CARGO_PKG_VERSION").into(),
            config: config.clone(),
            seeds: config.seeds(),
            checkpoints: Vec::new(),
            dropped_classes: BTreeMap::new(),
        }
    }
}

fn x_value(kind: &str, r: &MetricsRow) -> f64 {
    match kind.parse::<ExperimentKind>() {
        Ok(ExperimentKind::Size) => r.num_nodes as f64,
        Ok(ExperimentKind::Trainsize) => r.train_samples as f64,
        _ => r.density_mult,
    }
}

/// Per `(experiment, model, T)` series of `x  mean_mse  std_mse  count`,
/// with `x` the swept quantity. Keys are file stems.
pub fn dat_series(rows: &[MetricsRow]) -> BTreeMap<String, String> {
    let mut groups: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for r in rows {
        let key = format!("{}_{}_T{}", r.experiment, r.model, r.horizon);
        groups.entry(key).or_default().push((x_value(&r.experiment, r), r.mse));
    }
    groups
        .into_iter()
        .map(|(key, mut points)| {
            points.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut text = String::from("# x mean_mse std_mse count\n");
            let mut i = 0;
            while i < points.len() {
                let x = points[i].0;
                let ys: Vec<f64> = points[i..].iter().take_while(|p| p.0 == x).map(|p| p.1).collect();
                i += ys.len();
                let mean = ys.iter().sum::<f64>() / ys.len() as f64;
                let var = ys.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / ys.len() as f64;
                writeln!(text, "{x} {mean} {} {}", var.sqrt(), ys.len()).expect("string write");
            }
            (key, text)
        })
        .collect()
}

/// Writes `metrics.csv`, `manifest.json` and one `.dat` file per series into
/// `dir`. Returns the written paths.
pub fn export_report(reports: &[MetricsReport], manifest: &RunManifest, dir: &Path) -> Result<Vec<PathBuf>> {
    if reports.is_empty() {
        return Err(Error::InvalidArgument("no reports to export".into()));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let rows: Vec<MetricsRow> = reports.iter().map(|r| r.row.clone()).collect();
    let mut written = Vec::new();
    let mut put = |name: String, content: String| -> Result<()> {
        let p = dir.join(name);
        std::fs::write(&p, content).map_err(|e| Error::io(&p, e))?;
        written.push(p);
        Ok(())
    };
    put("metrics.csv".into(), to_csv(&rows)?)?;
    put("manifest.json".into(), serde_json::to_string_pretty(manifest)? + "\n")?;
    for (stem, text) in dat_series(&rows) {
        put(format!("{stem}.dat"), text)?;
    }
    Ok(written)
}
