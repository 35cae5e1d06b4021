use std::path::Path;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, ExperimentKind};
use super::metrics::{evaluate_mse, source_class_ranking};
use super::report::{CheckpointEntry, MetricsReport, MetricsRow, RunManifest};
use super::train::{train, TrainConfig, TrainReport};
use crate::baselines::{CnnNodes, CnnNodesConfig, CnnTime, CnnTimeConfig, Mlp, MlpConfig};
use crate::ddmix::{DDmix, DDmixConfig, LossWeights};
use crate::error::{Error, Result};
use crate::graph::{group_by_day, load_contact_graph, parse_contact_records, random_geometric_graph, Graph, RggSpec};
use crate::model::{Model, ModelKind};
use crate::nn::checkpoint::{self, Manifest, FORMAT_VERSION};
use crate::nn::{GraphContext, Mat, PoolConnectivity};
use crate::rng::{self, derive_seed};
use crate::sirs::{generate_dataset, Dataset, Sample, SourceRule};

/// A freshly initialized model of the given kind.
pub fn build_model(kind: ModelKind, num_nodes: usize, horizon: usize, cfg: &ExperimentConfig, seed: u64) -> Result<Box<dyn Model>> {
    Ok(match kind {
        ModelKind::DDmix => {
            let mut c = DDmixConfig::new(horizon);
            c.weights = cfg.loss_weights();
            c.connectivity = cfg.pool_connectivity;
            c.num_draws = cfg.num_draws;
            Box::new(DDmix::new(c, seed)?)
        }
        ModelKind::Mlp => Box::new(Mlp::new(MlpConfig { num_nodes, horizon }, seed)?),
        ModelKind::CnnNodes => Box::new(CnnNodes::new(CnnNodesConfig::new(horizon), seed)?),
        ModelKind::CnnTime => Box::new(CnnTime::new(
            CnnTimeConfig::default_plan(horizon, cfg.cnn_time_channels)?,
            seed,
        )?),
    })
}

fn extra<T: serde::de::DeserializeOwned>(m: &Manifest, key: &str) -> Result<T> {
    let v = m
        .extra
        .get(key)
        .ok_or_else(|| Error::Checkpoint(format!("manifest lacks `{key}`")))?;
    serde_json::from_value(v.clone()).map_err(|e| Error::Checkpoint(format!("`{key}`: {e}")))
}

/// Rebuilds a model from a checkpoint's manifest and arrays.
pub fn model_from_checkpoint(m: &Manifest, arrays: &[(String, Mat)]) -> Result<Box<dyn Model>> {
    if m.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {}", m.format_version)));
    }
    let kind: ModelKind = m.model_type.parse().map_err(|_| Error::Checkpoint(format!("unknown model `{}`", m.model_type)))?;
    let mut model: Box<dyn Model> = match kind {
        ModelKind::DDmix => {
            let mut c = DDmixConfig::new(m.horizon);
            c.weights = LossWeights {
                eta1: extra(m, "eta1")?,
                eta2: extra(m, "eta2")?,
                eta3: extra(m, "eta3")?,
                sigma_y_sq: extra(m, "sigma_y_sq")?,
            };
            c.connectivity = extra(m, "pool_connectivity")?;
            c.num_draws = extra(m, "num_draws")?;
            Box::new(DDmix::new(c, m.seed)?)
        }
        ModelKind::Mlp => Box::new(Mlp::new(
            MlpConfig {
                num_nodes: extra(m, "N")?,
                horizon: m.horizon,
            },
            m.seed,
        )?),
        ModelKind::CnnNodes => Box::new(CnnNodes::new(
            CnnNodesConfig {
                horizon: m.horizon,
                kernel: extra(m, "kernel")?,
            },
            m.seed,
        )?),
        ModelKind::CnnTime => Box::new(CnnTime::new(
            CnnTimeConfig {
                horizon: m.horizon,
                blocks: extra(m, "plan")?,
            },
            m.seed,
        )?),
    };
    model.load_arrays(arrays)?;
    Ok(model)
}

pub fn load_model(path: &Path) -> Result<Box<dyn Model>> {
    let (m, arrays) = checkpoint::load(path)?;
    model_from_checkpoint(&m, &arrays)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub mse: f64,
    pub per_sample_mse: Vec<f64>,
    /// Top-1/3/5 source-class accuracy, when the graph has classes.
    pub topk: Option<[f64; 3]>,
}

pub const TOPK: [usize; 3] = [1, 3, 5];

/// Test MSE of `model` on `samples` simulated over `graph`. Source-class
/// accuracies are included when the graph carries node classes.
pub fn evaluate(
    model: &dyn Model,
    graph: &Graph,
    samples: &[Sample],
    connectivity: PoolConnectivity,
    seed: u64,
) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("empty test set".into()));
    }
    model.check_num_nodes(graph.num_nodes())?;
    let ctx = GraphContext::new(graph, connectivity);
    let mut r = rng::root(seed);
    let mut per_sample_mse = Vec::with_capacity(samples.len());
    let mut hits = [0usize; 3];
    for s in samples {
        let y_hat = model.predict(&ctx, &s.x.x, &mut r)?;
        per_sample_mse.push(evaluate_mse(&y_hat, &s.trajectory.y_f64())?);
        if let Some(classes) = graph.node_classes() {
            let ranking = source_class_ranking(&y_hat, classes)?;
            let truth = &classes[s.source[0]];
            for (h, &k) in hits.iter_mut().zip(&TOPK) {
                *h += usize::from(ranking.hit(truth, k));
            }
        }
    }
    let n = samples.len() as f64;
    Ok(Evaluation {
        mse: per_sample_mse.iter().sum::<f64>() / n,
        per_sample_mse,
        topk: graph.node_classes().map(|_| hits.map(|h| h as f64 / n)),
    })
}

/// Trains a fresh model of `kind` on `train_samples` over `graph`. With zero
/// samples the model is returned untrained.
#[allow(clippy::too_many_arguments)]
pub fn fit_model(
    kind: ModelKind,
    graph: &Graph,
    horizon: usize,
    train_samples: &[Sample],
    cfg: &ExperimentConfig,
    init_seed: u64,
    train_seed: u64,
    checkpoint: Option<&Path>,
) -> Result<(Box<dyn Model>, Option<TrainReport>)> {
    let mut model = build_model(kind, graph.num_nodes(), horizon, cfg, init_seed)?;
    if train_samples.is_empty() {
        return Ok((model, None));
    }
    let ctx = GraphContext::new(graph, cfg.pool_connectivity);
    let report = train(
        model.as_mut(),
        &ctx,
        train_samples,
        &TrainConfig::from(cfg),
        train_seed,
        checkpoint,
    )?;
    Ok((model, Some(report)))
}

/// Seeds of every random object in one repeat, keyed by purpose.
struct Seeds(u64);

impl Seeds {
    fn train_graph(&self) -> u64 {
        derive_seed(self.0, 10)
    }
    fn train_data(&self, horizon: usize) -> u64 {
        derive_seed(derive_seed(self.0, 11), horizon as u64)
    }
    fn test_graph(&self, variant: usize) -> u64 {
        derive_seed(self.0, 20 + variant as u64)
    }
    fn test_data(&self, variant: usize, horizon: usize) -> u64 {
        derive_seed(derive_seed(self.0, 30 + variant as u64), horizon as u64)
    }
    fn init(&self, kind: ModelKind) -> u64 {
        derive_seed(self.0, 40 + kind as u64)
    }
    fn training(&self, kind: ModelKind) -> u64 {
        derive_seed(self.0, 50 + kind as u64)
    }
    fn eval(&self) -> u64 {
        derive_seed(self.0, 60)
    }
    fn dropped(&self) -> u64 {
        derive_seed(self.0, 70)
    }
}

/// A test graph of one experiment with its swept coordinate.
struct TestGraph {
    graph: Graph,
    density_mult: f64,
    source_rule: SourceRule,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub reports: Vec<MetricsReport>,
    pub manifest: RunManifest,
}

fn rgg(n: usize, radius: f64, cfg: &ExperimentConfig, seed: u64) -> Result<Graph> {
    random_geometric_graph(&RggSpec {
        n,
        d_r: radius,
        dimension: cfg.dimension,
        seed,
    })
}

fn school_graphs(cfg: &ExperimentConfig) -> Result<(Graph, Graph)> {
    let path = cfg
        .contact_path
        .as_ref()
        .ok_or_else(|| Error::Config("school experiment needs contact_path".into()))?;
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let records = parse_contact_records(std::io::BufReader::new(file))?;
    let days = group_by_day(&records);
    let day = |d: usize| {
        days.get(d)
            .ok_or_else(|| Error::Ingestion(format!("contact log has {} days, day {d} requested", days.len())))
    };
    let train = load_contact_graph(day(cfg.train_day)?, cfg.min_contacts)?;
    let test = load_contact_graph(day(cfg.test_day)?, cfg.min_contacts)?;
    Ok((train.with_id(format!("school-day{}", cfg.train_day)), test.with_id(format!("school-day{}", cfg.test_day))))
}

/// Classes of `g` excluded from seeding training epidemics, and the
/// resulting source rule.
fn drop_classes(g: &Graph, count: usize, seed: u64) -> Result<(Vec<String>, SourceRule)> {
    let classes = g
        .node_classes()
        .ok_or_else(|| Error::Ingestion("school graph has no classes".into()))?;
    let mut labels: Vec<String> = classes.to_vec();
    labels.sort_by(|a, b| super::metrics::compare_labels(a, b));
    labels.dedup();
    if count >= labels.len() {
        return Err(Error::Config(format!(
            "cannot drop {count} of {} classes",
            labels.len()
        )));
    }
    let mut picked: Vec<usize> = index::sample(&mut rng::root(seed), labels.len(), count).into_vec();
    picked.sort_unstable();
    let dropped: Vec<String> = picked.into_iter().map(|i| labels[i].clone()).collect();
    let allowed: Vec<usize> = (0..g.num_nodes()).filter(|&i| !dropped.contains(&classes[i])).collect();
    Ok((dropped, SourceRule::UniformAmong(allowed)))
}

/// Runs `cfg.experiment`: per repeat and horizon, trains each selected model
/// once (once per training-set size for the trainsize sweep) and evaluates
/// it on the experiment's test graphs. Checkpoints go under
/// `out_dir/checkpoints` when a directory is given.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let kind = cfg.experiment;
    let params = cfg.sirs()?;
    let mut manifest = RunManifest::new(cfg);
    let mut reports = Vec::new();

    if matches!(kind, ExperimentKind::Size) && cfg.models.contains(&ModelKind::Mlp) {
        return Err(Error::Capability(
            "the MLP is tied to one graph size and cannot run the size experiment".into(),
        ));
    }
    let school = match kind {
        ExperimentKind::School => Some(school_graphs(cfg)?),
        _ => None,
    };
    if let Some((tr, te)) = &school {
        if tr.num_nodes() != te.num_nodes() && cfg.models.contains(&ModelKind::Mlp) {
            return Err(Error::Capability(format!(
                "the MLP cannot move from {} to {} nodes",
                tr.num_nodes(),
                te.num_nodes()
            )));
        }
    }
    let ckpt_dir = match out_dir {
        Some(d) => {
            let p = d.join("checkpoints");
            std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
            Some(p)
        }
        None => None,
    };

    for seed in cfg.seeds() {
        let s = Seeds(seed);
        let (train_graph, train_rule, tests) = match &school {
            Some((tr, te)) => {
                let (dropped, rule) = drop_classes(tr, cfg.dropped_classes, s.dropped())?;
                manifest.dropped_classes.insert(seed, dropped);
                let test = TestGraph {
                    graph: te.clone(),
                    density_mult: 1.0,
                    source_rule: SourceRule::default(),
                };
                (tr.clone(), rule, vec![test])
            }
            None => {
                let train_graph = rgg(cfg.num_nodes, cfg.radius, cfg, s.train_graph())?;
                let tests = match kind {
                    ExperimentKind::Size => cfg
                        .sizes
                        .iter()
                        .zip(&cfg.size_radii)
                        .enumerate()
                        .map(|(v, (&n, &r))| {
                            Ok(TestGraph {
                                graph: rgg(n, r, cfg, s.test_graph(v))?,
                                density_mult: 1.0,
                                source_rule: SourceRule::default(),
                            })
                        })
                        .collect::<Result<Vec<_>>>()?,
                    ExperimentKind::Density => cfg
                        .density_multipliers
                        .iter()
                        .enumerate()
                        .map(|(v, &m)| {
                            Ok(TestGraph {
                                graph: rgg(cfg.num_nodes, cfg.radius * m, cfg, s.test_graph(v))?,
                                density_mult: m,
                                source_rule: SourceRule::default(),
                            })
                        })
                        .collect::<Result<Vec<_>>>()?,
                    _ => vec![TestGraph {
                        graph: rgg(cfg.num_nodes, cfg.radius, cfg, s.test_graph(0))?,
                        density_mult: 1.0,
                        source_rule: SourceRule::default(),
                    }],
                };
                (train_graph, SourceRule::default(), tests)
            }
        };

        for &horizon in &cfg.horizons {
            let pool_size = match kind {
                ExperimentKind::Trainsize => cfg.train_sizes.iter().copied().max().unwrap_or(0),
                _ => cfg.train_samples,
            };
            let pool: Dataset = if pool_size > 0 {
                generate_dataset(&train_graph, &params, horizon, pool_size, &train_rule, s.train_data(horizon))?
            } else {
                Dataset {
                    graph_id: train_graph.id().into(),
                    horizon,
                    samples: Vec::new(),
                }
            };
            let test_sets = tests
                .iter()
                .enumerate()
                .map(|(v, t)| {
                    generate_dataset(&t.graph, &params, horizon, cfg.test_samples, &t.source_rule, s.test_data(v, horizon))
                })
                .collect::<Result<Vec<_>>>()?;
            let sizes = match kind {
                ExperimentKind::Trainsize => cfg.train_sizes.clone(),
                _ => vec![cfg.train_samples],
            };
            for &n_train in &sizes {
                for &model_kind in &cfg.models {
                    let ckpt = ckpt_dir.as_ref().filter(|_| n_train > 0).map(|d| {
                        d.join(format!("{kind}_{model_kind}_T{horizon}_n{n_train}_s{seed}.ckpt"))
                    });
                    let (model, report) = fit_model(
                        model_kind,
                        &train_graph,
                        horizon,
                        &pool.samples[..n_train],
                        cfg,
                        s.init(model_kind),
                        s.training(model_kind),
                        ckpt.as_deref(),
                    )?;
                    if let Some(TrainReport {
                        checkpoint: Some(path),
                        checkpoint_sha256: Some(sha256),
                        ..
                    }) = &report
                    {
                        manifest.checkpoints.push(CheckpointEntry {
                            model: model_kind.to_string(),
                            horizon,
                            seed,
                            train_samples: n_train,
                            path: path.clone(),
                            sha256: sha256.clone(),
                        });
                    }
                    let (epochs, wall_s) = match &report {
                        Some(r) if cfg.record_wall_time => (r.stopping_epoch, r.wall_s),
                        Some(r) => (r.stopping_epoch, 0.0),
                        None => (0, 0.0),
                    };
                    for (t, data) in tests.iter().zip(&test_sets) {
                        let e = evaluate(model.as_ref(), &t.graph, &data.samples, cfg.pool_connectivity, s.eval())?;
                        let topk = e.topk.map(|a| a.map(Some)).unwrap_or([None; 3]);
                        reports.push(MetricsReport {
                            row: MetricsRow {
                                experiment: kind.to_string(),
                                model: model_kind.to_string(),
                                graph: t.graph.id().into(),
                                num_nodes: t.graph.num_nodes(),
                                horizon,
                                density_mult: t.density_mult,
                                train_samples: n_train,
                                seed,
                                mse: e.mse,
                                top1: topk[0],
                                top3: topk[1],
                                top5: topk[2],
                                epochs,
                                wall_s,
                            },
                            per_sample_mse: e.per_sample_mse,
                        });
                    }
                }
            }
        }
    }
    Ok(ExperimentOutput { reports, manifest })
}
