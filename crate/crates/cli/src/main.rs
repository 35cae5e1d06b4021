use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use netdemix::graph::{group_by_day, load_contact_graph, parse_contact_records, random_geometric_graph, Graph, RggSpec};
use netdemix::harness::report::dat_series;
use netdemix::harness::{
    build_model, evaluate, export_report, load_model, parse_csv, run_experiment, train, ExperimentConfig,
    ExperimentKind, Precision, TrainConfig,
};
use netdemix::nn::GraphContext;
use netdemix::sirs::{generate_dataset, read_binary, read_jsonl, write_binary, write_jsonl, Dataset, SourceRule};
use netdemix::ModelKind;

#[derive(Parser)]
#[command(name = "netdemix", version, about = "Temporal reconstruction of network epidemics from aggregated observations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Flat TOML experiment configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    precision: Option<Precision>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::from_file(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(p) = self.precision {
            cfg.precision = p;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a random geometric graph, or build one day's contact graph.
    GenGraph {
        #[command(flatten)]
        common: Common,
        /// Output directory (edges.csv, nodes.csv).
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        radius: Option<f64>,
        /// Contact log to read instead of sampling a random graph.
        #[arg(long)]
        contacts: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        day: usize,
    },
    /// Simulate SIRS epidemics on a graph and write (x, Y) pairs.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Graph directory written by gen-graph.
        #[arg(long)]
        graph: PathBuf,
        /// Output file; `.bin` selects the compact binary container.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        t: Option<usize>,
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Train one model and write its checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "ddmix")]
        model: ModelKind,
        /// Checkpoint path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Write the JSON result here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a full experiment and export its report.
    Experiment {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        kind: Option<ExperimentKind>,
        /// Restrict to these models (repeatable).
        #[arg(long)]
        model: Vec<ModelKind>,
        /// Restrict to one horizon.
        #[arg(long)]
        t: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize a metrics CSV and regenerate its plot series.
    Report {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn read_graph(dir: &Path) -> Result<Graph> {
    let edges = fs::read_to_string(dir.join("edges.csv")).with_context(|| format!("reading {}", dir.display()))?;
    let nodes = fs::read_to_string(dir.join("nodes.csv")).ok();
    let id = fs::read_to_string(dir.join("id"))
        .map(|s| s.trim().to_string())
        .unwrap_or_else(|_| dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default());
    Ok(Graph::from_csv(&id, &edges, nodes.as_deref())?)
}

fn write_graph(g: &Graph, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("edges.csv"), g.to_edge_csv())?;
    fs::write(dir.join("nodes.csv"), g.to_node_csv())?;
    fs::write(dir.join("id"), format!("{}\n", g.id()))?;
    Ok(())
}

fn is_binary(p: &Path) -> bool {
    p.extension().is_some_and(|e| e == "bin")
}

fn read_data(p: &Path) -> Result<Dataset> {
    let f = fs::File::open(p).with_context(|| format!("opening {}", p.display()))?;
    Ok(if is_binary(p) {
        read_binary(BufReader::new(f))?
    } else {
        read_jsonl(BufReader::new(f))?
    })
}

fn check_data(g: &Graph, ds: &Dataset) -> Result<()> {
    match ds.samples.first() {
        None => bail!("dataset is empty"),
        Some(s) if s.x.x.len() != g.num_nodes() => bail!(
            "dataset has {} nodes per sample, graph has {}",
            s.x.x.len(),
            g.num_nodes()
        ),
        _ => Ok(()),
    }
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenGraph {
            common,
            out,
            n,
            radius,
            contacts,
            day,
        } => {
            let cfg = common.load()?;
            let g = match contacts {
                Some(path) => {
                    let f = fs::File::open(&path).with_context(|| format!("opening {}", path.display()))?;
                    let records = parse_contact_records(BufReader::new(f))?;
                    let days = group_by_day(&records);
                    let Some(records) = days.get(day) else {
                        bail!("contact log has {} days", days.len());
                    };
                    load_contact_graph(records, cfg.min_contacts)?.with_id(format!("school-day{day}"))
                }
                None => random_geometric_graph(&RggSpec {
                    n: n.unwrap_or(cfg.num_nodes),
                    d_r: radius.unwrap_or(cfg.radius),
                    dimension: cfg.dimension,
                    seed: cfg.seed,
                })?,
            };
            write_graph(&g, &out)?;
            println!("{} nodes, {} edges -> {}", g.num_nodes(), g.num_edges(), out.display());
        }
        Command::GenData {
            common,
            graph,
            out,
            t,
            samples,
        } => {
            let cfg = common.load()?;
            let g = read_graph(&graph)?;
            let horizon = t.unwrap_or(cfg.horizons[0]);
            let m = samples.unwrap_or(cfg.train_samples);
            let ds = generate_dataset(&g, &cfg.sirs()?, horizon, m, &SourceRule::default(), cfg.seed)?;
            let f = BufWriter::new(fs::File::create(&out).with_context(|| format!("creating {}", out.display()))?);
            if is_binary(&out) {
                write_binary(&ds, f)?;
            } else {
                write_jsonl(&ds, f)?;
            }
            println!("{m} samples of T = {horizon} -> {}", out.display());
        }
        Command::Train {
            common,
            graph,
            data,
            model,
            out,
        } => {
            let cfg = common.load()?;
            let g = read_graph(&graph)?;
            let ds = read_data(&data)?;
            check_data(&g, &ds)?;
            let mut m = build_model(model, g.num_nodes(), ds.horizon, &cfg, cfg.seed)?;
            let ctx = GraphContext::new(&g, cfg.pool_connectivity);
            let report = train(m.as_mut(), &ctx, &ds.samples, &TrainConfig::from(&cfg), cfg.seed, Some(&out))?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Eval {
            common,
            graph,
            data,
            checkpoint,
            out,
        } => {
            let cfg = common.load()?;
            let g = read_graph(&graph)?;
            let ds = read_data(&data)?;
            check_data(&g, &ds)?;
            let m = load_model(&checkpoint)?;
            if m.horizon() != ds.horizon {
                bail!("checkpoint has T = {}, dataset T = {}", m.horizon(), ds.horizon);
            }
            let e = evaluate(m.as_ref(), &g, &ds.samples, cfg.pool_connectivity, cfg.seed)?;
            let json = serde_json::to_string_pretty(&e)?;
            match out {
                Some(p) => fs::write(&p, json + "\n")?,
                None => println!("{json}"),
            }
        }
        Command::Experiment {
            common,
            kind,
            model,
            t,
            out,
        } => {
            let mut cfg = common.load()?;
            if let Some(k) = kind {
                cfg.experiment = k;
            }
            if !model.is_empty() {
                cfg.models = model;
            }
            if let Some(t) = t {
                cfg.horizons = vec![t];
            }
            let result = run_experiment(&cfg, Some(&out))?;
            for p in export_report(&result.reports, &result.manifest, &out)? {
                println!("wrote {}", p.display());
            }
        }
        Command::Report { csv, out } => {
            let text = fs::read_to_string(&csv).with_context(|| format!("reading {}", csv.display()))?;
            let rows = parse_csv(&text)?;
            if rows.is_empty() {
                bail!("no rows in {}", csv.display());
            }
            let mut groups: BTreeMap<(String, String, usize, String), Vec<f64>> = BTreeMap::new();
            for r in &rows {
                let key = (r.experiment.clone(), r.model.clone(), r.horizon, format!("N={} mult={} n={}", r.num_nodes, r.density_mult, r.train_samples));
                groups.entry(key).or_default().push(r.mse);
            }
            println!("{:<10} {:<10} {:>3}  {:<28} {:>10} {:>5}", "experiment", "model", "T", "setting", "mean_mse", "runs");
            for ((exp, model, t, setting), v) in groups {
                let mean = v.iter().sum::<f64>() / v.len() as f64;
                println!("{exp:<10} {model:<10} {t:>3}  {setting:<28} {mean:>10.5} {:>5}", v.len());
            }
            if let Some(dir) = out {
                fs::create_dir_all(&dir)?;
                for (stem, series) in dat_series(&rows) {
                    fs::write(dir.join(format!("{stem}.dat")), series)?;
                }
            }
        }
    }
    Ok(())
}
