//! Discrete-time stochastic SIRS dynamics on a graph, temporal aggregation
//! and dataset generation.

use std::io::{BufRead, Read, Write};

use ndarray::{Array1, Array2};
use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::rng::{self, Rng};

/// Compartment of a node at one time step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum State {
    Susceptible,
    Infected,
    Recovered,
}

impl State {
    /// Whether `self -> next` is a legal one-step SIRS transition.
    pub fn can_become(self, next: State) -> bool {
        use State::*;
        matches!(
            (self, next),
            (Susceptible, Susceptible | Infected)
                | (Infected, Infected | Recovered)
                | (Recovered, Recovered | Susceptible)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SirsParams {
    /// Per-contact infection probability.
    pub beta: f64,
    /// Healing probability.
    pub delta: f64,
    /// Probability of losing immunity.
    pub gamma: f64,
}

impl SirsParams {
    pub fn new(beta: f64, delta: f64, gamma: f64) -> Result<Self> {
        let p = Self { beta, delta, gamma };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("beta", self.beta), ("delta", self.delta), ("gamma", self.gamma)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidArgument(format!("{name} = {v} not in [0, 1]")));
            }
        }
        Ok(())
    }
}

impl Default for SirsParams {
    fn default() -> Self {
        Self {
            beta: 0.15,
            delta: 0.1,
            gamma: 0.01,
        }
    }
}

/// One realization of the epidemic over `T` steps.
#[derive(Debug, Clone, PartialEq)]
pub struct EpidemicTrajectory {
    /// `N x T` infection indicators; column `t` is the signal at step `t`.
    pub y: Array2<u8>,
    /// Full compartment history, when known (datasets read from disk only
    /// carry `y`).
    pub states: Option<Array2<State>>,
    pub graph_id: String,
}

impl EpidemicTrajectory {
    pub fn num_nodes(&self) -> usize {
        self.y.nrows()
    }

    pub fn horizon(&self) -> usize {
        self.y.ncols()
    }

    pub fn y_f64(&self) -> Array2<f64> {
        self.y.mapv(f64::from)
    }

    /// Checks `y` against `states` and the transition rules.
    pub fn check_states(&self) -> Result<()> {
        let Some(states) = &self.states else {
            return Ok(());
        };
        for ((i, t), &s) in states.indexed_iter() {
            if (s == State::Infected) != (self.y[[i, t]] == 1) {
                return Err(Error::CheckFailed(format!(
                    "y[{i},{t}] disagrees with state {s:?}"
                )));
            }
            if t > 0 && !states[[i, t - 1]].can_become(s) {
                return Err(Error::CheckFailed(format!(
                    "illegal transition {:?} -> {s:?} at node {i}, step {t}",
                    states[[i, t - 1]]
                )));
            }
        }
        Ok(())
    }

    /// Every infection at `t >= 2` has an infected closed neighbor at `t - 1`.
    pub fn is_local(&self, g: &Graph) -> bool {
        let (n, horizon) = self.y.dim();
        (1..horizon).all(|t| {
            (0..n).all(|i| {
                self.y[[i, t]] == 0
                    || self.y[[i, t - 1]] == 1
                    || g.neighbors(i).any(|j| self.y[[j, t - 1]] == 1)
            })
        })
    }
}

/// Temporal aggregate `x = (1/T) sum_t y^(t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedObservation {
    pub x: Array1<f64>,
    pub horizon: usize,
}

/// One synchronous SIRS update. Nodes are visited in index order and each
/// consumes at most one uniform draw, so the result is a function of the
/// rng state.
pub fn sirs_step(states: &[State], g: &Graph, p: &SirsParams, rng: &mut Rng) -> Result<Vec<State>> {
    if states.len() != g.num_nodes() {
        return Err(Error::Dimension(format!(
            "{} states for a graph with {} nodes",
            states.len(),
            g.num_nodes()
        )));
    }
    let mut next = states.to_vec();
    for (i, &s) in states.iter().enumerate() {
        next[i] = match s {
            State::Susceptible => {
                let k = g
                    .neighbors(i)
                    .filter(|&j| states[j] == State::Infected)
                    .count();
                if k == 0 {
                    State::Susceptible
                } else {
                    let escape = (1.0 - p.beta).powi(k as i32);
                    if rng.random::<f64>() < 1.0 - escape {
                        State::Infected
                    } else {
                        State::Susceptible
                    }
                }
            }
            State::Infected if rng.random::<f64>() < p.delta => State::Recovered,
            State::Recovered if rng.random::<f64>() < p.gamma => State::Susceptible,
            other => other,
        };
    }
    Ok(next)
}

/// Runs `horizon` steps starting from `initial_infected` at step 1.
pub fn simulate(
    g: &Graph,
    p: &SirsParams,
    horizon: usize,
    initial_infected: &[usize],
    rng: &mut Rng,
) -> Result<EpidemicTrajectory> {
    if horizon < 1 {
        return Err(Error::InvalidArgument("horizon must be >= 1".into()));
    }
    let n = g.num_nodes();
    if let Some(&bad) = initial_infected.iter().find(|&&i| i >= n) {
        return Err(Error::InvalidArgument(format!(
            "initial node {bad} not in graph of {n} nodes"
        )));
    }
    let mut current = vec![State::Susceptible; n];
    for &i in initial_infected {
        current[i] = State::Infected;
    }
    let mut states = Array2::from_elem((n, horizon), State::Susceptible);
    for t in 0..horizon {
        if t > 0 {
            current = sirs_step(&current, g, p, rng)?;
        }
        for (i, &s) in current.iter().enumerate() {
            states[[i, t]] = s;
        }
    }
    let y = states.mapv(|s| u8::from(s == State::Infected));
    Ok(EpidemicTrajectory {
        y,
        states: Some(states),
        graph_id: g.id().to_string(),
    })
}

/// Fraction of steps each node spent infected.
pub fn aggregate(traj: &EpidemicTrajectory) -> AggregatedObservation {
    let horizon = traj.horizon();
    let x = traj
        .y
        .rows()
        .into_iter()
        .map(|row| row.iter().map(|&v| u32::from(v)).sum::<u32>() as f64 / horizon as f64)
        .collect();
    AggregatedObservation { x, horizon }
}

/// How initial infections are chosen for each sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SourceRule {
    /// `count` distinct nodes uniformly at random.
    Uniform { count: usize },
    /// The same nodes every time.
    Fixed(Vec<usize>),
    /// One node drawn uniformly from the listed candidates.
    UniformAmong(Vec<usize>),
}

impl Default for SourceRule {
    fn default() -> Self {
        SourceRule::Uniform { count: 1 }
    }
}

impl SourceRule {
    fn pick(&self, n: usize, rng: &mut Rng) -> Result<Vec<usize>> {
        match self {
            SourceRule::Uniform { count } => {
                if *count > n {
                    return Err(Error::InvalidArgument(format!(
                        "{count} sources requested on {n} nodes"
                    )));
                }
                let mut v = index::sample(rng, n, *count).into_vec();
                v.sort_unstable();
                Ok(v)
            }
            SourceRule::Fixed(v) => Ok(v.clone()),
            SourceRule::UniformAmong(candidates) => {
                if candidates.is_empty() {
                    return Err(Error::InvalidArgument("no source candidates".into()));
                }
                Ok(vec![candidates[rng.random_range(0..candidates.len())]])
            }
        }
    }
}

/// An aggregated observation with its ground-truth trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: AggregatedObservation,
    pub trajectory: EpidemicTrajectory,
    pub source: Vec<usize>,
    /// Seed of this sample's own stream.
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub graph_id: String,
    pub horizon: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Simulates `num_samples` independent epidemics. Sample `m` uses the stream
/// seeded by `derive_seed(seed, m)`, so any subset can be regenerated alone.
pub fn generate_dataset(
    g: &Graph,
    p: &SirsParams,
    horizon: usize,
    num_samples: usize,
    source_rule: &SourceRule,
    seed: u64,
) -> Result<Dataset> {
    if num_samples < 1 {
        return Err(Error::InvalidArgument("need at least one sample".into()));
    }
    p.validate()?;
    let samples = (0..num_samples)
        .map(|m| generate_sample(g, p, horizon, source_rule, rng::derive_seed(seed, m as u64)))
        .collect::<Result<_>>()?;
    Ok(Dataset {
        graph_id: g.id().to_string(),
        horizon,
        samples,
    })
}

pub fn generate_sample(
    g: &Graph,
    p: &SirsParams,
    horizon: usize,
    source_rule: &SourceRule,
    sample_seed: u64,
) -> Result<Sample> {
    let mut rng = rng::root(sample_seed);
    let source = source_rule.pick(g.num_nodes(), &mut rng)?;
    let trajectory = simulate(g, p, horizon, &source, &mut rng)?;
    Ok(Sample {
        x: aggregate(&trajectory),
        trajectory,
        source,
        seed: sample_seed,
    })
}

#[derive(Serialize, Deserialize)]
struct SampleLine {
    graph_id: String,
    #[serde(rename = "T")]
    horizon: usize,
    x: Vec<f64>,
    #[serde(rename = "Y")]
    y: Vec<Vec<u8>>,
    source: Vec<usize>,
    seed: u64,
}

/// Writes one JSON object per sample.
pub fn write_jsonl(ds: &Dataset, mut out: impl Write) -> Result<()> {
    for s in &ds.samples {
        let line = SampleLine {
            graph_id: s.trajectory.graph_id.clone(),
            horizon: s.x.horizon,
            x: s.x.x.to_vec(),
            y: s.trajectory.y.rows().into_iter().map(|r| r.to_vec()).collect(),
            source: s.source.clone(),
            seed: s.seed,
        };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n").map_err(|e| Error::io("<jsonl>", e))?;
    }
    Ok(())
}

pub fn read_jsonl(input: impl BufRead) -> Result<Dataset> {
    let mut samples = Vec::new();
    for (idx, line) in input.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<jsonl>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SampleLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?;
        let n = rec.x.len();
        if rec.y.len() != n || rec.y.iter().any(|r| r.len() != rec.horizon) {
            return Err(Error::Parse {
                line: idx + 1,
                message: format!("Y is not {n} x {}", rec.horizon),
            });
        }
        if rec.y.iter().flatten().any(|&v| v > 1) {
            return Err(Error::Parse {
                line: idx + 1,
                message: "Y entries must be 0 or 1".into(),
            });
        }
        let y = Array2::from_shape_fn((n, rec.horizon), |(i, t)| rec.y[i][t]);
        samples.push(Sample {
            x: AggregatedObservation {
                x: Array1::from(rec.x),
                horizon: rec.horizon,
            },
            trajectory: EpidemicTrajectory {
                y,
                states: None,
                graph_id: rec.graph_id,
            },
            source: rec.source,
            seed: rec.seed,
        });
    }
    let first = samples
        .first()
        .ok_or_else(|| Error::Parse {
            line: 0,
            message: "empty dataset".into(),
        })?;
    Ok(Dataset {
        graph_id: first.trajectory.graph_id.clone(),
        horizon: first.x.horizon,
        samples,
    })
}

pub const BINARY_MAGIC: &[u8; 16] = b"NETDEMIX-DS\0\0\0\0\0";

/// Compact container: magic, `(N, T, M)` as LE `u32`, then per sample the
/// `x` values as LE `f64`, `Y` bit-packed row-major (LSB first), and the
/// source list prefixed by its LE `u32` length. Graph ids and sample seeds
/// are not stored.
pub fn write_binary(ds: &Dataset, mut out: impl Write) -> Result<()> {
    let first = ds
        .samples
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty dataset".into()))?;
    let (n, horizon) = first.trajectory.y.dim();
    let mut buf = Vec::new();
    buf.extend_from_slice(BINARY_MAGIC);
    for v in [n, horizon, ds.len()] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for s in &ds.samples {
        if s.trajectory.y.dim() != (n, horizon) {
            return Err(Error::Dimension("samples differ in shape".into()));
        }
        for &v in &s.x.x {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let mut packed = vec![0u8; (n * horizon).div_ceil(8)];
        for (bit, &v) in s.trajectory.y.iter().enumerate() {
            if v == 1 {
                packed[bit / 8] |= 1 << (bit % 8);
            }
        }
        buf.extend_from_slice(&packed);
        buf.extend_from_slice(&(s.source.len() as u32).to_le_bytes());
        for &i in &s.source {
            buf.extend_from_slice(&(i as u32).to_le_bytes());
        }
    }
    out.write_all(&buf).map_err(|e| Error::io("<binary>", e))
}

pub fn read_binary(mut input: impl Read) -> Result<Dataset> {
    let mut bytes = Vec::new();
    input
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io("<binary>", e))?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.take(16)? != BINARY_MAGIC {
        return Err(Error::Parse {
            line: 0,
            message: "bad magic".into(),
        });
    }
    let n = cur.u32()? as usize;
    let horizon = cur.u32()? as usize;
    let m = cur.u32()? as usize;
    let mut samples = Vec::with_capacity(m);
    for _ in 0..m {
        let x: Vec<f64> = (0..n).map(|_| cur.f64()).collect::<Result<_>>()?;
        let packed = cur.take((n * horizon).div_ceil(8))?;
        let y = Array2::from_shape_fn((n, horizon), |(i, t)| {
            let bit = i * horizon + t;
            (packed[bit / 8] >> (bit % 8)) & 1
        });
        let len = cur.u32()? as usize;
        let source = (0..len)
            .map(|_| cur.u32().map(|v| v as usize))
            .collect::<Result<_>>()?;
        samples.push(Sample {
            x: AggregatedObservation {
                x: Array1::from(x),
                horizon,
            },
            trajectory: EpidemicTrajectory {
                y,
                states: None,
                graph_id: String::new(),
            },
            source,
            seed: 0,
        });
    }
    if cur.pos != bytes.len() {
        return Err(Error::Parse {
            line: 0,
            message: format!("{} trailing bytes", bytes.len() - cur.pos),
        });
    }
    Ok(Dataset {
        graph_id: String::new(),
        horizon,
        samples,
    })
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        let end = self.pos + len;
        let slice = self.bytes.get(self.pos..end).ok_or_else(|| Error::Parse {
            line: 0,
            message: format!("truncated container at byte {}", self.pos),
        })?;
        self.pos = end;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f64(&mut self) -> Result<f64> {
        let mut a = [0u8; 8];
        a.copy_from_slice(self.take(8)?);
        Ok(f64::from_le_bytes(a))
    }
}
