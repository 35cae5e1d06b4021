//! Graph representation, random geometric graphs, adjacency normalization
//! and contact-record ingestion.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::io::BufRead;

use ndarray::Array2;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Undirected, unweighted graph with a dense binary adjacency matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    id: String,
    adjacency: Array2<f64>,
    node_classes: Option<Vec<String>>,
    coordinates: Option<Vec<Vec<f64>>>,
}

impl Graph {
    /// Builds a graph from an edge list. Self-loops are rejected, duplicate
    /// edges collapse.
    pub fn from_edges(
        id: impl Into<String>,
        num_nodes: usize,
        edges: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self> {
        if num_nodes == 0 {
            return Err(Error::InvalidSpec("graph needs at least one node".into()));
        }
        let mut adjacency = Array2::zeros((num_nodes, num_nodes));
        for (i, j) in edges {
            if i >= num_nodes || j >= num_nodes {
                return Err(Error::InvalidArgument(format!(
                    "edge ({i}, {j}) out of range for {num_nodes} nodes"
                )));
            }
            if i == j {
                return Err(Error::InvalidArgument(format!("self-loop at node {i}")));
            }
            adjacency[[i, j]] = 1.0;
            adjacency[[j, i]] = 1.0;
        }
        Ok(Self {
            id: id.into(),
            adjacency,
            node_classes: None,
            coordinates: None,
        })
    }

    /// Attaches one class label per node.
    pub fn with_classes(mut self, classes: Vec<String>) -> Result<Self> {
        if classes.len() != self.num_nodes() {
            return Err(Error::InvalidArgument(format!(
                "{} class labels for {} nodes",
                classes.len(),
                self.num_nodes()
            )));
        }
        self.node_classes = Some(classes);
        Ok(self)
    }

    pub fn with_coordinates(mut self, coords: Vec<Vec<f64>>) -> Result<Self> {
        if coords.len() != self.num_nodes() {
            return Err(Error::InvalidArgument(format!(
                "{} coordinates for {} nodes",
                coords.len(),
                self.num_nodes()
            )));
        }
        self.coordinates = Some(coords);
        Ok(self)
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn num_nodes(&self) -> usize {
        self.adjacency.nrows()
    }

    /// Binary symmetric adjacency `A` with zero diagonal.
    pub fn adjacency(&self) -> &Array2<f64> {
        &self.adjacency
    }

    pub fn node_classes(&self) -> Option<&[String]> {
        self.node_classes.as_deref()
    }

    pub fn coordinates(&self) -> Option<&[Vec<f64>]> {
        self.coordinates.as_deref()
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.adjacency[[i, j]] != 0.0
    }

    /// Edges as `(i, j)` pairs with `i < j`, in row-major order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let n = self.num_nodes();
        let mut out = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                if self.has_edge(i, j) {
                    out.push((i, j));
                }
            }
        }
        out
    }

    pub fn num_edges(&self) -> usize {
        self.edges().len()
    }

    pub fn degree(&self, i: usize) -> usize {
        self.adjacency.row(i).iter().filter(|&&a| a != 0.0).count()
    }

    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.adjacency
            .row(i)
            .into_iter()
            .enumerate()
            .filter(|(_, &a)| a != 0.0)
            .map(|(j, _)| j)
    }

    /// `A + I`.
    pub fn closed_adjacency(&self) -> Array2<f64> {
        &self.adjacency + &Array2::<f64>::eye(self.num_nodes())
    }

    /// Serializes as an edge-list CSV (`i,j` header, `i < j`).
    pub fn to_edge_csv(&self) -> String {
        let mut out = String::from("i,j\n");
        for (i, j) in self.edges() {
            let _ = writeln!(out, "{i},{j}");
        }
        out
    }

    /// Serializes node metadata (`node,class,x,y,z`); absent fields are empty.
    pub fn to_node_csv(&self) -> String {
        let mut out = String::from("node,class,x,y,z\n");
        for i in 0..self.num_nodes() {
            let class = self
                .node_classes
                .as_ref()
                .map(|c| c[i].as_str())
                .unwrap_or("");
            let mut coords = [String::new(), String::new(), String::new()];
            if let Some(c) = &self.coordinates {
                for (slot, v) in coords.iter_mut().zip(&c[i]) {
                    *slot = format!("{v}");
                }
            }
            let _ = writeln!(out, "{i},{class},{},{},{}", coords[0], coords[1], coords[2]);
        }
        out
    }

    /// Reads the edge-list and (optional) node-metadata CSVs back.
    pub fn from_csv(id: &str, edge_csv: &str, node_csv: Option<&str>) -> Result<Self> {
        let mut edges = Vec::new();
        let mut max_node = None::<usize>;
        for (lineno, line) in edge_csv.lines().enumerate() {
            let line = line.trim();
            if lineno == 0 {
                if line != "i,j" {
                    return Err(Error::Parse {
                        line: 1,
                        message: format!("expected header `i,j`, got `{line}`"),
                    });
                }
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split(',');
            let mut field = |name: &str| -> Result<usize> {
                parts
                    .next()
                    .and_then(|s| s.trim().parse().ok())
                    .ok_or_else(|| Error::Parse {
                        line: lineno + 1,
                        message: format!("bad `{name}` field in `{line}`"),
                    })
            };
            let (i, j) = (field("i")?, field("j")?);
            max_node = Some(max_node.unwrap_or(0).max(i).max(j));
            edges.push((i, j));
        }

        let mut classes = None;
        let mut coords = None;
        let mut n = max_node.map_or(0, |m| m + 1);
        if let Some(text) = node_csv {
            let mut cls = Vec::new();
            let mut pts = Vec::new();
            for (lineno, line) in text.lines().enumerate() {
                if lineno == 0 || line.trim().is_empty() {
                    continue;
                }
                let fields: Vec<&str> = line.split(',').collect();
                if fields.len() != 5 {
                    return Err(Error::Parse {
                        line: lineno + 1,
                        message: format!("expected 5 fields, got {}", fields.len()),
                    });
                }
                let node: usize = fields[0].trim().parse().map_err(|_| Error::Parse {
                    line: lineno + 1,
                    message: format!("bad node id `{}`", fields[0]),
                })?;
                if node != cls.len() {
                    return Err(Error::Parse {
                        line: lineno + 1,
                        message: format!("node ids must be consecutive, got {node}"),
                    });
                }
                cls.push(fields[1].trim().to_string());
                let p: Vec<f64> = fields[2..]
                    .iter()
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| s.trim().parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| Error::Parse {
                        line: lineno + 1,
                        message: format!("bad coordinate: {e}"),
                    })?;
                pts.push(p);
            }
            n = n.max(cls.len());
            if cls.iter().any(|c| !c.is_empty()) {
                classes = Some(cls);
            }
            if pts.iter().any(|p| !p.is_empty()) {
                coords = Some(pts);
            }
        }
        let mut g = Graph::from_edges(id, n, edges)?;
        if let Some(c) = classes {
            g = g.with_classes(c)?;
        }
        if let Some(c) = coords {
            g = g.with_coordinates(c)?;
        }
        Ok(g)
    }

    /// Re-serializes the graph as contact records: every edge appears
    /// `min_contacts + 1` times so that [`load_contact_graph`] with the same
    /// threshold rebuilds it.
    pub fn to_contact_records(&self, min_contacts: usize) -> Vec<ContactRecord> {
        let class = |i: usize| {
            self.node_classes
                .as_ref()
                .map(|c| c[i].clone())
                .unwrap_or_default()
        };
        let mut out = Vec::new();
        for (i, j) in self.edges() {
            for rep in 0..=min_contacts {
                out.push(ContactRecord {
                    timestamp: rep as i64 * 20,
                    i: i.to_string(),
                    j: j.to_string(),
                    class_i: class(i),
                    class_j: class(j),
                });
            }
        }
        out
    }
}

/// `D̂^{-1/2}(A + I)D̂^{-1/2}` for a graph.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedAdjacency {
    pub matrix: Array2<f64>,
    pub source_graph_id: String,
}

/// Symmetric renormalization with self-loops. Isolated nodes get degree 1.
pub fn normalize_adjacency(g: &Graph) -> NormalizedAdjacency {
    NormalizedAdjacency {
        matrix: renormalize(g.adjacency()),
        source_graph_id: g.id().to_string(),
    }
}

/// Renormalizes a binary adjacency (without self-loops) after adding them.
pub(crate) fn renormalize(adjacency: &Array2<f64>) -> Array2<f64> {
    let n = adjacency.nrows();
    let closed = adjacency + &Array2::<f64>::eye(n);
    let inv_sqrt: Vec<f64> = closed
        .rows()
        .into_iter()
        .map(|r| 1.0 / r.sum().sqrt())
        .collect();
    Array2::from_shape_fn((n, n), |(i, j)| closed[[i, j]] * inv_sqrt[i] * inv_sqrt[j])
}

/// Parameters of a random geometric graph in the unit hypercube.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RggSpec {
    pub n: usize,
    /// Connection radius.
    pub d_r: f64,
    /// 2 or 3.
    pub dimension: usize,
    pub seed: u64,
}

impl RggSpec {
    pub fn new(n: usize, d_r: f64, seed: u64) -> Self {
        Self {
            n,
            d_r,
            dimension: 3,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::InvalidSpec("RGG needs n >= 1".into()));
        }
        if !(self.d_r >= 0.0) || !self.d_r.is_finite() {
            return Err(Error::InvalidSpec(format!("bad radius {}", self.d_r)));
        }
        if !(self.dimension == 2 || self.dimension == 3) {
            return Err(Error::InvalidSpec(format!(
                "dimension must be 2 or 3, got {}",
                self.dimension
            )));
        }
        Ok(())
    }

    pub fn graph_id(&self) -> String {
        format!(
            "rgg-n{}-r{}-d{}-s{}",
            self.n, self.d_r, self.dimension, self.seed
        )
    }
}

/// Places `n` nodes uniformly in the unit hypercube and links every pair
/// at Euclidean distance `<= d_r`.
pub fn random_geometric_graph(spec: &RggSpec) -> Result<Graph> {
    spec.validate()?;
    let mut rng = rng::root(spec.seed);
    let coords: Vec<Vec<f64>> = (0..spec.n)
        .map(|_| (0..spec.dimension).map(|_| rng.random::<f64>()).collect())
        .collect();
    let mut edges = Vec::new();
    for i in 0..spec.n {
        for j in (i + 1)..spec.n {
            if euclidean(&coords[i], &coords[j]) <= spec.d_r {
                edges.push((i, j));
            }
        }
    }
    Graph::from_edges(spec.graph_id(), spec.n, edges)?.with_coordinates(coords)
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Subgraph on `keep` (any order; duplicates ignored) with nodes re-indexed
/// in increasing original index. Returns the graph and the old→new map.
pub fn induced_subgraph(g: &Graph, keep: &[usize]) -> Result<(Graph, Vec<Option<usize>>)> {
    if keep.is_empty() {
        return Err(Error::InvalidArgument("empty node subset".into()));
    }
    let n = g.num_nodes();
    let mut sorted: Vec<usize> = keep.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if let Some(&bad) = sorted.iter().find(|&&i| i >= n) {
        return Err(Error::InvalidArgument(format!(
            "node {bad} not in graph of {n} nodes"
        )));
    }
    let mut mapping = vec![None; n];
    for (new, &old) in sorted.iter().enumerate() {
        mapping[old] = Some(new);
    }
    let k = sorted.len();
    let adjacency = Array2::from_shape_fn((k, k), |(a, b)| g.adjacency[[sorted[a], sorted[b]]]);
    let sub = Graph {
        id: format!("{}-sub{}", g.id, k),
        adjacency,
        node_classes: g
            .node_classes
            .as_ref()
            .map(|c| sorted.iter().map(|&i| c[i].clone()).collect()),
        coordinates: g
            .coordinates
            .as_ref()
            .map(|c| sorted.iter().map(|&i| c[i].clone()).collect()),
    };
    Ok((sub, mapping))
}

/// One face-to-face contact event.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContactRecord {
    pub timestamp: i64,
    pub i: String,
    pub j: String,
    pub class_i: String,
    pub class_j: String,
}

/// Parses `timestamp,i,j,class_i,class_j` records. The delimiter (tab or
/// comma) is detected from the first non-empty line; a header line whose
/// timestamp field is not an integer is skipped.
pub fn parse_contact_records(reader: impl BufRead) -> Result<Vec<ContactRecord>> {
    let mut delimiter = None;
    let mut first_content = true;
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        let trimmed = line.trim_end_matches(['\r', '\n']);
        if trimmed.trim().is_empty() {
            continue;
        }
        let delim = *delimiter.get_or_insert(if trimmed.contains('\t') { '\t' } else { ',' });
        let first = std::mem::replace(&mut first_content, false);
        let fields: Vec<&str> = trimmed.split(delim).map(str::trim).collect();
        if fields.len() != 5 {
            return Err(Error::Parse {
                line: lineno,
                message: format!("expected 5 fields, found {}", fields.len()),
            });
        }
        let timestamp = match fields[0].parse::<i64>() {
            Ok(t) => t,
            // a header may only occupy the first content line
            Err(_) if first => continue,
            Err(_) => {
                return Err(Error::Parse {
                    line: lineno,
                    message: format!("bad timestamp `{}`", fields[0]),
                })
            }
        };
        if fields[1].is_empty() || fields[2].is_empty() {
            return Err(Error::Parse {
                line: lineno,
                message: "empty node id".into(),
            });
        }
        out.push(ContactRecord {
            timestamp,
            i: fields[1].to_string(),
            j: fields[2].to_string(),
            class_i: fields[3].to_string(),
            class_j: fields[4].to_string(),
        });
    }
    Ok(out)
}

/// Splits records into calendar days (`timestamp / 86400`), in order.
pub fn group_by_day(records: &[ContactRecord]) -> Vec<Vec<ContactRecord>> {
    let mut days: BTreeMap<i64, Vec<ContactRecord>> = BTreeMap::new();
    for r in records {
        days.entry(r.timestamp.div_euclid(86_400))
            .or_default()
            .push(r.clone());
    }
    days.into_values().collect()
}

/// Builds a one-day contact graph: an edge joins two nodes iff they share
/// strictly more than `min_contacts` events. Nodes without a qualifying
/// edge are dropped; the rest are indexed in label order (numeric when all
/// labels are integers).
pub fn load_contact_graph(records: &[ContactRecord], min_contacts: usize) -> Result<Graph> {
    let mut classes: HashMap<&str, &str> = HashMap::new();
    let mut counts: HashMap<(&str, &str), usize> = HashMap::new();
    for r in records {
        for (node, class) in [(&r.i, &r.class_i), (&r.j, &r.class_j)] {
            match classes.get(node.as_str()) {
                Some(&known) if known != class => {
                    return Err(Error::Ingestion(format!(
                        "node {node} labelled both `{known}` and `{class}`"
                    )))
                }
                Some(_) => {}
                None => {
                    classes.insert(node, class);
                }
            }
        }
        if r.i == r.j {
            continue;
        }
        let key = if r.i < r.j {
            (r.i.as_str(), r.j.as_str())
        } else {
            (r.j.as_str(), r.i.as_str())
        };
        *counts.entry(key).or_default() += 1;
    }

    let qualifying: Vec<(&str, &str)> = counts
        .into_iter()
        .filter(|&(_, c)| c > min_contacts)
        .map(|(k, _)| k)
        .collect();
    let mut labels: Vec<&str> = qualifying.iter().flat_map(|&(a, b)| [a, b]).collect();
    let numeric = labels.iter().all(|l| l.parse::<i64>().is_ok());
    if numeric {
        labels.sort_by_key(|l| l.parse::<i64>().unwrap_or_default());
    } else {
        labels.sort_unstable();
    }
    labels.dedup();
    if labels.is_empty() {
        return Err(Error::Ingestion(format!(
            "no pair has more than {min_contacts} contacts"
        )));
    }
    let index: HashMap<&str, usize> = labels.iter().enumerate().map(|(i, &l)| (l, i)).collect();
    let edges = qualifying.iter().map(|&(a, b)| (index[a], index[b]));
    let node_classes = labels.iter().map(|l| classes[l].to_string()).collect();
    Graph::from_edges(format!("contact-{}", labels.len()), labels.len(), edges)?
        .with_classes(node_classes)
}
