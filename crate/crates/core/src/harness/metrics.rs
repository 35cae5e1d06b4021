use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Mat;

/// `(1 / NT) * |Y - Y_hat|_F^2` on raw probabilities.
pub fn evaluate_mse(y_hat: &Mat, y: &Mat) -> Result<f64> {
    if y_hat.dim() != y.dim() {
        return Err(Error::Dimension(format!(
            "prediction {:?} vs truth {:?}",
            y_hat.dim(),
            y.dim()
        )));
    }
    if y.is_empty() {
        return Err(Error::Dimension("empty series".into()));
    }
    let sq: f64 = y_hat.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sq / y.len() as f64)
}

/// Classes ranked by how strongly they look like the epidemic's origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceRanking {
    /// First time step (0-based) with some prediction above 0.5, or the
    /// column of the overall maximum when none exceeds it.
    pub t_prime: usize,
    /// Class labels, best first.
    pub ranked: Vec<String>,
    /// Score of each entry of `ranked`.
    pub scores: Vec<f64>,
}

impl SourceRanking {
    /// Whether `true_class` is among the first `k` entries.
    pub fn hit(&self, true_class: &str, k: usize) -> bool {
        self.ranked.iter().take(k).any(|c| c == true_class)
    }
}

/// Ranks node classes by their maximal prediction at the first step where
/// some node's prediction exceeds 0.5. Ties keep class-label order.
pub fn source_class_ranking(y_hat: &Mat, class_map: &[String]) -> Result<SourceRanking> {
    let (n, t) = y_hat.dim();
    if class_map.is_empty() {
        return Err(Error::InvalidArgument("empty class map".into()));
    }
    if class_map.len() != n || t == 0 {
        return Err(Error::Dimension(format!(
            "{} class labels for a {n} x {t} prediction",
            class_map.len()
        )));
    }
    let col_max: Vec<f64> = (0..t)
        .map(|c| y_hat.column(c).iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let t_prime = match col_max.iter().position(|&m| m > 0.5) {
        Some(c) => c,
        None => {
            let mut best = 0;
            for (c, &m) in col_max.iter().enumerate() {
                if m > col_max[best] {
                    best = c;
                }
            }
            best
        }
    };
    let mut classes: Vec<String> = class_map.to_vec();
    classes.sort_by(|a, b| compare_labels(a, b));
    classes.dedup();
    let mut scored: Vec<(String, f64)> = classes
        .into_iter()
        .map(|c| {
            let s = (0..n)
                .filter(|&i| class_map[i] == c)
                .map(|i| y_hat[[i, t_prime]])
                .fold(f64::NEG_INFINITY, f64::max);
            (c, s)
        })
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal));
    let (ranked, scores) = scored.into_iter().unzip();
    Ok(SourceRanking {
        t_prime,
        ranked,
        scores,
    })
}

/// Numeric labels by value, otherwise lexicographic.
pub fn compare_labels(a: &str, b: &str) -> Ordering {
    match (a.parse::<i64>(), b.parse::<i64>()) {
        (Ok(x), Ok(y)) => x.cmp(&y),
        (Ok(_), Err(_)) => Ordering::Less,
        (Err(_), Ok(_)) => Ordering::Greater,
        _ => a.cmp(b),
    }
}

/// Top-k hit indicator for one prediction.
pub fn source_class_topk(y_hat: &Mat, class_map: &[String], true_class: &str, k: usize) -> Result<bool> {
    Ok(source_class_ranking(y_hat, class_map)?.hit(true_class, k))
}
