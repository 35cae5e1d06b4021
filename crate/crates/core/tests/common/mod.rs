#![allow(dead_code)]

use ndarray::{s, Array2};
use netdemix::nn::tape::TransposedConv;
use netdemix::graph::{random_geometric_graph, Graph, RggSpec};
use netdemix::nn::Mat;
use netdemix::rng::{self, Rng};
use rand::seq::SliceRandom;
use rand::Rng as _;

pub fn rgg(n: usize, d_r: f64, seed: u64) -> Graph {
    random_geometric_graph(&RggSpec::new(n, d_r, seed)).unwrap()
}

pub fn uniform(shape: (usize, usize), lo: f64, hi: f64, rng: &mut Rng) -> Mat {
    Array2::from_shape_fn(shape, |_| rng.random_range(lo..hi))
}

/// A random permutation `perm` with `perm[old] = new`.
pub fn permutation(n: usize, rng: &mut Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

/// The same graph with node `i` relabelled `perm[i]`.
pub fn permute_graph(g: &Graph, perm: &[usize]) -> Graph {
    let edges: Vec<(usize, usize)> = g.edges().into_iter().map(|(i, j)| (perm[i], perm[j])).collect();
    Graph::from_edges(g.id(), g.num_nodes(), edges).unwrap()
}

/// Rows moved so that row `i` of `m` lands at row `perm[i]`.
pub fn permute_rows(m: &Mat, perm: &[usize]) -> Mat {
    let mut out = Mat::zeros(m.dim());
    for (i, &p) in perm.iter().enumerate() {
        out.row_mut(p).assign(&m.row(i));
    }
    out
}

pub fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.dim(), b.dim());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn seeded(seed: u64) -> Rng {
    rng::root(seed)
}

pub fn naive_depthwise(x: &Mat, w: &Mat, b: &Mat, src: &[usize]) -> Mat {
    let n = x.nrows();
    let k = w.ncols();
    let pad = k / 2;
    let mut padded = Mat::zeros((n + 2 * pad, x.ncols()));
    padded.slice_mut(s![pad..pad + n, ..]).assign(x);
    Array2::from_shape_fn((n, src.len()), |(i, c)| {
        let window = padded.slice(s![i..i + k, src[c]]);
        b[[0, c]] + window.iter().zip(w.row(c)).map(|(a, b)| a * b).sum::<f64>()
    })
}

/// Inserts `stride - 1` zeros between inputs, runs a full convolution with
/// the kernel, then crops `padding` from both ends.
pub fn insert_zeros_oracle(x: &Mat, w: &Mat, b: &Mat, g: &TransposedConv) -> Mat {
    let up_len = (g.in_len - 1) * g.stride + 1;
    let full_len = up_len + g.kernel - 1;
    let out_len = full_len - 2 * g.padding;
    let mut out = Mat::zeros((x.nrows(), g.out_channels * out_len));
    for r in 0..x.nrows() {
        for co in 0..g.out_channels {
            let mut full = vec![0.0; full_len];
            for ci in 0..g.in_channels {
                let mut up = vec![0.0; up_len];
                for l in 0..g.in_len {
                    up[l * g.stride] = x[[r, ci * g.in_len + l]];
                }
                for (m, slot) in full.iter_mut().enumerate() {
                    for k in 0..g.kernel {
                        if m >= k && m - k < up_len {
                            *slot += up[m - k] * w[[ci, co * g.kernel + k]];
                        }
                    }
                }
            }
            for j in 0..out_len {
                out[[r, co * out_len + j]] = b[[0, co]] + full[j + g.padding];
            }
        }
    }
    out
}
