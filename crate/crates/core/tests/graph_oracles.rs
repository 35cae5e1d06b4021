mod common;

use nalgebra::{DMatrix, SymmetricEigen};
use netdemix::graph::{
    induced_subgraph, load_contact_graph, normalize_adjacency, random_geometric_graph, Graph, RggSpec,
};
use proptest::prelude::*;
use rand::Rng as _;

fn distance_oracle(coords: &[Vec<f64>], d_r: f64) -> Vec<Vec<bool>> {
    let n = coords.len();
    let mut adj = vec![vec![false; n]; n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let d2: f64 = coords[i].iter().zip(&coords[j]).map(|(a, b)| (a - b).powi(2)).sum();
                adj[i][j] = d2.sqrt() <= d_r;
            }
        }
    }
    adj
}

fn check_against_oracle(g: &Graph, d_r: f64) {
    let coords = g.coordinates().expect("RGG stores coordinates");
    let oracle = distance_oracle(coords, d_r);
    for (i, row) in oracle.iter().enumerate() {
        for (j, &linked) in row.iter().enumerate() {
            assert_eq!(g.has_edge(i, j), linked, "pair ({i},{j})");
            assert_eq!(g.adjacency()[[i, j]], if linked { 1.0 } else { 0.0 });
        }
    }
}

fn spectrum(m: &ndarray::Array2<f64>) -> Vec<f64> {
    let n = m.nrows();
    let dm = DMatrix::from_fn(n, n, |i, j| m[[i, j]]);
    SymmetricEigen::new(dm).eigenvalues.iter().copied().collect()
}

#[test]
fn rgg_matches_brute_force_distances() {
    for seed in 0..5 {
        let g = random_geometric_graph(&RggSpec::new(100, 0.25, seed)).unwrap();
        check_against_oracle(&g, 0.25);
        let coords = g.coordinates().unwrap();
        assert!(coords.iter().flatten().all(|&c| (0.0..1.0).contains(&c)));
    }
}

#[test]
fn normalized_spectrum_lies_in_unit_interval() {
    for seed in 0..10 {
        let g = random_geometric_graph(&RggSpec::new(20, 0.4, seed)).unwrap();
        let m = normalize_adjacency(&g).matrix;
        assert_eq!(m, m.t());
        assert!(m.iter().all(|&v| v >= 0.0));
        for l in spectrum(&m) {
            assert!(l.abs() <= 1.0 + 1e-9, "eigenvalue {l}");
        }
    }
}

#[test]
fn normalization_matches_degree_formula() {
    let g = common::rgg(15, 0.5, 3);
    let m = normalize_adjacency(&g).matrix;
    let deg: Vec<f64> = (0..15).map(|i| g.degree(i) as f64 + 1.0).collect();
    for i in 0..15 {
        for j in 0..15 {
            let a = g.adjacency()[[i, j]] + if i == j { 1.0 } else { 0.0 };
            assert!((m[[i, j]] - a / (deg[i] * deg[j]).sqrt()).abs() < 1e-15);
        }
    }
}

#[test]
fn induced_subgraph_is_the_submatrix() {
    let mut rng = common::seeded(7);
    for seed in 0..5 {
        let g = common::rgg(40, 0.35, seed)
            .with_classes((0..40).map(|i| format!("c{}", i % 3)).collect())
            .unwrap();
        let mut keep: Vec<usize> = (0..40).filter(|_| rng.random_bool(0.5)).collect();
        keep.push(0);
        keep.sort_unstable();
        keep.dedup();
        let (sub, map) = induced_subgraph(&g, &keep).unwrap();
        assert_eq!(sub.num_nodes(), keep.len());
        for (a, &i) in keep.iter().enumerate() {
            assert_eq!(map[i], Some(a));
            assert_eq!(sub.node_classes().unwrap()[a], g.node_classes().unwrap()[i]);
            assert_eq!(sub.coordinates().unwrap()[a], g.coordinates().unwrap()[i]);
            for (b, &j) in keep.iter().enumerate() {
                assert_eq!(sub.adjacency()[[a, b]], g.adjacency()[[i, j]]);
            }
        }
        assert_eq!(map.iter().filter(|m| m.is_some()).count(), keep.len());
    }
    assert!(induced_subgraph(&common::rgg(3, 1.0, 0), &[]).is_err());
}

#[test]
fn contact_ingestion_is_idempotent() {
    let mut rng = common::seeded(11);
    let mut records = Vec::new();
    for _ in 0..600 {
        let i = rng.random_range(0..30u32);
        let j = rng.random_range(0..30u32);
        records.push(netdemix::graph::ContactRecord {
            timestamp: rng.random_range(0..80_000),
            i: i.to_string(),
            j: j.to_string(),
            class_i: format!("{}A", i % 4),
            class_j: format!("{}A", j % 4),
        });
    }
    let g = load_contact_graph(&records, 1).unwrap();
    assert!((0..g.num_nodes()).all(|i| g.degree(i) > 0));
    let again = load_contact_graph(&g.to_contact_records(1), 1).unwrap();
    assert_eq!(again.adjacency(), g.adjacency());
    assert_eq!(again.node_classes(), g.node_classes());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn rgg_invariants(n in 1usize..60, d_r in 0.0f64..1.9, three_d in any::<bool>(), seed in any::<u64>()) {
        let spec = RggSpec { n, d_r, dimension: if three_d { 3 } else { 2 }, seed };
        let g = random_geometric_graph(&spec).unwrap();
        let a = g.adjacency();
        for i in 0..n {
            prop_assert_eq!(a[[i, i]], 0.0);
            for j in 0..n {
                prop_assert_eq!(a[[i, j]], a[[j, i]]);
            }
        }
        check_against_oracle(&g, d_r);
        let again = random_geometric_graph(&spec).unwrap();
        prop_assert_eq!(again.edges(), g.edges());
    }

    #[test]
    fn normalization_invariants_on_arbitrary_graphs(
        n in 1usize..25,
        raw in proptest::collection::vec((0usize..25, 0usize..25), 0..80),
    ) {
        let edges: Vec<(usize, usize)> = raw.into_iter().filter(|&(i, j)| i < n && j < n && i != j).collect();
        let g = Graph::from_edges("p", n, edges).unwrap();
        let m = normalize_adjacency(&g).matrix;
        prop_assert_eq!(&m, &m.t());
        prop_assert!(m.iter().all(|&v| v >= 0.0));
        for l in spectrum(&m) {
            prop_assert!((-1.0 - 1e-9..=1.0 + 1e-9).contains(&l));
        }
    }
}
