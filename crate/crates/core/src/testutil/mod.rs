#[path = "../../tests/common/oracle.rs"]
pub mod oracle;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::DenseGraph;
use crate::tensor::{ParamSpec, ParamStore, Precision, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_matrix<R: Rng>(r: &mut R, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| r.random_range(-scale..scale)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

pub fn random_graph<R: Rng>(r: &mut R, n: usize, p: f64) -> DenseGraph {
    let mut g = DenseGraph::empty(n);
    for i in 0..n {
        for j in 0..n {
            if i != j && r.random_bool(p) {
                g.add_edge(i, j).unwrap();
            }
        }
    }
    g
}

pub fn store_from<R: Rng>(specs: &[ParamSpec], r: &mut R) -> ParamStore {
    ParamStore::from_specs(specs, r, Precision::Double).unwrap()
}

/// Elementwise `|a − b| ≤ tol · max(1, |b|)`.
#[track_caller]
pub fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len(), "length mismatch");
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol * y.abs().max(1.0), "entry {i}: {x} vs {y}");
    }
}
