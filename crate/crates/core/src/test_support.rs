//! Small deterministic fixtures shared by unit and integration tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::{build_knn_rbf_graph, Graph};
use crate::linalg::{DenseMatrix, SparseSymMatrix};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `n × d` matrix with entries uniform in `[0, 1)`.
pub fn random_features(n: usize, d: usize, seed: u64) -> DenseMatrix {
    let mut r = rng(seed);
    DenseMatrix::from_fn(n, d, |_, _| r.random::<f64>())
}

/// Matrix with entries uniform in `[-scale, scale)`.
pub fn random_matrix(rows: usize, cols: usize, scale: f64, seed: u64) -> DenseMatrix {
    let mut r = rng(seed);
    DenseMatrix::from_fn(rows, cols, |_, _| r.random_range(-scale..scale))
}

/// KNN/RBF graph over random points in the unit cube of dimension 3.
pub fn random_graph(n: usize, k: usize, seed: u64) -> Graph {
    build_knn_rbf_graph(&random_features(n, 3, seed), k.min(n - 1), 1.0)
        .expect("valid random graph")
}

/// Path `0 - 1 - ... - (n-1)` with unit weights.
pub fn path_graph(n: usize) -> Graph {
    let adj = SparseSymMatrix::from_entries(n, (0..n.saturating_sub(1)).map(|i| (i, i + 1, 1.0)))
        .expect("path edges");
    Graph::from_adjacency(adj, 1, 1.0).expect("path graph")
}

/// Complete graph with equal weights `w`.
pub fn complete_graph(n: usize, w: f64) -> Graph {
    let adj = SparseSymMatrix::from_entries(
        n,
        (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j, w))),
    )
    .expect("complete edges");
    Graph::from_adjacency(adj, n - 1, 1.0).expect("complete graph")
}

/// Central finite-difference gradient of `f` at `x` with step `h`.
pub fn numeric_gradient(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖a − n‖ / max(‖a‖ + ‖n‖, 1e-12)` in the Euclidean norm.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / (na + nn).max(1e-12)
}

/// Projection loss `Σ out ⊙ r` with fixed random `r`, which makes every
/// output entry matter to the gradient.
pub fn projection(len: usize, seed: u64) -> Vec<f64> {
    let mut r = rng(seed);
    (0..len).map(|_| r.random_range(-1.0..1.0)).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
