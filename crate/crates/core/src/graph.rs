//! KNN/RBF pixel graphs and the Laplacian family built from them.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{DenseMatrix, SparseSymMatrix};

/// Undirected weighted graph over `n` vertices with its renormalized
/// propagation matrix cached.
#[derive(Clone, Debug)]
pub struct Graph {
    n: usize,
    adjacency: SparseSymMatrix,
    degree: Vec<f64>,
    knn_k: usize,
    rbf_sigma: f64,
    prop: SparseSymMatrix,
}

impl Graph {
    /// Wraps an arbitrary adjacency. The diagonal must be empty and every weight
    /// non-negative. `knn_k`/`rbf_sigma` are recorded for bookkeeping only.
    pub fn from_adjacency(adjacency: SparseSymMatrix, knn_k: usize, rbf_sigma: f64) -> Result<Self> {
        for &(r, c, w) in adjacency.entries() {
            if r == c {
                return Err(Error::contract(format!("self-edge on vertex {r}")));
            }
            if w < 0.0 {
                return Err(Error::contract(format!("negative weight on edge ({r}, {c})")));
            }
        }
        let degree = adjacency.row_sums();
        let prop = renormalize(&adjacency);
        Ok(Self {
            n: adjacency.dim(),
            adjacency,
            degree,
            knn_k,
            rbf_sigma,
            prop,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn adjacency(&self) -> &SparseSymMatrix {
        &self.adjacency
    }

    pub fn degree(&self) -> &[f64] {
        &self.degree
    }

    pub fn knn_k(&self) -> usize {
        self.knn_k
    }

    pub fn rbf_sigma(&self) -> f64 {
        self.rbf_sigma
    }

    /// Cached `D̃^{-1/2} (A + I) D̃^{-1/2}`.
    pub fn prop(&self) -> &SparseSymMatrix {
        &self.prop
    }

    pub fn neighbors(&self, v: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.adjacency.row(v)
    }

    /// Writes one `i j w` line per undirected edge (`i < j`).
    pub fn write_edge_list<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for &(i, j, w) in self.adjacency.entries() {
            writeln!(out, "{i} {j} {w}")?;
        }
        Ok(())
    }
}

/// RBF affinity `exp(-d² / σ²)`, kept strictly positive so that a selected
/// neighbor never disappears through underflow.
pub fn rbf_weight(dist_sq: f64, sigma: f64) -> f64 {
    (-dist_sq / (sigma * sigma)).exp().max(f64::MIN_POSITIVE)
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// For each row, its `k` nearest other rows by Euclidean distance, ties broken
/// by lower index. Returned as `(neighbor, squared distance)`.
pub fn k_nearest(features: &DenseMatrix, k: usize) -> Vec<Vec<(usize, f64)>> {
    let n = features.rows();
    (0..n)
        .into_par_iter()
        .map(|i| {
            let xi = features.row(i);
            let mut cand: Vec<(usize, f64)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (j, squared_distance(xi, features.row(j))))
                .collect();
            cand.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            cand.truncate(k);
            cand
        })
        .collect()
}

/// KNN graph with RBF weights, symmetrized by union.
pub fn build_knn_rbf_graph(features: &DenseMatrix, k: usize, sigma: f64) -> Result<Graph> {
    let n = features.rows();
    if n < 2 {
        return Err(Error::contract(format!("KNN graph needs at least 2 vertices, got {n}")));
    }
    if k == 0 || k >= n {
        return Err(Error::contract(format!("k must satisfy 1 <= k < n; k={k}, n={n}")));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::contract(format!("sigma must be positive, got {sigma}")));
    }
    let lists = k_nearest(features, k);
    let mut edges: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for (i, list) in lists.iter().enumerate() {
        for &(j, d2) in list {
            edges.insert((i.min(j), i.max(j)), rbf_weight(d2, sigma));
        }
    }
    let adjacency =
        SparseSymMatrix::from_sorted_upper(n, edges.into_iter().map(|((i, j), w)| (i, j, w)).collect());
    Graph::from_adjacency(adjacency, k, sigma)
}

/// `D̃^{-1/2} (A + I) D̃^{-1/2}` with `D̃ = rowsum(A) + 1`.
pub(crate) fn renormalize(adjacency: &SparseSymMatrix) -> SparseSymMatrix {
    let deg: Vec<f64> = adjacency.row_sums().iter().map(|d| d + 1.0).collect();
    adjacency
        .affine_identity(1.0, 1.0)
        .map_entries(|r, c, w| w / (deg[r] * deg[c]).sqrt())
}

/// `L = D − A`.
pub fn laplacian(g: &Graph) -> SparseSymMatrix {
    with_diagonal(&g.adjacency.map_entries(|_, _, w| -w), &g.degree)
}

/// `L_sym = I − D^{-1/2} A D^{-1/2}`.
pub fn sym_normalized_laplacian(g: &Graph) -> Result<SparseSymMatrix> {
    if let Some(v) = g.degree.iter().position(|&d| d <= 0.0) {
        return Err(Error::contract(format!("vertex {v} has zero degree")));
    }
    let deg = &g.degree;
    Ok(g
        .adjacency
        .map_entries(|r, c, w| -w / (deg[r] * deg[c]).sqrt())
        .affine_identity(1.0, 1.0))
}

/// Recomputes `D̃^{-1/2} Ã D̃^{-1/2}` from the adjacency.
pub fn renormalized_propagation(g: &Graph) -> SparseSymMatrix {
    renormalize(&g.adjacency)
}

/// `L̃ = (2 / λ_max) L_sym − I`.
pub fn chebyshev_scaled(l_sym: &SparseSymMatrix, lambda_max: f64) -> Result<SparseSymMatrix> {
    if !(lambda_max > 0.0 && lambda_max.is_finite()) {
        return Err(Error::contract(format!("lambda_max must be positive, got {lambda_max}")));
    }
    Ok(l_sym.affine_identity(2.0 / lambda_max, -1.0))
}

/// Replaces the diagonal of `m` with `diag`, inserting entries where absent.
fn with_diagonal(m: &SparseSymMatrix, diag: &[f64]) -> SparseSymMatrix {
    let mut map: BTreeMap<(usize, usize), f64> = m
        .entries()
        .iter()
        .filter(|e| e.0 != e.1)
        .map(|&(r, c, w)| ((r, c), w))
        .collect();
    for (i, &d) in diag.iter().enumerate() {
        map.insert((i, i), d);
    }
    SparseSymMatrix::from_sorted_upper(
        m.dim(),
        map.into_iter().map(|((r, c), w)| (r, c, w)).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::symmetric_eigendecomposition;
    use crate::test_support::{random_features, random_graph};

    fn two_node(w: f64) -> Graph {
        Graph::from_adjacency(SparseSymMatrix::from_entries(2, [(0, 1, w)]).unwrap(), 1, 1.0)
            .unwrap()
    }

    #[test]
    fn identical_rows_give_unit_weight() {
        let x = DenseMatrix::from_rows(&[[0.3, 0.7], [0.3, 0.7]]).unwrap();
        let g = build_knn_rbf_graph(&x, 1, 1.0).unwrap();
        assert_eq!(g.adjacency().entries(), &[(0, 1, 1.0)]);
    }

    #[test]
    fn distance_equal_to_sigma_gives_inverse_e() {
        let x = DenseMatrix::from_rows(&[[0.0, 0.0], [0.6, 0.8]]).unwrap();
        let g = build_knn_rbf_graph(&x, 1, 1.0).unwrap();
        let w = g.adjacency().get(0, 1);
        assert!((w - (-1.0f64).exp()).abs() < 1e-15);
        assert!((w - 0.36788).abs() < 1e-5);
    }

    #[test]
    fn knn_matches_brute_force_pair_sort() {
        let x = random_features(5, 2, 42);
        let g = build_knn_rbf_graph(&x, 2, 1.0).unwrap();
        // Oracle: full distance table, per-row sort, union.
        let mut expected = std::collections::BTreeSet::new();
        for i in 0..5 {
            let mut d: Vec<(f64, usize)> = (0..5)
                .filter(|&j| j != i)
                .map(|j| {
                    let dx = x.get(i, 0) - x.get(j, 0);
                    let dy = x.get(i, 1) - x.get(j, 1);
                    (dx * dx + dy * dy, j)
                })
                .collect();
            d.sort_by(|a, b| a.partial_cmp(b).unwrap());
            for &(_, j) in &d[..2] {
                expected.insert((i.min(j), i.max(j)));
            }
        }
        let got: std::collections::BTreeSet<_> =
            g.adjacency().entries().iter().map(|&(i, j, _)| (i, j)).collect();
        assert_eq!(got, expected);
    }

    #[test]
    fn invariants_of_built_graph() {
        let x = random_features(40, 5, 7);
        let k = 4;
        let g = build_knn_rbf_graph(&x, k, 1.0).unwrap();
        for v in 0..g.n() {
            // Union symmetrization guarantees at least k neighbors; popular
            // vertices can be chosen by many others, so there is no 2k ceiling.
            let deg = g.neighbors(v).count();
            assert!(deg >= k && deg < g.n(), "vertex {v} has {deg} neighbors");
            assert!(g.adjacency().get(v, v) == 0.0);
            let sum: f64 = g.neighbors(v).map(|(_, w)| w).sum();
            assert!((sum - g.degree()[v]).abs() < 1e-10);
        }
        for &(_, _, w) in g.adjacency().entries() {
            assert!(w > 0.0 && w <= 1.0);
        }
        assert!(g.prop().diagonal().iter().all(|&d| d > 0.0));
    }

    #[test]
    fn precondition_errors() {
        let x = random_features(3, 2, 1);
        assert!(build_knn_rbf_graph(&x, 3, 1.0).is_err());
        assert!(build_knn_rbf_graph(&x, 0, 1.0).is_err());
        assert!(build_knn_rbf_graph(&x, 1, 0.0).is_err());
        assert!(build_knn_rbf_graph(&random_features(1, 2, 1), 1, 1.0).is_err());
    }

    #[test]
    fn duplicate_rows_respect_budget_with_index_ties() {
        let x = DenseMatrix::from_rows(&[[1.0], [1.0], [1.0], [1.0]]).unwrap();
        let g = build_knn_rbf_graph(&x, 1, 1.0).unwrap();
        // Every vertex picks the lowest other index: 0→1, 1→0, 2→0, 3→0.
        let got: Vec<_> = g.adjacency().entries().iter().map(|&(i, j, _)| (i, j)).collect();
        assert_eq!(got, vec![(0, 1), (0, 2), (0, 3)]);
    }

    #[test]
    fn laplacian_cases() {
        let empty = Graph::from_adjacency(SparseSymMatrix::zeros(3), 1, 1.0).unwrap();
        assert_eq!(laplacian(&empty).to_dense(), DenseMatrix::zeros(3, 3));

        let l = laplacian(&two_node(0.4)).to_dense();
        assert_eq!(l, DenseMatrix::from_rows(&[[0.4, -0.4], [-0.4, 0.4]]).unwrap());

        let g = random_graph(8, 3, 11);
        let ones = DenseMatrix::column(&[1.0; 8]);
        let l1 = laplacian(&g).mul_dense(&ones).unwrap();
        assert!(l1.max_abs() < 1e-10);
    }

    #[test]
    fn sym_normalized_cases() {
        let l = sym_normalized_laplacian(&two_node(1.0)).unwrap().to_dense();
        assert_eq!(l, DenseMatrix::from_rows(&[[1.0, -1.0], [-1.0, 1.0]]).unwrap());

        let g = random_graph(10, 3, 3);
        let ls = sym_normalized_laplacian(&g).unwrap();
        assert!(ls.diagonal().iter().all(|&d| (d - 1.0).abs() < 1e-15));
        let e = symmetric_eigendecomposition(&ls).unwrap();
        assert!(e.values[0] >= -1e-8 && e.values[9] <= 2.0 + 1e-8);

        let isolated = Graph::from_adjacency(
            SparseSymMatrix::from_entries(3, [(0, 1, 1.0)]).unwrap(),
            1,
            1.0,
        )
        .unwrap();
        let err = sym_normalized_laplacian(&isolated).unwrap_err().to_string();
        assert!(err.contains("vertex 2"), "{err}");
    }

    #[test]
    fn renormalized_cases() {
        let single = Graph::from_adjacency(SparseSymMatrix::zeros(1), 0, 1.0).unwrap();
        assert_eq!(renormalized_propagation(&single).to_dense().data(), &[1.0]);

        let p = renormalized_propagation(&two_node(1.0)).to_dense();
        assert_eq!(p, DenseMatrix::from_rows(&[[0.5, 0.5], [0.5, 0.5]]).unwrap());

        for seed in 0..5 {
            let g = random_graph(12, 3, seed);
            let p = renormalized_propagation(&g);
            assert_eq!(p, *g.prop());
            let e = symmetric_eigendecomposition(&p).unwrap();
            assert!(e.values[0] > -1.0 - 1e-8 && e.values[11] <= 1.0 + 1e-8);
            // D̃^{1/2}·1 is the eigenvector for eigenvalue 1.
            let sqrt_deg: Vec<f64> = g.degree().iter().map(|d| (d + 1.0).sqrt()).collect();
            let image = p.mul_dense(&DenseMatrix::column(&sqrt_deg)).unwrap();
            assert!(image.max_abs_diff(&DenseMatrix::column(&sqrt_deg)) < 1e-12);
        }
        // Row sums are not bounded by 1 in general: the hub of a star exceeds it.
        let star = Graph::from_adjacency(
            SparseSymMatrix::from_entries(4, [(0, 1, 1.0), (0, 2, 1.0), (0, 3, 1.0)]).unwrap(),
            3,
            1.0,
        )
        .unwrap();
        let hub = renormalized_propagation(&star).row_sums()[0];
        assert!((hub - (0.25 + 3.0 / 8f64.sqrt())).abs() < 1e-15);
        assert!(hub > 1.0);
        let regular = Graph::from_adjacency(
            SparseSymMatrix::from_entries(3, [(0, 1, 1.0), (1, 2, 1.0), (0, 2, 1.0)]).unwrap(),
            2,
            1.0,
        )
        .unwrap();
        for s in renormalized_propagation(&regular).row_sums() {
            assert!((s - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn chebyshev_scaling_cases() {
        let ls = sym_normalized_laplacian(&two_node(1.0)).unwrap();
        let lt = chebyshev_scaled(&ls, 2.0).unwrap().to_dense();
        assert_eq!(lt, DenseMatrix::from_rows(&[[0.0, -1.0], [-1.0, 0.0]]).unwrap());
        assert!(chebyshev_scaled(&ls, 0.0).is_err());
        assert!(chebyshev_scaled(&ls, -1.0).is_err());

        let g = random_graph(10, 3, 5);
        let ls = sym_normalized_laplacian(&g).unwrap();
        let lt = chebyshev_scaled(&ls, 2.0).unwrap();
        let lhs = lt.affine_identity(1.0, 1.0).to_dense();
        assert!(lhs.max_abs_diff(&ls.to_dense()) < 1e-15);

        let lmax = *symmetric_eigendecomposition(&ls).unwrap().values.last().unwrap();
        let e = symmetric_eigendecomposition(&chebyshev_scaled(&ls, lmax).unwrap()).unwrap();
        assert!(e.values[0] >= -1.0 - 1e-8 && e.values[9] <= 1.0 + 1e-8);
    }

    #[test]
    fn outputs_are_symmetric_in_storage() {
        let g = random_graph(9, 2, 8);
        for m in [
            g.adjacency().clone(),
            laplacian(&g),
            sym_normalized_laplacian(&g).unwrap(),
            renormalized_propagation(&g),
            chebyshev_scaled(&sym_normalized_laplacian(&g).unwrap(), 2.0).unwrap(),
        ] {
            let d = m.to_dense();
            assert_eq!(d, d.transpose());
        }
    }

    #[test]
    fn permutation_equivariance() {
        let x = random_features(10, 3, 21);
        let perm = [3, 7, 0, 9, 1, 4, 8, 2, 6, 5];
        let g = build_knn_rbf_graph(&x, 3, 1.0).unwrap();
        let gp = build_knn_rbf_graph(&x.select_rows(&perm), 3, 1.0).unwrap();
        for i in 0..10 {
            for j in 0..10 {
                assert_eq!(gp.adjacency().get(i, j), g.adjacency().get(perm[i], perm[j]));
            }
        }
    }

    #[test]
    fn wider_sigma_raises_every_weight() {
        let x = random_features(15, 4, 9);
        let narrow = build_knn_rbf_graph(&x, 3, 0.5).unwrap();
        let wide = build_knn_rbf_graph(&x, 3, 1.5).unwrap();
        assert_eq!(narrow.adjacency().stored_len(), wide.adjacency().stored_len());
        for (&(i, j, a), &(p, q, b)) in narrow.adjacency().entries().iter().zip(wide.adjacency().entries()) {
            assert_eq!((i, j), (p, q));
            assert!(b > a);
        }
    }

    #[test]
    fn edge_list_dump() {
        let mut out = Vec::new();
        two_node(0.25).write_edge_list(&mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "0 1 0.25\n");
    }
}
