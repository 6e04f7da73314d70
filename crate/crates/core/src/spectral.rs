//! Exact spectral-domain graph filtering and its polynomial approximations.
//!
//! The exact route diagonalizes the operator and applies a response in the
//! eigenbasis; it costs `O(N³)` and is meant for validating graphs and the
//! cheaper filters below on small problems (the eigensolver caps `N` at 2048).
//! The Chebyshev route runs the three-term recurrence on vectors and costs
//! `O(K · nnz)`.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::linalg::{symmetric_eigendecomposition, DenseMatrix, EigenPair, SparseSymMatrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FilterKind {
    /// One response value per eigenvalue, ascending order.
    ExactDiagonal,
    /// Coefficients `θ′_0 … θ′_K` of a Chebyshev series.
    Chebyshev,
    /// A single scalar `θ`.
    FirstOrder,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpectralFilter {
    pub theta: Vec<f64>,
    pub kind: FilterKind,
}

impl SpectralFilter {
    pub fn exact(theta: Vec<f64>) -> Result<Self> {
        Self::new(theta, FilterKind::ExactDiagonal)
    }

    pub fn chebyshev(theta: Vec<f64>) -> Result<Self> {
        if theta.is_empty() {
            return Err(Error::contract("Chebyshev filter needs at least one coefficient"));
        }
        Self::new(theta, FilterKind::Chebyshev)
    }

    pub fn first_order(theta: f64) -> Result<Self> {
        Self::new(vec![theta], FilterKind::FirstOrder)
    }

    fn new(theta: Vec<f64>, kind: FilterKind) -> Result<Self> {
        if theta.iter().any(|t| !t.is_finite()) {
            return Err(Error::contract("filter coefficients must be finite"));
        }
        Ok(Self { theta, kind })
    }

    /// Samples `response` at each eigenvalue of `basis`.
    pub fn exact_from_response(basis: &EigenPair, response: impl Fn(f64) -> f64) -> Result<Self> {
        Self::exact(basis.values.iter().map(|&l| response(l)).collect())
    }

    /// Chebyshev order `K` (number of coefficients minus one).
    pub fn order(&self) -> usize {
        self.theta.len().saturating_sub(1)
    }
}

fn check_signal(f: &DenseMatrix, n: usize, op: &'static str) -> Result<()> {
    if f.rows() != n {
        return Err(Error::shape(op, f.shape_str(), format!("{n} vertices")));
    }
    Ok(())
}

/// Graph Fourier transform `Uᵀ f`.
pub fn graph_fourier(f: &DenseMatrix, basis: &EigenPair) -> Result<DenseMatrix> {
    check_signal(f, basis.dim(), "graph_fourier")?;
    basis.vectors.t_matmul(f)
}

/// Inverse transform `U f̂`.
pub fn inverse_graph_fourier(coeffs: &DenseMatrix, basis: &EigenPair) -> Result<DenseMatrix> {
    check_signal(coeffs, basis.dim(), "inverse_graph_fourier")?;
    basis.vectors.matmul(coeffs)
}

/// `U · diag(θ) · Uᵀ · f`, diagonalizing `l` first.
pub fn spectral_filter(
    f: &DenseMatrix,
    filt: &SpectralFilter,
    l: &SparseSymMatrix,
) -> Result<DenseMatrix> {
    let basis = symmetric_eigendecomposition(l)?;
    spectral_filter_in_basis(f, filt, &basis)
}

/// Same as [`spectral_filter`] with a precomputed eigenbasis.
pub fn spectral_filter_in_basis(
    f: &DenseMatrix,
    filt: &SpectralFilter,
    basis: &EigenPair,
) -> Result<DenseMatrix> {
    if filt.kind != FilterKind::ExactDiagonal {
        return Err(Error::contract("spectral_filter expects an exact-diagonal filter"));
    }
    if filt.theta.len() != basis.dim() {
        return Err(Error::shape(
            "spectral_filter",
            format!("{} filter values", filt.theta.len()),
            format!("{} eigenvalues", basis.dim()),
        ));
    }
    let mut coeffs = graph_fourier(f, basis)?;
    for (r, &g) in filt.theta.iter().enumerate() {
        for v in coeffs.row_mut(r) {
            *v *= g;
        }
    }
    inverse_graph_fourier(&coeffs, basis)
}

/// `Σ_k θ′_k T_k(L̃) f` via `T_k = 2 L̃ T_{k−1} − T_{k−2}`, keeping two vectors.
pub fn chebyshev_filter(
    f: &DenseMatrix,
    filt: &SpectralFilter,
    l_tilde: &SparseSymMatrix,
) -> Result<DenseMatrix> {
    if filt.kind != FilterKind::Chebyshev {
        return Err(Error::contract("chebyshev_filter expects a Chebyshev filter"));
    }
    if filt.theta.is_empty() {
        return Err(Error::contract("Chebyshev filter needs at least one coefficient"));
    }
    check_signal(f, l_tilde.dim(), "chebyshev_filter")?;
    let radius = estimate_spectral_radius(l_tilde, 50);
    if radius > 1.0 + 1e-6 {
        log::warn!(
            "rescaled Laplacian spectrum reaches {radius:.6}, outside [-1, 1]; Chebyshev terms may grow"
        );
    }

    let mut out = f.scale(filt.theta[0]);
    if filt.theta.len() == 1 {
        return Ok(out);
    }
    let mut prev = f.clone();
    let mut cur = l_tilde.mul_dense(f)?;
    axpy(&mut out, filt.theta[1], &cur);
    for &theta in &filt.theta[2..] {
        let mut next = l_tilde.mul_dense(&cur)?;
        for (n, p) in next.data_mut().iter_mut().zip(prev.data()) {
            *n = 2.0 * *n - p;
        }
        axpy(&mut out, theta, &next);
        prev = std::mem::replace(&mut cur, next);
    }
    Ok(out)
}

/// `θ (I + D^{-1/2} A D^{-1/2}) f`, the unrenormalized first-order filter.
pub fn first_order_filter(f: &DenseMatrix, theta: f64, g: &Graph) -> Result<DenseMatrix> {
    check_signal(f, g.n(), "first_order_filter")?;
    let deg = g.degree();
    let op = g
        .adjacency()
        .map_entries(|r, c, w| w / (deg[r] * deg[c]).sqrt())
        .affine_identity(theta, theta);
    op.mul_dense(f)
}

fn axpy(y: &mut DenseMatrix, a: f64, x: &DenseMatrix) {
    for (yv, xv) in y.data_mut().iter_mut().zip(x.data()) {
        *yv += a * xv;
    }
}

/// Chebyshev interpolation coefficients of `response` on `[-1, 1]` at the
/// `K + 1` Chebyshev–Gauss nodes.
pub fn chebyshev_coefficients(response: impl Fn(f64) -> f64, order: usize) -> Vec<f64> {
    let m = order + 1;
    let samples: Vec<f64> = (0..m)
        .map(|j| response((PI * (j as f64 + 0.5) / m as f64).cos()))
        .collect();
    (0..m)
        .map(|k| {
            let s: f64 = samples
                .iter()
                .enumerate()
                .map(|(j, v)| v * (PI * k as f64 * (j as f64 + 0.5) / m as f64).cos())
                .sum();
            let c = 2.0 * s / m as f64;
            if k == 0 {
                c / 2.0
            } else {
                c
            }
        })
        .collect()
}

/// Power-iteration estimate of `max |λ|`. Deterministic start vector.
pub fn estimate_spectral_radius(m: &SparseSymMatrix, iterations: usize) -> f64 {
    let n = m.dim();
    if n == 0 {
        return 0.0;
    }
    let mut x = DenseMatrix::from_fn(n, 1, |r, _| 1.0 + (r % 7) as f64 * 0.1);
    let mut estimate = 0.0;
    for _ in 0..iterations {
        let norm = x.frobenius_sq().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        x = x.scale(1.0 / norm);
        let y = m.mul_dense(&x).expect("square operator");
        estimate = y.frobenius_sq().sqrt();
        x = y;
    }
    estimate
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{chebyshev_scaled, laplacian, sym_normalized_laplacian};
    use crate::test_support::{random_graph, random_matrix};
    use proptest::prelude::*;

    fn identity_basis(n: usize) -> EigenPair {
        EigenPair {
            vectors: DenseMatrix::identity(n),
            values: (0..n).map(|i| i as f64).collect(),
        }
    }

    #[test]
    fn fourier_with_identity_basis() {
        let f = DenseMatrix::column(&[1.0, -2.0, 3.5]);
        assert_eq!(graph_fourier(&f, &identity_basis(3)).unwrap(), f);
    }

    #[test]
    fn first_eigenvector_maps_to_unit_vector() {
        let g = random_graph(6, 2, 1);
        let basis = symmetric_eigendecomposition(&laplacian(&g)).unwrap();
        let u1 = DenseMatrix::column(&basis.vectors.column_values(0));
        let c = graph_fourier(&u1, &basis).unwrap();
        let mut e1 = vec![0.0; 6];
        e1[0] = 1.0;
        assert!(c.max_abs_diff(&DenseMatrix::column(&e1)) < 1e-12);
    }

    #[test]
    fn fourier_round_trip() {
        let g = random_graph(6, 2, 2);
        let basis = symmetric_eigendecomposition(&laplacian(&g)).unwrap();
        let f = random_matrix(6, 1, 1.0, 3);
        let back = inverse_graph_fourier(&graph_fourier(&f, &basis).unwrap(), &basis).unwrap();
        assert!(back.max_abs_diff(&f) <= 1e-9);
    }

    #[test]
    fn exact_filter_polynomials() {
        let g = random_graph(10, 3, 4);
        let l = laplacian(&g);
        let basis = symmetric_eigendecomposition(&l).unwrap();
        let f = random_matrix(10, 1, 1.0, 5);

        let ones = SpectralFilter::exact_from_response(&basis, |_| 1.0).unwrap();
        assert!(spectral_filter(&f, &ones, &l).unwrap().max_abs_diff(&f) < 1e-9);

        let lin = SpectralFilter::exact_from_response(&basis, |x| x).unwrap();
        let lf = l.mul_dense(&f).unwrap();
        assert!(spectral_filter(&f, &lin, &l).unwrap().max_abs_diff(&lf) <= 1e-8);

        let sq = SpectralFilter::exact_from_response(&basis, |x| x * x).unwrap();
        let llf = l.mul_dense(&lf).unwrap();
        assert!(spectral_filter(&f, &sq, &l).unwrap().max_abs_diff(&llf) <= 1e-8);
    }

    #[test]
    fn exact_filter_length_mismatch() {
        let g = random_graph(5, 2, 4);
        let f = random_matrix(5, 1, 1.0, 5);
        let filt = SpectralFilter::exact(vec![1.0; 4]).unwrap();
        assert!(matches!(
            spectral_filter(&f, &filt, &laplacian(&g)),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn chebyshev_low_orders() {
        let g = random_graph(8, 3, 6);
        let lt = chebyshev_scaled(&sym_normalized_laplacian(&g).unwrap(), 2.0).unwrap();
        let f = random_matrix(8, 1, 1.0, 7);
        let k0 = SpectralFilter::chebyshev(vec![1.0]).unwrap();
        assert_eq!(chebyshev_filter(&f, &k0, &lt).unwrap(), f);
        let k1 = SpectralFilter::chebyshev(vec![0.0, 1.0]).unwrap();
        assert!(chebyshev_filter(&f, &k1, &lt).unwrap().max_abs_diff(&lt.mul_dense(&f).unwrap()) < 1e-15);
        assert!(SpectralFilter::chebyshev(vec![]).is_err());
    }

    #[test]
    fn chebyshev_matches_exact_spectral_route() {
        let g = random_graph(8, 3, 8);
        let ls = sym_normalized_laplacian(&g).unwrap();
        let lmax = *symmetric_eigendecomposition(&ls).unwrap().values.last().unwrap();
        let lt = chebyshev_scaled(&ls, lmax).unwrap();
        let basis = symmetric_eigendecomposition(&lt).unwrap();
        let theta = [0.3, -1.2, 0.7, 0.45];
        let f = random_matrix(8, 1, 1.0, 9);
        // Oracle response: T_k(λ) = cos(k·arccos λ), clamped into the domain.
        let response = |lam: f64| -> f64 {
            let a = lam.clamp(-1.0, 1.0).acos();
            theta.iter().enumerate().map(|(k, t)| t * (k as f64 * a).cos()).sum()
        };
        let exact = spectral_filter_in_basis(
            &f,
            &SpectralFilter::exact_from_response(&basis, response).unwrap(),
            &basis,
        )
        .unwrap();
        let cheb = chebyshev_filter(&f, &SpectralFilter::chebyshev(theta.to_vec()).unwrap(), &lt).unwrap();
        assert!(cheb.max_abs_diff(&exact) <= 1e-8);
    }

    #[test]
    fn first_order_cases() {
        let g = Graph::from_adjacency(SparseSymMatrix::from_entries(2, [(0, 1, 1.0)]).unwrap(), 1, 1.0)
            .unwrap();
        let f = DenseMatrix::column(&[1.0, 0.0]);
        assert_eq!(first_order_filter(&f, 1.0, &g).unwrap().data(), &[1.0, 1.0]);
        assert_eq!(first_order_filter(&f, 0.0, &g).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn first_order_is_tied_chebyshev() {
        for seed in 0..5 {
            let g = random_graph(12, 3, seed);
            let lt = chebyshev_scaled(&sym_normalized_laplacian(&g).unwrap(), 2.0).unwrap();
            let f = random_matrix(12, 1, 1.0, seed + 100);
            let theta = 0.37 + seed as f64;
            let cheb = chebyshev_filter(&f, &SpectralFilter::chebyshev(vec![theta, -theta]).unwrap(), &lt)
                .unwrap();
            let fo = first_order_filter(&f, theta, &g).unwrap();
            assert!(cheb.max_abs_diff(&fo) <= 1e-10);
        }
    }

    #[test]
    fn chebyshev_error_shrinks_with_order() {
        let target = |x: f64| (-(x + 1.0)).exp();
        for seed in 0..3 {
            let g = random_graph(16, 3, seed);
            let ls = sym_normalized_laplacian(&g).unwrap();
            let lmax = *symmetric_eigendecomposition(&ls).unwrap().values.last().unwrap();
            let lt = chebyshev_scaled(&ls, lmax).unwrap();
            let basis = symmetric_eigendecomposition(&lt).unwrap();
            let f = random_matrix(16, 1, 1.0, seed + 50);
            let exact = spectral_filter_in_basis(
                &f,
                &SpectralFilter::exact_from_response(&basis, target).unwrap(),
                &basis,
            )
            .unwrap();
            let mut last = f64::INFINITY;
            for k in 0..10 {
                let filt = SpectralFilter::chebyshev(chebyshev_coefficients(target, k)).unwrap();
                let err = chebyshev_filter(&f, &filt, &lt).unwrap().max_abs_diff(&exact);
                assert!(err <= last + 1e-12, "order {k}: {err} > {last}");
                last = err;
            }
            assert!(last < 1e-8);
        }
    }

    #[test]
    fn spectral_radius_estimate() {
        let d = DenseMatrix::from_rows(&[[2.0, 1.0], [1.0, 2.0]]).unwrap();
        let s = SparseSymMatrix::from_dense(&d, 0.0).unwrap();
        assert!((estimate_spectral_radius(&s, 60) - 3.0).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn first_order_is_linear(a in -3.0f64..3.0, b in -3.0f64..3.0, seed in 0u64..1000) {
            let g = random_graph(7, 2, seed);
            let f1 = random_matrix(7, 1, 1.0, seed + 1);
            let f2 = random_matrix(7, 1, 1.0, seed + 2);
            let combo = f1.scale(a).add(&f2.scale(b)).unwrap();
            let lhs = first_order_filter(&combo, 1.5, &g).unwrap();
            let rhs = first_order_filter(&f1, 1.5, &g).unwrap().scale(a)
                .add(&first_order_filter(&f2, 1.5, &g).unwrap().scale(b)).unwrap();
            prop_assert!(lhs.max_abs_diff(&rhs) < 1e-12);
            let t = first_order_filter(&f1, a * b, &g).unwrap();
            let s = first_order_filter(&f1, 1.0, &g).unwrap().scale(a * b);
            prop_assert!(t.max_abs_diff(&s) < 1e-12);
        }
    }
}
