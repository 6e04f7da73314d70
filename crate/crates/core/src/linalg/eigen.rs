//! Cyclic Jacobi eigensolver for small dense symmetric matrices.

use super::{DenseMatrix, SparseSymMatrix};
use crate::error::{Error, Result};

/// Eigenvalues (ascending) and the matching orthonormal eigenvectors as columns.
#[derive(Clone, Debug)]
pub struct EigenPair {
    pub vectors: DenseMatrix,
    pub values: Vec<f64>,
}

impl EigenPair {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// `U · diag(g) · Uᵀ`.
    pub fn reconstruct_with(&self, g: &[f64]) -> DenseMatrix {
        let n = self.dim();
        let u = &self.vectors;
        let scaled = DenseMatrix::from_fn(n, n, |r, c| u.get(r, c) * g[c]);
        scaled.matmul_t(u).expect("square factors")
    }

    pub fn reconstruct(&self) -> DenseMatrix {
        self.reconstruct_with(&self.values)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EigenOptions {
    /// Largest accepted dimension.
    pub max_dim: usize,
    pub max_sweeps: usize,
    /// Symmetry tolerance on the input, scaled by `max(1, max|s|)`.
    pub symmetry_tol: f64,
}

impl Default for EigenOptions {
    fn default() -> Self {
        Self {
            max_dim: 2048,
            max_sweeps: 100,
            symmetry_tol: 1e-10,
        }
    }
}

/// Anything that can be viewed as a dense square matrix.
pub trait SymmetricSource {
    fn to_dense_matrix(&self) -> DenseMatrix;
}

impl SymmetricSource for DenseMatrix {
    fn to_dense_matrix(&self) -> DenseMatrix {
        self.clone()
    }
}

impl SymmetricSource for SparseSymMatrix {
    fn to_dense_matrix(&self) -> DenseMatrix {
        self.to_dense()
    }
}

pub fn symmetric_eigendecomposition<S: SymmetricSource + ?Sized>(s: &S) -> Result<EigenPair> {
    symmetric_eigendecomposition_with(s, EigenOptions::default())
}

pub fn symmetric_eigendecomposition_with<S: SymmetricSource + ?Sized>(
    s: &S,
    opts: EigenOptions,
) -> Result<EigenPair> {
    let mut a = s.to_dense_matrix();
    let n = a.rows();
    if n != a.cols() {
        return Err(Error::shape("eigendecomposition", a.shape_str(), "square"));
    }
    if n > opts.max_dim {
        return Err(Error::contract(format!(
            "dimension {n} exceeds eigensolver cap {}",
            opts.max_dim
        )));
    }
    let scale = a.max_abs().max(1.0);
    if !a.is_symmetric(opts.symmetry_tol * scale) {
        return Err(Error::contract("eigendecomposition input is not symmetric"));
    }
    // Symmetrize exactly so rotations never see drift between the triangles.
    for r in 0..n {
        for c in r + 1..n {
            let m = 0.5 * (a.get(r, c) + a.get(c, r));
            a.set(r, c, m);
            a.set(c, r, m);
        }
    }

    let mut v = DenseMatrix::identity(n);
    let total = a.frobenius_sq().sqrt();
    let target = 1e-14 * total;
    let mut converged = n <= 1;
    for _sweep in 0..opts.max_sweeps {
        if off_diagonal_norm(&a) <= target {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                rotate(&mut a, &mut v, p, q);
            }
        }
    }
    if !converged {
        let off = off_diagonal_norm(&a);
        if off > target {
            return Err(Error::Numeric(format!(
                "Jacobi did not converge in {} sweeps; off-diagonal residual {off:.3e}",
                opts.max_sweeps
            )));
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a.get(i, i).total_cmp(&a.get(j, j)).then(i.cmp(&j)));
    let values: Vec<f64> = order.iter().map(|&i| a.get(i, i)).collect();
    let mut vectors = DenseMatrix::zeros(n, n);
    for (new_col, &old_col) in order.iter().enumerate() {
        let first = (0..n)
            .map(|r| v.get(r, old_col))
            .find(|x| x.abs() > 1e-12)
            .unwrap_or(1.0);
        let sign = if first < 0.0 { -1.0 } else { 1.0 };
        for r in 0..n {
            vectors.set(r, new_col, sign * v.get(r, old_col));
        }
    }
    Ok(EigenPair { vectors, values })
}

fn off_diagonal_norm(a: &DenseMatrix) -> f64 {
    let n = a.rows();
    let mut s = 0.0;
    for r in 0..n {
        for c in 0..n {
            if r != c {
                s += a.get(r, c) * a.get(r, c);
            }
        }
    }
    s.sqrt()
}

/// One Jacobi rotation annihilating `a[p][q]`.
fn rotate(a: &mut DenseMatrix, v: &mut DenseMatrix, p: usize, q: usize) {
    let apq = a.get(p, q);
    if apq == 0.0 {
        return;
    }
    let app = a.get(p, p);
    let aqq = a.get(q, q);
    let theta = (aqq - app) / (2.0 * apq);
    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
    let t = if theta == 0.0 { 1.0 } else { t };
    let c = 1.0 / (t * t + 1.0).sqrt();
    let s = t * c;
    let n = a.rows();
    for r in 0..n {
        if r == p || r == q {
            continue;
        }
        let arp = a.get(r, p);
        let arq = a.get(r, q);
        let np = c * arp - s * arq;
        let nq = s * arp + c * arq;
        a.set(r, p, np);
        a.set(p, r, np);
        a.set(r, q, nq);
        a.set(q, r, nq);
    }
    a.set(p, p, app - t * apq);
    a.set(q, q, aqq + t * apq);
    a.set(p, q, 0.0);
    a.set(q, p, 0.0);
    for r in 0..n {
        let vrp = v.get(r, p);
        let vrq = v.get(r, q);
        v.set(r, p, c * vrp - s * vrq);
        v.set(r, q, s * vrp + c * vrq);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn orthonormality_error(u: &DenseMatrix) -> f64 {
        u.t_matmul(u).unwrap().max_abs_diff(&DenseMatrix::identity(u.cols()))
    }

    #[test]
    fn identity_is_its_own_basis() {
        let e = symmetric_eigendecomposition(&DenseMatrix::identity(2)).unwrap();
        assert_eq!(e.values, vec![1.0, 1.0]);
        assert_eq!(e.vectors, DenseMatrix::identity(2));
    }

    #[test]
    fn two_by_two_hand_case() {
        let m = DenseMatrix::from_rows(&[[2.0, 1.0], [1.0, 2.0]]).unwrap();
        let e = symmetric_eigendecomposition(&m).unwrap();
        assert!((e.values[0] - 1.0).abs() < 1e-14);
        assert!((e.values[1] - 3.0).abs() < 1e-14);
        assert!(orthonormality_error(&e.vectors) < 1e-12);
        assert!(e.reconstruct().max_abs_diff(&m) < 1e-12);
        // Sign convention: first nonzero component positive.
        for c in 0..2 {
            assert!(e.vectors.get(0, c) > 0.0);
        }
    }

    #[test]
    fn path_laplacian_has_zero_eigenvalue() {
        let l = DenseMatrix::from_rows(&[[1.0, -1.0, 0.0], [-1.0, 2.0, -1.0], [0.0, -1.0, 1.0]])
            .unwrap();
        let e = symmetric_eigendecomposition(&l).unwrap();
        assert!(e.values[0].abs() < 1e-12);
        assert!((e.values[1] - 1.0).abs() < 1e-12);
        assert!((e.values[2] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn asymmetric_input_is_rejected() {
        let m = DenseMatrix::from_rows(&[[1.0, 2.0], [0.0, 1.0]]).unwrap();
        assert!(matches!(
            symmetric_eigendecomposition(&m),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn cap_is_enforced() {
        let opts = EigenOptions {
            max_dim: 2,
            ..EigenOptions::default()
        };
        assert!(symmetric_eigendecomposition_with(&DenseMatrix::identity(3), opts).is_err());
    }

    #[test]
    fn sweep_cap_reports_residual() {
        let m = DenseMatrix::from_fn(6, 6, |r, c| 1.0 / (1.0 + r as f64 + c as f64));
        let opts = EigenOptions {
            max_sweeps: 1,
            ..EigenOptions::default()
        };
        let err = symmetric_eigendecomposition_with(&m, opts).unwrap_err();
        assert!(err.to_string().contains("residual"), "{err}");
    }

    #[test]
    fn deterministic() {
        let m = DenseMatrix::from_fn(5, 5, |r, c| ((r + 1) * (c + 1)) as f64 / 7.0 + (r == c) as u8 as f64);
        let a = symmetric_eigendecomposition(&m).unwrap();
        let b = symmetric_eigendecomposition(&m).unwrap();
        assert_eq!(a.values, b.values);
        assert_eq!(a.vectors, b.vectors);
    }
}
