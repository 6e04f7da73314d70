use std::collections::BTreeMap;

use super::dense::DenseMatrix;
use crate::error::{Error, Result};

/// Sparse symmetric matrix.
///
/// Each off-diagonal weight is stored once as `(row, col, w)` with `row <= col`;
/// a full compressed-row view (both triangles) is derived at construction so
/// products never have to mirror entries on the fly.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseSymMatrix {
    dim: usize,
    entries: Vec<(usize, usize, f64)>,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    vals: Vec<f64>,
}

impl SparseSymMatrix {
    /// Builds from upper- or lower-triangle triples; `(i, j)` and `(j, i)` name the
    /// same entry and may appear only once.
    pub fn from_entries(
        dim: usize,
        entries: impl IntoIterator<Item = (usize, usize, f64)>,
    ) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (r, c, w) in entries {
            if r >= dim || c >= dim {
                return Err(Error::contract(format!(
                    "entry ({r}, {c}) outside a {dim}x{dim} matrix"
                )));
            }
            if !w.is_finite() {
                return Err(Error::contract(format!("non-finite weight at ({r}, {c})")));
            }
            let key = (r.min(c), r.max(c));
            if map.insert(key, w).is_some() {
                return Err(Error::contract(format!(
                    "duplicate entry ({}, {})",
                    key.0, key.1
                )));
            }
        }
        Ok(Self::from_sorted_upper(
            dim,
            map.into_iter().map(|((r, c), w)| (r, c, w)).collect(),
        ))
    }

    /// `entries` must be upper-triangular, sorted, unique and finite.
    pub(crate) fn from_sorted_upper(dim: usize, entries: Vec<(usize, usize, f64)>) -> Self {
        let mut counts = vec![0usize; dim];
        for &(r, c, _) in &entries {
            counts[r] += 1;
            if r != c {
                counts[c] += 1;
            }
        }
        let mut row_ptr = vec![0usize; dim + 1];
        for i in 0..dim {
            row_ptr[i + 1] = row_ptr[i] + counts[i];
        }
        let nnz = row_ptr[dim];
        let mut col_idx = vec![0usize; nnz];
        let mut vals = vec![0.0; nnz];
        let mut fill = row_ptr[..dim].to_vec();
        // Lower-triangle mirrors of row r come from entries (c, r) with c < r, which
        // precede r's own upper entries in sorted order, so each CSR row ends up
        // sorted by column.
        for &(r, c, w) in &entries {
            if r != c {
                col_idx[fill[c]] = r;
                vals[fill[c]] = w;
                fill[c] += 1;
            }
            col_idx[fill[r]] = c;
            vals[fill[r]] = w;
            fill[r] += 1;
        }
        Self {
            dim,
            entries,
            row_ptr,
            col_idx,
            vals,
        }
    }

    /// Reads the upper triangle of a dense matrix; fails if it is not symmetric
    /// within `tol`. Exact zeros are dropped.
    pub fn from_dense(m: &DenseMatrix, tol: f64) -> Result<Self> {
        if m.rows() != m.cols() {
            return Err(Error::shape("SparseSymMatrix::from_dense", m.shape_str(), "square"));
        }
        if !m.is_symmetric(tol) {
            return Err(Error::contract("matrix is not symmetric"));
        }
        let n = m.rows();
        let mut entries = Vec::new();
        for r in 0..n {
            for c in r..n {
                let v = m.get(r, c);
                if v != 0.0 {
                    entries.push((r, c, v));
                }
            }
        }
        Ok(Self::from_sorted_upper(n, entries))
    }

    pub fn identity(n: usize) -> Self {
        Self::from_sorted_upper(n, (0..n).map(|i| (i, i, 1.0)).collect())
    }

    pub fn zeros(n: usize) -> Self {
        Self::from_sorted_upper(n, Vec::new())
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Stored upper-triangle entries, sorted by `(row, col)`.
    pub fn entries(&self) -> &[(usize, usize, f64)] {
        &self.entries
    }

    /// Number of stored (upper-triangle) entries.
    pub fn stored_len(&self) -> usize {
        self.entries.len()
    }

    /// Nonzeros of row `r` across both triangles, ascending by column.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (s, e) = (self.row_ptr[r], self.row_ptr[r + 1]);
        self.col_idx[s..e]
            .iter()
            .copied()
            .zip(self.vals[s..e].iter().copied())
    }

    pub fn row_len(&self, r: usize) -> usize {
        self.row_ptr[r + 1] - self.row_ptr[r]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let (s, e) = (self.row_ptr[r], self.row_ptr[r + 1]);
        match self.col_idx[s..e].binary_search(&c) {
            Ok(k) => self.vals[s + k],
            Err(_) => 0.0,
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.dim).map(|i| self.get(i, i)).collect()
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.dim).map(|r| self.row(r).map(|(_, v)| v).sum()).collect()
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let mut d = DenseMatrix::zeros(self.dim, self.dim);
        for r in 0..self.dim {
            for (c, v) in self.row(r) {
                d.set(r, c, v);
            }
        }
        d
    }

    /// `self · b`.
    pub fn mul_dense(&self, b: &DenseMatrix) -> Result<DenseMatrix> {
        if b.rows() != self.dim {
            return Err(Error::shape(
                "sparse multiply",
                format!("{0}x{0}", self.dim),
                b.shape_str(),
            ));
        }
        let n = b.cols();
        let mut out = DenseMatrix::zeros(self.dim, n);
        for r in 0..self.dim {
            let out_row = out.row_mut(r);
            let (s, e) = (self.row_ptr[r], self.row_ptr[r + 1]);
            for k in s..e {
                let w = self.vals[k];
                let b_row = b.row(self.col_idx[k]);
                for (o, &x) in out_row.iter_mut().zip(b_row) {
                    *o += w * x;
                }
            }
        }
        Ok(out)
    }

    /// Applies `f(row, col, value)` to every stored entry, keeping the pattern.
    pub fn map_entries(&self, f: impl Fn(usize, usize, f64) -> f64) -> Self {
        let entries = self
            .entries
            .iter()
            .map(|&(r, c, w)| (r, c, f(r, c, w)))
            .collect();
        Self::from_sorted_upper(self.dim, entries)
    }

    /// `alpha · self + beta · I`.
    pub fn affine_identity(&self, alpha: f64, beta: f64) -> Self {
        let mut map: BTreeMap<(usize, usize), f64> = self
            .entries
            .iter()
            .map(|&(r, c, w)| ((r, c), alpha * w))
            .collect();
        if beta != 0.0 {
            for i in 0..self.dim {
                *map.entry((i, i)).or_insert(0.0) += beta;
            }
        }
        Self::from_sorted_upper(
            self.dim,
            map.into_iter().map(|((r, c), w)| (r, c, w)).collect(),
        )
    }

    /// Conjugates by a permutation: entry `(i, j)` of the result is
    /// `self[perm[i], perm[j]]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.dim {
            return Err(Error::shape(
                "permuted",
                format!("dim {}", self.dim),
                format!("perm of {}", perm.len()),
            ));
        }
        let mut inv = vec![usize::MAX; self.dim];
        for (new, &old) in perm.iter().enumerate() {
            if old >= self.dim || inv[old] != usize::MAX {
                return Err(Error::contract("not a permutation"));
            }
            inv[old] = new;
        }
        Self::from_entries(
            self.dim,
            self.entries.iter().map(|&(r, c, w)| (inv[r], inv[c], w)),
        )
    }

    pub fn max_abs_diff(&self, other: &SparseSymMatrix) -> f64 {
        assert_eq!(self.dim, other.dim);
        let mut worst: f64 = 0.0;
        for r in 0..self.dim {
            for (c, v) in self.row(r) {
                worst = worst.max((v - other.get(r, c)).abs());
            }
            for (c, v) in other.row(r) {
                worst = worst.max((v - self.get(r, c)).abs());
            }
        }
        worst
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_edge_times_indicator() {
        let a = SparseSymMatrix::from_entries(2, [(0, 1, 1.0)]).unwrap();
        let x = DenseMatrix::column(&[1.0, 0.0]);
        assert_eq!(a.mul_dense(&x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn mirror_entries_are_duplicates() {
        let err = SparseSymMatrix::from_entries(3, [(0, 1, 1.0), (1, 0, 2.0)]).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn dense_round_trip() {
        let d = DenseMatrix::from_rows(&[[2.0, 0.5, 0.0], [0.5, 0.0, -1.0], [0.0, -1.0, 3.0]])
            .unwrap();
        let s = SparseSymMatrix::from_dense(&d, 0.0).unwrap();
        assert_eq!(s.to_dense(), d);
        assert_eq!(s.stored_len(), 4);
        assert_eq!(s.row_sums(), d.row_sums());
    }

    #[test]
    fn affine_identity_adds_missing_diagonal() {
        let a = SparseSymMatrix::from_entries(2, [(0, 1, 1.0)]).unwrap();
        let b = a.affine_identity(2.0, -1.0);
        assert_eq!(
            b.to_dense(),
            DenseMatrix::from_rows(&[[-1.0, 2.0], [2.0, -1.0]]).unwrap()
        );
    }

    #[test]
    fn permutation_conjugates() {
        let a = SparseSymMatrix::from_entries(3, [(0, 1, 1.0), (1, 2, 5.0), (2, 2, 7.0)]).unwrap();
        let p = a.permuted(&[2, 0, 1]).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(p.get(i, j), a.get([2, 0, 1][i], [2, 0, 1][j]));
            }
        }
    }
}
