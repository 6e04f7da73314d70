//! Dense and sparse containers, products, and a symmetric eigensolver.

mod dense;
mod eigen;
mod sparse;
mod tensor;

pub use dense::DenseMatrix;
pub use eigen::{
    symmetric_eigendecomposition, symmetric_eigendecomposition_with, EigenOptions, EigenPair,
    SymmetricSource,
};
pub use sparse::SparseSymMatrix;
pub use tensor::Tensor4;

use crate::error::Result;

/// A square or rectangular linear map that can be applied to a dense right-hand side.
pub trait Operator {
    fn shape(&self) -> (usize, usize);

    /// `self · b`.
    fn apply(&self, b: &DenseMatrix) -> Result<DenseMatrix>;
}

impl Operator for DenseMatrix {
    fn shape(&self) -> (usize, usize) {
        DenseMatrix::shape(self)
    }

    fn apply(&self, b: &DenseMatrix) -> Result<DenseMatrix> {
        self.matmul(b)
    }
}

impl Operator for SparseSymMatrix {
    fn shape(&self) -> (usize, usize) {
        (self.dim(), self.dim())
    }

    fn apply(&self, b: &DenseMatrix) -> Result<DenseMatrix> {
        self.mul_dense(b)
    }
}

/// `a · b` for a dense or sparse left operand.
pub fn multiply<A: Operator + ?Sized>(a: &A, b: &DenseMatrix) -> Result<DenseMatrix> {
    a.apply(b)
}
