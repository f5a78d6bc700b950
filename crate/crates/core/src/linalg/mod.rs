//! Dense linear algebra: matrices, a symmetric eigensolver and a direct SVD.

mod eigen;
mod matrix;
mod svd;

pub use eigen::{sym_eigh, EigenResult};
pub use matrix::{frobenius_norm, matmul, DenseMatrix};
pub use svd::{svd_direct, SvdResult};

use crate::scalar::Real;

/// For each column, whether negating it makes its largest-magnitude entry
/// non-negative. Ties go to the lowest row index.
pub(crate) fn canonical_sign_flips<T: Real>(m: &DenseMatrix<T>) -> Vec<bool> {
    (0..m.cols())
        .map(|j| {
            let mut best = T::zero();
            let mut pick = T::zero();
            for i in 0..m.rows() {
                let x = m[(i, j)];
                if x.abs() > best {
                    best = x.abs();
                    pick = x;
                }
            }
            pick < T::zero()
        })
        .collect()
}

/// `V_k V_kᵀ` for the leading `k` columns of `v`.
pub fn projector<T: Real>(v: &DenseMatrix<T>, k: usize) -> DenseMatrix<T> {
    let vk = v.leading_columns(k);
    let n = v.rows();
    DenseMatrix::from_fn(n, n, |i, j| (0..k).map(|c| vk[(i, c)] * vk[(j, c)]).sum())
}
