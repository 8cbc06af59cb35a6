//! Truncated-SVD factor of `f(W)`. Materializes `f`, so it is only meant for
//! validating the factored chain against the exact path.

use nalgebra::DMatrix;

use crate::attention::{forward_f, AttentionInstance};
use crate::error::{dim_err, Result};
use crate::exact::check_guard;
use crate::matrix::DenseMatrix;

use super::LowRankFactor;

/// Best rank-`k` approximation of `f(W)` in Frobenius norm, as
/// `U = f·V_k`, `V = V_k` with `V_k` the top-`k` right singular vectors.
///
/// `V_k` comes from the symmetric eigendecomposition of `fᵀf`; `U·Vᵀ` is the
/// projection of `f` onto that subspace, so the error is non-increasing in
/// `k` by construction and `k = L` reproduces `f`.
pub fn approx_f_svd(inst: &AttentionInstance, w: &DenseMatrix, k: usize) -> Result<LowRankFactor> {
    let l = inst.seq_len();
    if k == 0 || k > l {
        return dim_err(format!("SVD rank must be in 1..={l}, got {k}"));
    }
    check_guard(l)?;
    let f = forward_f(inst, w)?;
    let gram = f.t_matmul(&f)?;
    let eig = DMatrix::from_row_slice(l, l, gram.data()).symmetric_eigen();
    let mut order: Vec<usize> = (0..l).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let vk = DenseMatrix::from_fn(l, k, |i, c| eig.eigenvectors[(i, order[c])]);
    let uk = f.matmul(&vk)?;
    LowRankFactor::new(uk, vk)
}
