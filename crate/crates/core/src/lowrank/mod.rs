//! Almost-linear approximate gradients.
//!
//! `f` is replaced by a rank-`k₁` factor `U₁V₁ᵀ` (polynomial feature maps, or
//! a truncated SVD for validation). Every downstream quantity stays factored:
//!
//! ```text
//! q̃  = U₂V₂ᵀ,  U₂ = [U₁(V₁ᵀC3) | Y],   V₂ = [C3 | −C3]       k₂ = 2d
//! p̃₁ = U₃V₃ᵀ,  U₃ = U₁ ⊘ U₂,          V₃ = V₁ ⊘ V₂          k₃ = k₁k₂
//! p̃₂ = U₄V₄ᵀ,  U₄ = diag(r̃)·U₁,       V₄ = V₁               k₄ = k₁
//! ```
//!
//! with `r̃_j = U₁[j]·(V₁ᵀV₂)·U₂[j]ᵀ`. The gradient with respect to `W` is
//! then `(C1ᵀU₃)(V₃ᵀC2) − (C1ᵀU₄)(V₄ᵀC2)`, so no `L × L` array is formed.

mod chain;
pub mod poly;
pub mod svd;

pub use chain::{
    approx_c, approx_grad_general, approx_grad_special, approx_grad_special_metered, approx_p1,
    approx_p2, approx_q, ApproxResidual, FactorBackend,
};
pub use poly::{
    approx_f_poly, feature_map, max_feasible_degree, monomial_count, required_degree,
    select_degree, PolyApproxConfig,
};
pub use svd::approx_f_svd;

use crate::error::{dim_err, Result};
use crate::exact::check_guard;
use crate::matrix::DenseMatrix;

/// `U·Vᵀ` with `U`, `V` both `L × k`.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankFactor {
    u: DenseMatrix,
    v: DenseMatrix,
}

impl LowRankFactor {
    pub fn new(u: DenseMatrix, v: DenseMatrix) -> Result<Self> {
        if u.shape() != v.shape() {
            return dim_err(format!(
                "factor shapes differ: U is {:?}, V is {:?}",
                u.shape(),
                v.shape()
            ));
        }
        Ok(Self { u, v })
    }

    pub fn u(&self) -> &DenseMatrix {
        &self.u
    }

    pub fn v(&self) -> &DenseMatrix {
        &self.v
    }

    pub fn seq_len(&self) -> usize {
        self.u.rows()
    }

    pub fn rank(&self) -> usize {
        self.u.cols()
    }

    pub fn into_parts(self) -> (DenseMatrix, DenseMatrix) {
        (self.u, self.v)
    }

    /// Dense `U·Vᵀ`, subject to the exact-path size guard.
    pub fn materialize(&self) -> Result<DenseMatrix> {
        check_guard(self.seq_len())?;
        self.u.matmul_t(&self.v)
    }

    pub(crate) fn check_len(&self, l: usize) -> Result<()> {
        if self.seq_len() != l {
            return dim_err(format!(
                "factor has {} rows, instance has L = {l}",
                self.seq_len()
            ));
        }
        Ok(())
    }
}
