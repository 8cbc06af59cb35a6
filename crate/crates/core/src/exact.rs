//! Exact LoRA gradients in `O(L²·d)` time.
//!
//! With `S = C1·W·C2ᵀ`, `f = softmax_rows(S)`, `c = f·C3 − Y` and
//! `q = c·C3ᵀ`, the loss gradient with respect to row `j` of `S` is
//!
//! ```text
//! p_j = (diag(f_j) − f_j f_jᵀ) q_j = f_j ⊙ q_j − ⟨f_j, q_j⟩ f_j
//! ```
//!
//! and `dL/dW = C1ᵀ·p·C2`. The adapter gradients follow from
//! `W = (r/α)·W* + B·A`: `dL/dA = Bᵀ·dL/dW` and `dL/dB = dL/dW·Aᵀ`.
//!
//! Every row `j` only needs `f_j`, `c_j` and `q_j`, so the production path
//! streams rows and keeps `O(L·d)` memory; [`compute_p`] materializes the
//! `L × L` matrices for inspection and tests.

use std::env;

use crate::attention::{
    check_scores, compose_general_constants, effective_weight, forward_f, score_q, softmax_row,
    AttentionInstance, GeneralInstance, LoraAdapter,
};
use crate::error::{dim_err, Error, Result};
use crate::matrix::{dot, DenseMatrix};
use crate::meter::Meter;
use crate::par;
use crate::tensor::{kronecker, matrixize, transpose_perm, vectorize};

/// Environment variable overriding [`DEFAULT_GUARD_L`].
pub const GUARD_ENV: &str = "LORA_KERNELS_GUARD_L";

/// Largest sequence length the exact path accepts by default.
pub const DEFAULT_GUARD_L: usize = 1 << 14;

/// Current exact-path limit on `L`.
pub fn guard_limit() -> usize {
    env::var(GUARD_ENV)
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .unwrap_or(DEFAULT_GUARD_L)
}

pub(crate) fn check_guard(l: usize) -> Result<()> {
    let limit = guard_limit();
    if l > limit {
        return Err(Error::Guard {
            what: "sequence length",
            size: l,
            limit,
        });
    }
    Ok(())
}

/// Gradients of one adapter: `g_a` is `r × d` (w.r.t. `A`), `g_b` is
/// `d × r` (w.r.t. `B`).
#[derive(Debug, Clone, PartialEq)]
pub struct GradientPair {
    pub g_a: DenseMatrix,
    pub g_b: DenseMatrix,
}

impl GradientPair {
    /// `max(‖g_a − other.g_a‖∞, ‖g_b − other.g_b‖∞)`.
    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        Ok(self
            .g_a
            .max_abs_diff(&other.g_a)?
            .max(self.g_b.max_abs_diff(&other.g_b)?))
    }

    pub fn max_abs(&self) -> f64 {
        self.g_a.max_abs().max(self.g_b.max_abs())
    }
}

/// `p = p1 − p2` with row `j` of `p1` equal to `f_j ⊙ q_j` and row `j` of
/// `p2` equal to `⟨f_j, q_j⟩·f_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct PMatrices {
    pub p1: DenseMatrix,
    pub p2: DenseMatrix,
    pub p: DenseMatrix,
}

/// Materializes `p1`, `p2` and `p` (`L × L` each).
pub fn compute_p(inst: &AttentionInstance, w: &DenseMatrix) -> Result<PMatrices> {
    check_guard(inst.seq_len())?;
    let f = forward_f(inst, w)?;
    let q = score_q(inst, w)?;
    let p1 = f.hadamard(&q)?;
    let r: Vec<f64> = (0..f.rows()).map(|j| dot(f.row(j), q.row(j))).collect();
    let p2 = f.scale_rows(&r)?;
    let p = p1.sub(&p2)?;
    Ok(PMatrices { p1, p2, p })
}

/// `p·C2` (`L × d`) computed row by row without any `L × L` intermediate.
fn p_times_c2(inst: &AttentionInstance, w: &DenseMatrix, meter: &Meter) -> Result<DenseMatrix> {
    let (l, d) = (inst.seq_len(), inst.head_dim());
    let m1 = meter.matmul(inst.c1(), w)?;
    let (c2, c3, y) = (inst.c2(), inst.c3(), inst.y());
    let rows = par::map_collect(l, |j| {
        let mut f = vec![0.0; l];
        let max_abs = softmax_row(m1.row(j), c2, &mut f);
        // c_j = f_j·C3 − Y_j
        let mut c = vec![0.0; d];
        for (k, &fk) in f.iter().enumerate() {
            for (ci, &v) in c.iter_mut().zip(c3.row(k)) {
                *ci += fk * v;
            }
        }
        for (ci, &yv) in c.iter_mut().zip(y.row(j)) {
            *ci -= yv;
        }
        // q_j[k] = ⟨c_j, C3_k⟩, r_j = ⟨f_j, q_j⟩, p_j = f_j ⊙ (q_j − r_j)
        let q: Vec<f64> = (0..l).map(|k| dot(&c, c3.row(k))).collect();
        let r = dot(&f, &q);
        let mut out = vec![0.0; d];
        for k in 0..l {
            let pk = f[k] * (q[k] - r);
            for (o, &v) in out.iter_mut().zip(c2.row(k)) {
                *o += pk * v;
            }
        }
        (out, max_abs)
    });
    meter.add_ops((l * (4 * l * d + 4 * l)) as u64);
    meter.note_alloc(l * d);
    check_scores(rows.iter().map(|r| r.1).fold(0.0, f64::max))?;
    let data = rows.into_iter().flat_map(|r| r.0).collect();
    Ok(DenseMatrix::from_vec_unchecked(l, d, data))
}

/// `dL/dW` as a `d × d` matrix.
pub fn grad_wrt_w(inst: &AttentionInstance, w: &DenseMatrix) -> Result<DenseMatrix> {
    grad_wrt_w_metered(inst, w, &Meter::new())
}

pub fn grad_wrt_w_metered(
    inst: &AttentionInstance,
    w: &DenseMatrix,
    meter: &Meter,
) -> Result<DenseMatrix> {
    inst.check_weight(w)?;
    check_guard(inst.seq_len())?;
    let pc2 = p_times_c2(inst, w, meter)?;
    meter.t_matmul(inst.c1(), &pc2)
}

/// Exact adapter gradients for the query-only problem. `wstar` is the
/// unscaled frozen weight; the `(r/α)` folding happens here.
pub fn grad_adapters_special(
    inst: &AttentionInstance,
    wstar: &DenseMatrix,
    adp: &LoraAdapter,
) -> Result<GradientPair> {
    grad_adapters_special_metered(inst, wstar, adp, &Meter::new())
}

pub fn grad_adapters_special_metered(
    inst: &AttentionInstance,
    wstar: &DenseMatrix,
    adp: &LoraAdapter,
    meter: &Meter,
) -> Result<GradientPair> {
    adp.check_dim(inst.head_dim())?;
    let w = effective_weight(wstar, adp)?;
    let gw = grad_wrt_w_metered(inst, &w, meter)?;
    adapter_grads_from_w(&gw, adp, meter)
}

pub(crate) fn adapter_grads_from_w(
    gw: &DenseMatrix,
    adp: &LoraAdapter,
    meter: &Meter,
) -> Result<GradientPair> {
    Ok(GradientPair {
        g_a: meter.t_matmul(adp.b(), gw)?,
        g_b: meter.matmul_t(gw, adp.a())?,
    })
}

/// The special-case instances of the joint problem: the query side with
/// `W_K` frozen and the key side (on `W_Kᵀ`) with `W_Q` frozen.
pub(crate) fn split_general(
    g: &GeneralInstance,
    adp_q: &LoraAdapter,
    adp_k: &LoraAdapter,
) -> Result<(AttentionInstance, AttentionInstance)> {
    let consts = compose_general_constants(g, adp_q, adp_k)?;
    let q_side = AttentionInstance::new(
        consts.cq1.scale(adp_q.scale()),
        consts.cq2,
        consts.c3.clone(),
        g.y.clone(),
    )?;
    let k_side = AttentionInstance::new(
        consts.ck1.scale(adp_k.scale()),
        consts.ck2,
        consts.c3,
        g.y.clone(),
    )?;
    Ok((q_side, k_side))
}

/// Maps gradients computed for the adapter of `W_Kᵀ` back to `(A_K, B_K)`
/// via the transpose permutation.
pub(crate) fn untranspose_pair(pair: GradientPair) -> Result<GradientPair> {
    // pair.g_a is dL/d(B_Kᵀ) (r × d), pair.g_b is dL/d(A_Kᵀ) (d × r).
    let (r, d) = pair.g_a.shape();
    let g_b = matrixize(&transpose_perm(r, d).apply(&vectorize(&pair.g_a))?, d, r)?;
    let g_a = matrixize(&transpose_perm(d, r).apply(&vectorize(&pair.g_b))?, r, d)?;
    Ok(GradientPair { g_a, g_b })
}

/// Exact gradients of the joint problem for the query and key adapters.
pub fn grad_adapters_general(
    g: &GeneralInstance,
    adp_q: &LoraAdapter,
    adp_k: &LoraAdapter,
) -> Result<(GradientPair, GradientPair)> {
    let (q_side, k_side) = split_general(g, adp_q, adp_k)?;
    let gq = grad_adapters_special(&q_side, &g.wq_star, adp_q)?;
    let gk_t = grad_adapters_special(&k_side, &g.wk_star.transpose(), &adp_k.transposed())?;
    Ok((gq, untranspose_pair(gk_t)?))
}

/// Largest head dimension [`jacobian_blocks`] will materialize.
pub const JACOBIAN_MAX_D: usize = 6;

/// Jacobians of `vec(W)` with respect to `vec(A)` and `vec(B)` for
/// `W = W̄* + B·A` under row-major vectorization: `J_B = B ⊗ I_d` and
/// `J_A = I_d ⊗ Aᵀ`, both `d² × r·d`.
pub fn jacobian_blocks(adp: &LoraAdapter) -> Result<(DenseMatrix, DenseMatrix)> {
    let d = adp.head_dim();
    if d > JACOBIAN_MAX_D {
        return Err(Error::Guard {
            what: "head dimension for jacobian_blocks",
            size: d,
            limit: JACOBIAN_MAX_D,
        });
    }
    let eye = DenseMatrix::identity(d);
    let j_b = kronecker(adp.b(), &eye)?;
    let j_a = kronecker(&eye, &adp.a().transpose())?;
    Ok((j_b, j_a))
}

/// `Jᵀ·v` for a Jacobian block and a `d²` gradient vector.
pub fn apply_jacobian_t(j: &DenseMatrix, v: &[f64]) -> Result<Vec<f64>> {
    if j.rows() != v.len() {
        return dim_err(format!(
            "Jacobian has {} rows, vector {}",
            j.rows(),
            v.len()
        ));
    }
    Ok((0..j.cols())
        .map(|c| (0..j.rows()).map(|i| j.get(i, c) * v[i]).sum())
        .collect())
}
