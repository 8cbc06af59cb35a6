//! Reference gradients built independently of the production kernels:
//! central finite differences on the loss, and literal dense constructions
//! (explicit softmax Jacobians, Kronecker products and vec-Jacobians).
//!
//! Everything here is single-threaded and size-guarded.

use crate::attention::{
    effective_weight, general_loss, loss, AttentionInstance, GeneralInstance, LoraAdapter,
};
use crate::error::{Error, Result};
use crate::exact::{jacobian_blocks, GradientPair, PMatrices};
use crate::matrix::DenseMatrix;
use crate::tensor::{kronecker, matrixize, subblock, vectorize};

/// Relative central-difference step: `h = FD_STEP·max(1, |θ|)`.
pub const FD_STEP: f64 = 1e-5;

/// Largest `L` accepted by [`dense_p_oracle`].
pub const DENSE_P_MAX_L: usize = 64;
/// Largest `L` and `d` accepted by [`dense_kron_grad_oracle`].
pub const KRON_MAX_L: usize = 8;
pub const KRON_MAX_D: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Factor {
    A,
    B,
}

/// `(f(x + h) − f(x − h)) / 2h`.
pub fn central_difference(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// Central differences of `f` at `theta`, one coordinate at a time, with
/// step `step·max(1, |θ_i|)`.
pub fn fd_gradient<F>(theta: &[f64], step: f64, f: F) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    let mut probe = theta.to_vec();
    let mut out = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        let h = step * theta[i].abs().max(1.0);
        probe[i] = theta[i] + h;
        let up = f(&probe)?;
        probe[i] = theta[i] - h;
        let down = f(&probe)?;
        probe[i] = theta[i];
        for value in [up, down] {
            if !value.is_finite() {
                return Err(Error::Probe { index: i, value });
            }
        }
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

/// Finite-difference gradient of the special-case loss with respect to one
/// adapter factor, shaped like that factor.
pub fn fd_grad_adapter(
    inst: &AttentionInstance,
    wstar: &DenseMatrix,
    adp: &LoraAdapter,
    which: Factor,
    step: f64,
) -> Result<DenseMatrix> {
    let target = match which {
        Factor::A => adp.a(),
        Factor::B => adp.b(),
    };
    let (rows, cols) = target.shape();
    let g = fd_gradient(&vectorize(target), step, |theta| {
        let m = matrixize(theta, rows, cols)?;
        let probe = match which {
            Factor::A => adp.with_factors(adp.b().clone(), m)?,
            Factor::B => adp.with_factors(m, adp.a().clone())?,
        };
        loss(inst, &effective_weight(wstar, &probe)?)
    })?;
    matrixize(&g, rows, cols)
}

/// Both factors of [`fd_grad_adapter`].
pub fn fd_grad_pair(
    inst: &AttentionInstance,
    wstar: &DenseMatrix,
    adp: &LoraAdapter,
    step: f64,
) -> Result<GradientPair> {
    Ok(GradientPair {
        g_a: fd_grad_adapter(inst, wstar, adp, Factor::A, step)?,
        g_b: fd_grad_adapter(inst, wstar, adp, Factor::B, step)?,
    })
}

/// Finite-difference gradients of the joint loss for the query and key
/// adapters.
pub fn fd_grad_general(
    g: &GeneralInstance,
    adp_q: &LoraAdapter,
    adp_k: &LoraAdapter,
    step: f64,
) -> Result<(GradientPair, GradientPair)> {
    let side = |query: bool, which: Factor| -> Result<DenseMatrix> {
        let adp = if query { adp_q } else { adp_k };
        let target = match which {
            Factor::A => adp.a(),
            Factor::B => adp.b(),
        };
        let (rows, cols) = target.shape();
        let v = fd_gradient(&vectorize(target), step, |theta| {
            let m = matrixize(theta, rows, cols)?;
            let probe = match which {
                Factor::A => adp.with_factors(adp.b().clone(), m)?,
                Factor::B => adp.with_factors(m, adp.a().clone())?,
            };
            if query {
                general_loss(g, &probe, adp_k)
            } else {
                general_loss(g, adp_q, &probe)
            }
        })?;
        matrixize(&v, rows, cols)
    };
    Ok((
        GradientPair {
            g_a: side(true, Factor::A)?,
            g_b: side(true, Factor::B)?,
        },
        GradientPair {
            g_a: side(false, Factor::A)?,
            g_b: side(false, Factor::B)?,
        },
    ))
}

fn guard(what: &'static str, size: usize, limit: usize) -> Result<()> {
    if size > limit {
        return Err(Error::Guard { what, size, limit });
    }
    Ok(())
}

/// Plain-loop `f`, `c` and `q = c·C3ᵀ`: no shared code with the kernels.
#[allow(clippy::needless_range_loop)]
fn naive_fq(inst: &AttentionInstance, w: &DenseMatrix) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let (l, d) = (inst.seq_len(), inst.head_dim());
    let (c1, c2, c3, y) = (inst.c1(), inst.c2(), inst.c3(), inst.y());
    let mut f = vec![vec![0.0; l]; l];
    for j in 0..l {
        for k in 0..l {
            let mut s = 0.0;
            for a in 0..d {
                for b in 0..d {
                    s += c1.get(j, a) * w.get(a, b) * c2.get(k, b);
                }
            }
            f[j][k] = s.exp();
        }
        let z: f64 = f[j].iter().sum();
        f[j].iter_mut().for_each(|v| *v /= z);
    }
    let mut c = vec![vec![0.0; d]; l];
    for j in 0..l {
        for i in 0..d {
            c[j][i] = (0..l).map(|k| f[j][k] * c3.get(k, i)).sum::<f64>() - y.get(j, i);
        }
    }
    let q = (0..l)
        .map(|j| {
            (0..l)
                .map(|k| (0..d).map(|i| c[j][i] * c3.get(k, i)).sum())
                .collect()
        })
        .collect();
    (f, q)
}

/// `p_j = (diag(f_j) − f_j f_jᵀ)·q_j` with both `L × L` factors built
/// explicitly.
pub fn dense_p_oracle(inst: &AttentionInstance, w: &DenseMatrix) -> Result<PMatrices> {
    let l = inst.seq_len();
    guard("sequence length for dense_p_oracle", l, DENSE_P_MAX_L)?;
    inst.check_weight(w)?;
    let (f, q) = naive_fq(inst, w);
    let mut p1 = DenseMatrix::zeros(l, l);
    let mut p2 = DenseMatrix::zeros(l, l);
    for j in 0..l {
        let diag = DenseMatrix::from_fn(l, l, |a, b| if a == b { f[j][a] } else { 0.0 });
        let outer = DenseMatrix::from_fn(l, l, |a, b| f[j][a] * f[j][b]);
        let qj = DenseMatrix::from_fn(l, 1, |a, _| q[j][a]);
        let d1 = diag.matmul(&qj)?;
        let d2 = outer.matmul(&qj)?;
        for k in 0..l {
            p1.set(j, k, d1.get(k, 0));
            p2.set(j, k, d2.get(k, 0));
        }
    }
    let p = p1.sub(&p2)?;
    Ok(PMatrices { p1, p2, p })
}

/// Adapter gradients through the vec route: `dL/dvec(W) = Σ_j 𝖢_jᵀ p_j`
/// with `𝖢 = C1 ⊗ C2` materialized, then `J_Bᵀ` and `J_Aᵀ` applied.
pub fn dense_kron_grad_oracle(
    inst: &AttentionInstance,
    wstar: &DenseMatrix,
    adp: &LoraAdapter,
) -> Result<GradientPair> {
    let (l, d) = (inst.seq_len(), inst.head_dim());
    guard("sequence length for dense_kron_grad_oracle", l, KRON_MAX_L)?;
    guard("head dimension for dense_kron_grad_oracle", d, KRON_MAX_D)?;
    let w = effective_weight(wstar, adp)?;
    let p = dense_p_oracle(inst, &w)?.p;
    let big = kronecker(inst.c1(), inst.c2())?;
    let mut gvec = vec![0.0; d * d];
    for j in 0..l {
        let cj = subblock(&big, j)?;
        for (col, g) in gvec.iter_mut().enumerate() {
            *g += (0..l).map(|k| cj.get(k, col) * p.get(j, k)).sum::<f64>();
        }
    }
    let (j_b, j_a) = jacobian_blocks(adp)?;
    let r = adp.rank();
    let project = |j: &DenseMatrix| -> Vec<f64> {
        (0..j.cols())
            .map(|c| (0..j.rows()).map(|i| j.get(i, c) * gvec[i]).sum())
            .collect()
    };
    Ok(GradientPair {
        g_a: matrixize(&project(&j_b), r, d)?,
        g_b: matrixize(&project(&j_a), d, r)?,
    })
}

/// `|a − b| / max(|a|, |b|, 1)`, maximized over entries.
pub fn max_rel_err(a: &DenseMatrix, b: &DenseMatrix) -> Result<f64> {
    if a.shape() != b.shape() {
        return crate::error::dim_err(format!("shapes {:?} and {:?}", a.shape(), b.shape()));
    }
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1.0))
        .fold(0.0, f64::max))
}

/// [`max_rel_err`] over both members of a pair.
pub fn pair_rel_err(a: &GradientPair, b: &GradientPair) -> Result<f64> {
    Ok(max_rel_err(&a.g_a, &b.g_a)?.max(max_rel_err(&a.g_b, &b.g_b)?))
}
