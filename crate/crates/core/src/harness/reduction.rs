//! Embedding of the attention loss-gradient problem
//! `L(X) = ½‖D⁻¹exp(A1·X·A2ᵀ/r)·A3 − E‖²` into a LoRA instance:
//! `C1 = [A1 | 0]`, `B = [I_r; 0]`, `A = [X | 0]`, `C2 = [A2 | 0]/r`,
//! `C3 = [A3 | 0]`, `Y = [E | 0]`, `W* = 0`, `α = r`. The gradient with respect
//! to `X` is then the leading `r × r` block of the gradient with respect to
//! `A`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::attention::{forward_f, AttentionInstance, LoraAdapter};
use crate::error::{dim_err, Error, Result};
use crate::exact::grad_adapters_special;
use crate::matrix::DenseMatrix;
use crate::oracle::{fd_gradient, max_rel_err, FD_STEP};
use crate::tensor::{matrixize, vectorize};

#[derive(Debug, Clone, PartialEq)]
pub struct ReductionInstance {
    pub a1: DenseMatrix,
    pub a2: DenseMatrix,
    pub a3: DenseMatrix,
    pub e: DenseMatrix,
    pub x: DenseMatrix,
    pub b_bound: f64,
}

impl ReductionInstance {
    pub fn validate(&self) -> Result<()> {
        let (l, r) = self.a1.shape();
        for (name, m) in [("A2", &self.a2), ("A3", &self.a3), ("E", &self.e)] {
            if m.shape() != (l, r) {
                return dim_err(format!("{name} is {:?}, expected ({l}, {r})", m.shape()));
            }
        }
        if self.x.shape() != (r, r) {
            return dim_err(format!("X is {:?}, expected ({r}, {r})", self.x.shape()));
        }
        Ok(())
    }

    pub fn seq_len(&self) -> usize {
        self.a1.rows()
    }

    pub fn rank(&self) -> usize {
        self.a1.cols()
    }

    pub fn with_x(&self, x: DenseMatrix) -> Self {
        Self { x, ..self.clone() }
    }
}

/// Seeded instance with `E = 0`, rescaled so that `‖A1·X‖_∞ = ‖A2‖_∞ = b_bound`.
pub fn gen_reduction(seed: u64, l: usize, r: usize, b_bound: f64) -> Result<ReductionInstance> {
    if l == 0 || r == 0 || b_bound.is_nan() || b_bound <= 0.0 {
        return Err(Error::Config(format!(
            "need L, r >= 1 and a positive bound, got L={l} r={r} B={b_bound}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal =
        |rows, cols| DenseMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal));
    let a1 = normal(l, r);
    let a2 = normal(l, r);
    let a3 = normal(l, r);
    let x = normal(r, r);
    let n1 = a1.matmul(&x)?.max_abs();
    let n2 = a2.max_abs();
    Ok(ReductionInstance {
        a1: a1.scale(b_bound / n1),
        a2: a2.scale(b_bound / n2),
        a3,
        e: DenseMatrix::zeros(l, r),
        x,
        b_bound,
    })
}

/// `D⁻¹exp(A1·X·A2ᵀ/r)·A3` by direct summation.
pub fn attlgc_forward(ri: &ReductionInstance) -> Result<DenseMatrix> {
    ri.validate()?;
    let (l, r) = ri.a1.shape();
    let s = ri.a1.matmul(&ri.x)?.matmul_t(&ri.a2)?.scale(1.0 / r as f64);
    let mut out = DenseMatrix::zeros(l, r);
    for j in 0..l {
        let e: Vec<f64> = s.row(j).iter().map(|v| v.exp()).collect();
        let z: f64 = e.iter().sum();
        for i in 0..r {
            let v: f64 = (0..l).map(|k| e[k] * ri.a3.get(k, i)).sum();
            out.set(j, i, v / z);
        }
    }
    Ok(out)
}

pub fn attlgc_loss(ri: &ReductionInstance) -> Result<f64> {
    Ok(0.5 * attlgc_forward(ri)?.sub(&ri.e)?.frobenius_sq())
}

/// Builds the LoRA instance and adapter (`W* = 0`) described in the module
/// docs, checking `‖C2‖_∞ ≤ B` and `‖C1·B·A‖_∞ ≤ B`.
pub fn embed_attlgc(ri: &ReductionInstance, d: usize) -> Result<(AttentionInstance, LoraAdapter)> {
    ri.validate()?;
    let (l, r) = ri.a1.shape();
    if r > d {
        return dim_err(format!("reduction rank {r} exceeds head dimension {d}"));
    }
    let c1 = ri.a1.pad_to(l, d)?;
    let c2 = ri.a2.scale(1.0 / r as f64).pad_to(l, d)?;
    let c3 = ri.a3.pad_to(l, d)?;
    let y = ri.e.pad_to(l, d)?;
    let b = DenseMatrix::identity(r).pad_to(d, r)?;
    let a = ri.x.pad_to(r, d)?;
    let adapter = LoraAdapter::new(b, a, r as f64)?;
    let q_norm = c1.matmul(&adapter.product())?.max_abs();
    for (what, v) in [("C2", c2.max_abs()), ("C1·B·A", q_norm)] {
        if v > ri.b_bound * (1.0 + 1e-12) {
            return Err(Error::Embed(format!(
                "{what} has entrywise norm {v:e} above the bound {:e}",
                ri.b_bound
            )));
        }
    }
    Ok((AttentionInstance::new(c1, c2, c3, y)?, adapter))
}

/// Outcome of [`reduce_check`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReductionReport {
    /// `‖(f·C3)[:, :r] − attention output‖_∞`.
    pub output_err: f64,
    /// Max relative error between the `r × r` block of `dL/dA` and the
    /// finite-difference gradient of the original loss in `X`.
    pub grad_rel_err: f64,
}

pub fn reduce_check(ri: &ReductionInstance, d: usize) -> Result<ReductionReport> {
    let (inst, adp) = embed_attlgc(ri, d)?;
    let (l, r) = ri.a1.shape();
    let wstar = DenseMatrix::zeros(d, d);
    let out = forward_f(&inst, &adp.product())?.matmul(inst.c3())?;
    let output_err = out.block(0, 0, l, r)?.max_abs_diff(&attlgc_forward(ri)?)?;
    let g = grad_adapters_special(&inst, &wstar, &adp)?;
    let fd = fd_gradient(&vectorize(&ri.x), FD_STEP, |theta| {
        attlgc_loss(&ri.with_x(matrixize(theta, r, r)?))
    })?;
    let grad_rel_err = max_rel_err(&g.g_a.block(0, 0, r, r)?, &matrixize(&fd, r, r)?)?;
    Ok(ReductionReport {
        output_err,
        grad_rel_err,
    })
}
