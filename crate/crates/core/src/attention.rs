//! Attention instances, the forward pass `f(W)`, the LoRA loss and the
//! intermediate residual `c(W)` and score matrix `q(W)`.
//!
//! Throughout, `f(W)` is the row-softmax of `C1·W·C2ᵀ` and row `j` of `f`
//! is the attention distribution of query `j`.

use crate::error::{dim_err, Error, Result};
use crate::matrix::{dot, DenseMatrix};
use crate::par;

/// Largest admissible `|C1·W·C2ᵀ|` entry; `exp` of anything larger
/// overflows `f64`.
pub const SCORE_LIMIT: f64 = 709.0;

/// Frozen constants `(C1, C2, C3, Y)` of one adaptation problem, all `L × d`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionInstance {
    c1: DenseMatrix,
    c2: DenseMatrix,
    c3: DenseMatrix,
    y: DenseMatrix,
}

impl AttentionInstance {
    pub fn new(c1: DenseMatrix, c2: DenseMatrix, c3: DenseMatrix, y: DenseMatrix) -> Result<Self> {
        let shape = c1.shape();
        for (name, m) in [("C2", &c2), ("C3", &c3), ("Y", &y)] {
            if m.shape() != shape {
                return dim_err(format!(
                    "{name} is {}x{}, expected {}x{}",
                    m.rows(),
                    m.cols(),
                    shape.0,
                    shape.1
                ));
            }
        }
        Ok(Self { c1, c2, c3, y })
    }

    pub fn c1(&self) -> &DenseMatrix {
        &self.c1
    }

    pub fn c2(&self) -> &DenseMatrix {
        &self.c2
    }

    pub fn c3(&self) -> &DenseMatrix {
        &self.c3
    }

    pub fn y(&self) -> &DenseMatrix {
        &self.y
    }

    /// Sequence length `L`.
    pub fn seq_len(&self) -> usize {
        self.c1.rows()
    }

    /// Head dimension `d`.
    pub fn head_dim(&self) -> usize {
        self.c1.cols()
    }

    /// Same constants with a different target.
    pub fn with_target(&self, y: DenseMatrix) -> Result<Self> {
        Self::new(self.c1.clone(), self.c2.clone(), self.c3.clone(), y)
    }

    pub(crate) fn check_weight(&self, w: &DenseMatrix) -> Result<()> {
        let d = self.head_dim();
        if w.shape() != (d, d) {
            return dim_err(format!("W is {}x{}, expected {d}x{d}", w.rows(), w.cols()));
        }
        Ok(())
    }
}

/// A rank-`r` LoRA pair: the weight update is `(alpha / r)·B·A`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    b: DenseMatrix,
    a: DenseMatrix,
    alpha: f64,
}

impl LoraAdapter {
    /// `b` is `d × r`, `a` is `r × d`, and `r ≤ d`.
    pub fn new(b: DenseMatrix, a: DenseMatrix, alpha: f64) -> Result<Self> {
        let (d, r) = b.shape();
        if a.shape() != (r, d) {
            return dim_err(format!(
                "A is {}x{}, expected {r}x{d} to match B {d}x{r}",
                a.rows(),
                a.cols()
            ));
        }
        if r > d {
            return dim_err(format!("rank {r} exceeds head dimension {d}"));
        }
        if !(alpha.is_finite() && alpha != 0.0) {
            return Err(Error::Config(format!(
                "alpha must be finite and non-zero, got {alpha}"
            )));
        }
        Ok(Self { b, a, alpha })
    }

    pub fn zeros(d: usize, r: usize, alpha: f64) -> Result<Self> {
        Self::new(DenseMatrix::zeros(d, r), DenseMatrix::zeros(r, d), alpha)
    }

    pub fn b(&self) -> &DenseMatrix {
        &self.b
    }

    pub fn a(&self) -> &DenseMatrix {
        &self.a
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn rank(&self) -> usize {
        self.b.cols()
    }

    pub fn head_dim(&self) -> usize {
        self.b.rows()
    }

    /// `alpha / r`.
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank() as f64
    }

    /// `B·A` (without the `alpha / r` factor).
    pub fn product(&self) -> DenseMatrix {
        self.b
            .matmul(&self.a)
            .expect("adapter shapes are validated")
    }

    /// Adapted weight `W* + (alpha / r)·B·A`.
    pub fn adapted(&self, wstar: &DenseMatrix) -> Result<DenseMatrix> {
        wstar.add(&self.product().scale(self.scale()))
    }

    pub fn with_factors(&self, b: DenseMatrix, a: DenseMatrix) -> Result<Self> {
        Self::new(b, a, self.alpha)
    }

    /// The adapter of `Wᵀ`: `(B·A)ᵀ = Aᵀ·Bᵀ`, so `Aᵀ` plays `B` and `Bᵀ`
    /// plays `A`.
    pub(crate) fn transposed(&self) -> Self {
        Self {
            b: self.a.transpose(),
            a: self.b.transpose(),
            alpha: self.alpha,
        }
    }

    pub(crate) fn check_dim(&self, d: usize) -> Result<()> {
        if self.head_dim() != d {
            return dim_err(format!(
                "adapter head dimension {} does not match instance d = {d}",
                self.head_dim()
            ));
        }
        Ok(())
    }
}

/// The folded weight `W = (r/alpha)·W* + B·A` that multiplies
/// `C1 = X_Q·(alpha/r)`.
pub fn effective_weight(wstar: &DenseMatrix, adp: &LoraAdapter) -> Result<DenseMatrix> {
    let d = adp.head_dim();
    if wstar.shape() != (d, d) {
        return dim_err(format!(
            "W* is {}x{}, expected {d}x{d}",
            wstar.rows(),
            wstar.cols()
        ));
    }
    wstar.scale(1.0 / adp.scale()).add(&adp.product())
}

/// Raw inputs of one attention head: `X_Q, X_K, X_V, Y` (`L × d`) and the
/// frozen weights `W_Q*, W_K*, W_V*` (`d × d`).
#[derive(Debug, Clone, PartialEq)]
pub struct GeneralInstance {
    pub xq: DenseMatrix,
    pub xk: DenseMatrix,
    pub xv: DenseMatrix,
    pub y: DenseMatrix,
    pub wq_star: DenseMatrix,
    pub wk_star: DenseMatrix,
    pub wv_star: DenseMatrix,
}

impl GeneralInstance {
    pub fn validate(&self) -> Result<()> {
        let (l, d) = self.xq.shape();
        for (name, m) in [("X_K", &self.xk), ("X_V", &self.xv), ("Y", &self.y)] {
            if m.shape() != (l, d) {
                return dim_err(format!(
                    "{name} is {}x{}, expected {l}x{d}",
                    m.rows(),
                    m.cols()
                ));
            }
        }
        for (name, m) in [
            ("W_Q*", &self.wq_star),
            ("W_K*", &self.wk_star),
            ("W_V*", &self.wv_star),
        ] {
            if m.shape() != (d, d) {
                return dim_err(format!(
                    "{name} is {}x{}, expected {d}x{d}",
                    m.rows(),
                    m.cols()
                ));
            }
        }
        Ok(())
    }

    pub fn seq_len(&self) -> usize {
        self.xq.rows()
    }

    pub fn head_dim(&self) -> usize {
        self.xq.cols()
    }
}

/// Constants for adapting `W_Q` only: `C1 = X_Q·q_scale`, `C2 = X_K·W_K*`,
/// `C3 = X_V·W_V` where `W_V` is `W_V*`, or its adapted value when a frozen
/// value adapter is supplied. The inverse temperature is folded into `W`.
pub fn compose_special_constants(
    g: &GeneralInstance,
    q_scale: f64,
    value_adapter: Option<&LoraAdapter>,
) -> Result<AttentionInstance> {
    g.validate()?;
    let wv = match value_adapter {
        Some(adp) => {
            adp.check_dim(g.head_dim())?;
            adp.adapted(&g.wv_star)?
        }
        None => g.wv_star.clone(),
    };
    AttentionInstance::new(
        g.xq.scale(q_scale),
        g.xk.matmul(&g.wk_star)?,
        g.xv.matmul(&wv)?,
        g.y.clone(),
    )
}

/// Constants of the joint `W_Q`/`W_K` problem. `ck*` hold `W_Q` fixed (used
/// for the key gradient), `cq*` hold `W_K` fixed (used for the query
/// gradient).
#[derive(Debug, Clone, PartialEq)]
pub struct GeneralConstants {
    /// `X_Q·W_Q`
    pub ck1: DenseMatrix,
    /// `X_K`
    pub ck2: DenseMatrix,
    /// `X_Q`
    pub cq1: DenseMatrix,
    /// `X_K·W_K`
    pub cq2: DenseMatrix,
    /// `X_V·W_V*`
    pub c3: DenseMatrix,
}

pub fn compose_general_constants(
    g: &GeneralInstance,
    adp_q: &LoraAdapter,
    adp_k: &LoraAdapter,
) -> Result<GeneralConstants> {
    g.validate()?;
    adp_q.check_dim(g.head_dim())?;
    adp_k.check_dim(g.head_dim())?;
    Ok(GeneralConstants {
        ck1: g.xq.matmul(&adp_q.adapted(&g.wq_star)?)?,
        ck2: g.xk.clone(),
        cq1: g.xq.clone(),
        cq2: g.xk.matmul(&adp_k.adapted(&g.wk_star)?)?,
        c3: g.xv.matmul(&g.wv_star)?,
    })
}

/// Writes `softmax(m1_row · c2ᵀ)` into `out` and returns the largest
/// `|score|` seen before normalization.
pub(crate) fn softmax_row(m1_row: &[f64], c2: &DenseMatrix, out: &mut [f64]) -> f64 {
    let mut max_abs = 0.0f64;
    for (k, o) in out.iter_mut().enumerate() {
        *o = dot(m1_row, c2.row(k));
        max_abs = max_abs.max(o.abs());
    }
    normalize_exp(out);
    max_abs
}

pub(crate) fn check_scores(max_abs: f64) -> Result<()> {
    if max_abs > SCORE_LIMIT || !max_abs.is_finite() {
        return Err(Error::Range {
            max_score: max_abs,
            limit: SCORE_LIMIT,
        });
    }
    Ok(())
}

/// Row-softmax of `C1·W·C2ᵀ` (`L × L`).
pub fn forward_f(inst: &AttentionInstance, w: &DenseMatrix) -> Result<DenseMatrix> {
    inst.check_weight(w)?;
    let m1 = inst.c1.matmul(w)?;
    softmax_rows(&m1, &inst.c2)
}

/// Row-softmax of `m1·c2ᵀ`.
pub(crate) fn softmax_rows(m1: &DenseMatrix, c2: &DenseMatrix) -> Result<DenseMatrix> {
    let l = c2.rows();
    let mut f = DenseMatrix::zeros(m1.rows(), l);
    par::for_each_row(f.data_mut(), l, |j, row| {
        for (k, o) in row.iter_mut().enumerate() {
            *o = dot(m1.row(j), c2.row(k));
        }
    });
    check_scores(f.max_abs())?;
    par::for_each_row(f.data_mut(), l, |_, row| normalize_exp(row));
    Ok(f)
}

/// In-place `softmax` of a row of scores.
pub(crate) fn normalize_exp(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for o in row.iter_mut() {
        *o = (*o - max).exp();
        sum += *o;
    }
    let inv = 1.0 / sum;
    row.iter_mut().for_each(|o| *o *= inv);
}

/// Per-row loss contributions `½‖f_j·C3 − Y_j‖²` and the max score of the row.
fn row_losses(inst: &AttentionInstance, m1: &DenseMatrix) -> Vec<(f64, f64)> {
    let (l, d) = (inst.seq_len(), inst.head_dim());
    par::map_collect(l, |j| {
        let mut f = vec![0.0; l];
        let max_abs = softmax_row(m1.row(j), &inst.c2, &mut f);
        let mut acc = 0.0;
        for i in 0..d {
            let v: f64 = f
                .iter()
                .enumerate()
                .map(|(k, fk)| fk * inst.c3.get(k, i))
                .sum();
            let c = v - inst.y.get(j, i);
            acc += 0.5 * c * c;
        }
        (acc, max_abs)
    })
}

/// `½‖f(W)·C3 − Y‖²_F`, streamed row by row.
pub fn loss(inst: &AttentionInstance, w: &DenseMatrix) -> Result<f64> {
    inst.check_weight(w)?;
    let m1 = inst.c1.matmul(w)?;
    let rows = row_losses(inst, &m1);
    check_scores(rows.iter().map(|r| r.1).fold(0.0, f64::max))?;
    Ok(rows.iter().map(|r| r.0).sum())
}

/// Loss of the joint problem
/// `½‖softmax(X_Q·W_Q·W_Kᵀ·X_Kᵀ)·X_V·W_V* − Y‖²` with both adapters applied.
pub fn general_loss(g: &GeneralInstance, adp_q: &LoraAdapter, adp_k: &LoraAdapter) -> Result<f64> {
    let consts = compose_general_constants(g, adp_q, adp_k)?;
    let inst = AttentionInstance::new(consts.ck1, consts.cq2, consts.c3, g.y.clone())?;
    loss(&inst, &DenseMatrix::identity(g.head_dim()))
}

/// Residual `c(W) = f(W)·C3 − Y` (`L × d`).
pub fn residual_c(inst: &AttentionInstance, w: &DenseMatrix) -> Result<DenseMatrix> {
    let f = forward_f(inst, w)?;
    f.matmul(&inst.c3)?.sub(&inst.y)
}

/// `q(W) = c(W)·C3ᵀ` (`L × L`). Row `j` is the derivative of the loss with
/// respect to row `j` of `f(W)`.
pub fn score_q(inst: &AttentionInstance, w: &DenseMatrix) -> Result<DenseMatrix> {
    let c = residual_c(inst, w)?;
    c.matmul_t(&inst.c3)
}
