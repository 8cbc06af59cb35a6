use crate::attention::{effective_weight, AttentionInstance, GeneralInstance, LoraAdapter};
use crate::error::{dim_err, Result};
use crate::exact::{adapter_grads_from_w, split_general, untranspose_pair, GradientPair};
use crate::matrix::{dot, DenseMatrix};
use crate::meter::Meter;
use crate::par;
use crate::tensor::colwise_kronecker_metered;

use super::poly::{approx_f_poly_metered, PolyApproxConfig};
use super::svd::approx_f_svd;
use super::LowRankFactor;

/// Source of the rank-`k₁` factor of `f`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FactorBackend {
    Poly(PolyApproxConfig),
    /// Truncated SVD of the materialized `f`; validation only.
    Svd {
        rank: usize,
    },
}

impl FactorBackend {
    fn factor(
        &self,
        inst: &AttentionInstance,
        w: &DenseMatrix,
        meter: &Meter,
    ) -> Result<LowRankFactor> {
        match self {
            Self::Poly(cfg) => approx_f_poly_metered(inst, w, cfg, meter),
            Self::Svd { rank } => approx_f_svd(inst, w, *rank),
        }
    }
}

/// `c̃ = U₁V₁ᵀC3 − Y`, kept as `U₁·(V₁ᵀC3) − Y`.
#[derive(Debug, Clone)]
pub struct ApproxResidual<'a> {
    f: &'a LowRankFactor,
    inst: &'a AttentionInstance,
    v1t_c3: DenseMatrix,
}

impl ApproxResidual<'_> {
    /// `U₁·(V₁ᵀC3)`, the approximate `f·C3` (`L × d`).
    fn f_c3(&self, meter: &Meter) -> Result<DenseMatrix> {
        meter.matmul(self.f.u(), &self.v1t_c3)
    }

    /// Dense `c̃` (`L × d`).
    pub fn materialize(&self) -> Result<DenseMatrix> {
        self.f_c3(&Meter::new())?.sub(self.inst.y())
    }
}

pub fn approx_c<'a>(
    f_lr: &'a LowRankFactor,
    inst: &'a AttentionInstance,
) -> Result<ApproxResidual<'a>> {
    approx_c_metered(f_lr, inst, &Meter::new())
}

fn approx_c_metered<'a>(
    f_lr: &'a LowRankFactor,
    inst: &'a AttentionInstance,
    meter: &Meter,
) -> Result<ApproxResidual<'a>> {
    f_lr.check_len(inst.seq_len())?;
    let v1t_c3 = meter.t_matmul(f_lr.v(), inst.c3())?;
    Ok(ApproxResidual {
        f: f_lr,
        inst,
        v1t_c3,
    })
}

/// `q̃ = c̃·C3ᵀ` as `U₂ = [U₁(V₁ᵀC3) | Y]`, `V₂ = [C3 | −C3]`.
pub fn approx_q(f_lr: &LowRankFactor, inst: &AttentionInstance) -> Result<LowRankFactor> {
    approx_q_metered(f_lr, inst, &Meter::new())
}

fn approx_q_metered(
    f_lr: &LowRankFactor,
    inst: &AttentionInstance,
    meter: &Meter,
) -> Result<LowRankFactor> {
    let c = approx_c_metered(f_lr, inst, meter)?;
    let u2 = meter.track(c.f_c3(meter)?.hcat(inst.y())?);
    let v2 = meter.track(inst.c3().hcat(&inst.c3().scale(-1.0))?);
    LowRankFactor::new(u2, v2)
}

fn check_pair(f_lr: &LowRankFactor, q_lr: &LowRankFactor) -> Result<()> {
    if f_lr.seq_len() != q_lr.seq_len() {
        return dim_err(format!(
            "factors disagree on L: {} and {}",
            f_lr.seq_len(),
            q_lr.seq_len()
        ));
    }
    Ok(())
}

/// `p̃₁ = f̃ ⊙ q̃` as `U₃ = U₁ ⊘ U₂`, `V₃ = V₁ ⊘ V₂`.
pub fn approx_p1(f_lr: &LowRankFactor, q_lr: &LowRankFactor) -> Result<LowRankFactor> {
    approx_p1_metered(f_lr, q_lr, &Meter::new())
}

fn approx_p1_metered(
    f_lr: &LowRankFactor,
    q_lr: &LowRankFactor,
    meter: &Meter,
) -> Result<LowRankFactor> {
    check_pair(f_lr, q_lr)?;
    let u3 = colwise_kronecker_metered(f_lr.u(), q_lr.u(), meter)?;
    let v3 = colwise_kronecker_metered(f_lr.v(), q_lr.v(), meter)?;
    LowRankFactor::new(u3, v3)
}

/// `p̃₂ = diag(r̃)·f̃` with `r̃_j = ⟨f̃_j, q̃_j⟩ = U₁[j]·(V₁ᵀV₂)·U₂[j]ᵀ`, as
/// `U₄ = diag(r̃)·U₁`, `V₄ = V₁`.
pub fn approx_p2(f_lr: &LowRankFactor, q_lr: &LowRankFactor) -> Result<LowRankFactor> {
    approx_p2_metered(f_lr, q_lr, &Meter::new())
}

fn approx_p2_metered(
    f_lr: &LowRankFactor,
    q_lr: &LowRankFactor,
    meter: &Meter,
) -> Result<LowRankFactor> {
    check_pair(f_lr, q_lr)?;
    let g = meter.t_matmul(f_lr.v(), q_lr.v())?;
    let (u1, u2) = (f_lr.u(), q_lr.u());
    let r: Vec<f64> = par::map_collect(u1.rows(), |j| {
        let (a, b) = (u1.row(j), u2.row(j));
        a.iter()
            .enumerate()
            .map(|(s, &av)| av * dot(g.row(s), b))
            .sum()
    });
    meter.add_ops((u1.rows() * g.len() + u1.len()) as u64);
    let u4 = meter.track(u1.scale_rows(&r)?);
    LowRankFactor::new(u4, f_lr.v().clone())
}

/// Approximate adapter gradients for the query-only problem.
pub fn approx_grad_special(
    inst: &AttentionInstance,
    wstar: &DenseMatrix,
    adp: &LoraAdapter,
    backend: &FactorBackend,
) -> Result<GradientPair> {
    approx_grad_special_metered(inst, wstar, adp, backend, &Meter::new())
}

pub fn approx_grad_special_metered(
    inst: &AttentionInstance,
    wstar: &DenseMatrix,
    adp: &LoraAdapter,
    backend: &FactorBackend,
    meter: &Meter,
) -> Result<GradientPair> {
    adp.check_dim(inst.head_dim())?;
    let w = effective_weight(wstar, adp)?;
    let f_lr = backend.factor(inst, &w, meter)?;
    let q_lr = approx_q_metered(&f_lr, inst, meter)?;
    let p1 = approx_p1_metered(&f_lr, &q_lr, meter)?;
    let p2 = approx_p2_metered(&f_lr, &q_lr, meter)?;
    let gw = sandwich(inst, &p1, meter)?.sub(&sandwich(inst, &p2, meter)?)?;
    adapter_grads_from_w(&gw, adp, meter)
}

/// `C1ᵀ·U·Vᵀ·C2`, evaluated as `(C1ᵀU)(VᵀC2)`.
fn sandwich(inst: &AttentionInstance, p: &LowRankFactor, meter: &Meter) -> Result<DenseMatrix> {
    let left = meter.t_matmul(inst.c1(), p.u())?;
    let right = meter.t_matmul(p.v(), inst.c2())?;
    meter.matmul(&left, &right)
}

/// Approximate gradients of the joint problem for the query and key
/// adapters. Each side runs the special-case chain with its own factor.
pub fn approx_grad_general(
    g: &GeneralInstance,
    adp_q: &LoraAdapter,
    adp_k: &LoraAdapter,
    backend: &FactorBackend,
) -> Result<(GradientPair, GradientPair)> {
    let (q_side, k_side) = split_general(g, adp_q, adp_k)?;
    let gq = approx_grad_special(&q_side, &g.wq_star, adp_q, backend)?;
    let gk_t = approx_grad_special(
        &k_side,
        &g.wk_star.transpose(),
        &adp_k.transposed(),
        backend,
    )?;
    Ok((gq, untranspose_pair(gk_t)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exact::{compute_p, grad_adapters_special};

    fn inst(l: usize, d: usize, seed: f64) -> AttentionInstance {
        let m = |s: f64| DenseMatrix::from_fn(l, d, |i, j| ((i * d + j) as f64 * s + seed).sin());
        AttentionInstance::new(m(0.7), m(1.3), m(0.4), m(2.1)).unwrap()
    }

    fn weight(d: usize) -> DenseMatrix {
        DenseMatrix::from_fn(d, d, |i, j| 0.3 * i as f64 - 0.2 * j as f64 + 0.1)
    }

    #[test]
    fn ranks_compose() {
        let it = inst(40, 2, 0.0);
        let f = LowRankFactor::new(
            DenseMatrix::from_fn(40, 5, |i, j| (i + j) as f64),
            DenseMatrix::from_fn(40, 5, |i, j| (i * j) as f64),
        )
        .unwrap();
        let q = approx_q(&f, &it).unwrap();
        assert_eq!(q.rank(), 4);
        let q3 = LowRankFactor::new(DenseMatrix::zeros(40, 6), DenseMatrix::zeros(40, 6)).unwrap();
        let p1 = approx_p1(&f, &q3).unwrap();
        assert_eq!(p1.rank(), 30);
        assert_eq!(p1.materialize().unwrap().max_abs(), 0.0);
        let p2 = approx_p2(&f, &q3).unwrap();
        assert_eq!(p2.rank(), 5);
        assert_eq!(p2.materialize().unwrap().max_abs(), 0.0);
    }

    #[test]
    fn exact_factor_reproduces_p() {
        let it = inst(6, 2, 0.5);
        let w = weight(2);
        let f = approx_f_svd(&it, &w, 6).unwrap();
        let q = approx_q(&f, &it).unwrap();
        let p = compute_p(&it, &w).unwrap();
        let p1 = approx_p1(&f, &q).unwrap().materialize().unwrap();
        let p2 = approx_p2(&f, &q).unwrap().materialize().unwrap();
        assert!(p1.max_abs_diff(&p.p1).unwrap() < 1e-10);
        assert!(p2.max_abs_diff(&p.p2).unwrap() < 1e-10);
    }

    #[test]
    fn full_rank_svd_matches_exact_gradients() {
        let it = inst(16, 3, 1.0);
        let wstar = weight(3);
        let adp = LoraAdapter::new(
            DenseMatrix::from_fn(3, 2, |i, j| 0.2 * (i + j) as f64 - 0.1),
            DenseMatrix::from_fn(2, 3, |i, j| 0.3 * i as f64 - 0.1 * j as f64),
            4.0,
        )
        .unwrap();
        let exact = grad_adapters_special(&it, &wstar, &adp).unwrap();
        let approx =
            approx_grad_special(&it, &wstar, &adp, &FactorBackend::Svd { rank: 16 }).unwrap();
        assert!(exact.max_abs_diff(&approx).unwrap() < 1e-8);
    }

    #[test]
    fn residual_materializes() {
        let it = inst(5, 2, 2.0);
        let w = weight(2);
        let f = approx_f_svd(&it, &w, 5).unwrap();
        let c = approx_c(&f, &it).unwrap().materialize().unwrap();
        let exact = crate::attention::residual_c(&it, &w).unwrap();
        assert!(c.max_abs_diff(&exact).unwrap() < 1e-10);
        let other = inst(6, 2, 0.0);
        assert!(approx_c(&f, &other).is_err());
    }
}
