//! Polynomial feature maps for the softmax numerator.
//!
//! `Φ(x)_a = x^a / √(a!)` over all multi-indices `|a| ≤ g` in `d` variables,
//! so that `⟨Φ(x), Φ(y)⟩ = Σ_{t ≤ g} ⟨x, y⟩ᵗ / t!`, the degree-`g` Taylor
//! polynomial of `exp(⟨x, y⟩)`. The feature count is `C(d + g, g)`.

use crate::attention::AttentionInstance;
use crate::error::{Error, Result};
use crate::matrix::{dot, DenseMatrix};
use crate::meter::Meter;
use crate::par;

use super::LowRankFactor;

/// Degrees beyond this are reported as-is by [`required_degree`].
pub const MAX_DEGREE: usize = 1 << 16;

/// Relative slack allowed on the norm preconditions, so that instances
/// rescaled to exactly `Γ` pass.
const NORM_SLACK: f64 = 1e-12;

/// Largest feature count [`feature_map`] will build.
pub const FEATURE_LIMIT: usize = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolyApproxConfig {
    gamma: f64,
    degree: usize,
    eps_target: f64,
    strict: bool,
}

impl PolyApproxConfig {
    /// A strict configuration: norm preconditions and positive normalizers
    /// are enforced.
    pub fn new(gamma: f64, degree: usize, eps_target: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::Config(format!(
                "gamma must be positive, got {gamma}"
            )));
        }
        if !(eps_target > 0.0 && eps_target.is_finite()) {
            return Err(Error::Config(format!(
                "eps_target must be positive, got {eps_target}"
            )));
        }
        Ok(Self {
            gamma,
            degree,
            eps_target,
            strict: true,
        })
    }

    /// Skips the norm and normalizer-sign checks. Used by sweeps that
    /// deliberately leave the bounded regime.
    pub fn lenient(self) -> Self {
        Self {
            strict: false,
            ..self
        }
    }

    pub fn with_degree(self, degree: usize) -> Self {
        Self { degree, ..self }
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn eps_target(&self) -> f64 {
        self.eps_target
    }

    pub fn is_strict(&self) -> bool {
        self.strict
    }
}

/// `C(d + g, g)`, saturating at `u128::MAX`.
pub fn monomial_count(d: usize, g: usize) -> u128 {
    let mut c: u128 = 1;
    for i in 1..=g as u128 {
        // c·(d+i)/i stays integral at every step.
        match c.checked_mul(d as u128 + i) {
            Some(x) => c = x / i,
            None => return u128::MAX,
        }
    }
    c
}

/// Smallest `g` with `R^{g+1}·e^R/(g+1)! ≤ eps·e^{−R}` for `R = d·Γ²`, which
/// bounds the relative error of the degree-`g` Taylor polynomial of `exp`
/// on `[−R, R]` by `eps`.
pub fn required_degree(gamma: f64, eps_target: f64, d: usize) -> usize {
    let r = d as f64 * gamma * gamma;
    if r == 0.0 {
        return 0;
    }
    let (ln_r, ln_eps) = (r.ln(), eps_target.ln());
    let mut ln_fact = 0.0; // ln((g+1)!)
    for g in 0..MAX_DEGREE {
        ln_fact += ((g + 1) as f64).ln();
        if (g + 1) as f64 * ln_r + r - ln_fact <= ln_eps - r {
            return g;
        }
    }
    MAX_DEGREE
}

/// [`required_degree`] for `cfg`, refusing degrees whose feature count
/// exceeds the sequence length.
pub fn select_degree(cfg: &PolyApproxConfig, d: usize, seq_len: usize) -> Result<usize> {
    let g = required_degree(cfg.gamma, cfg.eps_target, d);
    check_feasible(d, g, seq_len)?;
    Ok(g)
}

/// Largest degree whose feature count fits in `seq_len` columns.
pub fn max_feasible_degree(d: usize, seq_len: usize) -> Option<usize> {
    if seq_len == 0 {
        return None;
    }
    let mut g = 0;
    while monomial_count(d, g + 1) <= seq_len as u128 {
        g += 1;
    }
    Some(g)
}

fn check_feasible(d: usize, g: usize, seq_len: usize) -> Result<()> {
    let rank = monomial_count(d, g);
    if rank > seq_len as u128 {
        return Err(Error::Infeasible {
            degree: g,
            rank,
            seq_len,
        });
    }
    Ok(())
}

/// Monomials of degree `≤ g` ordered by degree; monomial `m > 0` equals its
/// parent times `x[var[m]]`, and `power[m]` is the new exponent of that
/// variable.
struct MonomialTable {
    parent: Vec<usize>,
    var: Vec<usize>,
    inv_sqrt_power: Vec<f64>,
}

impl MonomialTable {
    fn new(d: usize, g: usize) -> Self {
        let mut parent = vec![0];
        let mut var = vec![0];
        let mut power = vec![0u32];
        let mut level = 0..1;
        for _ in 0..g {
            let start = parent.len();
            for m in level.clone() {
                for i in var[m]..d {
                    parent.push(m);
                    var.push(i);
                    power.push(if m > 0 && var[m] == i {
                        power[m] + 1
                    } else {
                        1
                    });
                }
            }
            level = start..parent.len();
        }
        let inv_sqrt_power = power
            .iter()
            .map(|&p| if p == 0 { 1.0 } else { 1.0 / (p as f64).sqrt() })
            .collect();
        Self {
            parent,
            var,
            inv_sqrt_power,
        }
    }

    fn len(&self) -> usize {
        self.parent.len()
    }

    fn eval(&self, x: &[f64], out: &mut [f64]) {
        out[0] = 1.0;
        for m in 1..out.len() {
            out[m] = out[self.parent[m]] * x[self.var[m]] * self.inv_sqrt_power[m];
        }
    }

    fn features(&self, x: &DenseMatrix, meter: &Meter) -> DenseMatrix {
        let k = self.len();
        let mut out = DenseMatrix::zeros(x.rows(), k);
        par::for_each_row(out.data_mut(), k, |i, row| self.eval(x.row(i), row));
        meter.add_ops((x.rows() * k) as u64);
        meter.track(out)
    }
}

/// Feature map `Φ` applied to each row of `x`.
pub fn feature_map(x: &DenseMatrix, degree: usize) -> Result<DenseMatrix> {
    let k = monomial_count(x.cols(), degree);
    if k > FEATURE_LIMIT as u128 {
        return Err(Error::Guard {
            what: "feature count",
            size: usize::try_from(k).unwrap_or(usize::MAX),
            limit: FEATURE_LIMIT,
        });
    }
    Ok(MonomialTable::new(x.cols(), degree).features(x, &Meter::new()))
}

/// Low-rank approximation of `f(W)` from the degree-`cfg.degree()` features:
/// `U₁ = diag(D̃)⁻¹·Φ(C1·W)`, `V₁ = Φ(C2)` with `D̃ = Φ(C1·W)·Φ(C2)ᵀ·1`.
pub fn approx_f_poly(
    inst: &AttentionInstance,
    w: &DenseMatrix,
    cfg: &PolyApproxConfig,
) -> Result<LowRankFactor> {
    approx_f_poly_metered(inst, w, cfg, &Meter::new())
}

pub(crate) fn approx_f_poly_metered(
    inst: &AttentionInstance,
    w: &DenseMatrix,
    cfg: &PolyApproxConfig,
    meter: &Meter,
) -> Result<LowRankFactor> {
    inst.check_weight(w)?;
    let (l, d) = (inst.seq_len(), inst.head_dim());
    check_feasible(d, cfg.degree, l)?;
    let m1 = meter.matmul(inst.c1(), w)?;
    if cfg.strict {
        let limit = cfg.gamma * (1.0 + NORM_SLACK);
        for (what, m) in [("C1·W", &m1), ("C2", inst.c2())] {
            let measured = m.max_abs();
            if measured > limit {
                return Err(Error::NormBound {
                    what,
                    measured,
                    gamma: cfg.gamma,
                });
            }
        }
    }
    let table = MonomialTable::new(d, cfg.degree);
    let k1 = table.len();
    let phi_q = table.features(&m1, meter);
    let phi_k = table.features(inst.c2(), meter);
    let mut colsum = vec![0.0; k1];
    for i in 0..l {
        for (s, &v) in colsum.iter_mut().zip(phi_k.row(i)) {
            *s += v;
        }
    }
    let denom: Vec<f64> = par::map_collect(l, |j| dot(phi_q.row(j), &colsum));
    meter.add_ops((3 * l * k1) as u64);
    for (row, &value) in denom.iter().enumerate() {
        let bad = if cfg.strict {
            value <= 0.0
        } else {
            value == 0.0
        };
        if bad || !value.is_finite() {
            return Err(Error::Breakdown { row, value });
        }
    }
    let inv: Vec<f64> = denom.iter().map(|v| 1.0 / v).collect();
    let u1 = meter.track(phi_q.scale_rows(&inv)?);
    LowRankFactor::new(u1, phi_k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::forward_f;

    fn grid(l: usize, d: usize, scale: f64, seed: u64) -> DenseMatrix {
        let mut s = seed;
        DenseMatrix::from_fn(l, d, |_, _| {
            s = s
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            scale * (2.0 * ((s >> 11) as f64 / (1u64 << 53) as f64) - 1.0)
        })
    }

    #[test]
    fn monomial_counts() {
        assert_eq!(monomial_count(2, 2), 6);
        assert_eq!(monomial_count(3, 3), 20);
        assert_eq!(monomial_count(4, 0), 1);
        assert_eq!(monomial_count(4, 7), 330);
        assert_eq!(monomial_count(10_000, 10_000), u128::MAX);
        for (d, g) in [(1, 5), (2, 4), (3, 3), (4, 3), (5, 2)] {
            assert_eq!(MonomialTable::new(d, g).len() as u128, monomial_count(d, g));
        }
    }

    #[test]
    fn features_realize_truncated_exponential_kernel() {
        let x = grid(2, 3, 0.8, 1);
        for g in 0..5 {
            let phi = feature_map(&x, g).unwrap();
            let s = dot(x.row(0), x.row(1));
            let mut expect = 0.0;
            let mut term = 1.0;
            for t in 0..=g {
                if t > 0 {
                    term *= s / t as f64;
                }
                expect += term;
            }
            let got = dot(phi.row(0), phi.row(1));
            assert!((got - expect).abs() < 1e-14, "g={g}: {got} vs {expect}");
        }
    }

    #[test]
    fn degree_zero_at_zero_radius() {
        assert_eq!(required_degree(0.0, 1e-6, 4), 0);
    }

    #[test]
    fn selected_degree_satisfies_remainder_bound() {
        let cfg = PolyApproxConfig::new(0.5, 0, 1e-4).unwrap();
        let g = required_degree(cfg.gamma(), cfg.eps_target(), 4);
        let r: f64 = 4.0 * 0.25;
        let bound = |g: usize| {
            let fact: f64 = (1..=g + 1).map(|i| i as f64).product();
            r.powi(g as i32 + 1) * r.exp() / fact
        };
        assert!(bound(g) <= 1e-4 * (-r).exp());
        assert!(g == 0 || bound(g - 1) > 1e-4 * (-r).exp());
        assert!(matches!(
            select_degree(&cfg, 4, 64),
            Err(Error::Infeasible { seq_len: 64, .. })
        ));
        assert_eq!(select_degree(&cfg, 4, 10_000).unwrap(), g);
    }

    #[test]
    fn feasible_degree_fits_sequence() {
        assert_eq!(max_feasible_degree(4, 64), Some(3));
        assert_eq!(max_feasible_degree(3, 20), Some(3));
        assert_eq!(max_feasible_degree(3, 1), Some(0));
    }

    #[test]
    fn zero_weight_gives_uniform_rows() {
        let l = 9;
        let inst = AttentionInstance::new(
            grid(l, 2, 0.3, 2),
            grid(l, 2, 0.3, 3),
            grid(l, 2, 1.0, 4),
            grid(l, 2, 1.0, 5),
        )
        .unwrap();
        let cfg = PolyApproxConfig::new(0.5, 1, 1e-3).unwrap();
        let f = approx_f_poly(&inst, &DenseMatrix::zeros(2, 2), &cfg).unwrap();
        let dense = f.materialize().unwrap();
        assert!(dense
            .data()
            .iter()
            .all(|&v| (v - 1.0 / l as f64).abs() < 1e-15));
    }

    #[test]
    fn small_norm_instance_is_accurate() {
        let inst = AttentionInstance::new(
            grid(32, 3, 0.4, 6),
            grid(32, 3, 0.4, 7),
            grid(32, 3, 1.0, 8),
            grid(32, 3, 1.0, 9),
        )
        .unwrap();
        let w = DenseMatrix::identity(3);
        let cfg = PolyApproxConfig::new(0.4, 3, 1e-3).unwrap();
        let f = approx_f_poly(&inst, &w, &cfg).unwrap();
        assert_eq!(f.rank(), 20);
        let err = f
            .materialize()
            .unwrap()
            .max_abs_diff(&forward_f(&inst, &w).unwrap())
            .unwrap();
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn preconditions_are_enforced() {
        let inst = AttentionInstance::new(
            grid(8, 2, 2.0, 10),
            grid(8, 2, 0.1, 11),
            grid(8, 2, 1.0, 12),
            grid(8, 2, 1.0, 13),
        )
        .unwrap();
        let w = DenseMatrix::identity(2);
        let cfg = PolyApproxConfig::new(0.5, 1, 1e-3).unwrap();
        assert!(matches!(
            approx_f_poly(&inst, &w, &cfg),
            Err(Error::NormBound { what: "C1·W", .. })
        ));
        assert!(approx_f_poly(&inst, &w, &cfg.lenient()).is_ok());
        assert!(matches!(
            approx_f_poly(&inst, &w, &cfg.with_degree(3)),
            Err(Error::Infeasible { .. })
        ));
        assert!(PolyApproxConfig::new(0.0, 1, 1e-3).is_err());
        assert!(PolyApproxConfig::new(1.0, 1, 0.0).is_err());
    }

    #[test]
    fn negative_normalizer_is_a_breakdown() {
        // Degree 1 gives 1 + s, negative for every key when s < −1.
        let c1 = DenseMatrix::from_rows(&[[3.0], [0.0]]).unwrap();
        let c2 = DenseMatrix::from_rows(&[[-1.0], [-1.0]]).unwrap();
        let z = DenseMatrix::zeros(2, 1);
        let inst = AttentionInstance::new(c1, c2, z.clone(), z).unwrap();
        let cfg = PolyApproxConfig::new(3.0, 1, 1e-3).unwrap();
        let w = DenseMatrix::identity(1);
        assert!(matches!(
            approx_f_poly(&inst, &w, &cfg),
            Err(Error::Breakdown { row: 0, .. })
        ));
        assert!(approx_f_poly(&inst, &w, &cfg.lenient()).is_ok());
    }
}
