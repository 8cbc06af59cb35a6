use std::fmt::Write as _;
use std::time::Instant;

use crate::attention::{effective_weight, forward_f};
use crate::error::{Error, Result};
use crate::exact::{grad_adapters_special, grad_adapters_special_metered, guard_limit};
use crate::lowrank::{
    approx_f_poly, approx_grad_special, approx_grad_special_metered, max_feasible_degree,
    monomial_count, required_degree, FactorBackend, PolyApproxConfig,
};
use crate::meter::Meter;
use crate::par;

use super::instance::gen_instance;

pub const BENCH_HEADER: &str = "L,path,wall_ns,ops,slope";
pub const SWEEP_HEADER: &str = "gamma,degree,rank_k1,f_err,grad_err,infeasible";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PathKind {
    Exact,
    Approx,
}

impl PathKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Exact => "exact",
            Self::Approx => "approx",
        }
    }
}

/// One benchmark or sweep point. Fields that do not apply are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub seq_len: usize,
    pub head_dim: usize,
    pub rank: usize,
    pub gamma: f64,
    pub path: Option<PathKind>,
    pub degree: Option<usize>,
    pub rank_k1: Option<u128>,
    pub f_err: Option<f64>,
    pub grad_err: Option<f64>,
    pub wall_ns: Option<u128>,
    pub ops: Option<u64>,
    pub peak_alloc: Option<usize>,
    pub infeasible: bool,
    /// Why a point was skipped or failed.
    pub note: Option<String>,
}

impl SweepRow {
    fn new(seq_len: usize, head_dim: usize, rank: usize, gamma: f64) -> Self {
        Self {
            seq_len,
            head_dim,
            rank,
            gamma,
            path: None,
            degree: None,
            rank_k1: None,
            f_err: None,
            grad_err: None,
            wall_ns: None,
            ops: None,
            peak_alloc: None,
            infeasible: false,
            note: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
}

fn opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref()
        .map_or_else(|| "skipped".to_owned(), T::to_string)
}

impl SweepResult {
    pub fn path_rows(&self, path: PathKind) -> impl Iterator<Item = &SweepRow> {
        self.rows.iter().filter(move |r| r.path == Some(path))
    }

    /// Least-squares slope of `log(ops)` against `log(L)` over the completed
    /// rows of `path`.
    pub fn ops_slope(&self, path: PathKind) -> Option<f64> {
        let (xs, ys): (Vec<f64>, Vec<f64>) = self
            .path_rows(path)
            .filter_map(|r| r.ops.map(|o| (r.seq_len as f64, o as f64)))
            .unzip();
        fit_loglog_slope(&xs, &ys)
    }

    /// `L,path,wall_ns,ops,slope`; `slope` repeats the fitted op-count slope
    /// of the row's path.
    pub fn bench_csv(&self) -> String {
        let mut out = format!("{BENCH_HEADER}\n");
        for r in &self.rows {
            let Some(path) = r.path else { continue };
            let slope = self
                .ops_slope(path)
                .map_or_else(|| "nan".into(), |s| format!("{s:.4}"));
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.seq_len,
                path.name(),
                opt(&r.wall_ns),
                opt(&r.ops),
                slope
            );
        }
        out
    }

    /// `gamma,degree,rank_k1,f_err,grad_err,infeasible`. Failed
    /// approximations are written as `inf`.
    pub fn sweep_csv(&self) -> String {
        let mut out = format!("{SWEEP_HEADER}\n");
        let err = |v: Option<f64>| v.map_or_else(|| "inf".to_owned(), |e| format!("{e:.6e}"));
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.gamma,
                opt(&r.degree),
                opt(&r.rank_k1),
                err(r.f_err),
                err(r.grad_err),
                r.infeasible
            );
        }
        out
    }
}

/// Least-squares slope of `ln y` on `ln x`. `None` with fewer than two
/// distinct positive points.
pub fn fit_loglog_slope(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = xs
        .iter()
        .zip(ys)
        .filter(|(x, y)| **x > 0.0 && **y > 0.0)
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    let n = pts.len() as f64;
    if pts.len() < 2 {
        return None;
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchConfig {
    pub seed: u64,
    pub gamma: f64,
    /// Fixed polynomial degree of the approximate path.
    pub degree: usize,
    pub repeats: usize,
}

fn median(mut v: Vec<u128>) -> u128 {
    v.sort_unstable();
    v[v.len() / 2]
}

/// Times both paths on one seeded instance per `L` (sub-seed `seed + L`).
/// Op counts come from the first repeat; wall time is the median. Exact
/// points beyond the size guard are recorded as skipped.
pub fn bench_scaling(
    l_list: &[usize],
    d: usize,
    r: usize,
    cfg: &BenchConfig,
) -> Result<SweepResult> {
    let poly = PolyApproxConfig::new(cfg.gamma, cfg.degree, 1.0)?;
    let repeats = cfg.repeats.max(1);
    let mut rows = Vec::new();
    for &l in l_list {
        let gi = gen_instance(cfg.seed.wrapping_add(l as u64), l, d, r, cfg.gamma)?;
        for path in [PathKind::Exact, PathKind::Approx] {
            let mut row = SweepRow::new(l, d, r, cfg.gamma);
            row.path = Some(path);
            if path == PathKind::Approx {
                row.degree = Some(cfg.degree);
                row.rank_k1 = Some(monomial_count(d, cfg.degree));
            }
            if path == PathKind::Exact && l > guard_limit() {
                row.note = Some(format!("L = {l} exceeds the exact-path guard"));
                rows.push(row);
                continue;
            }
            let mut times = Vec::with_capacity(repeats);
            for rep in 0..repeats {
                let meter = Meter::new();
                let start = Instant::now();
                match path {
                    PathKind::Exact => {
                        grad_adapters_special_metered(&gi.inst, &gi.wstar, &gi.adapter, &meter)?;
                    }
                    PathKind::Approx => {
                        approx_grad_special_metered(
                            &gi.inst,
                            &gi.wstar,
                            &gi.adapter,
                            &FactorBackend::Poly(poly),
                            &meter,
                        )?;
                    }
                }
                times.push(start.elapsed().as_nanos());
                if rep == 0 {
                    row.ops = Some(meter.ops());
                    row.peak_alloc = Some(meter.peak_alloc());
                }
            }
            row.wall_ns = Some(median(times));
            rows.push(row);
        }
    }
    Ok(SweepResult { rows })
}

/// Γ sweep on the instance drawn from `seed` at every Γ.
///
/// `degree`, `rank_k1` and `infeasible` describe the degree the accuracy
/// target requires at each Γ. `f_err` and `grad_err` are measured at one
/// fixed degree, the one required at the smallest Γ of the list (capped at
/// the largest feasible degree), with the norm checks relaxed.
pub fn sweep_gamma(
    gamma_list: &[f64],
    l: usize,
    d: usize,
    r: usize,
    eps_target: f64,
    seed: u64,
) -> Result<SweepResult> {
    let g_min = gamma_list.iter().copied().fold(f64::INFINITY, f64::min);
    if !g_min.is_finite() {
        return Err(Error::Config("empty gamma list".into()));
    }
    let fixed = required_degree(g_min, eps_target, d).min(max_feasible_degree(d, l).unwrap_or(0));
    let rows = par::map_collect(gamma_list.len(), |i| {
        sweep_point(gamma_list[i], l, d, r, eps_target, seed, fixed)
    });
    Ok(SweepResult {
        rows: rows.into_iter().collect::<Result<_>>()?,
    })
}

fn sweep_point(
    gamma: f64,
    l: usize,
    d: usize,
    r: usize,
    eps_target: f64,
    seed: u64,
    fixed_degree: usize,
) -> Result<SweepRow> {
    let gi = gen_instance(seed, l, d, r, gamma)?;
    let mut row = SweepRow::new(l, d, r, gamma);
    let needed = required_degree(gamma, eps_target, d);
    let k1 = monomial_count(d, needed);
    row.degree = Some(needed);
    row.rank_k1 = Some(k1);
    row.infeasible = k1 > l as u128;

    let cfg = PolyApproxConfig::new(gamma, fixed_degree, eps_target)?.lenient();
    let w = effective_weight(&gi.wstar, &gi.adapter)?;
    let f = forward_f(&gi.inst, &w)?;
    let exact = grad_adapters_special(&gi.inst, &gi.wstar, &gi.adapter)?;
    let measured = approx_f_poly(&gi.inst, &w, &cfg)
        .and_then(|lr| lr.materialize()?.max_abs_diff(&f))
        .and_then(|f_err| {
            let approx =
                approx_grad_special(&gi.inst, &gi.wstar, &gi.adapter, &FactorBackend::Poly(cfg))?;
            Ok((f_err, exact.max_abs_diff(&approx)?))
        });
    match measured {
        Ok((f_err, grad_err)) => {
            row.f_err = Some(f_err);
            row.grad_err = Some(grad_err);
        }
        Err(e) => row.note = Some(e.to_string()),
    }
    Ok(row)
}
