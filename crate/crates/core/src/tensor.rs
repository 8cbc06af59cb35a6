//! Vectorization, Kronecker products, sub-blocks and the transpose
//! permutation.
//!
//! Vectorization is row-major everywhere in this crate: entry `(i, j)` of an
//! `m × n` matrix lands at position `i·n + j`. With that convention the
//! tensor trick reads `vec(A·X·Bᵀ) = (A ⊗ B)·vec(X)`.

use crate::error::{dim_err, Error, Result};
use crate::matrix::DenseMatrix;
use crate::meter::Meter;
use crate::par;

/// Row-major vectorization.
pub fn vectorize(x: &DenseMatrix) -> Vec<f64> {
    x.data().to_vec()
}

/// Inverse of [`vectorize`].
pub fn matrixize(v: &[f64], rows: usize, cols: usize) -> Result<DenseMatrix> {
    if rows.checked_mul(cols) != Some(v.len()) {
        return dim_err(format!("length {} cannot be shaped {rows}x{cols}", v.len()));
    }
    DenseMatrix::new(rows, cols, v.to_vec())
}

/// Kronecker product `A ⊗ B`.
///
/// Only test oracles and small checks should call this; the output has
/// `rows(A)·rows(B) × cols(A)·cols(B)` entries.
pub fn kronecker(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    let (la, da) = a.shape();
    let (lb, db) = b.shape();
    let (Some(rows), Some(cols)) = (la.checked_mul(lb), da.checked_mul(db)) else {
        return dim_err("kronecker output dimension overflows usize");
    };
    if rows.checked_mul(cols).is_none() {
        return dim_err("kronecker output size overflows usize");
    }
    let mut out = DenseMatrix::zeros(rows, cols);
    for ia in 0..la {
        for ja in 0..da {
            let s = a.get(ia, ja);
            for ib in 0..lb {
                for jb in 0..db {
                    out.set(ia * lb + ib, ja * db + jb, s * b.get(ib, jb));
                }
            }
        }
    }
    Ok(out)
}

/// Column-wise Kronecker product `A ⊘ B` over all column pairs.
///
/// Column `s·k₂ + t` of the output is `A[·,s] ⊙ B[·,t]`, so that
/// `(U₁ ⊘ U₂)(V₁ ⊘ V₂)ᵀ = (U₁V₁ᵀ) ⊙ (U₂V₂ᵀ)`.
pub fn colwise_kronecker(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.rows() != b.rows() {
        return dim_err(format!(
            "colwise_kronecker needs equal row counts, got {} and {}",
            a.rows(),
            b.rows()
        ));
    }
    let (k1, k2) = (a.cols(), b.cols());
    let width = k1 * k2;
    let mut out = DenseMatrix::zeros(a.rows(), width);
    par::for_each_row(out.data_mut(), width, |i, row| {
        let (ar, br) = (a.row(i), b.row(i));
        for (s, &av) in ar.iter().enumerate() {
            for (o, &bv) in row[s * k2..(s + 1) * k2].iter_mut().zip(br) {
                *o = av * bv;
            }
        }
    });
    Ok(out)
}

pub(crate) fn colwise_kronecker_metered(
    a: &DenseMatrix,
    b: &DenseMatrix,
    meter: &Meter,
) -> Result<DenseMatrix> {
    let out = colwise_kronecker(a, b)?;
    meter.add_ops(out.len() as u64);
    Ok(meter.track(out))
}

/// Rows `j·L .. (j+1)·L` of an `L² × n` matrix (zero-based `j`).
pub fn subblock(k: &DenseMatrix, j: usize) -> Result<DenseMatrix> {
    let l = integer_sqrt(k.rows());
    if l * l != k.rows() {
        return dim_err(format!("subblock needs L² rows, got {}", k.rows()));
    }
    if j >= l {
        return Err(Error::Index {
            index: j,
            bound: l - 1,
        });
    }
    k.block(j * l, 0, l, k.cols())
}

fn integer_sqrt(n: usize) -> usize {
    let mut r = (n as f64).sqrt() as usize;
    while r * r > n {
        r -= 1;
    }
    while (r + 1) * (r + 1) <= n {
        r += 1;
    }
    r
}

/// The 0/1 permutation `T(m, n)` with `vec(Wᵀ) = T(m, n)·vec(W)` for every
/// `m × n` matrix `W`.
///
/// `target_index[i]` is the position that source entry `i` moves to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PermutationMap {
    m: usize,
    n: usize,
    target_index: Vec<usize>,
}

impl PermutationMap {
    pub fn m(&self) -> usize {
        self.m
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn target_index(&self) -> &[usize] {
        &self.target_index
    }

    pub fn len(&self) -> usize {
        self.target_index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target_index.is_empty()
    }

    /// Applies the permutation to a vector of length `m·n`.
    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.len() {
            return dim_err(format!(
                "permutation of length {} applied to vector of length {}",
                self.len(),
                v.len()
            ));
        }
        let mut out = vec![0.0; v.len()];
        for (&dst, &x) in self.target_index.iter().zip(v) {
            out[dst] = x;
        }
        Ok(out)
    }

    /// `other ∘ self`: apply `self` first, then `other`.
    pub fn then(&self, other: &Self) -> Result<Vec<usize>> {
        if self.len() != other.len() {
            return dim_err("composing permutations of different lengths");
        }
        Ok(self
            .target_index
            .iter()
            .map(|&mid| other.target_index[mid])
            .collect())
    }

    pub fn is_bijection(&self) -> bool {
        let mut seen = vec![false; self.len()];
        for &t in &self.target_index {
            if t >= seen.len() || std::mem::replace(&mut seen[t], true) {
                return false;
            }
        }
        true
    }
}

/// Builds `T(m, n)`: source index `p·n + k` moves to `k·m + p`.
pub fn transpose_perm(m: usize, n: usize) -> PermutationMap {
    let mut target_index = vec![0; m * n];
    for p in 0..m {
        for k in 0..n {
            target_index[p * n + k] = k * m + p;
        }
    }
    PermutationMap { m, n, target_index }
}
