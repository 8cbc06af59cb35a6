//! Multiply-add counting and peak-allocation tracking for the gradient
//! pipelines. Counts are analytic (one tally per kernel call), so they are
//! identical across runs and independent of thread scheduling.

use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};

use crate::error::Result;
use crate::matrix::DenseMatrix;

#[derive(Debug, Default)]
pub struct Meter {
    ops: AtomicU64,
    peak_alloc: AtomicUsize,
}

impl Meter {
    pub fn new() -> Self {
        Self::default()
    }

    /// Multiply-adds recorded so far.
    pub fn ops(&self) -> u64 {
        self.ops.load(Ordering::Relaxed)
    }

    /// Entry count of the largest array recorded so far.
    pub fn peak_alloc(&self) -> usize {
        self.peak_alloc.load(Ordering::Relaxed)
    }

    pub fn add_ops(&self, n: u64) {
        self.ops.fetch_add(n, Ordering::Relaxed);
    }

    pub fn note_alloc(&self, entries: usize) {
        self.peak_alloc.fetch_max(entries, Ordering::Relaxed);
    }

    pub(crate) fn note(&self, m: &DenseMatrix) {
        self.note_alloc(m.len());
    }

    /// Records an output matrix and returns it.
    pub(crate) fn track(&self, m: DenseMatrix) -> DenseMatrix {
        self.note(&m);
        m
    }

    pub(crate) fn matmul(&self, a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
        self.add_ops((a.rows() * a.cols() * b.cols()) as u64);
        a.matmul(b).map(|m| self.track(m))
    }

    pub(crate) fn t_matmul(&self, a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
        self.add_ops((a.rows() * a.cols() * b.cols()) as u64);
        a.t_matmul(b).map(|m| self.track(m))
    }

    pub(crate) fn matmul_t(&self, a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
        self.add_ops((a.rows() * a.cols() * b.rows()) as u64);
        a.matmul_t(b).map(|m| self.track(m))
    }
}
