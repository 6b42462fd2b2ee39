//! Data-parallel helpers.
//!
//! Every helper maps over indices independently and then reduces in index
//! order, so results are bit-identical whether the `parallel` feature is on,
//! off, or disabled at runtime with [`set_parallel`].

use std::sync::atomic::{AtomicBool, Ordering};

use nalgebra::{DMatrix, DVector};

static PARALLEL: AtomicBool = AtomicBool::new(cfg!(feature = "parallel"));

/// Enables or disables rayon at runtime. No-op without the `parallel` feature.
pub fn set_parallel(on: bool) {
    PARALLEL.store(on && cfg!(feature = "parallel"), Ordering::Relaxed);
}

pub fn parallel_enabled() -> bool {
    PARALLEL.load(Ordering::Relaxed)
}

/// `(0..n).map(f).collect()`, possibly on the rayon pool.
pub fn map_indices<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Maps over a slice, preserving order.
pub fn map_slice<S, T, F>(items: &[S], f: F) -> Vec<T>
where
    S: Sync,
    T: Send,
    F: Fn(&S) -> T + Sync + Send,
{
    map_indices(items.len(), |i| f(&items[i]))
}

/// Sums `f(i)` for `i in 0..n` in index order.
pub fn sum_vectors<F>(n: usize, dim: usize, f: F) -> DVector<f64>
where
    F: Fn(usize) -> DVector<f64> + Sync + Send,
{
    // Fixed-size chunks keep the reduction tree independent of thread count.
    const CHUNK: usize = 32;
    let chunks = n.div_ceil(CHUNK);
    let partials = map_indices(chunks, |c| {
        let mut acc = DVector::zeros(dim);
        for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
            acc += f(i);
        }
        acc
    });
    partials
        .into_iter()
        .fold(DVector::zeros(dim), |acc, p| acc + p)
}

/// Sums scalar terms in index order.
pub fn sum_scalars<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    map_indices(n, f).into_iter().sum()
}

/// Gram matrix `Σ_i v_i v_iᵀ` of the rows of `rows` (n × dim), chunked so the
/// partial products can be formed concurrently.
pub fn gram_rows(rows: &DMatrix<f64>) -> DMatrix<f64> {
    const CHUNK: usize = 64;
    let (n, dim) = rows.shape();
    let chunks = n.div_ceil(CHUNK);
    let partials = map_indices(chunks, |c| {
        let start = c * CHUNK;
        let len = CHUNK.min(n - start);
        let block = rows.rows(start, len);
        block.transpose() * block
    });
    partials
        .into_iter()
        .fold(DMatrix::zeros(dim, dim), |acc, p| acc + p)
}
