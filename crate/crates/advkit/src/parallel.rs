//! Execution-mode dispatch between a rayon pool and a plain sequential loop.
//!
//! Every data-parallel site in the crate routes through [`map_indexed`] or
//! [`map_chunks`]. Both paths produce results in input order and combine
//! partial results in a fixed order, so a given build yields bit-identical
//! numbers regardless of mode or worker count. The `parallel` feature only
//! picks which mode [`ExecMode::default_mode`] returns; both code paths are
//! always compiled so benchmarks can compare them directly.

use rayon::prelude::*;

/// How batch-level work is dispatched.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecMode {
    /// Plain loop on the calling thread.
    Sequential,
    /// rayon work-stealing pool; results are still collected in input order.
    Parallel,
}

impl ExecMode {
    /// Mode selected by the crate's feature flags: `Parallel` when the
    /// `parallel` feature is on (the default), `Sequential` otherwise.
    pub fn default_mode() -> Self {
        if cfg!(feature = "parallel") {
            ExecMode::Parallel
        } else {
            ExecMode::Sequential
        }
    }
}

impl Default for ExecMode {
    fn default() -> Self {
        Self::default_mode()
    }
}

/// Applies `f` to every index in `0..n` and returns the results in order.
pub fn map_indexed<T, F>(mode: ExecMode, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match mode {
        ExecMode::Sequential => (0..n).map(f).collect(),
        ExecMode::Parallel => (0..n).into_par_iter().map(f).collect(),
    }
}

/// Splits `0..n` into contiguous chunks of at most `chunk` items, applies `f`
/// to each chunk range, and returns the per-chunk results in chunk order.
///
/// The chunk boundaries depend only on `n` and `chunk`, never on the worker
/// count, which keeps floating-point reductions reproducible: callers fold
/// the returned partials sequentially.
pub fn map_chunks<T, F>(mode: ExecMode, n: usize, chunk: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(std::ops::Range<usize>) -> T + Sync + Send,
{
    assert!(chunk > 0, "chunk size must be positive");
    let ranges: Vec<_> = (0..n)
        .step_by(chunk)
        .map(|start| start..(start + chunk).min(n))
        .collect();
    match mode {
        ExecMode::Sequential => ranges.into_iter().map(f).collect(),
        ExecMode::Parallel => ranges.into_par_iter().map(f).collect(),
    }
}
