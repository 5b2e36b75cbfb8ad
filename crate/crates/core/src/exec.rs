//! Execution strategy for embarrassingly parallel rollout batches.
//!
//! Work is split into fixed-size chunks whose boundaries depend only on the
//! item count, each chunk is folded sequentially, and chunk results are
//! combined left to right. Floating-point results are therefore bitwise
//! identical whether chunks run on one thread or on the rayon pool.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExecMode {
    Sequential,
    /// Rayon thread pool; identical to `Sequential` when built without the
    /// `parallel` feature.
    #[default]
    Parallel,
}

impl ExecMode {
    pub fn is_parallel_available() -> bool {
        cfg!(feature = "parallel")
    }
}

pub const CHUNK: usize = 256;

/// `f(0), …, f(n−1)` in index order.
pub fn map_indexed<T, F>(mode: ExecMode, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match mode {
        #[cfg(feature = "parallel")]
        ExecMode::Parallel => {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(f).collect()
        }
        _ => (0..n).map(f).collect(),
    }
}

/// Deterministic chunked fold.
///
/// `init` creates a fresh accumulator, `fold` adds item `i` into it, and
/// `combine` merges chunk accumulators in chunk order.
pub fn chunked_reduce<A, I, F, C>(mode: ExecMode, n: usize, init: I, fold: F, combine: C) -> A
where
    A: Send,
    I: Fn() -> A + Sync + Send,
    F: Fn(&mut A, usize) + Sync + Send,
    C: Fn(A, A) -> A,
{
    let chunks = n.div_ceil(CHUNK);
    let partials = map_indexed(mode, chunks, |c| {
        let mut acc = init();
        for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
            fold(&mut acc, i);
        }
        acc
    });
    partials.into_iter().fold(init(), combine)
}
