//! Batch-level data parallelism.
//!
//! Work is split per sample and partial results are combined in index order,
//! so parallel and sequential execution produce bit-identical results.

use std::sync::atomic::{AtomicBool, Ordering};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Parallelism {
    Sequential,
    Rayon,
}

static USE_RAYON: AtomicBool = AtomicBool::new(cfg!(feature = "parallel"));

/// Selects the execution strategy for batch loops. Without the `parallel`
/// feature this is a no-op and everything runs sequentially.
pub fn set_parallelism(p: Parallelism) {
    USE_RAYON.store(p == Parallelism::Rayon && cfg!(feature = "parallel"), Ordering::Relaxed);
}

pub fn parallelism() -> Parallelism {
    if USE_RAYON.load(Ordering::Relaxed) {
        Parallelism::Rayon
    } else {
        Parallelism::Sequential
    }
}

/// Evaluates `f(0..n)` and returns the results in index order.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if n > 1 && USE_RAYON.load(Ordering::Relaxed) {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    (0..n).map(f).collect()
}

/// Runs `f` over fixed-size mutable chunks of `data`.
pub fn for_each_chunk<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if chunk == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    {
        if data.len() > chunk && USE_RAYON.load(Ordering::Relaxed) {
            use rayon::prelude::*;
            data.par_chunks_mut(chunk)
                .enumerate()
                .for_each(|(i, c)| f(i, c));
            return;
        }
    }
    data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}
