//! Batch-level partitioning. One thread selects the sequential reference path.
//!
//! Each partition owns its outputs and partial reductions are summed in item
//! order afterwards, so the parallel path reproduces the reference bit for bit.

use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;

static THREADS: AtomicUsize = AtomicUsize::new(1);

/// Selects the number of worker threads. `1` is the reference path.
pub fn set_threads(n: usize) {
    let n = n.max(1);
    if n > 1 {
        // A global pool can only be installed once; later calls reuse it.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    THREADS.store(n, Ordering::SeqCst);
}

pub fn threads() -> usize {
    THREADS.load(Ordering::SeqCst)
}

pub(crate) fn map_items<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    if threads() > 1 && n > 1 {
        (0..n).into_par_iter().map(f).collect()
    } else {
        (0..n).map(f).collect()
    }
}
