//! Data-parallel map over indices with a sequential fallback.
//!
//! Results always come back in index order, so the output never depends on
//! scheduling. Without the `parallel` feature, or after
//! [`set_sequential(true)`](set_sequential), everything runs on the caller's
//! thread.

use std::sync::atomic::{AtomicBool, Ordering};

use crate::error::{Error, Result};

static SEQUENTIAL: AtomicBool = AtomicBool::new(false);

/// Force sequential execution process-wide.
pub fn set_sequential(on: bool) {
    SEQUENTIAL.store(on, Ordering::SeqCst);
}

pub fn is_parallel() -> bool {
    cfg!(feature = "parallel") && !SEQUENTIAL.load(Ordering::SeqCst)
}

/// Size the global worker pool. Only the first call takes effect.
pub fn init_threads(threads: usize) -> Result<()> {
    #[cfg(feature = "parallel")]
    {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))
    }
    #[cfg(not(feature = "parallel"))]
    {
        if threads > 1 {
            return Err(Error::Config("built without the `parallel` feature".into()));
        }
        Ok(())
    }
}

pub fn map<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if is_parallel() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Like [`map`] but stops at the first error in index order.
pub fn try_map<R, F>(n: usize, f: F) -> Result<Vec<R>>
where
    R: Send,
    F: Fn(usize) -> Result<R> + Sync + Send,
{
    map(n, f).into_iter().collect()
}
