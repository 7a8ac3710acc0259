//! Order-preserving map over independent items (sentences). Runs on the
//! rayon pool when the `parallel` feature is on and parallelism has not been
//! switched off at runtime; otherwise runs sequentially. Results are always
//! returned in input order, so reductions over them are deterministic.

use std::sync::atomic::{AtomicBool, Ordering};

static ENABLED: AtomicBool = AtomicBool::new(true);

/// Environment variable capping the worker count.
pub const THREADS_ENV: &str = "NESTOR_THREADS";

pub fn set_enabled(on: bool) {
    ENABLED.store(on, Ordering::SeqCst);
}

pub fn is_enabled() -> bool {
    cfg!(feature = "parallel") && ENABLED.load(Ordering::SeqCst)
}

/// Size the global pool from `NESTOR_THREADS` (if set). Call once, early.
/// Returns the thread count in effect.
pub fn configure_threads() -> Result<usize, String> {
    let requested = match std::env::var(THREADS_ENV) {
        Ok(v) => Some(
            v.parse::<usize>()
                .ok()
                .filter(|&n| n > 0)
                .ok_or_else(|| format!("{THREADS_ENV} must be a positive integer, got {v:?}"))?,
        ),
        Err(_) => None,
    };
    #[cfg(feature = "parallel")]
    {
        if let Some(n) = requested {
            // a pool that already exists keeps its size
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
        Ok(rayon::current_num_threads())
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = requested;
        Ok(1)
    }
}

pub fn par_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if is_enabled() {
            use rayon::prelude::*;
            return items.par_iter().map(f).collect();
        }
    }
    items.iter().map(f).collect()
}
