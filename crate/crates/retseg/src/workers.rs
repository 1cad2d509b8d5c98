//! Worker-thread budget for per-image parallelism (inference, evaluation).
//!
//! The thread count is capped by the `RETSEG_NUM_WORKERS` environment
//! variable; results never depend on it — parallel maps collect in input
//! order before any reduction.

/// Environment variable capping data-loading/inference parallelism.
pub const WORKERS_ENV: &str = "RETSEG_NUM_WORKERS";

/// Number of worker threads: `RETSEG_NUM_WORKERS` if set to a positive
/// integer, otherwise the machine's available parallelism.
pub fn worker_count() -> usize {
    if let Ok(v) = std::env::var(WORKERS_ENV) {
        if let Ok(n) = v.trim().parse::<usize>() {
            if n >= 1 {
                return n;
            }
        }
    }
    std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
}

/// A rayon pool sized by [`worker_count`].
pub fn pool() -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new()
        .num_threads(worker_count())
        .build()
        .expect("worker pool construction cannot fail with a positive thread count")
}
