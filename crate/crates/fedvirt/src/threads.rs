//! Worker-pool plumbing.
//!
//! `FEDVIRT_THREADS` caps parallelism (default: available cores). All callers
//! split work across disjoint output chunks, so numeric results do not depend
//! on the worker count.

use std::sync::OnceLock;

use rayon::prelude::*;

static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();

/// Number of workers requested via `FEDVIRT_THREADS`, or the machine default.
pub fn worker_count() -> usize {
    pool().current_num_threads()
}

pub fn pool() -> &'static rayon::ThreadPool {
    POOL.get_or_init(|| {
        let n = std::env::var("FEDVIRT_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .filter(|&n| n >= 1)
            .unwrap_or_else(|| {
                std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
            });
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .expect("worker pool")
    })
}

/// Runs `body(i, chunk_i)` for every consecutive `chunk` slice of `out`,
/// in parallel when the pool has more than one worker. Chunks are disjoint,
/// so this is safe and bit-deterministic regardless of scheduling.
pub fn for_each_chunk<F>(out: &mut [f64], chunk: usize, body: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if chunk == 0 || out.is_empty() {
        return;
    }
    debug_assert_eq!(out.len() % chunk, 0);
    if pool().current_num_threads() <= 1 || out.len() / chunk <= 1 {
        for (i, c) in out.chunks_mut(chunk).enumerate() {
            body(i, c);
        }
    } else {
        pool().install(|| {
            out.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| body(i, c));
        });
    }
}

/// Maps `f` over indices `0..n` in parallel, returning results in index order.
pub fn map_ordered<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    if pool().current_num_threads() <= 1 || n <= 1 {
        (0..n).map(f).collect()
    } else {
        pool().install(|| (0..n).into_par_iter().map(f).collect())
    }
}
