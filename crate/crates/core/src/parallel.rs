//! Deterministic fan-out for evaluation work.

use std::thread;

use crate::error::Result;

/// Environment variable capping worker threads.
pub const THREADS_VAR: &str = "ONER_THREADS";

/// Worker count from `ONER_THREADS`; 1 when unset or unparsable.
pub fn threads() -> usize {
    std::env::var(THREADS_VAR).ok().and_then(|v| v.trim().parse::<usize>().ok()).unwrap_or(1).max(1)
}

/// Evaluates `f(0..n)` on up to `threads()` workers and returns results in
/// index order, so the output never depends on the worker count.
pub fn map_indexed<T, F>(n: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
{
    let workers = threads().min(n);
    if workers <= 1 {
        return (0..n).map(&f).collect();
    }
    let f = &f;
    let mut slots: Vec<Option<Result<T>>> = (0..n).map(|_| None).collect();
    thread::scope(|s| {
        let handles: Vec<_> = (0..workers).map(|w| s.spawn(move || (w..n).step_by(workers).map(|i| (i, f(i))).collect::<Vec<_>>())).collect();
        for h in handles {
            for (i, r) in h.join().expect("evaluation worker panicked") {
                slots[i] = Some(r);
            }
        }
    });
    slots.into_iter().map(|r| r.expect("every index evaluated")).collect()
}
