//! Bounded data-parallel maps.
//!
//! With the `parallel` feature (default) work runs on a rayon pool sized to
//! the requested worker count; without it, or with one worker, items are
//! processed inline. Output order always equals input order.

/// Whether this build can run work concurrently.
pub fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}

/// Maps `f` over `items` using at most `workers` threads.
pub fn map_bounded<T, R, F>(items: Vec<T>, workers: usize, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Send + Sync,
{
    #[cfg(feature = "parallel")]
    {
        let threads = workers.min(items.len());
        if threads > 1 {
            use rayon::prelude::*;
            if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
                return pool.install(|| items.into_par_iter().with_max_len(1).map(&f).collect());
            }
        }
    }
    let _ = workers;
    items.into_iter().map(f).collect()
}

/// Maps `f` over `0..n` on the global pool (CPU-bound work).
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Send + Sync,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Like [`map_range`] but forced inline, for benchmarks and equivalence checks.
pub fn map_range_sequential<R, F>(n: usize, f: F) -> Vec<R>
where
    F: Fn(usize) -> R,
{
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::time::{Duration, Instant};

    #[test]
    fn preserves_order() {
        let out = map_bounded((0..50).collect(), 6, |x: i32| x * 2);
        assert_eq!(out, (0..50).map(|x| x * 2).collect::<Vec<_>>());
        assert_eq!(map_range(10, |i| i), (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn single_worker_is_sequential() {
        let start = Instant::now();
        map_bounded(vec![(); 3], 1, |_| std::thread::sleep(Duration::from_millis(20)));
        assert!(start.elapsed() >= Duration::from_millis(60));
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn workers_overlap_blocking_items() {
        let start = Instant::now();
        map_bounded(vec![(); 6], 6, |_| std::thread::sleep(Duration::from_millis(50)));
        assert!(start.elapsed() < Duration::from_millis(200), "{:?}", start.elapsed());
    }
}
