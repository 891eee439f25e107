//! Order-preserving map over independent work items.
//!
//! With the `parallel` feature the items are spread over a rayon pool of
//! `workers` threads (0 = one per core); without it, or with `workers == 1`,
//! they run in order on the calling thread. Results come back in input order
//! either way, so callers never depend on scheduling.

#[cfg(feature = "parallel")]
pub fn map_ordered<T, R, F>(items: &[T], workers: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    use rayon::prelude::*;

    if workers == 1 || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
        Ok(pool) => pool.install(|| items.par_iter().map(&f).collect()),
        // Could not spawn threads; degrade to the sequential path.
        Err(_) => items.iter().map(f).collect(),
    }
}

#[cfg(not(feature = "parallel"))]
pub fn map_ordered<T, R, F>(items: &[T], _workers: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    items.iter().map(f).collect()
}

/// True when this build can run work items concurrently.
pub const fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preserves_order_for_any_worker_count() {
        let items: Vec<u64> = (0..200).collect();
        for workers in [0, 1, 2, 7] {
            let out = map_ordered(&items, workers, |x| x * x);
            assert_eq!(out, items.iter().map(|x| x * x).collect::<Vec<_>>());
        }
    }
}
