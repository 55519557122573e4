//! Data-parallel execution with a sequential fallback.
//!
//! Every parallel loop in the crate goes through this module. Work is always
//! partitioned by index and collected in index order, so the parallel and
//! sequential paths produce bitwise-identical results; parallelism only
//! changes wall-clock time. Randomness inside worker closures must be derived
//! from the item index (see [`crate::rng`]), never from shared state.

/// Execution strategy for a data-parallel loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exec {
    /// Use the rayon pool when the `parallel` feature is enabled.
    Auto,
    /// Force the single-threaded path.
    Sequential,
}

impl Default for Exec {
    fn default() -> Self {
        Exec::Auto
    }
}

/// Map `f` over `0..n`, returning results in index order.
pub fn map_range<U, F>(exec: Exec, n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    match exec {
        Exec::Sequential => (0..n).map(f).collect(),
        Exec::Auto => map_range_auto(n, f),
    }
}

/// Map `f` over the items of a slice with their indices, in index order.
pub fn map_indexed<T, U, F>(exec: Exec, items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(usize, &T) -> U + Sync + Send,
{
    map_range(exec, items.len(), |i| f(i, &items[i]))
}

#[cfg(feature = "parallel")]
fn map_range_auto<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn map_range_auto<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    (0..n).map(f).collect()
}

/// Cap the rayon pool. `jobs = 0` leaves the default. Returns an error only
/// if a pool was already installed, which callers may ignore.
pub fn configure_jobs(jobs: usize) {
    #[cfg(feature = "parallel")]
    {
        if jobs > 0 {
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(jobs)
                .build_global();
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = jobs;
    }
}
