//! Data-parallel map with a sequential fallback.
//!
//! Sweep points, comparison rows and the randomized verification suites are
//! independent, so they fan out across threads when the `parallel` feature
//! (default) is enabled. Disabling it yields a bit-identical sequential run.

#[cfg(feature = "parallel")]
pub fn par_map<T, R, F>(items: Vec<T>, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync + Send,
{
    use rayon::prelude::*;
    items.into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn par_map<T, R, F>(items: Vec<T>, f: F) -> Vec<R>
where
    F: Fn(T) -> R,
{
    items.into_iter().map(f).collect()
}

/// Ordered indices 0..n mapped in parallel.
pub fn par_map_indexed<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    par_map((0..n).collect::<Vec<_>>(), f)
}
