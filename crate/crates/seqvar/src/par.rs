//! Particle-loop execution strategy.
//!
//! With the default `parallel` feature the per-particle work is dispatched
//! through rayon; without it the loop runs sequentially. Both paths produce
//! results in index order and all reductions downstream are sequential, so
//! the output is bitwise identical regardless of feature flags or worker
//! count.

#[cfg(feature = "parallel")]
pub(crate) fn map_particles<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn map_particles<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).map(f).collect()
}
