//! Execution strategy for data-parallel loops.
//!
//! Every parallel map in the crate returns results in input order, and every
//! reduction over those results is done sequentially afterwards. That keeps
//! floating-point sums identical whichever strategy ran the map.

/// How a batch of independent work items is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Exec {
    /// Plain iterator on the calling thread.
    Sequential,
    /// Rayon's global pool. Without the `parallel` feature this behaves
    /// like [`Exec::Sequential`].
    #[default]
    Parallel,
}

impl Exec {
    /// True when this strategy will actually use more than one thread.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }
}

/// Order-preserving map over a slice.
pub fn map<T, R, F>(exec: Exec, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec == Exec::Parallel {
        use rayon::prelude::*;
        return items.par_iter().map(f).collect();
    }
    let _ = exec;
    items.iter().map(f).collect()
}

/// Order-preserving map over `0..n`.
pub fn map_range<R, F>(exec: Exec, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec == Exec::Parallel {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = exec;
    (0..n).map(f).collect()
}

/// Order-preserving map with at most `max_inflight` items evaluated at once.
///
/// Used for I/O-bound fan-out (chat completions) where the cap is a rate
/// limit rather than a CPU count.
pub fn map_bounded<T, R, F>(exec: Exec, max_inflight: usize, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    let cap = max_inflight.max(1);
    #[cfg(feature = "parallel")]
    if exec == Exec::Parallel && cap > 1 {
        use rayon::prelude::*;
        if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(cap).build() {
            return pool.install(|| items.par_iter().map(&f).collect());
        }
    }
    let _ = (exec, cap);
    items.iter().map(f).collect()
}
