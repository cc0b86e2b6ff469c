//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (on by default) large index ranges are spread
//! over the rayon pool. Every helper produces results in index order, so the
//! output is identical whichever path runs.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Below this many items the sequential path is always taken.
pub const PARALLEL_THRESHOLD: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    Sequential,
    /// Rayon when compiled with `parallel`, otherwise sequential.
    #[default]
    Parallel,
}

impl Execution {
    fn use_rayon(self, len: usize) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel && len >= PARALLEL_THRESHOLD
    }
}

/// Maps `f` over `0..len`, collecting in index order.
pub fn map_range<T, F>(len: usize, exec: Execution, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if exec.use_rayon(len) {
            return (0..len).into_par_iter().map(f).collect();
        }
    }
    let _ = exec;
    (0..len).map(f).collect()
}

/// Maps `f` over a slice, collecting in order. Used for independent jobs
/// (experiment cells) where the threshold does not apply.
pub fn map_items<I, T, F>(items: &[I], exec: Execution, f: F) -> Vec<T>
where
    I: Sync,
    T: Send,
    F: Fn(&I) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if cfg!(feature = "parallel") && exec == Execution::Parallel && items.len() > 1 {
            return items.par_iter().map(f).collect();
        }
    }
    let _ = exec;
    items.iter().map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_paths_agree() {
        let seq = map_range(1000, Execution::Sequential, |i| (i as f64).sqrt());
        let par = map_range(1000, Execution::Parallel, |i| (i as f64).sqrt());
        assert_eq!(seq, par);
        let items: Vec<u32> = (0..10).collect();
        assert_eq!(
            map_items(&items, Execution::Parallel, |x| x * 2),
            map_items(&items, Execution::Sequential, |x| x * 2)
        );
    }
}
