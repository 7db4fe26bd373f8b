//! Order-preserving parallel map.
//!
//! With the `std` feature and `Parallelism::Threads`, work is spread over the
//! ambient rayon pool; results always come back in input order and any
//! reduction over them happens sequentially in the caller.

use alloc::vec::Vec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Parallelism {
    Sequential,
    #[default]
    Threads,
}

#[cfg(feature = "std")]
pub fn map<T, R, F>(par: Parallelism, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    use rayon::prelude::*;
    match par {
        Parallelism::Sequential => items.iter().map(f).collect(),
        Parallelism::Threads => items.par_iter().map(f).collect(),
    }
}

#[cfg(not(feature = "std"))]
pub fn map<T, R, F>(_par: Parallelism, items: &[T], f: F) -> Vec<R>
where
    F: Fn(&T) -> R,
{
    items.iter().map(f).collect()
}

/// Maps and collects fallible results, failing on the first error in input order.
pub fn try_map<T, R, E, F>(par: Parallelism, items: &[T], f: F) -> Result<Vec<R>, E>
where
    T: Sync,
    R: Send,
    E: Send,
    F: Fn(&T) -> Result<R, E> + Sync + Send,
{
    map(par, items, f).into_iter().collect()
}
