//! Data-parallel map helpers with a sequential fallback.
//!
//! `map_slice` dispatches on the `parallel` feature; `map_slice_seq` is always
//! sequential so benchmarks can compare both paths within one build. Callers
//! must only hand in element-wise independent closures: result order always
//! matches input order, and any cross-element reduction (for example gradient
//! accumulation) is performed by the caller in input order to keep results
//! bit-exact across thread counts.

#[cfg(feature = "parallel")]
pub fn map_slice<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_slice<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(&T) -> U,
{
    items.iter().map(f).collect()
}

pub fn map_slice_seq<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(&T) -> U,
{
    items.iter().map(f).collect()
}
