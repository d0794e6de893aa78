//! Data-parallel map helpers with a sequential fallback.
//!
//! Every batch loop in the pipeline (per-image feature extraction, synthetic
//! sample generation, per-sample backprop, metric reductions) goes through
//! [`map`] so the `parallel` feature cleanly switches the whole crate between
//! rayon and plain iteration. [`map_seq`] is always sequential and exists so
//! benchmarks can compare both paths in one build. Output order matches input
//! order in all cases, which keeps results bit-identical across modes.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map `f` over `items`, in parallel when the `parallel` feature is enabled.
pub fn map<T, U, F>(items: Vec<T>, f: F) -> Vec<U>
where
    T: Send,
    U: Send,
    F: Fn(T) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.into_iter().map(f).collect()
    }
}

/// Map `f` over indices `0..n`, in parallel when enabled.
pub fn map_indices<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Sequential map, kept available in every build for benchmark baselines.
pub fn map_seq<T, U, F>(items: Vec<T>, f: F) -> Vec<U>
where
    F: Fn(T) -> U,
{
    items.into_iter().map(f).collect()
}

/// Sequential index map, benchmark baseline for [`map_indices`].
pub fn map_seq_indices<U, F>(n: usize, f: F) -> Vec<U>
where
    F: Fn(usize) -> U,
{
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_and_sequential_agree_and_preserve_order() {
        let items: Vec<u64> = (0..1000).collect();
        let a = map(items.clone(), |x| x * x + 1);
        let b = map_seq(items, |x| x * x + 1);
        assert_eq!(a, b);
        assert_eq!(a[17], 17 * 17 + 1);
    }

    #[test]
    fn index_maps_agree() {
        let a = map_indices(257, |i| (i as f64).sqrt());
        let b = map_seq_indices(257, |i| (i as f64).sqrt());
        assert_eq!(a, b);
    }
}
