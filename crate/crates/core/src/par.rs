//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature enabled these dispatch to rayon; without it
//! they run on the calling thread. Both paths produce identical results:
//! reductions are always performed over fixed-size chunks in index order, so
//! the summation order never depends on the number of worker threads.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Number of items folded together before chunk results are combined.
pub const REDUCE_CHUNK: usize = 8;

/// Maps `f` over `items`, preserving order.
pub fn map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

/// Maps `f` over `0..n`, preserving order.
pub fn map_range<U, F>(n: usize, f: F) -> Vec<U>
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

/// Fallible ordered map; returns the first error by index.
pub fn try_map<T, U, E, F>(items: &[T], f: F) -> Result<Vec<U>, E>
where
    T: Sync,
    U: Send,
    E: Send,
    F: Fn(&T) -> Result<U, E> + Sync + Send,
{
    map(items, f).into_iter().collect()
}

/// Deterministic chunked map-reduce.
///
/// Items are split into chunks of [`REDUCE_CHUNK`]; each chunk is folded
/// sequentially starting from `init()`, then chunk results are combined left
/// to right with `combine`. Returns `None` for empty input.
pub fn chunked_reduce<T, A, I, F, C>(items: &[T], init: I, fold: F, combine: C) -> Option<A>
where
    T: Sync,
    A: Send,
    I: Fn() -> A + Sync + Send,
    F: Fn(A, &T) -> A + Sync + Send,
    C: Fn(A, A) -> A,
{
    let chunks: Vec<&[T]> = items.chunks(REDUCE_CHUNK).collect();
    let partials = map(&chunks, |chunk| chunk.iter().fold(init(), &fold));
    partials.into_iter().reduce(combine)
}

/// Whether the crate was built with rayon support.
pub const fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_order() {
        let v: Vec<usize> = (0..1000).collect();
        let out = map(&v, |x| x * 2);
        assert!(out.iter().enumerate().all(|(i, &x)| x == 2 * i));
    }

    #[test]
    fn chunked_reduce_is_order_fixed() {
        // Float sums depend on association; the chunking must be stable.
        let v: Vec<f64> = (0..1003).map(|i| 1.0 / (i as f64 + 1.0)).collect();
        let a = chunked_reduce(&v, || 0.0, |acc, x| acc + x, |a, b| a + b).unwrap();
        let mut expected = 0.0;
        for chunk in v.chunks(REDUCE_CHUNK) {
            expected += chunk.iter().fold(0.0, |acc, x| acc + x);
        }
        assert_eq!(a.to_bits(), expected.to_bits());
        assert!(chunked_reduce(&[] as &[f64], || 0.0, |a, x| a + x, |a, b| a + b).is_none());
    }
}
