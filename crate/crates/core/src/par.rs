//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) these fan work out over rayon;
//! without it they run the same closures sequentially. Results are always
//! collected in index order, so both paths produce bit-identical output
//! for pure closures.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Maps `f` over `items`, preserving input order in the output.
pub fn map_slice<T, U, F>(items: &[T], f: F) -> Vec<U>
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

/// Maps `f` over `0..n`, preserving index order in the output.
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

/// Below this many elements, chunked work runs serially even with the
/// `parallel` feature: fork-join overhead dwarfs the arithmetic on the
/// small feature grids, and the batch level already runs in parallel.
const MIN_PARALLEL_ELEMS: usize = 1 << 15;

/// Runs `f` on disjoint row chunks of `data`, in parallel when enabled
/// and the buffer is large enough to pay for the fork.
///
/// `f` receives the chunk index and a mutable slice of `chunk_len`
/// elements (the final chunk may be shorter). Chunks are computed
/// independently, so the parallel and serial paths are bit-identical.
pub fn for_each_chunk<F>(data: &mut [f64], chunk_len: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    assert!(chunk_len > 0);
    #[cfg(feature = "parallel")]
    {
        if data.len() >= MIN_PARALLEL_ELEMS {
            data.par_chunks_mut(chunk_len)
                .enumerate()
                .for_each(|(i, chunk)| f(i, chunk));
            return;
        }
    }
    data.chunks_mut(chunk_len)
        .enumerate()
        .for_each(|(i, chunk)| f(i, chunk));
}
