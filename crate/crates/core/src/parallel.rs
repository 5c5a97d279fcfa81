//! Data-parallel helpers with a fixed work decomposition.
//!
//! Work is always split into the same tiles (one per outer index or chunk),
//! whatever the number of worker threads. Reductions return one partial per
//! tile and the caller folds them in tile order, so floating-point results do
//! not depend on scheduling.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Evaluates `f(i)` for `i in 0..n` and returns the results in index order.
pub(crate) fn map_tiles<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
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

/// Calls `f(chunk_index, chunk)` for each `chunk_len`-sized chunk of `data`.
pub(crate) fn for_each_chunk_mut<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    let chunk_len = chunk_len.max(1);
    #[cfg(feature = "parallel")]
    {
        data.par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
    }
    #[cfg(not(feature = "parallel"))]
    {
        data.chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
    }
}

/// Fills `out` slice-by-slice where each slice has `chunk_len` elements.
pub(crate) fn fill_chunks<T, F>(out: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, usize, &mut T) + Sync + Send,
{
    for_each_chunk_mut(out, chunk_len, |c, chunk| {
        let base = c * chunk_len;
        for (k, v) in chunk.iter_mut().enumerate() {
            f(c, base + k, v);
        }
    });
}
