//! Data-parallel helpers. With the `parallel` feature the loops run on the
//! rayon pool; without it they fall back to plain sequential iteration.
//!
//! All reductions happen in a fixed chunk order, so parallel and sequential
//! builds produce bit-identical results.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Chunk size (in samples) used when splitting batch work. Fixed so that the
/// reduction order does not depend on thread count.
pub const SAMPLE_CHUNK: usize = 16;

/// Apply `f` to equal-length disjoint chunks of `data`, passing the chunk
/// index. Chunks are `chunk_len` elements each; `data.len()` must be a
/// multiple of `chunk_len` or the tail chunk is shorter.
pub fn for_each_chunk_mut<F>(data: &mut [f64], chunk_len: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    data.par_chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c));
    #[cfg(not(feature = "parallel"))]
    data.chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c));
}

/// Map `f` over index ranges `[start, end)` of size `chunk` covering `0..n`,
/// returning the per-chunk results in chunk order. The caller reduces the
/// results sequentially to keep bit-exact determinism.
pub fn map_chunk_ranges<T, F>(n: usize, chunk: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(std::ops::Range<usize>) -> T + Sync + Send,
{
    let ranges: Vec<std::ops::Range<usize>> = (0..n)
        .step_by(chunk.max(1))
        .map(|s| s..(s + chunk).min(n))
        .collect();
    #[cfg(feature = "parallel")]
    {
        ranges.into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        ranges.into_iter().map(f).collect()
    }
}

/// Order-preserving map over a slice of independent work items.
pub fn map_items<T, U, F>(items: &[T], f: F) -> Vec<U>
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

/// Order-preserving indexed map over `0..n`.
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
