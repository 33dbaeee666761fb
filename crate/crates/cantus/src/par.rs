//! Data-parallel helpers with a sequential fallback.
//!
//! With the default `parallel` feature the hot loops (k-means assignment,
//! per-frame RVQ search, GEMM row blocks, batch decoding, Monte Carlo sweeps)
//! fan out over rayon. Without it everything runs sequentially. Both paths
//! produce bit-identical results: work is only split across independent
//! output elements, never across a floating-point reduction.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map over an index range, collecting results in order.
pub fn map_indexed<T: Send>(n: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Apply `f` to disjoint row chunks of `data`. `chunk_len` must divide into
/// rows of equal width; `f` receives (first element index, chunk).
pub fn for_each_chunk_mut(
    data: &mut [f32],
    chunk_len: usize,
    f: impl Fn(usize, &mut [f32]) + Sync + Send,
) {
    debug_assert!(chunk_len > 0);
    #[cfg(feature = "parallel")]
    {
        data.par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, chunk)| f(i * chunk_len, chunk));
    }
    #[cfg(not(feature = "parallel"))]
    {
        data.chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, chunk)| f(i * chunk_len, chunk));
    }
}

/// True when the parallel feature is compiled in.
pub const fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}
