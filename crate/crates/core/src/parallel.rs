//! Data-parallel helpers.
//!
//! With the `parallel` feature (default) these dispatch to rayon; without it
//! they run sequentially. Every helper produces results in index order, and
//! each output element is computed by exactly the same code on either path,
//! so results are bit-identical regardless of the feature or thread count.
//!
//! The [`seq`] and [`par`] submodules expose both paths explicitly so the
//! benchmark suite can compare them inside one binary.

/// Work below this many scalar operations is never split across threads.
pub const MIN_PARALLEL_WORK: usize = 1 << 16;

pub mod seq {
    pub fn map<T, F>(n: usize, f: F) -> Vec<T>
    where
        F: Fn(usize) -> T,
    {
        (0..n).map(f).collect()
    }

    pub fn for_each_chunk_mut<F>(data: &mut [f64], chunk: usize, f: F)
    where
        F: Fn(usize, &mut [f64]),
    {
        if chunk == 0 {
            return;
        }
        data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }
}

pub mod par {
    #[cfg(feature = "parallel")]
    use rayon::prelude::*;

    pub fn map<T, F>(n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        {
            (0..n).into_par_iter().map(f).collect()
        }
        #[cfg(not(feature = "parallel"))]
        {
            super::seq::map(n, f)
        }
    }

    pub fn for_each_chunk_mut<F>(data: &mut [f64], chunk: usize, f: F)
    where
        F: Fn(usize, &mut [f64]) + Sync + Send,
    {
        if chunk == 0 {
            return;
        }
        #[cfg(feature = "parallel")]
        data.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
        #[cfg(not(feature = "parallel"))]
        super::seq::for_each_chunk_mut(data, chunk, f);
    }
}

/// Maps `f` over `0..n`, in parallel when `work` (an estimate of the total
/// scalar operations) is large enough to amortize scheduling.
pub fn map<T, F>(n: usize, work: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    if work >= MIN_PARALLEL_WORK && n > 1 {
        par::map(n, f)
    } else {
        seq::map(n, f)
    }
}

/// Visits `data` in consecutive chunks of `chunk` elements.
pub fn for_each_chunk_mut<F>(data: &mut [f64], chunk: usize, work: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if work >= MIN_PARALLEL_WORK && data.len() > chunk {
        par::for_each_chunk_mut(data, chunk, f)
    } else {
        seq::for_each_chunk_mut(data, chunk, f)
    }
}

pub fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}
