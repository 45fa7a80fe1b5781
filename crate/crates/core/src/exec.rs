//! Execution policy for the data-parallel loops (conv kernels over a batch,
//! independent test episodes, per-sample generalized classification).
//!
//! With the `parallel` feature disabled every policy runs sequentially, so the
//! crate builds and behaves identically without rayon.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Exec {
    Sequential,
    #[default]
    Parallel,
}

impl Exec {
    /// True when work will actually be spread over the rayon pool.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }

    /// `(0..n).map(f).collect()`, order preserved.
    pub fn map<T, F>(self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self.is_parallel() {
            return (0..n).into_par_iter().map(f).collect();
        }
        (0..n).map(f).collect()
    }

    /// Runs `f(i, chunk)` over consecutive `chunk_len`-sized chunks of `out`.
    pub fn for_each_chunk<F>(self, out: &mut [f64], chunk_len: usize, f: F)
    where
        F: Fn(usize, &mut [f64]) + Sync + Send,
    {
        if chunk_len == 0 {
            return;
        }
        #[cfg(feature = "parallel")]
        if self.is_parallel() {
            out.par_chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c));
            return;
        }
        out.chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c));
    }

    /// Sums per-item contributions into a zeroed accumulator of `len` values.
    ///
    /// Items are grouped into a fixed number of contiguous blocks that are
    /// reduced in order, so the floating-point result is identical for both
    /// policies and any thread count.
    pub fn sum_into<F>(self, n: usize, len: usize, f: F) -> Vec<f64>
    where
        F: Fn(usize, &mut [f64]) + Sync + Send,
    {
        const BLOCKS: usize = 16;
        let block = n.div_ceil(BLOCKS).max(1);
        let blocks = n.div_ceil(block);
        let partials = self.map(blocks, |b| {
            let mut acc = vec![0.0; len];
            for i in b * block..((b + 1) * block).min(n) {
                f(i, &mut acc);
            }
            acc
        });
        let mut total = vec![0.0; len];
        for p in partials {
            for (x, y) in total.iter_mut().zip(&p) {
                *x += y;
            }
        }
        total
    }
}
