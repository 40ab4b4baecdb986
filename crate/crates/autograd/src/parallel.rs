//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature disabled every helper runs sequentially and
//! [`Execution::Parallel`] behaves exactly like [`Execution::Sequential`].
//! Results are always assembled by index, so both modes produce identical
//! output for pure per-item functions.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Execution {
    Sequential,
    #[default]
    Parallel,
}

impl Execution {
    /// True if work will actually be spread over the rayon pool.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }
}

/// `(0..n).map(f).collect()`, possibly in parallel. Output order is by index.
pub fn map_indexed<T, F>(exec: Execution, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() && n > 1 {
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = exec;
    (0..n).map(f).collect()
}

/// Applies `f(index, chunk)` to consecutive `chunk_len`-sized chunks of `data`.
pub fn for_each_chunk_mut<F>(exec: Execution, data: &mut [f64], chunk_len: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if chunk_len == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    if exec.is_parallel() && data.len() > chunk_len {
        data.par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    let _ = exec;
    data.chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c));
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_agree() {
        let f = |i: usize| (i as f64).sqrt().sin();
        let a = map_indexed(Execution::Sequential, 1000, f);
        let b = map_indexed(Execution::Parallel, 1000, f);
        assert_eq!(a, b);
    }

    #[test]
    fn chunks_visit_in_order() {
        let mut v = vec![0.0; 12];
        for_each_chunk_mut(Execution::Parallel, &mut v, 4, |i, c| {
            c.iter_mut().for_each(|x| *x = i as f64)
        });
        assert_eq!(&v[8..], &[2.0; 4]);
    }
}
