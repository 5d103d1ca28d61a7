//! Client-task execution: a worker pool when the `parallel` feature is on,
//! a plain loop otherwise. Results always come back in input order.

#[cfg(feature = "parallel")]
use std::sync::Arc;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Clone)]
pub enum Executor {
    Sequential,
    #[cfg(feature = "parallel")]
    Pool(Arc<rayon::ThreadPool>),
}

impl std::fmt::Debug for Executor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Executor({} workers)", self.workers())
    }
}

impl Executor {
    /// A pool of `threads` workers. One thread (or a build without the
    /// `parallel` feature) runs everything on the calling thread.
    pub fn new(threads: usize) -> Self {
        #[cfg(feature = "parallel")]
        if threads > 1 {
            match rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .thread_name(|i| format!("fedsim-worker-{i}"))
                .build()
            {
                Ok(pool) => return Executor::Pool(Arc::new(pool)),
                Err(e) => log::warn!("falling back to sequential execution: {e}"),
            }
        }
        let _ = threads;
        Executor::Sequential
    }

    pub fn workers(&self) -> usize {
        match self {
            Executor::Sequential => 1,
            #[cfg(feature = "parallel")]
            Executor::Pool(pool) => pool.current_num_threads(),
        }
    }

    /// Applies `f` to every item, possibly concurrently, preserving order.
    pub fn map<T, R, F>(&self, items: Vec<T>, f: F) -> Vec<R>
    where
        T: Send,
        R: Send,
        F: Fn(T) -> R + Send + Sync,
    {
        match self {
            Executor::Sequential => items.into_iter().map(f).collect(),
            #[cfg(feature = "parallel")]
            Executor::Pool(pool) => pool.install(|| items.into_par_iter().map(f).collect()),
        }
    }
}

/// Runs `f(0..n)` on the global pool (if any), preserving order.
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Send + Sync,
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
