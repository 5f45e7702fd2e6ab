//! Data-parallel execution with a sequential fallback.
//!
//! Every parallel entry point in the crate goes through [`Executor::map`],
//! which always returns results in input order. Callers reduce the returned
//! vector serially, so floating-point results do not depend on the number
//! of worker threads. Without the `parallel` feature every executor runs
//! sequentially.

use std::fmt;
#[cfg(feature = "parallel")]
use std::sync::Arc;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Clone, Default)]
pub struct Executor {
    #[cfg(feature = "parallel")]
    pool: Option<Arc<rayon::ThreadPool>>,
}

impl fmt::Debug for Executor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Executor(threads={})", self.threads_count())
    }
}

impl Executor {
    pub fn sequential() -> Self {
        Self::default()
    }

    /// A dedicated pool with `n` worker threads. `n <= 1` (or a build without
    /// the `parallel` feature) yields the sequential executor.
    pub fn threads(n: usize) -> Self {
        #[cfg(feature = "parallel")]
        {
            if n > 1 {
                let pool = rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build()
                    .expect("failed to build rayon thread pool");
                return Self {
                    pool: Some(Arc::new(pool)),
                };
            }
        }
        let _ = n;
        Self::sequential()
    }

    /// Uses every available core.
    pub fn available() -> Self {
        let n = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
        Self::threads(n)
    }

    pub fn threads_count(&self) -> usize {
        #[cfg(feature = "parallel")]
        if let Some(pool) = &self.pool {
            return pool.current_num_threads();
        }
        1
    }

    pub fn is_parallel(&self) -> bool {
        self.threads_count() > 1
    }

    /// Ordered map over `items`.
    pub fn map<T, R, F>(&self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if let Some(pool) = &self.pool {
            return pool.install(|| items.par_iter().map(&f).collect());
        }
        items.iter().map(f).collect()
    }

    /// Ordered map over `0..n`.
    pub fn map_range<R, F>(&self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if let Some(pool) = &self.pool {
            return pool.install(|| (0..n).into_par_iter().map(&f).collect());
        }
        (0..n).map(f).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_order() {
        let items: Vec<u64> = (0..1000).collect();
        for exec in [Executor::sequential(), Executor::threads(4)] {
            let out = exec.map(&items, |x| x * 3);
            assert_eq!(out, items.iter().map(|x| x * 3).collect::<Vec<_>>());
            assert_eq!(exec.map_range(10, |i| i), (0..10).collect::<Vec<_>>());
        }
    }

    #[test]
    fn single_thread_is_sequential() {
        assert!(!Executor::threads(1).is_parallel());
        assert_eq!(Executor::sequential().threads_count(), 1);
    }
}
