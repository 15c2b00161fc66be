//! Thread-pool backed [`BatchRunner`].

use rayon::prelude::*;
use rayon::{ThreadPool, ThreadPoolBuilder};
use shadowtree_core::shadow::BatchRunner;

/// Environment variable capping the worker count.
pub const THREADS_VAR: &str = "SHADOWTREE_THREADS";

/// Runs tasks on a private rayon pool. Results come back in index order, so
/// any reduction over them is independent of the thread count.
pub struct Parallel {
    pool: ThreadPool,
}

impl Parallel {
    /// `threads = 0` uses the machine's parallelism.
    pub fn new(threads: usize) -> Result<Self, rayon::ThreadPoolBuildError> {
        Ok(Parallel { pool: ThreadPoolBuilder::new().num_threads(threads).build()? })
    }

    /// Worker count from `SHADOWTREE_THREADS`, defaulting to all cores.
    pub fn from_env() -> anyhow::Result<Self> {
        let threads = match std::env::var(THREADS_VAR) {
            Ok(v) => v
                .trim()
                .parse::<usize>()
                .map_err(|_| anyhow::anyhow!("{THREADS_VAR} must be a nonnegative integer, got {v:?}"))?,
            Err(_) => 0,
        };
        Ok(Parallel::new(threads)?)
    }

    pub fn threads(&self) -> usize {
        self.pool.current_num_threads()
    }
}

impl BatchRunner for Parallel {
    fn map<T, F>(&self, count: usize, task: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        self.pool.install(|| (0..count).into_par_iter().map(task).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keeps_index_order() {
        let r = Parallel::new(4).unwrap();
        assert_eq!(r.map(1000, |i| i * i), (0..1000).map(|i| i * i).collect::<Vec<_>>());
        assert_eq!(r.threads(), 4);
    }
}
