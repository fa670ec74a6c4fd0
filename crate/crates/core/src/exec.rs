//! Batch-level execution strategy.
//!
//! Work items (samples of a batch, evaluation images, TTA variants) are
//! independent, so they may run on the rayon pool. Results are always
//! collected in input order and reduced sequentially by the caller, which
//! keeps both strategies bitwise identical.

/// How independent work items are scheduled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Execution {
    /// Strict single-threaded execution.
    Sequential,
    /// Rayon data parallelism (requires the `parallel` feature; otherwise sequential).
    #[default]
    Parallel,
}

impl Execution {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }

    /// Maps `f` over `items`, preserving order.
    pub fn map<T, R, F>(self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self.is_parallel() {
            use rayon::prelude::*;
            return items.par_iter().map(f).collect();
        }
        items.iter().map(f).collect()
    }
}
