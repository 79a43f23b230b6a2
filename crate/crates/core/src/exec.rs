//! Data-parallel execution with a sequential fallback.
//!
//! Work is split into indexed units whose results do not depend on which
//! thread runs them, so both strategies return identical output.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Exec {
    Sequential,
    /// Uses rayon when the `parallel` feature is enabled, otherwise runs
    /// sequentially.
    #[default]
    Parallel,
}

impl Exec {
    /// Whether this strategy actually runs on multiple threads.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }

    /// Evaluates `f(0..n)` and returns the results in index order.
    pub fn map<T, F>(self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self == Exec::Parallel {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
        (0..n).map(f).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strategies_agree_and_preserve_order() {
        let f = |i: usize| (i as f64).sqrt();
        let a = Exec::Sequential.map(1000, f);
        let b = Exec::Parallel.map(1000, f);
        assert_eq!(a, b);
        assert_eq!(a[9], 3.0);
        assert!(Exec::Sequential.map(0, f).is_empty());
    }
}
