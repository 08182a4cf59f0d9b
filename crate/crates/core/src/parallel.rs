//! Execution policy for the data-parallel loops (cell assembly, sampling
//! checks, independent solves).
//!
//! Every parallel loop in the crate is a `map` into an ordered buffer
//! followed by a sequential reduction, so the result of a computation does
//! not depend on the policy or on the number of worker threads.

/// How an indexed loop is executed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    /// Uses the rayon thread pool. Without the `parallel` feature this runs
    /// sequentially.
    Parallel,
}

impl Default for Execution {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Execution::Parallel
        } else {
            Execution::Sequential
        }
    }
}

impl Execution {
    /// Evaluates `f(0), …, f(len - 1)` and returns the results in index order.
    pub fn map<T, F>(self, len: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Execution::Parallel => {
                use rayon::prelude::*;
                (0..len).into_par_iter().map(f).collect()
            }
            _ => (0..len).map(f).collect(),
        }
    }

    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }
}

/// Pairwise (cascade) summation in a fixed order.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const LEAF: usize = 32;
    if values.len() <= LEAF {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_order_under_both_policies() {
        let seq = Execution::Sequential.map(1000, |i| i * i);
        let par = Execution::Parallel.map(1000, |i| i * i);
        assert_eq!(seq, par);
        assert_eq!(seq[999], 999 * 999);
    }

    #[test]
    fn pairwise_sum_matches_naive_on_integers() {
        let v: Vec<f64> = (0..10_000).map(|i| i as f64).collect();
        assert_eq!(pairwise_sum(&v), 49_995_000.0);
        assert_eq!(pairwise_sum(&[]), 0.0);
    }
}
