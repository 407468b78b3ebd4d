//! Execution strategy for the data-parallel loops.
//!
//! Every parallel entry point takes an [`Execution`]. With the `parallel`
//! feature disabled, [`Execution::Parallel`] silently runs sequentially, so
//! callers never need their own `cfg` gates. Results are always collected in
//! index order; the two strategies produce identical output.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Execution {
    Sequential,
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
    /// Whether work will actually fan out across threads.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }

    /// `(0..n).map(f).collect()`, possibly in parallel, order preserved.
    pub fn map_range<T, F>(self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self.is_parallel() {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
        (0..n).map(f).collect()
    }

    /// `items.iter().map(f).collect()`, possibly in parallel, order preserved.
    pub fn map_slice<S, T, F>(self, items: &[S], f: F) -> Vec<T>
    where
        S: Sync,
        T: Send,
        F: Fn(&S) -> T + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self.is_parallel() {
            use rayon::prelude::*;
            return items.par_iter().map(f).collect();
        }
        items.iter().map(f).collect()
    }
}

/// Deterministic sum: fixed-size chunks summed sequentially, then the chunk
/// partials summed in order. Independent of thread count.
pub fn chunked_sum(exec: Execution, values: &[f64]) -> f64 {
    const CHUNK: usize = 4096;
    let n_chunks = values.len().div_ceil(CHUNK);
    let partials = exec.map_range(n_chunks, |c| {
        let lo = c * CHUNK;
        let hi = (lo + CHUNK).min(values.len());
        values[lo..hi].iter().sum::<f64>()
    });
    partials.iter().sum()
}

/// Configure the global worker pool from `HUNTER_WORKERS`, if set.
///
/// Returns the number of workers in effect (1 without the `parallel`
/// feature).
pub fn init_workers_from_env() -> usize {
    #[cfg(feature = "parallel")]
    {
        if let Some(n) = std::env::var("HUNTER_WORKERS")
            .ok()
            .and_then(|v| v.trim().parse::<usize>().ok())
            .filter(|&n| n > 0)
        {
            // A pool may already exist when embedded; that is not an error.
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strategies_agree() {
        let a = Execution::Sequential.map_range(1000, |i| i * i);
        let b = Execution::Parallel.map_range(1000, |i| i * i);
        assert_eq!(a, b);
    }

    #[test]
    fn chunked_sum_is_strategy_independent() {
        let v: Vec<f64> = (0..20_000).map(|i| (i as f64).sin() * 1e-3).collect();
        let s = chunked_sum(Execution::Sequential, &v);
        let p = chunked_sum(Execution::Parallel, &v);
        assert_eq!(s.to_bits(), p.to_bits());
    }
}
