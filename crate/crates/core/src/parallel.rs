//! Data-parallel map over songs with a sequential fallback.
//!
//! With the `parallel` feature disabled, [`Execution::Parallel`] runs
//! sequentially. Output order always matches input order, so anything
//! folded from the results is independent of scheduling.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
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

pub fn map<T, R, F>(items: &[T], execution: Execution, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    match execution {
        #[cfg(feature = "parallel")]
        Execution::Parallel => {
            use rayon::prelude::*;
            items.par_iter().map(f).collect()
        }
        _ => items.iter().map(f).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_modes_preserve_order() {
        let items: Vec<u64> = (0..1000).collect();
        let seq = map(&items, Execution::Sequential, |x| x * x);
        let par = map(&items, Execution::Parallel, |x| x * x);
        assert_eq!(seq, par);
        assert_eq!(seq[999], 998_001);
    }
}
