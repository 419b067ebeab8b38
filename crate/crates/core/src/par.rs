//! Data-parallel helpers with a sequential fallback.
//!
//! Every parallel map here collects results in input order, so callers that
//! reduce the returned vectors sequentially get bit-identical results under
//! either execution mode.

#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Environment variable that forces single-worker execution.
pub const DETERMINISTIC_ENV: &str = "MEDCL_DETERMINISTIC";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Exec {
    Sequential,
    #[default]
    Parallel,
}

impl Exec {
    /// `Sequential` when `MEDCL_DETERMINISTIC=1`, otherwise `self`.
    pub fn resolve(self) -> Self {
        if deterministic_from_env() {
            Exec::Sequential
        } else {
            self
        }
    }

    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }
}

pub fn deterministic_from_env() -> bool {
    std::env::var(DETERMINISTIC_ENV)
        .map(|v| v.trim() == "1")
        .unwrap_or(false)
}

#[cfg(feature = "parallel")]
pub fn map<T, R, F>(exec: Exec, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    if exec.is_parallel() {
        items.par_iter().map(f).collect()
    } else {
        items.iter().map(f).collect()
    }
}

#[cfg(not(feature = "parallel"))]
pub fn map<T, R, F>(_exec: Exec, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    items.iter().map(f).collect()
}

#[cfg(feature = "parallel")]
pub fn map_range<R, F>(exec: Exec, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    if exec.is_parallel() {
        (0..n).into_par_iter().map(f).collect()
    } else {
        (0..n).map(f).collect()
    }
}

#[cfg(not(feature = "parallel"))]
pub fn map_range<R, F>(_exec: Exec, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_agree_and_keep_order() {
        let xs: Vec<u64> = (0..100).collect();
        let a = map(Exec::Sequential, &xs, |x| x * x);
        let b = map(Exec::Parallel, &xs, |x| x * x);
        assert_eq!(a, b);
        assert_eq!(map_range(Exec::Parallel, 5, |i| i), vec![0, 1, 2, 3, 4]);
    }
}
