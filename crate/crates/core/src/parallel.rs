//! Order-preserving map over independent jobs.
//!
//! With the `parallel` feature the jobs run on the current rayon pool;
//! otherwise they run in sequence. Results always come back in input order,
//! so the schedule never affects output.

#[cfg(feature = "parallel")]
pub fn map<T: Sync, U: Send>(items: &[T], f: impl Fn(&T) -> U + Sync + Send) -> Vec<U> {
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map<T: Sync, U: Send>(items: &[T], f: impl Fn(&T) -> U + Sync + Send) -> Vec<U> {
    items.iter().map(f).collect()
}
