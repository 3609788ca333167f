//! Deterministic parallel gradient accumulation.
//!
//! Items are split into fixed-size chunks independent of the thread count;
//! each chunk accumulates serially and chunk results are summed in index
//! order, so the floating-point result never depends on scheduling.

use rayon::prelude::*;

use crate::error::Result;
use crate::policy::PolicyParams;
use crate::scalar::Scalar;

const CHUNK: usize = 16;

/// Sums `f(i, &mut grad)` over `0..n`; `f` adds into the gradient and
/// returns a scalar that is summed alongside.
pub fn accumulate<T, F>(n: usize, zeros: &PolicyParams<T>, f: F) -> Result<(T, PolicyParams<T>)>
where
    T: Scalar,
    F: Fn(usize, &mut PolicyParams<T>) -> Result<T> + Sync,
{
    let chunks: Vec<(usize, usize)> = (0..n).step_by(CHUNK).map(|s| (s, (s + CHUNK).min(n))).collect();
    let partial: Vec<Result<(T, PolicyParams<T>)>> = chunks
        .par_iter()
        .map(|&(s, e)| {
            let mut g = zeros.zeros_like();
            let mut total = T::zero();
            for i in s..e {
                total += f(i, &mut g)?;
            }
            Ok((total, g))
        })
        .collect();
    let mut grad = zeros.zeros_like();
    let mut total = T::zero();
    for r in partial {
        let (v, g) = r?;
        total += v;
        grad.axpy(T::one(), &g);
    }
    Ok((total, grad))
}

/// Ordered parallel map with fallible items.
pub fn map<I, O, F>(items: &[I], f: F) -> Result<Vec<O>>
where
    I: Sync,
    O: Send,
    F: Fn(usize, &I) -> Result<O> + Sync,
{
    items.par_iter().enumerate().map(|(i, x)| f(i, x)).collect()
}
