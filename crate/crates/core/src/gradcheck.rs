//! Central finite differences for checking analytic gradients.

use crate::policy::PolicyParams;
use crate::scalar::Scalar;

/// Flat coordinate access to a parameter container.
pub trait FlatParams: Clone {
    fn flat_len(&self) -> usize;
    fn flat_get(&self, i: usize) -> f64;
    fn flat_set(&mut self, i: usize, v: f64);
}

impl<T: Scalar> FlatParams for PolicyParams<T> {
    fn flat_len(&self) -> usize {
        self.len()
    }
    fn flat_get(&self, i: usize) -> f64 {
        self.get(i).as_f64()
    }
    fn flat_set(&mut self, i: usize, v: f64) {
        *self.get_mut(i) = T::lit(v);
    }
}

impl FlatParams for Vec<f64> {
    fn flat_len(&self) -> usize {
        self.len()
    }
    fn flat_get(&self, i: usize) -> f64 {
        self[i]
    }
    fn flat_set(&mut self, i: usize, v: f64) {
        self[i] = v;
    }
}

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for each listed coordinate.
pub fn central_diff<P, F>(params: &P, coords: &[usize], h: f64, mut f: F) -> Vec<f64>
where
    P: FlatParams,
    F: FnMut(&P) -> f64,
{
    let mut work = params.clone();
    coords
        .iter()
        .map(|&i| {
            let x = params.flat_get(i);
            work.flat_set(i, x + h);
            let up = f(&work);
            work.flat_set(i, x - h);
            let down = f(&work);
            work.flat_set(i, x);
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `max |a - n| / max(max |a|, max |n|)` over paired entries; the raw
/// difference when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let scale = analytic.iter().chain(numeric).fold(0.0_f64, |m, x| m.max(x.abs()));
    let diff = analytic
        .iter()
        .zip(numeric)
        .fold(0.0_f64, |m, (a, n)| m.max((a - n).abs()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Checks `grad` against central differences on `coords`; returns the relative error.
pub fn check<P, F>(params: &P, grad: &P, coords: &[usize], h: f64, f: F) -> f64
where
    P: FlatParams,
    F: FnMut(&P) -> f64,
{
    let numeric = central_diff(params, coords, h, f);
    let analytic: Vec<f64> = coords.iter().map(|&i| grad.flat_get(i)).collect();
    relative_error(&analytic, &numeric)
}

/// Coordinates of a policy-parameter vector reachable from the given feature
/// rows, plus the bias.
pub fn policy_coords(vocab_size: usize, feature_dim: usize, rows: &[usize]) -> Vec<usize> {
    let mut out: Vec<usize> = rows
        .iter()
        .flat_map(|&j| (0..vocab_size).map(move |v| j * vocab_size + v))
        .collect();
    out.extend((0..vocab_size).map(|v| feature_dim * vocab_size + v));
    out.sort_unstable();
    out.dedup();
    out
}
