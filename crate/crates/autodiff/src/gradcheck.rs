//! Central finite-difference checks for analytic gradients.

use crate::params::ParamStore;
use ndarray::Array2;
use std::collections::BTreeMap;

/// Relative error between two scalars, floored so near-zero pairs compare
/// sensibly: `|a − b| / max(|a|, |b|, 1e-6)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Compare analytic gradients against central finite differences of `loss`.
///
/// For every named parameter in `analytic`, up to `max_entries_per_param`
/// entries (evenly strided) are perturbed by `±eps` and the finite-difference
/// quotient compared with the analytic entry. Returns the worst relative
/// error seen.
pub fn max_fd_error<F>(
    store: &mut ParamStore,
    analytic: &BTreeMap<String, Array2<f64>>,
    mut loss: F,
    eps: f64,
    max_entries_per_param: usize,
) -> f64
where
    F: FnMut(&ParamStore) -> f64,
{
    let mut worst = 0.0f64;
    let names: Vec<String> = analytic.keys().cloned().collect();
    for name in names {
        let a = &analytic[&name];
        let len = a.len();
        let stride = (len / max_entries_per_param).max(1);
        let shape = a.raw_dim();
        let cols = shape[1];
        for flat in (0..len).step_by(stride) {
            let (r, c) = (flat / cols, flat % cols);
            let orig = store.get(&name)[[r, c]];
            store.get_mut(&name)[[r, c]] = orig + eps;
            let lp = loss(store);
            store.get_mut(&name)[[r, c]] = orig - eps;
            let lm = loss(store);
            store.get_mut(&name)[[r, c]] = orig;
            let fd = (lp - lm) / (2.0 * eps);
            worst = worst.max(rel_err(fd, a[[r, c]]));
        }
    }
    worst
}
