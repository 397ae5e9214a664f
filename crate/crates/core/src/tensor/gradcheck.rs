//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates forward passes, so it stays
//! independent of the backward rules it is used to verify.

use super::{ParamStore, Tape, Var};
use crate::error::Result;

/// Denominator floor for [`relative_error`]; below it errors are effectively absolute.
pub const REL_FLOOR: f64 = 1e-5;

/// `|a - b| / max(|a|, |b|, REL_FLOOR)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Central differences of a scalar function at `point`.
pub fn finite_diff_grad<F>(f: F, point: &[f64], step: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut x = point.to_vec();
    (0..point.len())
        .map(|i| {
            x[i] = point[i] + step;
            let plus = f(&x);
            x[i] = point[i] - step;
            let minus = f(&x);
            x[i] = point[i];
            (plus - minus) / (2.0 * step)
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat element index of the worst entry.
    pub worst: Option<(String, usize)>,
    /// Analytic and numeric values at the worst entry.
    pub worst_values: (f64, f64),
    pub checked: usize,
}

/// Compares tape gradients of `forward` against central differences for
/// every trainable parameter in `store`.
///
/// `max_per_tensor` limits how many (evenly strided) elements of each
/// tensor are probed; `None` checks all of them.
pub fn check_params<F>(
    store: &mut ParamStore,
    forward: F,
    step: f64,
    max_per_tensor: Option<usize>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    for id in store.ids().collect::<Vec<_>>() {
        store.get_mut(id).grad = None;
    }
    let mut tape = Tape::new();
    let loss = forward(&mut tape, store)?;
    tape.backward(loss, store)?;

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut t = Tape::new();
        let l = forward(&mut t, s)?;
        Ok(t.value(l).item())
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        worst_values: (0.0, 0.0),
        checked: 0,
    };
    let ids: Vec<_> = store.ids().filter(|&id| store.get(id).requires_grad).collect();
    for id in ids {
        let numel = store.get(id).numel();
        let analytic = store
            .get(id)
            .grad
            .clone()
            .unwrap_or_else(|| vec![0.0; numel]);
        let stride = match max_per_tensor {
            Some(k) if k > 0 && numel > k => numel.div_ceil(k),
            _ => 1,
        };
        for j in (0..numel).step_by(stride) {
            let orig = store.get(id).values()[j];
            store.get_mut(id).values_mut()[j] = orig + step;
            let plus = eval(store)?;
            store.get_mut(id).values_mut()[j] = orig - step;
            let minus = eval(store)?;
            store.get_mut(id).values_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let err = relative_error(analytic[j], numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((store.name(id).to_string(), j));
                report.worst_values = (analytic[j], numeric);
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_matches_analytic() {
        let f = |v: &[f64]| v[0] * v[0] + 3.0 * v[0] * v[1];
        let g = finite_diff_grad(f, &[1.0, 2.0], 1e-5);
        assert!((g[0] - 8.0).abs() < 1e-8);
        assert!((g[1] - 3.0).abs() < 1e-8);
    }
}
