//! Central finite differences over a parameter store.
//!
//! Only forward evaluations are used, so these estimates are independent of
//! every backward rule they are compared against.

use crate::autodiff::ParamStore;
use crate::tensor::Tensor;

/// `(f(θ + h e_k) - f(θ - h e_k)) / 2h` for every scalar in `store`.
pub fn finite_difference(store: &mut ParamStore, h: f64, mut f: impl FnMut(&ParamStore) -> f64) -> Vec<Tensor> {
    let mut out = store.zeros_like();
    for p in 0..store.len() {
        for k in 0..store.values()[p].len() {
            let orig = store.values()[p].data()[k];
            store.values_mut()[p].data_mut()[k] = orig + h;
            let plus = f(store);
            store.values_mut()[p].data_mut()[k] = orig - h;
            let minus = f(store);
            store.values_mut()[p].data_mut()[k] = orig;
            out[p].data_mut()[k] = (plus - minus) / (2.0 * h);
        }
    }
    out
}

/// Denominator floor: central differences at h = 1e-5 resolve gradients to about 1e-10.
pub const REL_FLOOR: f64 = 1e-6;

/// Relative error `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub max_rel: f64,
    /// `(parameter index, element index, analytic, numeric)` at the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub checked: usize,
}

pub fn compare(analytic: &[Tensor], numeric: &[Tensor], floor: f64) -> GradReport {
    let mut report = GradReport {
        max_rel: 0.0,
        worst: None,
        checked: 0,
    };
    for (p, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        assert_eq!(a.shape(), n.shape(), "gradient shape for parameter {p}");
        for (k, (&av, &nv)) in a.data().iter().zip(n.data()).enumerate() {
            report.checked += 1;
            let r = relative_error(av, nv, floor);
            if report.worst.is_none() || r > report.max_rel {
                report.max_rel = r;
                report.worst = Some((p, k, av, nv));
            }
        }
    }
    report
}
