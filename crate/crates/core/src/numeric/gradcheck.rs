use serde::Serialize;

use super::params::ParamStore;
use crate::error::{Error, Result};

pub const DEFAULT_GRAD_CHECK_EPS: f64 = 1e-5;

/// Denominator floor of [`relative_error`]. Central differences at
/// `ε = 1e-5` carry roughly `1e-16·|f|/ε ≈ 1e-11` of rounding noise, so
/// gradient entries much smaller than `1e-7` cannot be resolved to a 1e-4
/// relative error; below the floor the check becomes an absolute one.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Relative error with a floor on the denominator.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR)
}

/// Compares analytic gradients against central differences.
///
/// `loss` must evaluate the scalar objective and *accumulate* its gradient
/// into the store (gradients are zeroed before every call). Every scalar of
/// every parameter is perturbed by `±eps`.
pub fn grad_check<F>(store: &mut ParamStore, eps: f64, mut loss: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut ParamStore) -> Result<f64>,
{
    store.zero_grads();
    let base = loss(store)?;
    if !base.is_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    let ids: Vec<_> = store.ids().collect();
    let analytic: Vec<Vec<f64>> = ids.iter().map(|&id| store.grad(id).data().to_vec()).collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for (pi, &id) in ids.iter().enumerate() {
        for k in 0..store.value(id).len() {
            let orig = store.value(id).data()[k];
            store.value_mut(id).data_mut()[k] = orig + eps;
            store.zero_grads();
            let plus = loss(store)?;
            store.value_mut(id).data_mut()[k] = orig - eps;
            store.zero_grads();
            let minus = loss(store)?;
            store.value_mut(id).data_mut()[k] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!(
                    "grad_check objective at {}[{k}]",
                    store.name(id)
                )));
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[pi][k];
            let err = relative_error(a, numeric);
            report.checked += 1;
            if report.checked == 1 || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = store.name(id).to_owned();
                report.worst_index = k;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    store.zero_grads();
    // leave analytic gradients in place for callers that inspect them
    for (pi, &id) in ids.iter().enumerate() {
        store.grad_mut(id).data_mut().copy_from_slice(&analytic[pi]);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{sigmoid, Tensor};

    #[test]
    fn quadratic_is_exact() {
        let mut s = ParamStore::new();
        let id = s.insert("x", Tensor::vector(vec![3.0]).unwrap()).unwrap();
        let r = grad_check(&mut s, DEFAULT_GRAD_CHECK_EPS, |s| {
            let x = s.value(id).data()[0];
            s.grad_mut(id).data_mut()[0] += 2.0 * x;
            Ok(x * x)
        })
        .unwrap();
        assert!((r.analytic - 6.0).abs() < 1e-12);
        assert!(r.max_rel_error < 1e-9, "{r:?}");
        assert_eq!(s.value(id).data()[0], 3.0);
    }

    #[test]
    fn sigmoid_derivative_at_zero() {
        let mut s = ParamStore::new();
        let id = s.insert("x", Tensor::vector(vec![0.0]).unwrap()).unwrap();
        let r = grad_check(&mut s, DEFAULT_GRAD_CHECK_EPS, |s| {
            let x = s.value(id).data()[0];
            let y = sigmoid(x);
            s.grad_mut(id).data_mut()[0] += y * (1.0 - y);
            Ok(y)
        })
        .unwrap();
        assert_eq!(r.analytic, 0.25);
        assert!(r.max_rel_error < 1e-8, "{r:?}");
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let mut s = ParamStore::new();
        let id = s.insert("x", Tensor::vector(vec![1.5]).unwrap()).unwrap();
        let r = grad_check(&mut s, DEFAULT_GRAD_CHECK_EPS, |s| {
            let x = s.value(id).data()[0];
            s.grad_mut(id).data_mut()[0] += 3.0 * x;
            Ok(x * x)
        })
        .unwrap();
        assert!(r.max_rel_error > 0.3);
        assert_eq!(r.worst_param, "x");
    }

    #[test]
    fn non_finite_objective_errors() {
        let mut s = ParamStore::new();
        s.insert("x", Tensor::vector(vec![1.0]).unwrap()).unwrap();
        assert!(grad_check(&mut s, 1e-5, |_| Ok(f64::NAN)).is_err());
    }
}
