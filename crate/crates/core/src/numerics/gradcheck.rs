use std::collections::BTreeMap;

use serde::Serialize;

use super::{Graph, ParamId, Params, Tensor, Var};

/// Relative-error floor in the comparison denominator.
const DENOM_FLOOR: f64 = 1e-8;

/// Outcome of comparing reverse-mode gradients against central differences.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub op_name: String,
    pub max_rel_error: f64,
    pub per_parameter_errors: BTreeMap<String, f64>,
    pub tolerance: f64,
    pub passed: bool,
    /// Set when an evaluation produced a non-finite value.
    pub failure: Option<String>,
}

impl GradCheckReport {
    fn from_errors(
        op_name: &str,
        per_parameter_errors: BTreeMap<String, f64>,
        tolerance: f64,
        failure: Option<String>,
    ) -> Self {
        let max_rel_error = per_parameter_errors.values().copied().fold(0.0, f64::max);
        let passed = failure.is_none() && max_rel_error <= tolerance;
        Self {
            op_name: op_name.to_string(),
            max_rel_error,
            per_parameter_errors,
            tolerance,
            passed,
            failure,
        }
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(DENOM_FLOOR)
}

/// Checks the gradient of a scalar function of one tensor at `point`.
pub fn finite_difference_gradient<F>(
    op_name: &str,
    f: F,
    point: &Tensor<f64>,
    eps: f64,
    tolerance: f64,
) -> GradCheckReport
where
    F: for<'g> Fn(&'g Graph<f64>, Var<'g, f64>) -> Var<'g, f64>,
{
    assert!(eps > 0.0, "eps must be positive");
    let g = Graph::new();
    let x = g.input(point.clone());
    let y = f(&g, x);
    let y0 = y.item();
    if !y0.is_finite() {
        return GradCheckReport::from_errors(
            op_name,
            BTreeMap::new(),
            tolerance,
            Some(format!("non-finite value {y0} at the base point")),
        );
    }
    let grads = g.backward(y);
    let analytic = grads
        .wrt(x)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(point.shape()));

    let eval = |p: &Tensor<f64>| {
        let g = Graph::new();
        let x = g.constant(p.clone());
        f(&g, x).item()
    };
    let mut worst = 0.0f64;
    let mut failure = None;
    let mut probe = point.clone();
    for i in 0..point.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = eval(&probe);
        probe.data_mut()[i] = orig - eps;
        let minus = eval(&probe);
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            failure = Some(format!("non-finite evaluation at element {i}"));
            break;
        }
        let numeric = (plus - minus) / (2.0 * eps);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    let mut errors = BTreeMap::new();
    errors.insert("input".to_string(), worst);
    GradCheckReport::from_errors(op_name, errors, tolerance, failure)
}

/// Checks the gradient of a scalar function with respect to every entry of
/// every tensor in `params`.
pub fn check_params<F>(
    op_name: &str,
    params: &Params<f64>,
    f: F,
    eps: f64,
    tolerance: f64,
) -> GradCheckReport
where
    F: for<'g> Fn(&'g Graph<f64>, &Params<f64>) -> Var<'g, f64>,
{
    let ids: Vec<_> = params.ids().collect();
    check_param_subset(op_name, params, &ids, f, eps, tolerance)
}

/// Like [`check_params`], restricted to the tensors in `ids`.
pub fn check_param_subset<F>(
    op_name: &str,
    params: &Params<f64>,
    ids: &[ParamId],
    f: F,
    eps: f64,
    tolerance: f64,
) -> GradCheckReport
where
    F: for<'g> Fn(&'g Graph<f64>, &Params<f64>) -> Var<'g, f64>,
{
    assert!(eps > 0.0, "eps must be positive");
    let g = Graph::new();
    let y = f(&g, params);
    let y0 = y.item();
    if !y0.is_finite() {
        return GradCheckReport::from_errors(
            op_name,
            BTreeMap::new(),
            tolerance,
            Some(format!("non-finite value {y0} at the base point")),
        );
    }
    let grads = g.backward(y);
    let eval = |p: &Params<f64>| {
        let g = Graph::new();
        f(&g, p).item()
    };

    let mut errors = BTreeMap::new();
    let mut failure = None;
    let mut probe = params.clone();
    'outer: for &id in ids {
        let analytic = grads
            .param(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(params.get(id).shape()));
        let mut worst = 0.0f64;
        for i in 0..params.get(id).len() {
            let orig = params.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = orig + eps;
            let plus = eval(&probe);
            probe.get_mut(id).data_mut()[i] = orig - eps;
            let minus = eval(&probe);
            probe.get_mut(id).data_mut()[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                failure = Some(format!(
                    "non-finite evaluation at {}[{i}]",
                    params.name(id)
                ));
                break 'outer;
            }
            let numeric = (plus - minus) / (2.0 * eps);
            worst = worst.max(relative_error(analytic.data()[i], numeric));
        }
        errors.insert(params.name(id).to_string(), worst);
    }
    GradCheckReport::from_errors(op_name, errors, tolerance, failure)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let r = finite_difference_gradient(
            "square",
            |_, x| x.square().sum(),
            &Tensor::scalar(3.0),
            1e-4,
            1e-6,
        );
        assert!(r.passed, "{r:?}");
        assert!(r.max_rel_error < 1e-6);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        // log(|x|) at 0 evaluates to -inf
        let r = finite_difference_gradient(
            "log",
            |_, x| x.abs().log().sum(),
            &Tensor::scalar(0.0),
            1e-4,
            1e-6,
        );
        assert!(!r.passed);
        assert!(r.failure.is_some());
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    }
}
