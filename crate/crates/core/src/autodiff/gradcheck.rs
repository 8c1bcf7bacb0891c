use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of comparing analytic gradients against central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Parameter name and flat index where the worst error occurred.
    pub worst: Option<(String, usize)>,
    pub entries_checked: usize,
}

fn evaluate<F>(model_fn: &F, values: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
    let out = model_fn(&mut g, &vars)?;
    g.value(out).item()
}

/// Compares reverse-mode gradients of `model_fn` with central differences.
///
/// `model_fn` receives one graph variable per entry of `params` (same order)
/// and must return a scalar. The relative error per entry is
/// `|analytic - central| / max(|analytic|, |central|, 1e-12)`.
pub fn finite_difference_check<F>(
    model_fn: F,
    params: &[(String, Tensor)],
    step: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    check(model_fn, params, step, false)
}

/// Entries above this error at the requested step are re-differenced.
pub const REFINE_ABOVE: f64 = 1e-6;

/// Like [`finite_difference_check`], but an entry whose error exceeds
/// [`REFINE_ABOVE`] is re-differenced at `step / 10`, `step / 100`, ... down
/// to 1e-8 and keeps its smallest error.
///
/// A ReLU kink within `step` of the evaluation point spoils the central
/// difference until the step shrinks below the distance to the kink; a wrong
/// analytic gradient disagrees at every step.
pub fn kink_aware_check<F>(model_fn: F, params: &[(String, Tensor)], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    check(model_fn, params, step, true)
}

fn check<F>(model_fn: F, params: &[(String, Tensor)], step: f64, refine: bool) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(1e-8..=1e-4).contains(&step) {
        return Err(Error::Value(format!("finite-difference step {step} outside [1e-8, 1e-4]")));
    }
    let mut values: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();

    let first = evaluate(&model_fn, &values)?;
    let second = evaluate(&model_fn, &values)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::Oracle(format!(
            "model function is not deterministic ({first} vs {second})"
        )));
    }

    let mut g = Graph::new();
    let vars: Vec<Var> = values.iter().map(|t| g.param(t.clone())).collect();
    let loss = model_fn(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(&values)
        .map(|(&v, t)| g.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        entries_checked: 0,
    };
    for p in 0..values.len() {
        for i in 0..values[p].len() {
            let exact = analytic[p].data()[i];
            let mut h = step;
            let mut rel = relative_error(&model_fn, &mut values, p, i, h, exact)?;
            while refine && rel > REFINE_ABOVE && h / 10.0 >= 1e-8 {
                h /= 10.0;
                rel = rel.min(relative_error(&model_fn, &mut values, p, i, h, exact)?);
            }
            report.entries_checked += 1;
            if report.worst.is_none() || rel > report.max_relative_error {
                report.max_relative_error = rel;
                report.worst = Some((params[p].0.clone(), i));
            }
        }
    }
    Ok(report)
}

fn relative_error<F>(model_fn: &F, values: &mut [Tensor], p: usize, i: usize, step: f64, exact: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let original = values[p].data()[i];
    let up = original + step;
    let down = original - step;
    values[p].data_mut()[i] = up;
    let f_up = evaluate(model_fn, values)?;
    values[p].data_mut()[i] = down;
    let f_down = evaluate(model_fn, values)?;
    values[p].data_mut()[i] = original;

    // divide by the representable spacing, not the nominal 2*step
    let central = (f_up - f_down) / (up - down);
    let denom = exact.abs().max(central.abs()).max(1e-12);
    Ok((exact - central).abs() / denom)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_function_has_exact_derivative() {
        let params = vec![("w".to_string(), Tensor::scalar(3.0))];
        let report = finite_difference_check(
            |g, v| g.mul(v[0], v[0]),
            &params,
            1e-6,
        )
        .unwrap();
        assert!(report.max_relative_error < 1e-8, "{report:?}");
        assert_eq!(report.entries_checked, 1);
    }

    #[test]
    fn rejects_step_outside_range() {
        let params = vec![("w".to_string(), Tensor::scalar(1.0))];
        let err = finite_difference_check(|g, v| g.sum(v[0]), &params, 1e-2).unwrap_err();
        assert!(matches!(err, Error::Value(_)));
    }

    #[test]
    fn nondeterministic_function_is_an_oracle_error() {
        use std::cell::Cell;
        let calls = Cell::new(0.0);
        let params = vec![("w".to_string(), Tensor::scalar(1.0))];
        let err = finite_difference_check(
            |g, v| {
                calls.set(calls.get() + 1.0);
                let s = g.sum(v[0])?;
                g.affine(s, 1.0, calls.get())
            },
            &params,
            1e-6,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Oracle(_)), "{err}");
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // relu at an exact kink: analytic subgradient 0, central difference 0.5
        let params = vec![("x".to_string(), Tensor::scalar(0.0))];
        let report = finite_difference_check(|g, v| g.relu(v[0]), &params, 1e-6).unwrap();
        assert!(report.max_relative_error > 0.9);
        assert_eq!(report.worst, Some(("x".to_string(), 0)));
    }

    #[test]
    fn kink_aware_check_steps_past_a_nearby_kink() {
        let params = vec![("x".to_string(), Tensor::scalar(1e-6))];
        let plain = finite_difference_check(|g, v| g.relu(v[0]), &params, 1e-4).unwrap();
        assert!(plain.max_relative_error > 0.4);
        let aware = kink_aware_check(|g, v| g.relu(v[0]), &params, 1e-4).unwrap();
        assert!(aware.max_relative_error < 1e-8, "{aware:?}");
    }

    #[test]
    fn kink_aware_check_still_flags_a_wrong_gradient() {
        let params = vec![("x".to_string(), Tensor::scalar(0.0))];
        let report = kink_aware_check(|g, v| g.relu(v[0]), &params, 1e-4).unwrap();
        assert!(report.max_relative_error > 0.9);
    }
}
