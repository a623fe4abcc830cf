//! Central finite-difference verification of tape gradients.

use crate::double::DoubleDouble;
use crate::error::{GlksError, Result};
use crate::param::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Worst disagreement found for one input.
#[derive(Clone, Debug)]
pub struct InputReport {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub tolerance: f64,
    pub inputs: Vec<InputReport>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.inputs
            .iter()
            .all(|r| r.max_rel_error <= self.tolerance)
    }

    pub fn failures(&self) -> impl Iterator<Item = &InputReport> {
        self.inputs
            .iter()
            .filter(|r| r.max_rel_error > self.tolerance)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.inputs
            .iter()
            .map(|r| r.max_rel_error)
            .fold(0.0, f64::max)
    }
}

impl std::fmt::Display for GradReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let status = if self.passed() { "PASS" } else { "FAIL" };
        writeln!(
            f,
            "grad check {status} (tol {:e}, max {:e})",
            self.tolerance,
            self.max_rel_error()
        )?;
        for r in self.failures() {
            writeln!(
                f,
                "  {}[{}]: analytic {:e} numeric {:e} rel {:e}",
                r.name, r.worst_index, r.analytic, r.numeric, r.max_rel_error
            )?;
        }
        Ok(())
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

fn compare(name: &str, analytic: &[f64], numeric: &[f64]) -> InputReport {
    let mut report = InputReport {
        name: name.to_string(),
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let e = relative_error(a, n);
        if e > report.max_rel_error || i == 0 {
            report = InputReport {
                name: name.to_string(),
                max_rel_error: e,
                worst_index: i,
                analytic: a,
                numeric: n,
            };
        }
    }
    report
}

fn scalar_output<T: Scalar>(tape: &Tape<T>, out: Var) -> Result<f64> {
    let v = tape.value(out);
    if v.numel() != 1 {
        return Err(GlksError::Contract(format!(
            "gradient check needs a scalar-valued function, got shape {:?}",
            v.shape()
        )));
    }
    Ok(v.item().as_f64())
}

/// Checks `f` at `inputs` in 64-bit arithmetic. Each input is registered as
/// a differentiable leaf and handed to `f` in order.
pub fn grad_check<F>(f: F, inputs: &[(&str, Tensor<f64>)], eps: f64, tol: f64) -> Result<GradReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<(Tape<f64>, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.input(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok((tape, vars, out))
    };

    let mut values: Vec<Tensor<f64>> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let (tape, vars, out) = eval(&values)?;
    scalar_output(&tape, out)?;
    let grads = tape.backward(out)?;

    let mut reports = Vec::with_capacity(inputs.len());
    for (k, (name, _)) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zero(vars[k]).to_f64_vec();
        let mut numeric = vec![0.0; analytic.len()];
        for i in 0..analytic.len() {
            let orig = values[k].data()[i];
            values[k].data_mut()[i] = orig + eps;
            let (tp, _, op) = eval(&values)?;
            let plus = scalar_output(&tp, op)?;
            values[k].data_mut()[i] = orig - eps;
            let (tm, _, om) = eval(&values)?;
            let minus = scalar_output(&tm, om)?;
            values[k].data_mut()[i] = orig;
            numeric[i] = (plus - minus) / (2.0 * eps);
        }
        reports.push(compare(name, &analytic, &numeric));
    }
    Ok(GradReport {
        tolerance: tol,
        inputs: reports,
    })
}

/// A scalar objective over a parameter store, evaluable at any precision.
pub trait Objective {
    fn eval<S: Scalar>(&self, params: &ParamStore<S>, tape: &mut Tape<S>) -> Result<Var>;
}

/// Gradient of `objective` with respect to every parameter, by reverse mode
/// at the store's own precision. One vector per parameter, in store order.
pub fn analytic_gradients<T: Scalar, O: Objective>(
    objective: &O,
    params: &ParamStore<T>,
) -> Result<Vec<Vec<f64>>> {
    let mut tape = Tape::new();
    let out = objective.eval(params, &mut tape)?;
    scalar_output(&tape, out)?;
    let mut store = params.clone();
    store.zero_grad();
    tape.backward(out)?.accumulate(&tape, &mut store)?;
    Ok(store.iter().map(|(_, p)| p.grad.to_f64_vec()).collect())
}

/// Central finite differences of `objective` with step `eps`, evaluated in
/// double-double arithmetic so that round-off stays far below the smallest
/// gradients of interest.
pub fn numeric_gradients<T: Scalar, O: Objective>(
    objective: &O,
    params: &ParamStore<T>,
    eps: f64,
) -> Result<Vec<Vec<f64>>> {
    let mut probe = params.cast::<DoubleDouble>();
    let loss_at = |store: &ParamStore<DoubleDouble>| -> Result<DoubleDouble> {
        let mut tape = Tape::new();
        let out = objective.eval(store, &mut tape)?;
        scalar_output(&tape, out)?;
        Ok(tape.value(out).item())
    };
    let h = DoubleDouble::of(eps);
    let two_h = h + h;
    let ids: Vec<_> = params.iter().map(|(id, _)| id).collect();
    let mut all = Vec::with_capacity(ids.len());
    for id in ids {
        let n = probe.get(id).value.numel();
        let mut numeric = vec![0.0; n];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = probe.get(id).value.data()[i];
            probe.get_mut(id).value.data_mut()[i] = orig + h;
            let plus = loss_at(&probe)?;
            probe.get_mut(id).value.data_mut()[i] = orig - h;
            let minus = loss_at(&probe)?;
            probe.get_mut(id).value.data_mut()[i] = orig;
            *slot = ((plus - minus) / two_h).as_f64();
        }
        all.push(numeric);
    }
    Ok(all)
}

/// Compares per-parameter gradients; `names`, `analytic` and `numeric` are
/// aligned.
pub fn compare_gradients(
    names: &[String],
    analytic: &[Vec<f64>],
    numeric: &[Vec<f64>],
    tol: f64,
) -> Result<GradReport> {
    if names.len() != analytic.len() || names.len() != numeric.len() {
        return Err(GlksError::Contract("gradient lists are not aligned".into()));
    }
    let inputs = names
        .iter()
        .zip(analytic.iter().zip(numeric))
        .map(|(name, (a, n))| {
            if a.len() != n.len() {
                return Err(GlksError::Contract(format!(
                    "gradient sizes differ for `{name}`"
                )));
            }
            Ok(compare(name, a, n))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GradReport {
        tolerance: tol,
        inputs,
    })
}

pub fn param_names<T: Scalar>(params: &ParamStore<T>) -> Vec<String> {
    params.iter().map(|(_, p)| p.name.clone()).collect()
}

/// Checks the gradient of `objective` with respect to every parameter.
///
/// The analytic gradient is computed at the store's own precision `T`; the
/// finite-difference reference is computed in double-double on a cast copy,
/// so both 32- and 64-bit backward passes are judged against an oracle that
/// is more accurate than either.
pub fn check_params<T: Scalar, O: Objective>(
    objective: &O,
    params: &ParamStore<T>,
    eps: f64,
    tol: f64,
) -> Result<GradReport> {
    let analytic = analytic_gradients(objective, params)?;
    let numeric = numeric_gradients(objective, params, eps)?;
    compare_gradients(&param_names(params), &analytic, &numeric, tol)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap();
        let report = grad_check(
            |tape, v| {
                let sq = tape.mul(v[0], v[0])?;
                Ok(tape.sum(sq))
            },
            &[("x", x)],
            1e-4,
            1e-8,
        )
        .unwrap();
        assert!(report.passed(), "{report}");
        assert!(report.inputs[0].max_rel_error < 1e-8);
    }

    #[test]
    fn wrong_backward_is_caught_and_named() {
        let x = Tensor::from_f64(&[3], &[0.3, -0.2, 0.9]).unwrap();
        let report = grad_check(
            |tape, v| {
                // sin with a deliberately wrong derivative
                let y = tape.map(v[0], f64::sin, |t| -t.cos());
                Ok(tape.sum(y))
            },
            &[("bad_input", x)],
            1e-5,
            1e-3,
        )
        .unwrap();
        assert!(!report.passed());
        assert_eq!(report.failures().next().unwrap().name, "bad_input");
    }

    #[test]
    fn non_scalar_output_is_a_contract_error() {
        let x = Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap();
        let err = grad_check(|tape, v| Ok(tape.tanh(v[0])), &[("x", x)], 1e-4, 1e-6);
        assert!(matches!(err, Err(GlksError::Contract(_))));
    }
}
