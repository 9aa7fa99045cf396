//! Central finite-difference verification of tape gradients.

use crate::error::Result;

use super::{Tape, Tensor, Var};

/// Outcome of comparing analytic and numeric gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Denominator floor for [`relative_error`]. Gradients smaller than this
/// (including exact zeros, e.g. a key bias under softmax) are judged on
/// absolute error, since central-difference round-off is ~1e-11 there.
pub const REL_FLOOR: f64 = 1e-5;

/// Checks `d f / d inputs` for the scalar function `f`.
///
/// `f` is rebuilt on a fresh tape for every evaluation. When `sample` is
/// given only those `(input, element)` pairs are perturbed.
pub fn check<F>(
    inputs: &[Tensor<f64>],
    f: F,
    step: f64,
    sample: Option<&[(usize, usize)]>,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| v.grad().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect();

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<_> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        Ok(f(&tape, &vars)?.value().item())
    };

    let all: Vec<(usize, usize)>;
    let points = match sample {
        Some(s) => s,
        None => {
            all = inputs
                .iter()
                .enumerate()
                .flat_map(|(i, t)| (0..t.numel()).map(move |e| (i, e)))
                .collect();
            &all
        }
    };

    let mut work = inputs.to_vec();
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        max_abs_err: 0.0,
    };
    for &(i, e) in points {
        let orig = work[i].data()[e];
        work[i].data_mut()[e] = orig + step;
        let plus = eval(&work)?;
        work[i].data_mut()[e] = orig - step;
        let minus = eval(&work)?;
        work[i].data_mut()[e] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic[i].data()[e];
        report.checked += 1;
        report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
        report.max_rel_err = report
            .max_rel_err
            .max(relative_error(a, numeric, REL_FLOOR));
    }
    Ok(report)
}
