//! Central finite-difference gradient checking.
//!
//! Used by the test suites to validate every differentiable operation and
//! whole models end to end: analytic gradients from [`Tensor::backward`] are
//! compared against `(f(x+h) - f(x-h)) / 2h` coordinate by coordinate.

use crate::error::Result;
use crate::tensor::Tensor;

/// Default perturbation for 64-bit central differences.
pub const DEFAULT_STEP: f64 = 1e-6;

/// Relative error between an analytic and a numeric derivative, with an
/// absolute floor so that near-zero pairs compare absolutely.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs());
    if denom < 1e-8 {
        (analytic - numeric).abs()
    } else {
        (analytic - numeric).abs() / denom
    }
}

#[derive(Debug, Clone)]
pub struct GradReport {
    pub checked: usize,
    pub max_relative_error: f64,
    pub worst_coordinate: usize,
}

impl GradReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_relative_error < tol
    }
}

/// Check the gradient of `loss_fn` with respect to `param`.
///
/// `loss_fn` must rebuild the computation from the parameter's *current*
/// values and return the scalar loss tensor. The parameter's data is nudged
/// in place for the numeric probes and restored afterwards. `coords`
/// restricts the check to a subset of coordinates (useful for large tensors);
/// `None` checks all of them.
pub fn check_param<F>(
    param: &Tensor,
    coords: Option<&[usize]>,
    step: f64,
    mut loss_fn: F,
) -> Result<GradReport>
where
    F: FnMut() -> Result<Tensor>,
{
    param.zero_grad();
    let loss = loss_fn()?;
    loss.backward()?;
    let analytic = param
        .grad()
        .unwrap_or_else(|| vec![0.0; param.len()]);

    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..param.len()).collect();
            &all
        }
    };

    let base = param.to_vec();
    let mut report = GradReport {
        checked: 0,
        max_relative_error: 0.0,
        worst_coordinate: 0,
    };
    for &i in coords {
        let mut probe = base.clone();
        probe[i] = base[i] + step;
        param.set_data(&probe)?;
        let plus = loss_fn()?.value();
        probe[i] = base[i] - step;
        param.set_data(&probe)?;
        let minus = loss_fn()?.value();
        param.set_data(&base)?;

        let numeric = (plus - minus) / (2.0 * step);
        let err = relative_error(analytic[i], numeric);
        report.checked += 1;
        if err > report.max_relative_error {
            report.max_relative_error = err;
            report.worst_coordinate = i;
        }
    }
    Ok(report)
}
