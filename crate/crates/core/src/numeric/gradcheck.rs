//! Central finite-difference comparison of analytic gradients.
//!
//! The forward closure must be deterministic: dropout disabled, all
//! randomness fixed. It is re-invoked for every perturbed coordinate.

use crate::error::NumericError;
use crate::numeric::params::ParamSet;
use crate::numeric::tape::{NodeId, Tape};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_coordinate: usize,
    pub coords_checked: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tol
    }
}

/// Compare the tape's gradients against central differences with step `h`,
/// coordinate by coordinate. Entries whose analytic gradient is below 1e-8
/// in magnitude are compared absolutely; the rest relatively.
pub fn grad_check<F>(
    mut build: F,
    params: &mut ParamSet,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport, NumericError>
where
    F: FnMut(&ParamSet) -> Result<(Tape, NodeId), NumericError>,
{
    params.zero_grads();
    let (tape, loss) = build(params)?;
    tape.backward(loss, params)?;
    let analytic: Vec<Vec<f64>> = params.iter().map(|p| p.grad.data().to_vec()).collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_coordinate: 0,
        coords_checked: 0,
        tol,
    };

    let ids: Vec<_> = params.ids().collect();
    for (pi, id) in ids.iter().enumerate() {
        let n = params.param(*id).value.len();
        for k in 0..n {
            let original = params.param(*id).value.data()[k];

            params.param_mut(*id).value.data_mut()[k] = original + h;
            let (tape, loss) = build(params)?;
            let loss_plus = tape.scalar(loss)?;

            params.param_mut(*id).value.data_mut()[k] = original - h;
            let (tape, loss) = build(params)?;
            let loss_minus = tape.scalar(loss)?;

            params.param_mut(*id).value.data_mut()[k] = original;

            let numeric = (loss_plus - loss_minus) / (2.0 * h);
            let a = analytic[pi][k];
            let err = if a.abs() < 1e-8 {
                (a - numeric).abs()
            } else {
                (a - numeric).abs() / a.abs().max(numeric.abs())
            };
            report.coords_checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = params.param(*id).name.clone();
                report.worst_coordinate = k;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Matrix;

    #[test]
    fn linear_model_is_exact_to_float_noise() {
        let mut params = ParamSet::new();
        let id = params.register("w", Matrix::row_vector(vec![0.5, -1.2, 3.0]), true);
        let report = grad_check(
            |p| {
                let mut tape = Tape::inference();
                let w = tape.param(p, id);
                let c = tape.constant(Matrix::row_vector(vec![2.0, 1.0, -4.0]));
                let prod = tape.hadamard(w, c)?;
                let loss = tape.sum_all(prod);
                Ok((tape, loss))
            },
            &mut params,
            1e-5,
            1e-9,
        )
        .unwrap();
        assert!(report.passed(), "max rel error {}", report.max_rel_error);
        assert_eq!(report.coords_checked, 3);
    }

    #[test]
    fn corrupted_gradient_fails() {
        let mut params = ParamSet::new();
        let id = params.register("w", Matrix::row_vector(vec![1.0, 2.0]), true);
        let report = grad_check(
            |p| {
                let mut tape = Tape::inference();
                let w = tape.param(p, id);
                // loss that ignores one coordinate while the closure below
                // perturbs both; the analytic gradient of the ignored
                // coordinate is correct, so corrupt it by hand instead
                let sq = tape.hadamard(w, w)?;
                let loss = tape.sum_all(sq);
                Ok((tape, loss))
            },
            &mut params,
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed());

        // negative control: deliberately wrong analytic gradient
        params.zero_grads();
        let mut tape = Tape::inference();
        let w = tape.param(&params, id);
        let sq = tape.hadamard(w, w).unwrap();
        let loss = tape.sum_all(sq);
        tape.backward(loss, &mut params).unwrap();
        params.param_mut(id).grad.set(0, 0, 123.0);
        let a = params.param(id).grad.get(0, 0);
        let numeric = 2.0 * params.param(id).value.get(0, 0);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs());
        assert!(rel > 1e-6);
    }
}
