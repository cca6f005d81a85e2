//! Central finite-difference oracle for tape gradients.

use rayon::prelude::*;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Coordinates whose analytic gradient is below this magnitude are compared
/// absolutely against the same bound instead of relatively.
pub const ABSOLUTE_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|)` over
    /// coordinates with `|analytic| ≥ 1e-8`.
    pub max_rel_err: f64,
    /// Largest `|analytic − numeric|` over the remaining coordinates.
    pub max_abs_err_small: f64,
    /// `(input, flat index)` of the coordinate with the largest relative error.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    pub pass: bool,
}

/// Compares the tape gradient of scalar `f` against central differences
/// with step `h = 1e-5·max(1, |x|)` on every coordinate of every input.
///
/// `f` is evaluated once on a tape whose leaves require gradients and then
/// twice per coordinate on fresh tapes (in parallel).
pub fn finite_diff_check<F>(f: F, inputs: &[Tensor], rel_tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var> + Sync,
{
    if inputs.iter().any(|t| !t.is_finite()) {
        return Err(Error::Parameter(
            "finite_diff_check inputs must be finite".into(),
        ));
    }

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    if tape.value(loss).len() != 1 {
        return Err(Error::Contract(format!(
            "finite_diff_check needs a scalar function, found shape {:?}",
            tape.shape(loss)
        )));
    }
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|v| grads.get(*v).cloned().expect("leaf requires grad"))
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.check_finite()?;
        tape.value(out).item()
    };

    let coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j)))
        .collect();

    let numeric: Vec<f64> = coords
        .par_iter()
        .map(|&(i, j)| {
            let mut local = inputs.to_vec();
            let x = inputs[i].data()[j];
            let h = 1e-5 * x.abs().max(1.0);
            local[i].data_mut()[j] = x + h;
            let plus = eval(&local)?;
            local[i].data_mut()[j] = x - h;
            let minus = eval(&local)?;
            Ok((plus - minus) / (2.0 * h))
        })
        .collect::<Result<_>>()?;

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err_small: 0.0,
        worst: None,
        checked: coords.len(),
        pass: true,
    };
    for (&(i, j), n) in coords.iter().zip(&numeric) {
        let a = analytic[i].data()[j];
        let diff = (a - n).abs();
        if a.abs() < ABSOLUTE_FLOOR {
            report.max_abs_err_small = report.max_abs_err_small.max(diff);
        } else {
            let rel = diff / a.abs().max(n.abs());
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((i, j));
            }
        }
    }
    report.pass = report.max_rel_err <= rel_tol && report.max_abs_err_small <= ABSOLUTE_FLOOR;
    Ok(report)
}
