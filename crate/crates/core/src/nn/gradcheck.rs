//! Central finite-difference gradient checks.

use super::tape::{Mat, Tape, Var};
use crate::error::{Error, Result};

/// Outcome of a gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `|analytic - numeric| / max(|analytic|, |numeric|, floor)`, maximized
    /// over all checked entries.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// `(input, row, col)` of the worst entry.
    pub worst: (usize, usize, usize),
    pub entries: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Lower bound on the relative-error denominator, so entries whose true
    /// gradient is ~0 are judged on absolute error.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            floor: 1e-6,
        }
    }
}

/// Compares the tape gradient of the scalar `f(inputs)` against central
/// differences with step `1e-5`.
pub fn grad_check<F>(f: F, inputs: &[Mat], tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    grad_check_with(f, inputs, tolerance, GradCheckOptions::default())
}

pub fn grad_check_with<F>(
    f: F,
    inputs: &[Mat],
    tolerance: f64,
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Mat]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.input(v.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.scalar(out);
        if !v.is_finite() {
            return Err(Error::CheckFailed(format!("non-finite function value {v}")));
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| tape.input(v.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Mat> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, x)| grads.get(v, x.dim()))
        .collect();
    if analytic.iter().flat_map(|g| g.iter()).any(|g| !g.is_finite()) {
        return Err(Error::CheckFailed("non-finite analytic gradient".into()));
    }

    let mut work: Vec<Mat> = inputs.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: (0, 0, 0),
        entries: 0,
        tolerance,
    };
    for k in 0..inputs.len() {
        for ((r, c), &orig) in inputs[k].indexed_iter() {
            work[k][[r, c]] = orig + opts.step;
            let plus = eval(&work)?;
            work[k][[r, c]] = orig - opts.step;
            let minus = eval(&work)?;
            work[k][[r, c]] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic[k][[r, c]];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(opts.floor);
            report.entries += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (k, r, c);
            }
        }
    }
    Ok(report)
}
