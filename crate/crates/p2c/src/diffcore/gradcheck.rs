//! Central-finite-difference verification of the tape's backward rules.

use super::{DiffError, Tape, Tensor, Var};

/// Step size for central differences.
pub const FD_STEP: f64 = 1e-5;

/// |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / f64::max(1e-8, analytic.abs() + numeric.abs())
}

#[derive(Debug, Clone)]
pub struct ParamGradCheck {
    pub name: String,
    pub max_rel_err: f64,
    /// flat index of the worst entry
    pub worst_entry: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    /// relative error of every entry, flat order
    pub entry_rel_errs: Vec<f64>,
    /// analytic gradient of every entry, flat order
    pub entry_analytic: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamGradCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_err)
            .fold(0.0, f64::max)
    }
}

/// Check analytic gradients of a scalar loss against central differences.
///
/// `build` must construct the loss graph deterministically from the parameter
/// leaves it is handed (same order as `values`); any randomness has to be
/// frozen into the closure beforehand. The analytic side runs one backward
/// pass; the numeric side re-evaluates the loss at `value +- FD_STEP` per
/// entry. A parameter the loss does not depend on checks as exactly zero.
pub fn check_gradients<F>(
    names: &[&str],
    values: &mut [Tensor],
    build: F,
) -> Result<GradCheckReport, DiffError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, DiffError>,
{
    assert_eq!(names.len(), values.len());

    let eval = |values: &[Tensor]| -> Result<f64, DiffError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.param(t.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        let v = tape.value(loss).item();
        if !v.is_finite() {
            return Err(DiffError::NonFinite {
                context: tape
                    .first_non_finite()
                    .unwrap_or_else(|| "loss".to_string()),
            });
        }
        Ok(v)
    };

    // Analytic gradients from one backward pass.
    let mut tape = Tape::new();
    let vars: Vec<Var> = values.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    if !tape.value(loss).item().is_finite() {
        return Err(DiffError::NonFinite {
            context: tape
                .first_non_finite()
                .unwrap_or_else(|| "loss".to_string()),
        });
    }
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|&v| grads.get_or_zeros(v, &tape))
        .collect();
    drop(tape);

    let mut params = Vec::with_capacity(names.len());
    for (p, name) in names.iter().enumerate() {
        let mut max_rel = 0.0;
        let mut worst = (0, 0.0, 0.0);
        let mut entry_rel_errs = Vec::with_capacity(values[p].numel());
        for j in 0..values[p].numel() {
            let orig = values[p].data()[j];
            values[p].data_mut()[j] = orig + FD_STEP;
            let f_plus = eval(values)?;
            values[p].data_mut()[j] = orig - FD_STEP;
            let f_minus = eval(values)?;
            values[p].data_mut()[j] = orig;
            let numeric = (f_plus - f_minus) / (2.0 * FD_STEP);
            let a = analytic[p].data()[j];
            let rel = relative_error(a, numeric);
            entry_rel_errs.push(rel);
            if rel > max_rel {
                max_rel = rel;
                worst = (j, a, numeric);
            }
        }
        params.push(ParamGradCheck {
            name: name.to_string(),
            max_rel_err: max_rel,
            worst_entry: worst.0,
            worst_analytic: worst.1,
            worst_numeric: worst.2,
            entry_rel_errs,
            entry_analytic: analytic[p].data().to_vec(),
        });
    }
    Ok(GradCheckReport { params })
}
