//! Central-difference verification of tape gradients.

use super::{AutodiffError, Tape, Tensor, Var};

/// Outcome of [`grad_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, abs_floor)`; the
    /// floor keeps vanishing gradients from amplifying rounding noise.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
    /// `(input, entry, analytic, numeric)` at the largest relative error.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, rel_tol: f64) -> bool {
        self.max_rel_error < rel_tol
    }
}

/// Compares reverse-mode gradients of `f` with respect to every entry of every
/// input against central differences with step `eps`.
///
/// `f` receives a fresh tape and its inputs as trainable leaves and must return
/// a scalar. It is evaluated `1 + 2·Σ|input|` times.
pub fn grad_check<F>(inputs: &[Tensor], eps: f64, abs_floor: f64, f: F) -> Result<GradCheckReport, AutodiffError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, AutodiffError>,
{
    let eval = |values: &[Tensor]| -> Result<f64, AutodiffError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).data()[0])
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut report = GradCheckReport { max_rel_error: 0.0, max_abs_error: 0.0, checked: 0, worst: None };
    let mut work = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        for j in 0..inputs[i].len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + eps;
            let up = eval(&work)?;
            work[i].data_mut()[j] = orig - eps;
            let down = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.data()[j];
            let abs = (a - numeric).abs();
            report.max_abs_error = report.max_abs_error.max(abs);
            let rel = abs / a.abs().max(numeric.abs()).max(abs_floor);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((i, j, a, numeric));
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
