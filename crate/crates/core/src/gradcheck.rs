//! Central finite-difference gradient checking for tape-built scalar losses.

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    /// Norm-wise relative error `‖a − n‖ / max(‖a‖ + ‖n‖, 1e-12)` per input.
    pub rel_errors: Vec<f64>,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.rel_errors.iter().copied().fold(0.0, f64::max)
    }
}

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let norm = |v: &[f64]| v.iter().map(|e| e * e).sum::<f64>().sqrt();
    diff / (norm(analytic) + norm(numeric)).max(1e-12)
}

/// Compares reverse-mode gradients of `build` against central differences
/// with step `step`. `build` receives one `Var` per input and must return a
/// scalar.
pub fn gradcheck<F>(inputs: &[Tensor], step: f64, build: F) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
        .collect();

    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut perturbed = inputs.to_vec();
    let mut rel_errors = Vec::with_capacity(inputs.len());
    for (which, grad) in analytic.iter().enumerate() {
        let mut numeric = vec![0.0; grad.len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = perturbed[which].data()[j];
            perturbed[which].data_mut()[j] = orig + step;
            let up = eval(&perturbed)?;
            perturbed[which].data_mut()[j] = orig - step;
            let down = eval(&perturbed)?;
            perturbed[which].data_mut()[j] = orig;
            *slot = (up - down) / (2.0 * step);
        }
        rel_errors.push(relative_error(grad, &numeric));
    }
    Ok(GradcheckReport { rel_errors })
}
