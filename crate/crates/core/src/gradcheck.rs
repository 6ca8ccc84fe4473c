//! Central finite-difference verification of tape gradients.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Outcome of [`grad_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Max over checked entries of `|analytic − numeric| / max(1, |analytic|, |numeric|)`.
    pub max_rel_error: f64,
    pub checked: usize,
    /// Entries excluded because a perturbation touched a leaky-ReLU kink.
    pub kink_skipped: usize,
    /// `(parameter index, entry index)` of the worst entry.
    pub worst: Option<(usize, usize)>,
}

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<(f64, Vec<i8>)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p)).collect();
    let loss = f(&mut tape, &vars)?;
    let value = scalar_loss(&tape, loss)?;
    Ok((value, tape.kink_signature().to_vec()))
}

fn scalar_loss(tape: &Tape, loss: Var) -> Result<f64> {
    let t = tape.value(loss);
    if t.numel() != 1 {
        return Err(Error::shape("grad_check", format!("loss must be scalar, got {:?}", t.shape())));
    }
    let v = t.data()[0];
    if !v.is_finite() {
        return Err(Error::Numeric(format!("loss is not finite ({v})")));
    }
    Ok(v)
}

/// Compares reverse-mode gradients of `f` against central differences for
/// every entry of every tensor in `params`.
///
/// `f` must be deterministic: any dropout has to use a fixed seed.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if eps <= 0.0 || !eps.is_finite() {
        return Err(Error::Config(format!("finite-difference step must be positive, got {eps}")));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p)).collect();
    let loss = f(&mut tape, &vars)?;
    scalar_loss(&tape, loss)?;
    let base_kinks = tape.kink_signature().to_vec();
    let grads = tape.backward(loss)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        kink_skipped: 0,
        worst: None,
    };
    let mut probe = params.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let zeros = vec![0.0; params[pi].numel()];
        let analytic = grads.get(*var).unwrap_or(&zeros);
        for ei in 0..params[pi].numel() {
            let orig = params[pi].data()[ei];
            probe[pi].data_mut()[ei] = orig + eps;
            let (plus, kinks_plus) = evaluate(&f, &probe)?;
            probe[pi].data_mut()[ei] = orig - eps;
            let (minus, kinks_minus) = evaluate(&f, &probe)?;
            probe[pi].data_mut()[ei] = orig;

            let at_kink = base_kinks.contains(&0) || kinks_plus != base_kinks || kinks_minus != base_kinks;
            if at_kink {
                report.kink_skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[ei];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((pi, ei));
            }
        }
    }
    Ok(report)
}
