//! Finite-difference validation of tape gradients.

use crate::error::Result;

use super::tape::{Tape, Var};
use super::Tensor;

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest relative error over all checked coordinates.
    pub max_rel_err: f64,
    pub pass: bool,
    /// Set when the function evaluated an activation at a non-differentiable
    /// point; the sample cannot be checked meaningfully.
    pub skipped_kink: bool,
    pub n_checked: usize,
    pub message: String,
}

/// Compare the tape gradient of a scalar function against central finite
/// differences at `point`.
///
/// `f` must be deterministic: any randomness has to be frozen by the caller
/// (common random numbers), otherwise the difference quotient is meaningless.
pub fn grad_check<F>(f: F, point: &Tensor, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let x = tape.leaf(point.clone(), true);
    let out = f(&tape, x)?;
    let out_shape = out.shape();
    if !out_shape.is_empty() {
        return Err(crate::error::Error::shape(
            "grad_check",
            format!("function must be scalar-valued, got {out_shape:?}"),
        ));
    }
    if tape.kink_hit() {
        return Ok(GradCheckReport {
            max_rel_err: f64::NAN,
            pass: true,
            skipped_kink: true,
            n_checked: 0,
            message: "nondifferentiable sample skipped".to_string(),
        });
    }
    let mut grads = tape.backward(out)?;
    let analytic = grads
        .take(x)
        .unwrap_or_else(|| Tensor::zeros(point.shape()));

    let eval = |p: &Tensor| -> Result<f64> {
        let tape = Tape::new();
        let x = tape.leaf(p.clone(), true);
        f(&tape, x)?.value().as_scalar()
    };

    let mut max_rel = 0.0f64;
    let mut perturbed = point.clone();
    for i in 0..point.len() {
        let orig = point.data()[i];
        let step = h * orig.abs().max(1.0);
        perturbed.data_mut()[i] = orig + step;
        let up = eval(&perturbed)?;
        perturbed.data_mut()[i] = orig - step;
        let down = eval(&perturbed)?;
        perturbed.data_mut()[i] = orig;
        let fd = (up - down) / (2.0 * step);
        let a = analytic.data()[i];
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
        max_rel = max_rel.max(rel);
    }
    let pass = max_rel <= tol;
    Ok(GradCheckReport {
        max_rel_err: max_rel,
        pass,
        skipped_kink: false,
        n_checked: point.len(),
        message: if pass {
            format!("max relative error {max_rel:.3e} within tolerance {tol:.1e}")
        } else {
            format!("max relative error {max_rel:.3e} exceeds tolerance {tol:.1e}")
        },
    })
}
