//! Central finite-difference validation of tape gradients.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Compare the tape gradient of a scalar-valued function against central
/// finite differences at `point`. Returns the maximum over coordinates of
/// |analytic - fd| / (|analytic| + 1e-8).
pub fn grad_check<F>(f: F, point: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let eval = |p: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.constant(p.clone());
        let y = f(&mut tape, x)?;
        let v = tape.value(y).item()?;
        if !v.is_finite() {
            return Err(Error::Contract(format!("grad_check: non-finite evaluation {v}")));
        }
        Ok(v)
    };

    // Analytic pass.
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone().with_requires_grad(true));
    let y = f(&mut tape, x)?;
    if tape.value(y).numel() != 1 {
        return Err(Error::Contract("grad_check: function must be scalar-valued".into()));
    }
    if !tape.value(y).item()?.is_finite() {
        return Err(Error::Contract("grad_check: non-finite evaluation".into()));
    }
    tape.backward(y)?;
    let analytic = tape.grad(x).unwrap_or_else(|| Tensor::zeros(point.shape()));

    let mut worst = 0.0f64;
    for i in 0..point.numel() {
        let mut plus = point.clone();
        plus.data_mut()[i] += h;
        let mut minus = point.clone();
        minus.data_mut()[i] -= h;
        let fd = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
        let a = analytic.data()[i];
        let err = (a - fd).abs() / (a.abs() + 1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Like [`grad_check`] but normalized by the gradient's max magnitude:
/// max_i |analytic_i - fd_i| / (max_j |analytic_j| + 1e-8).
///
/// For deep compositions some coordinates have true gradients near zero;
/// there the per-coordinate quotient measures only finite-difference
/// rounding noise (~1e-11 against the 1e-8 floor), so whole-network checks
/// use this vector-relative form instead.
pub fn grad_check_norm<F>(f: F, point: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let eval = |p: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.constant(p.clone());
        let y = f(&mut tape, x)?;
        let v = tape.value(y).item()?;
        if !v.is_finite() {
            return Err(Error::Contract(format!("grad_check: non-finite evaluation {v}")));
        }
        Ok(v)
    };
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone().with_requires_grad(true));
    let y = f(&mut tape, x)?;
    if tape.value(y).numel() != 1 {
        return Err(Error::Contract("grad_check: function must be scalar-valued".into()));
    }
    tape.backward(y)?;
    let analytic = tape.grad(x).unwrap_or_else(|| Tensor::zeros(point.shape()));
    let scale = analytic.data().iter().map(|v| v.abs()).fold(0.0, f64::max) + 1e-8;

    let mut worst = 0.0f64;
    for i in 0..point.numel() {
        let mut plus = point.clone();
        plus.data_mut()[i] += h;
        let mut minus = point.clone();
        minus.data_mut()[i] -= h;
        let fd = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
        worst = worst.max((analytic.data()[i] - fd).abs() / scale);
    }
    Ok(worst)
}
