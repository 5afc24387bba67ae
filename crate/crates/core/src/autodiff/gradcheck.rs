//! Central finite-difference checks for tape gradients.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Central differences `(f(x + eps·e_i) − f(x − eps·e_i)) / 2eps` for every
/// coordinate of `point`.
pub fn numeric_gradient<T: Scalar>(
    mut f: impl FnMut(&Tensor<T>) -> Result<T>,
    point: &Tensor<T>,
    eps: T,
) -> Result<Vec<T>> {
    let mut probe = point.clone();
    let two_eps = eps + eps;
    let mut out = Vec::with_capacity(point.numel());
    for i in 0..point.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        out.push((up - down) / two_eps);
    }
    Ok(out)
}

/// `max_i |a_i − n_i| / max(|a_i|, |n_i|, floor)`.
pub fn max_relative_error<T: Scalar>(analytic: &[T], numeric: &[T], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a.widen(), n.widen(), floor))
        .fold(0.0, f64::max)
}

#[inline]
pub(crate) fn relative_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Compares the tape gradient of the scalar function `f` at `point` with
/// central finite differences and returns the max relative error.
pub fn grad_check<T: Scalar>(f: impl Fn(&mut Tape<T>, Var) -> Result<Var>, point: &Tensor<T>, eps: T) -> Result<f64> {
    let mut tape = Tape::new();
    let x = tape.param(point.clone());
    let y = f(&mut tape, x)?;
    if tape.value(y).numel() != 1 {
        return Err(Error::Usage("grad_check needs a scalar-valued function".into()));
    }
    tape.backward(y)?;
    let analytic = tape.grad(x).expect("leaf gradient populated").to_vec();

    let numeric = numeric_gradient(
        |p| {
            let mut t = Tape::new();
            let x = t.constant(p.clone());
            let y = f(&mut t, x)?;
            Ok(t.value(y).data()[0])
        },
        point,
        eps,
    )?;
    Ok(max_relative_error(&analytic, &numeric, 1e-8))
}
