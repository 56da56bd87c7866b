//! Finite-difference gradient checking.

use super::{Scalar, Tape, Tensor, Val};
use crate::error::{Error, Result};

/// Compare the reverse-mode gradient of a scalar-valued function against
/// central differences, coordinate by coordinate.
///
/// Returns the largest relative error, where the relative error uses the
/// denominator `max(1, |analytic|, |numeric|)`. Run in 64-bit mode with
/// `h` around `1e-3` for meaningful comparisons.
pub fn grad_check<S, F>(f: F, x: &Tensor<S>, h: f64) -> Result<f64>
where
    S: Scalar,
    F: Fn(&mut Tape<S>, Val) -> Result<Val>,
{
    let mut tape = Tape::new();
    let vx = tape.var(x.clone());
    let root = f(&mut tape, vx)?;
    if tape.value(root).len() != 1 {
        return Err(Error::contract(format!(
            "grad_check target must produce a scalar, got shape {:?}",
            tape.value(root).shape()
        )));
    }
    let grads = tape.backward(root)?;
    let analytic = grads.get_or_zeros(vx, &tape);

    let eval = |data: Vec<S>| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.var(Tensor::from_vec(x.shape().to_vec(), data)?);
        let r = f(&mut t, v)?;
        Ok(t.value(r).item()?.as_f64())
    };

    let base = x.data();
    let mut max_rel = 0.0f64;
    for i in 0..base.len() {
        let mut plus = base.to_vec();
        let mut minus = base.to_vec();
        plus[i] = plus[i] + S::from_f64(h);
        minus[i] = minus[i] - S::from_f64(h);
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let a = analytic.data()[i].as_f64();
        let denom = 1.0f64.max(a.abs()).max(numeric.abs());
        let rel = (a - numeric).abs() / denom;
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}
