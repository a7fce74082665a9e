use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Relative error used throughout gradient checking:
/// `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
pub fn relative_error<T: Scalar>(analytic: T, numeric: T) -> T {
    (analytic - numeric).abs() / T::lit(1e-8).max(analytic.abs() + numeric.abs())
}

/// Compares the reverse-mode gradient of the scalar function `f` at `x` with
/// central finite differences and returns the largest relative error.
pub fn grad_check<T, F>(f: F, x: &Tensor<T>, eps: T) -> Result<T>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    if !(eps > T::zero() && eps <= T::lit(1e-3)) {
        return Err(Error::Config(format!("eps must lie in (0, 1e-3], got {eps}")));
    }
    let mut tape = Tape::new();
    let input = tape.param(x.clone());
    let out = f(&mut tape, input)?;
    let shape = tape.value(out)?.shape().to_vec();
    if tape.value(out)?.len() != 1 {
        return Err(Error::NonScalarLoss { shape });
    }
    let grads = tape.backward(out)?;
    let analytic = grads
        .get(input)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |point: Tensor<T>| -> Result<T> {
        let mut tape = Tape::new();
        let v = tape.param(point);
        let out = f(&mut tape, v)?;
        let t = tape.value(out)?;
        t.item().ok_or_else(|| Error::NonScalarLoss {
            shape: t.shape().to_vec(),
        })
    };

    let two = T::lit(2.0);
    let mut worst = T::zero();
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (two * eps);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}
