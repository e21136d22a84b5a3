//! Central finite-difference verification of analytic gradients.

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Compare the analytic gradient of `f` at `point` against central finite
/// differences with the given `step`.
///
/// Returns the maximum over coordinates of
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
///
/// `f` must be deterministic and produce a scalar. Intended to run in high
/// precision (`f64`), where a step of ~1e-5 resolves the quadratic truncation
/// error well above roundoff.
pub fn gradcheck<T, F>(f: F, point: &Tensor<T>, step: T) -> Result<f64>
where
    T: Scalar,
    F: Fn(&Tensor<T>) -> Result<Tensor<T>>,
{
    if step <= T::zero() {
        return Err(Error::InvalidArgument("gradcheck step must be > 0".into()));
    }
    let base = point.to_vec();
    let shape = point.shape().to_vec();

    let x = Tensor::param(&shape, base.clone())?;
    let out = f(&x)?;
    if out.numel() != 1 {
        return Err(Error::NonScalarLoss {
            elements: out.numel(),
        });
    }
    if !out.item()?.to_f64().is_finite() {
        return Err(Error::NonFinite("gradcheck function output".into()));
    }
    out.backward()?;
    let analytic = x
        .grad()
        .ok_or_else(|| Error::InvalidArgument("function does not depend on input".into()))?;

    let eval = |values: Vec<T>| -> Result<f64> {
        let probe = Tensor::from_vec(&shape, values)?;
        let y = f(&probe)?.item()?.to_f64();
        if !y.is_finite() {
            return Err(Error::NonFinite("gradcheck probe output".into()));
        }
        Ok(y)
    };

    let floor = 1e-8;
    let h = step.to_f64();
    let mut max_rel = 0.0f64;
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] = plus[i] + step;
        let mut minus = base.clone();
        minus[i] = minus[i] - step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let a = analytic[i].to_f64();
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}
