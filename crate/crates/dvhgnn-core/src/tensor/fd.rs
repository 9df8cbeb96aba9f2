//! Central finite differences, the oracle every backward rule is checked
//! against. Deliberately knows nothing about the tape: it only re-runs the
//! forward closure with nudged inputs.

use crate::{Result, Scalar};

use super::TensorBase;

/// Gradient of a scalar-valued function at `x`, one coordinate at a time:
/// `(f(x + h e_i) - f(x - h e_i)) / 2h`.
pub fn finite_diff_grad<T, F>(f: F, x: &TensorBase<T>, h: T) -> Result<TensorBase<T>>
where
    T: Scalar,
    F: Fn(&TensorBase<T>) -> Result<TensorBase<T>>,
{
    let coords: Vec<usize> = (0..x.numel()).collect();
    let g = finite_diff_grad_at(f, x, &coords, h)?;
    TensorBase::from_vec(x.shape().to_vec(), g)
}

/// Same estimate restricted to chosen flat coordinates; the cheap form for
/// large parameter tensors.
pub fn finite_diff_grad_at<T, F>(f: F, x: &TensorBase<T>, coords: &[usize], h: T) -> Result<Vec<T>>
where
    T: Scalar,
    F: Fn(&TensorBase<T>) -> Result<TensorBase<T>>,
{
    let two_h = h + h;
    let mut out = Vec::with_capacity(coords.len());
    for &i in coords {
        let v = x.data()[i];
        let hi = f(&x.with_element(i, v + h)?)?.scalar_value()?;
        let lo = f(&x.with_element(i, v - h)?)?.scalar_value()?;
        out.push((hi - lo) / two_h);
    }
    Ok(out)
}
