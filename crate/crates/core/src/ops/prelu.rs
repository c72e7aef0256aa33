//! Parametric ReLU with one learned slope per channel.
//!
//! `f(x) = x` for `x >= 0`, `a_c * x` otherwise, where `c` is the channel of
//! `x`. The slopes are parameters and receive gradients.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::VolumeTensor;

pub fn prelu_forward<T: Scalar>(input: &VolumeTensor<T>, slopes: &[T]) -> Result<VolumeTensor<T>> {
    let s = input.shape();
    if slopes.len() != s.channels {
        return Err(Error::ShapeMismatch(format!(
            "prelu has {} slopes but tensor has {} channels",
            slopes.len(),
            s.channels
        )));
    }
    let mut out = input.clone();
    for n in 0..s.batch {
        for c in 0..s.channels {
            let a = slopes[c];
            for v in out.channel_mut(n, c) {
                if *v < T::zero() {
                    *v *= a;
                }
            }
        }
    }
    Ok(out)
}

/// Returns `(d_input, d_slopes)` given the pre-activation tensor and the
/// gradient w.r.t. the activation output.
pub fn prelu_backward<T: Scalar>(
    preact: &VolumeTensor<T>,
    slopes: &[T],
    grad_out: &VolumeTensor<T>,
) -> Result<(VolumeTensor<T>, Vec<T>)> {
    let s = preact.shape();
    if grad_out.shape() != s {
        return Err(Error::ShapeMismatch(format!(
            "prelu backward: gradient {} vs activation {}",
            grad_out.shape(),
            s
        )));
    }
    if slopes.len() != s.channels {
        return Err(Error::ShapeMismatch(format!(
            "prelu has {} slopes but tensor has {} channels",
            slopes.len(),
            s.channels
        )));
    }
    let mut d_in = VolumeTensor::zeros(s);
    let mut d_slopes = vec![T::zero(); s.channels];
    for n in 0..s.batch {
        for c in 0..s.channels {
            let a = slopes[c];
            let x = preact.channel(n, c);
            let g = grad_out.channel(n, c);
            let v = s.voxels();
            let base = (n * s.channels + c) * v;
            let d = &mut d_in.data_mut()[base..base + v];
            let mut ds = T::zero();
            for i in 0..v {
                if x[i] >= T::zero() {
                    d[i] = g[i];
                } else {
                    d[i] = g[i] * a;
                    ds += g[i] * x[i];
                }
            }
            d_slopes[c] += ds;
        }
    }
    Ok((d_in, d_slopes))
}
