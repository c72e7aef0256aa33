//! Inverted dropout.
//!
//! During training each element is zeroed independently with probability
//! `rate` and survivors are scaled by `1 / (1 - rate)`, so the expected value
//! is unchanged and inference needs no rescaling. With `rate == 0`, or when
//! inactive, the op is the identity and no mask is produced.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::VolumeTensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Which elements survived one dropout draw, for replay in the backward pass.
#[derive(Clone, Debug)]
pub struct DropoutMask {
    pub keep: Vec<bool>,
    /// `1 / (1 - rate)` as f64; applied to surviving elements.
    pub scale: f64,
}

/// `active` is true only in the training phase. The mask is drawn from a
/// ChaCha stream seeded by `seed`, so a (seed, shape) pair always produces
/// the same mask.
pub fn dropout_forward<T: Scalar>(
    input: &VolumeTensor<T>,
    rate: f64,
    active: bool,
    seed: u64,
) -> Result<(VolumeTensor<T>, Option<DropoutMask>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidConfig(format!("dropout rate must be in [0, 1), got {rate}")));
    }
    if !active || rate == 0.0 {
        return Ok((input.clone(), None));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (1.0 - rate);
    let scale_t = T::of_f64(scale);
    let mut out = input.clone();
    let mut keep = vec![false; out.data().len()];
    for (v, k) in out.data_mut().iter_mut().zip(keep.iter_mut()) {
        if rng.gen::<f64>() < rate {
            *v = T::zero();
        } else {
            *k = true;
            *v *= scale_t;
        }
    }
    Ok((out, Some(DropoutMask { keep, scale })))
}

pub fn dropout_backward<T: Scalar>(grad_out: &VolumeTensor<T>, mask: &DropoutMask) -> Result<VolumeTensor<T>> {
    if grad_out.data().len() != mask.keep.len() {
        return Err(Error::ShapeMismatch(format!(
            "dropout backward: gradient has {} elements, mask {}",
            grad_out.data().len(),
            mask.keep.len()
        )));
    }
    let scale_t = T::of_f64(mask.scale);
    let mut d_in = grad_out.clone();
    for (v, &k) in d_in.data_mut().iter_mut().zip(mask.keep.iter()) {
        if k {
            *v *= scale_t;
        } else {
            *v = T::zero();
        }
    }
    Ok(d_in)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape5;

    fn ones(n: usize) -> VolumeTensor<f64> {
        VolumeTensor::from_vec(Shape5::new(1, 1, 1, 1, n), vec![1.0; n]).unwrap()
    }

    #[test]
    fn inactive_or_zero_rate_is_identity() {
        let t = ones(16);
        let (out, mask) = dropout_forward(&t, 0.5, false, 9).unwrap();
        assert_eq!(out, t);
        assert!(mask.is_none());
        let (out, mask) = dropout_forward(&t, 0.0, true, 9).unwrap();
        assert_eq!(out, t);
        assert!(mask.is_none());
    }

    #[test]
    fn survivors_are_rescaled_and_replayable() {
        let t = ones(1000);
        let (out, mask) = dropout_forward(&t, 0.25, true, 42).unwrap();
        let mask = mask.unwrap();
        let kept = mask.keep.iter().filter(|&&k| k).count();
        // roughly 75% survive
        assert!((650..850).contains(&kept), "kept {kept}");
        for (v, &k) in out.data().iter().zip(&mask.keep) {
            if k {
                assert!((v - 1.0 / 0.75).abs() < 1e-12);
            } else {
                assert_eq!(*v, 0.0);
            }
        }
        // same seed, same mask
        let (out2, _) = dropout_forward(&t, 0.25, true, 42).unwrap();
        assert_eq!(out.data(), out2.data());
    }

    #[test]
    fn backward_routes_through_mask() {
        let t = ones(64);
        let (_, mask) = dropout_forward(&t, 0.5, true, 3).unwrap();
        let mask = mask.unwrap();
        let g = ones(64);
        let d = dropout_backward(&g, &mask).unwrap();
        for (v, &k) in d.data().iter().zip(&mask.keep) {
            assert_eq!(*v, if k { 2.0 } else { 0.0 });
        }
    }

    #[test]
    fn rejects_rate_one() {
        let t = ones(4);
        assert!(dropout_forward(&t, 1.0, true, 0).is_err());
    }
}
