//! Voxel-wise softmax over the channel axis and the matching mean
//! cross-entropy loss.
//!
//! The loss over a batch of dense predictions is the negative log-probability
//! of the true class, averaged over every (item, voxel) pair:
//!
//! `J = -(1 / (N * V)) * sum_n sum_v log p[n, y(n,v), v]`
//!
//! and its gradient w.r.t. the logits is `(p - onehot) / (N * V)`.

use crate::error::{Error, Result};
use crate::label::LabelBatch;
use crate::scalar::Scalar;
use crate::tensor::VolumeTensor;

/// Softmax across channels, independently at every (item, voxel).
/// Shifts by the per-voxel max before exponentiating.
pub fn voxel_softmax<T: Scalar>(logits: &VolumeTensor<T>) -> VolumeTensor<T> {
    let s = logits.shape();
    let v = s.voxels();
    let c = s.channels;
    let mut out = logits.clone();
    for n in 0..s.batch {
        let item = &mut out.item_mut(n)[..];
        for vi in 0..v {
            let mut max = item[vi];
            for ci in 1..c {
                let val = item[ci * v + vi];
                if val > max {
                    max = val;
                }
            }
            let mut sum = T::zero();
            for ci in 0..c {
                let e = (item[ci * v + vi] - max).exp();
                item[ci * v + vi] = e;
                sum += e;
            }
            for ci in 0..c {
                item[ci * v + vi] /= sum;
            }
        }
    }
    out
}

/// Mean cross-entropy of `probs` against integer labels, and its gradient
/// w.r.t. the logits that produced `probs`.
pub fn cross_entropy<T: Scalar>(probs: &VolumeTensor<T>, labels: &LabelBatch) -> Result<(T, VolumeTensor<T>)> {
    let s = probs.shape();
    let v = s.voxels();
    if labels.batch != s.batch || labels.dims != s.spatial() {
        return Err(Error::ShapeMismatch(format!(
            "cross entropy: probabilities {} vs labels {}x{:?}",
            s, labels.batch, labels.dims
        )));
    }
    let classes = s.channels;
    let norm = T::of_f64(1.0 / (s.batch as f64 * v as f64));
    let mut loss = T::zero();
    let mut grad = probs.clone();
    for n in 0..s.batch {
        let lab = labels.item(n);
        let item = grad.item_mut(n);
        for (vi, &y) in lab.iter().enumerate() {
            let y = y as usize;
            if y >= classes {
                return Err(Error::InvalidConfig(format!(
                    "label {y} out of range for {classes} classes (item {n}, voxel {vi})"
                )));
            }
            let p = item[y * v + vi];
            loss -= p.max(T::min_positive_value()).ln();
            item[y * v + vi] = p - T::one();
        }
        for g in item.iter_mut() {
            *g *= norm;
        }
    }
    Ok((loss * norm, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape5;

    #[test]
    fn softmax_rows_sum_to_one_and_order_is_preserved() {
        let logits =
            VolumeTensor::from_vec(Shape5::new(1, 3, 1, 1, 2), vec![1.0, -2.0, 0.5, 0.0, 2.0, 3.0]).unwrap();
        let p = voxel_softmax(&logits);
        for vi in 0..2 {
            let sum: f64 = (0..3).map(|c| p.data()[c * 2 + vi]).sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
        // voxel 0 logits: [1.0, 0.5, 2.0] -> class 2 largest
        assert!(p.data()[2 * 2] > p.data()[0]);
        assert!(p.data()[0] > p.data()[1 * 2]);
    }

    #[test]
    fn softmax_is_shift_invariant_and_finite_for_large_logits() {
        let a = VolumeTensor::from_vec(Shape5::new(1, 2, 1, 1, 1), vec![1000.0f64, 1001.0]).unwrap();
        let p = voxel_softmax(&a);
        assert!(p.data().iter().all(|v| v.is_finite()));
        let b = VolumeTensor::from_vec(Shape5::new(1, 2, 1, 1, 1), vec![0.0f64, 1.0]).unwrap();
        let q = voxel_softmax(&b);
        for (x, y) in p.data().iter().zip(q.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_probs_give_log_c_loss() {
        let c = 4;
        let probs = VolumeTensor::from_vec(Shape5::new(2, c, 1, 1, 3), vec![0.25; 2 * c * 3]).unwrap();
        let labels = LabelBatch::new(2, [1, 1, 3], vec![0, 1, 2, 3, 0, 1]).unwrap();
        let (loss, _) = cross_entropy(&probs, &labels).unwrap();
        assert!((loss - (c as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn gradient_is_probs_minus_onehot_normalised() {
        let logits = VolumeTensor::from_vec(Shape5::new(1, 2, 1, 1, 2), vec![0.3f64, -0.7, 1.1, 0.2]).unwrap();
        let p = voxel_softmax(&logits);
        let labels = LabelBatch::new(1, [1, 1, 2], vec![1, 0]).unwrap();
        let (_, g) = cross_entropy(&p, &labels).unwrap();
        let norm = 1.0 / 2.0;
        // voxel 0 true class 1, voxel 1 true class 0
        assert!((g.data()[0] - p.data()[0] * norm).abs() < 1e-12);
        assert!((g.data()[2] - (p.data()[2] - 1.0) * norm).abs() < 1e-12);
        assert!((g.data()[1] - (p.data()[1] - 1.0) * norm).abs() < 1e-12);
        assert!((g.data()[3] - p.data()[3] * norm).abs() < 1e-12);
        // gradient sums to zero over channels at each voxel
        for vi in 0..2 {
            let sum = g.data()[vi] + g.data()[2 + vi];
            assert!(sum.abs() < 1e-12);
        }
    }

    #[test]
    fn out_of_range_label_fails() {
        let probs = VolumeTensor::from_vec(Shape5::new(1, 2, 1, 1, 1), vec![0.5, 0.5]).unwrap();
        let labels = LabelBatch::new(1, [1, 1, 1], vec![2]).unwrap();
        assert!(cross_entropy(&probs, &labels).is_err());
    }
}
