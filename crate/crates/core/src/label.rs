//! Integer label volumes and batches of label cores used during training.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// A whole-subject label map, one `u8` class id per voxel, row-major with the
/// x axis fastest (same spatial layout as [`crate::tensor::VolumeTensor`]).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelVolume {
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub data: Vec<u8>,
}

impl LabelVolume {
    pub fn new(dims: [usize; 3], spacing_mm: [f64; 3], data: Vec<u8>) -> Result<Self> {
        let n = dims[0] * dims[1] * dims[2];
        if data.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "label volume has {} voxels but dims {:?} need {}",
                data.len(),
                dims,
                n
            )));
        }
        Ok(LabelVolume { dims, spacing_mm, data })
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    #[inline]
    pub fn at(&self, z: usize, y: usize, x: usize) -> u8 {
        self.data[self.index(z, y, x)]
    }

    /// Number of voxels carrying `class`.
    pub fn class_count(&self, class: u8) -> usize {
        self.data.iter().filter(|&&v| v == class).count()
    }

    /// Highest class id present plus one, at least `min_classes`.
    pub fn num_classes(&self, min_classes: usize) -> usize {
        let max = self.data.iter().copied().max().unwrap_or(0) as usize + 1;
        max.max(min_classes)
    }
}

/// A batch of cubic label cores, one per training sample. Layout is
/// `[batch, depth, height, width]`, x fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelBatch {
    pub batch: usize,
    pub dims: [usize; 3],
    pub data: Vec<u8>,
}

impl LabelBatch {
    pub fn new(batch: usize, dims: [usize; 3], data: Vec<u8>) -> Result<Self> {
        let n = batch * dims[0] * dims[1] * dims[2];
        if data.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "label batch has {} voxels but {}x{:?} needs {}",
                data.len(),
                batch,
                dims,
                n
            )));
        }
        Ok(LabelBatch { batch, dims, data })
    }

    pub fn voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    /// Labels of one batch item.
    pub fn item(&self, n: usize) -> &[u8] {
        let v = self.voxels();
        &self.data[n * v..(n + 1) * v]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_volume_checks_len() {
        assert!(LabelVolume::new([2, 2, 2], [1.0; 3], vec![0; 8]).is_ok());
        assert!(LabelVolume::new([2, 2, 2], [1.0; 3], vec![0; 9]).is_err());
    }

    #[test]
    fn class_count_and_classes() {
        let v = LabelVolume::new([1, 2, 2], [1.0; 3], vec![0, 1, 3, 1]).unwrap();
        assert_eq!(v.class_count(1), 2);
        assert_eq!(v.class_count(2), 0);
        assert_eq!(v.num_classes(2), 4);
        assert_eq!(v.num_classes(6), 6);
    }

    #[test]
    fn batch_item_slices() {
        let b = LabelBatch::new(2, [1, 1, 3], vec![1, 2, 3, 4, 5, 6]).unwrap();
        assert_eq!(b.item(0), &[1, 2, 3]);
        assert_eq!(b.item(1), &[4, 5, 6]);
    }
}
