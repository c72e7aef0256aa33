//! Five-axis dense tensors for volumetric batches.
//!
//! Layout is row-major `[batch, channels, depth, height, width]` with the
//! width axis fastest. Every operator in [`crate::ops`] assumes this layout,
//! which keeps x-runs contiguous so convolution lowering and padding can work
//! on whole rows at a time.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};

/// Shape of a [`VolumeTensor`]: `(batch, channels, depth, height, width)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape5 {
    pub batch: usize,
    pub channels: usize,
    pub depth: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape5 {
    pub fn new(batch: usize, channels: usize, depth: usize, height: usize, width: usize) -> Self {
        Shape5 { batch, channels, depth, height, width }
    }

    /// Total element count.
    pub fn len(&self) -> usize {
        self.batch * self.channels * self.depth * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Voxels in one channel of one item.
    pub fn voxels(&self) -> usize {
        self.depth * self.height * self.width
    }

    pub fn spatial(&self) -> [usize; 3] {
        [self.depth, self.height, self.width]
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, z: usize, y: usize, x: usize) -> usize {
        debug_assert!(n < self.batch && c < self.channels && z < self.depth && y < self.height && x < self.width);
        (((n * self.channels + c) * self.depth + z) * self.height + y) * self.width + x
    }
}

impl std::fmt::Display for Shape5 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "[{}, {}, {}, {}, {}]", self.batch, self.channels, self.depth, self.height, self.width)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VolumeTensor<T> {
    shape: Shape5,
    data: Vec<T>,
}

impl<T: Scalar> VolumeTensor<T> {
    pub fn zeros(shape: Shape5) -> Self {
        VolumeTensor { shape, data: vec![T::zero(); shape.len()] }
    }

    pub fn from_vec(shape: Shape5, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::ShapeMismatch(format!(
                "tensor data has {} elements but shape {} needs {}",
                data.len(),
                shape,
                shape.len()
            )));
        }
        Ok(VolumeTensor { shape, data })
    }

    pub fn shape(&self) -> Shape5 {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, z: usize, y: usize, x: usize) -> T {
        self.data[self.shape.index(n, c, z, y, x)]
    }

    #[inline]
    pub fn at_mut(&mut self, n: usize, c: usize, z: usize, y: usize, x: usize) -> &mut T {
        let i = self.shape.index(n, c, z, y, x);
        &mut self.data[i]
    }

    /// All elements of one batch item.
    pub fn item(&self, n: usize) -> &[T] {
        let per = self.shape.channels * self.shape.voxels();
        &self.data[n * per..(n + 1) * per]
    }

    pub fn item_mut(&mut self, n: usize) -> &mut [T] {
        let per = self.shape.channels * self.shape.voxels();
        &mut self.data[n * per..(n + 1) * per]
    }

    /// One channel plane of one item, `voxels()` long.
    pub fn channel(&self, n: usize, c: usize) -> &[T] {
        let v = self.shape.voxels();
        let start = (n * self.shape.channels + c) * v;
        &self.data[start..start + v]
    }

    pub fn channel_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let v = self.shape.voxels();
        let start = (n * self.shape.channels + c) * v;
        &mut self.data[start..start + v]
    }

    /// True when every element is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// A single-channel 3-D scalar field, row-major with x fastest. The in-memory
/// form of one modality of one subject.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume3<T> {
    pub dims: [usize; 3],
    pub data: Vec<T>,
}

impl<T: Copy> Volume3<T> {
    pub fn new(dims: [usize; 3], data: Vec<T>) -> Result<Self> {
        let n = dims[0] * dims[1] * dims[2];
        if data.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "volume has {} voxels but dims {:?} need {}",
                data.len(),
                dims,
                n
            )));
        }
        Ok(Volume3 { dims, data })
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    #[inline]
    pub fn at(&self, z: usize, y: usize, x: usize) -> T {
        self.data[self.index(z, y, x)]
    }
}

/// Index map for one axis of symmetric mirror padding: position `i` of the
/// padded axis (length `lo + d + hi`) reads source index `map[i]`. The
/// reflection repeats edge samples (`abc -> cba|abc|cba`) and keeps folding,
/// so any pad width is legal for any extent.
pub fn mirror_axis_map(d: usize, lo: usize, hi: usize) -> Vec<usize> {
    assert!(d > 0, "cannot mirror-pad an empty axis");
    let mut map = Vec::with_capacity(lo + d + hi);
    for i in 0..(lo + d + hi) {
        let mut p = i as isize - lo as isize;
        let dd = d as isize;
        loop {
            if p < 0 {
                p = -1 - p;
            } else if p >= dd {
                p = 2 * dd - 1 - p;
            } else {
                break;
            }
        }
        map.push(p as usize);
    }
    map
}

/// Mirror-pad a 3-D field by `lo`/`hi` voxels per axis.
pub fn mirror_pad3<T: Copy>(data: &[T], dims: [usize; 3], lo: [usize; 3], hi: [usize; 3]) -> (Vec<T>, [usize; 3]) {
    let out_dims = [dims[0] + lo[0] + hi[0], dims[1] + lo[1] + hi[1], dims[2] + lo[2] + hi[2]];
    let zm = mirror_axis_map(dims[0], lo[0], hi[0]);
    let ym = mirror_axis_map(dims[1], lo[1], hi[1]);
    let xm = mirror_axis_map(dims[2], lo[2], hi[2]);
    let mut out = Vec::with_capacity(out_dims[0] * out_dims[1] * out_dims[2]);
    for &sz in &zm {
        for &sy in &ym {
            let row = &data[(sz * dims[1] + sy) * dims[2]..(sz * dims[1] + sy + 1) * dims[2]];
            for &sx in &xm {
                out.push(row[sx]);
            }
        }
    }
    (out, out_dims)
}

/// Concatenate along the channel axis. All inputs must agree on batch and
/// spatial dims; the output channel order follows the argument order.
pub fn concat_channels<T: Scalar>(parts: &[&VolumeTensor<T>]) -> Result<VolumeTensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::ShapeMismatch("concat of zero tensors".into()))?
        .shape();
    let mut channels = 0;
    for p in parts {
        let s = p.shape();
        if s.batch != first.batch || s.spatial() != first.spatial() {
            return Err(Error::ShapeMismatch(format!(
                "concat: {} does not match {} on batch/spatial axes",
                s, first
            )));
        }
        channels += s.channels;
    }
    let out_shape = Shape5::new(first.batch, channels, first.depth, first.height, first.width);
    let voxels = first.voxels();
    let mut out = Vec::with_capacity(out_shape.len());
    for n in 0..first.batch {
        for p in parts {
            let c = p.shape().channels;
            let start = n * c * voxels;
            out.extend_from_slice(&p.data[start..start + c * voxels]);
        }
    }
    VolumeTensor::from_vec(out_shape, out)
}

/// Centre-crop the spatial axes to `target`, keeping batch and channels.
/// Each axis must shrink by an even amount (valid convolutions always erode
/// symmetrically, so feature blocks from different depths line up centred).
pub fn crop_center<T: Scalar>(t: &VolumeTensor<T>, target: [usize; 3]) -> Result<VolumeTensor<T>> {
    let s = t.shape();
    let cur = s.spatial();
    if cur == target {
        return Ok(t.clone());
    }
    let mut off = [0usize; 3];
    for a in 0..3 {
        if target[a] > cur[a] || (cur[a] - target[a]) % 2 != 0 {
            return Err(Error::ShapeMismatch(format!(
                "cannot centre-crop spatial {:?} to {:?}",
                cur, target
            )));
        }
        off[a] = (cur[a] - target[a]) / 2;
    }
    let os = Shape5::new(s.batch, s.channels, target[0], target[1], target[2]);
    let mut out = VolumeTensor::zeros(os);
    for n in 0..s.batch {
        for c in 0..s.channels {
            for z in 0..target[0] {
                for y in 0..target[1] {
                    let src = s.index(n, c, z + off[0], y + off[1], off[2]);
                    let dst = os.index(n, c, z, y, 0);
                    out.data_mut()[dst..dst + target[2]].copy_from_slice(&t.data()[src..src + target[2]]);
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`crop_center`]: place `t` in the centre of a zero tensor with
/// spatial size `target`.
pub fn embed_center<T: Scalar>(t: &VolumeTensor<T>, target: [usize; 3]) -> Result<VolumeTensor<T>> {
    let s = t.shape();
    let cur = s.spatial();
    if cur == target {
        return Ok(t.clone());
    }
    let mut off = [0usize; 3];
    for a in 0..3 {
        if cur[a] > target[a] || (target[a] - cur[a]) % 2 != 0 {
            return Err(Error::ShapeMismatch(format!(
                "cannot centre-embed spatial {:?} into {:?}",
                cur, target
            )));
        }
        off[a] = (target[a] - cur[a]) / 2;
    }
    let os = Shape5::new(s.batch, s.channels, target[0], target[1], target[2]);
    let mut out = VolumeTensor::zeros(os);
    for n in 0..s.batch {
        for c in 0..s.channels {
            for z in 0..cur[0] {
                for y in 0..cur[1] {
                    let src = s.index(n, c, z, y, 0);
                    let dst = os.index(n, c, z + off[0], y + off[1], off[2]);
                    out.data_mut()[dst..dst + cur[2]].copy_from_slice(&t.data()[src..src + cur[2]]);
                }
            }
        }
    }
    Ok(out)
}

/// Split a gradient w.r.t. a channel concatenation back into per-part
/// gradients with the given channel counts. Inverse of [`concat_channels`].
pub fn split_channels<T: Scalar>(grad: &VolumeTensor<T>, channel_counts: &[usize]) -> Result<Vec<VolumeTensor<T>>> {
    let shape = grad.shape();
    let total: usize = channel_counts.iter().sum();
    if total != shape.channels {
        return Err(Error::ShapeMismatch(format!(
            "split: parts sum to {} channels but tensor has {}",
            total, shape.channels
        )));
    }
    let voxels = shape.voxels();
    let mut parts: Vec<VolumeTensor<T>> = channel_counts
        .iter()
        .map(|&c| VolumeTensor::zeros(Shape5::new(shape.batch, c, shape.depth, shape.height, shape.width)))
        .collect();
    for n in 0..shape.batch {
        let mut offset = 0;
        for (pi, &c) in channel_counts.iter().enumerate() {
            let src = (n * shape.channels + offset) * voxels;
            let dst = n * c * voxels;
            parts[pi].data_mut()[dst..dst + c * voxels].copy_from_slice(&grad.data()[src..src + c * voxels]);
            offset += c;
        }
    }
    Ok(parts)
}
