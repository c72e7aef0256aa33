//! Whole-volume segmentation by non-overlapping tiling.
//!
//! The volume is mirror-padded so that (a) every original voxel has full
//! receptive-field context and (b) the output space divides evenly into
//! cubic tiles. Each input window is pushed through the network in inference
//! mode, its probability tile written to a disjoint slot, the padding
//! cropped away, and labels taken voxel-wise as the arg-max (ties go to the
//! lowest class index). Because all convolutions are valid and translation-
//! consistent, the tiled result matches a single whole-volume forward pass
//! up to floating-point roundoff — that equivalence is the module's central
//! correctness property.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{NetworkGraph, Phase};
use crate::label::LabelVolume;
use crate::scalar::Scalar;
use crate::tensor::{concat_channels, mirror_pad3, Shape5, Volume3, VolumeTensor};
use crate::train::sampler::copy_block;

/// Output-tile edge used when the network's context margin allows it; the
/// matching input windows are then `35³` for the reference nine-layer nets.
const PREFERRED_INPUT_EDGE: usize = 35;

/// Geometry of one tiled segmentation pass.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TilingPlan {
    /// Original volume shape.
    pub original: [usize; 3],
    /// Shape after mirror padding (input space).
    pub padded: [usize; 3],
    /// Receptive margin on every side (context the padding supplies).
    pub margin: usize,
    /// Output tile edge; input windows have edge `out_edge + 2 * margin`.
    pub out_edge: usize,
    /// Tile origins in output space, lexicographic (z, y, x).
    pub tile_origins: Vec<[usize; 3]>,
}

impl TilingPlan {
    pub fn input_edge(&self) -> usize {
        self.out_edge + 2 * self.margin
    }

    /// Output-space shape (padded minus the margins).
    pub fn output_space(&self) -> [usize; 3] {
        [
            self.padded[0] - 2 * self.margin,
            self.padded[1] - 2 * self.margin,
            self.padded[2] - 2 * self.margin,
        ]
    }

    pub fn tiles(&self) -> usize {
        self.tile_origins.len()
    }
}

/// Tiling geometry for the reference nets: 9-voxel margin, 17³ output tiles
/// from 35³ input windows, so each padded dim is `18 + 17 * ceil(dim / 17)`.
pub fn plan_tiling(volume_shape: [usize; 3]) -> Result<TilingPlan> {
    plan_tiling_for(volume_shape, 9, 17)
}

/// General tiling geometry: pad each dim to
/// `2 * margin + out_edge * ceil(dim / out_edge)` and enumerate the output
/// tiles in lexicographic order. The low-side pad is exactly `margin`, so
/// original voxel `x` is output-space voxel `x` on every axis.
pub fn plan_tiling_for(volume_shape: [usize; 3], margin: usize, out_edge: usize) -> Result<TilingPlan> {
    if volume_shape.iter().any(|&d| d == 0) {
        return Err(Error::ShapeMismatch("volume dims must be positive".into()));
    }
    if out_edge == 0 {
        return Err(Error::InvalidConfig("output tile edge must be positive".into()));
    }
    let mut padded = [0usize; 3];
    let mut counts = [0usize; 3];
    for a in 0..3 {
        counts[a] = volume_shape[a].div_ceil(out_edge);
        padded[a] = 2 * margin + out_edge * counts[a];
    }
    let mut tile_origins = Vec::with_capacity(counts[0] * counts[1] * counts[2]);
    for tz in 0..counts[0] {
        for ty in 0..counts[1] {
            for tx in 0..counts[2] {
                tile_origins.push([tz * out_edge, ty * out_edge, tx * out_edge]);
            }
        }
    }
    Ok(TilingPlan { original: volume_shape, padded, margin, out_edge, tile_origins })
}

/// Per-class probabilities over a whole volume, channel-major
/// (`[class][z][y][x]`, x fastest).
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityVolume<T> {
    pub classes: usize,
    pub dims: [usize; 3],
    pub data: Vec<T>,
}

impl<T: Scalar> ProbabilityVolume<T> {
    pub fn voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn at(&self, class: usize, z: usize, y: usize, x: usize) -> T {
        self.data[class * self.voxels() + (z * self.dims[1] + y) * self.dims[2] + x]
    }

    /// Voxel-wise arg-max labelling; ties resolve to the lowest class index.
    pub fn argmax_labels(&self, spacing_mm: [f64; 3]) -> LabelVolume {
        let voxels = self.voxels();
        let mut labels = vec![0u8; voxels];
        for (i, slot) in labels.iter_mut().enumerate() {
            let mut best_class = 0usize;
            let mut best = self.data[i];
            for c in 1..self.classes {
                let p = self.data[c * voxels + i];
                if p > best {
                    best = p;
                    best_class = c;
                }
            }
            *slot = best_class as u8;
        }
        LabelVolume { dims: self.dims, spacing_mm, data: labels }
    }
}

/// A finished segmentation: hard labels plus the class probabilities they
/// were taken from.
#[derive(Clone, Debug)]
pub struct SegmentationResult<T> {
    pub labels: LabelVolume,
    pub probabilities: ProbabilityVolume<T>,
    pub plan: TilingPlan,
}

/// Wall-clock report for one tiled segmentation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub tiles: usize,
    pub ms_total: f64,
    pub ms_per_tile: f64,
}

fn tile_edge_for_margin(margin: usize) -> usize {
    PREFERRED_INPUT_EDGE.saturating_sub(2 * margin).max(1)
}

/// Mirror-pad every modality for the given plan (low pad = margin, high pad
/// = margin + tiling remainder).
fn pad_modalities<T: Scalar>(modalities: &[Volume3<T>], plan: &TilingPlan) -> Vec<Vec<T>> {
    let lo = [plan.margin; 3];
    let hi = [
        plan.padded[0] - plan.original[0] - plan.margin,
        plan.padded[1] - plan.original[1] - plan.margin,
        plan.padded[2] - plan.original[2] - plan.margin,
    ];
    modalities.iter().map(|m| mirror_pad3(&m.data, m.dims, lo, hi).0).collect()
}

fn check_modalities<T: Scalar>(net: &NetworkGraph<T>, modalities: &[Volume3<T>]) -> Result<[usize; 3]> {
    let expected = net.spec().num_modalities;
    if modalities.len() != expected {
        return Err(Error::ShapeMismatch(format!(
            "network expects {} modalities, got {}",
            expected,
            modalities.len()
        )));
    }
    let dims = modalities[0].dims;
    if modalities.iter().any(|m| m.dims != dims) {
        return Err(Error::ShapeMismatch("modalities must share a shape (co-registered volumes)".into()));
    }
    Ok(dims)
}

/// Group per-modality single-channel tensors into per-stream network inputs
/// (early fusion concatenates them all into one stream).
fn streams_from_modalities<T: Scalar>(tiles: Vec<VolumeTensor<T>>, n_streams: usize) -> Result<Vec<VolumeTensor<T>>> {
    if n_streams == 1 && tiles.len() > 1 {
        let refs: Vec<&VolumeTensor<T>> = tiles.iter().collect();
        Ok(vec![concat_channels(&refs)?])
    } else {
        Ok(tiles)
    }
}

/// Segment one subject with the network's natural tiling.
pub fn segment_volume<T: Scalar>(net: &NetworkGraph<T>, modalities: &[Volume3<T>]) -> Result<SegmentationResult<T>> {
    let dims = check_modalities(net, modalities)?;
    let margin = net.spec().margin();
    let plan = plan_tiling_for(dims, margin, tile_edge_for_margin(margin))?;
    segment_with_plan(net, modalities, plan)
}

/// Segment with an explicit tiling plan (exposed for geometry tests).
pub fn segment_with_plan<T: Scalar>(
    net: &NetworkGraph<T>,
    modalities: &[Volume3<T>],
    plan: TilingPlan,
) -> Result<SegmentationResult<T>> {
    let dims = check_modalities(net, modalities)?;
    if dims != plan.original || plan.margin != net.spec().margin() {
        return Err(Error::ShapeMismatch("tiling plan does not match this volume and network".into()));
    }
    let padded = pad_modalities(modalities, &plan);
    let classes = net.spec().num_classes;
    let n_streams = net.spec().input_streams();
    let in_edge = plan.input_edge();
    let out_edge = plan.out_edge;

    // Tiles write disjoint output slots, so parallel order cannot matter;
    // results are gathered and scattered in plan order anyway.
    let tiles: Vec<(usize, VolumeTensor<T>)> = plan
        .tile_origins
        .par_iter()
        .enumerate()
        .map(|(i, &origin)| {
            let tile_shape = Shape5::new(1, 1, in_edge, in_edge, in_edge);
            let mut tile_inputs = Vec::with_capacity(padded.len());
            for data in &padded {
                let mut buf = Vec::with_capacity(tile_shape.len());
                copy_block(data, plan.padded, origin, in_edge, &mut buf);
                tile_inputs.push(VolumeTensor::from_vec(tile_shape, buf)?);
            }
            let inputs = streams_from_modalities(tile_inputs, n_streams)?;
            let probs = net.forward(&inputs, Phase::Inference, 0)?;
            Ok((i, probs))
        })
        .collect::<Result<Vec<_>>>()?;

    // Stitch into output space, then crop the padding remainder away.
    let out_space = plan.output_space();
    let space_voxels = out_space[0] * out_space[1] * out_space[2];
    let mut stitched = vec![T::zero(); classes * space_voxels];
    for (i, probs) in &tiles {
        let origin = plan.tile_origins[*i];
        let shape = probs.shape();
        debug_assert_eq!(shape.spatial(), [out_edge; 3]);
        for c in 0..classes {
            let tile_channel = probs.channel(0, c);
            for z in 0..out_edge {
                for y in 0..out_edge {
                    let src = (z * out_edge + y) * out_edge;
                    let dst = c * space_voxels
                        + ((origin[0] + z) * out_space[1] + origin[1] + y) * out_space[2]
                        + origin[2];
                    stitched[dst..dst + out_edge].copy_from_slice(&tile_channel[src..src + out_edge]);
                }
            }
        }
    }

    let voxels = dims[0] * dims[1] * dims[2];
    let mut cropped = Vec::with_capacity(classes * voxels);
    for c in 0..classes {
        let channel = &stitched[c * space_voxels..(c + 1) * space_voxels];
        copy_channel_crop(channel, out_space, dims, &mut cropped);
    }
    let probabilities = ProbabilityVolume { classes, dims, data: cropped };
    let labels = probabilities.argmax_labels([1.0; 3]);
    Ok(SegmentationResult { labels, probabilities, plan })
}

/// Crop `[0, dims)` out of a channel laid out over `space`.
fn copy_channel_crop<T: Copy>(channel: &[T], space: [usize; 3], dims: [usize; 3], out: &mut Vec<T>) {
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            let row = (z * space[1] + y) * space[2];
            out.extend_from_slice(&channel[row..row + dims[2]]);
        }
    }
}

/// The untiled oracle: mirror-pad by exactly the margin and run one forward
/// pass over the whole volume. Output dims equal the input dims.
pub fn whole_volume_probabilities<T: Scalar>(
    net: &NetworkGraph<T>,
    modalities: &[Volume3<T>],
) -> Result<ProbabilityVolume<T>> {
    let dims = check_modalities(net, modalities)?;
    let margin = net.spec().margin();
    let lo = [margin; 3];
    let padded_dims = [dims[0] + 2 * margin, dims[1] + 2 * margin, dims[2] + 2 * margin];
    let shape = Shape5::new(1, 1, padded_dims[0], padded_dims[1], padded_dims[2]);
    let tensors = modalities
        .iter()
        .map(|m| {
            let (data, _) = mirror_pad3(&m.data, m.dims, lo, lo);
            VolumeTensor::from_vec(shape, data)
        })
        .collect::<Result<Vec<_>>>()?;
    let inputs = streams_from_modalities(tensors, net.spec().input_streams())?;
    let probs = net.forward(&inputs, Phase::Inference, 0)?;
    let out_shape = probs.shape();
    if out_shape.spatial() != dims {
        return Err(Error::ShapeMismatch(format!(
            "whole-volume output {:?} does not match the input {:?}",
            out_shape.spatial(),
            dims
        )));
    }
    let classes = net.spec().num_classes;
    let voxels = dims[0] * dims[1] * dims[2];
    let mut data = Vec::with_capacity(classes * voxels);
    for c in 0..classes {
        data.extend_from_slice(probs.channel(0, c));
    }
    Ok(ProbabilityVolume { classes, dims, data })
}

/// `segment_volume` plus a wall-clock report.
pub fn timed_segment<T: Scalar>(
    net: &NetworkGraph<T>,
    modalities: &[Volume3<T>],
) -> Result<(SegmentationResult<T>, TimingReport)> {
    let started = Instant::now();
    let result = segment_volume(net, modalities)?;
    let ms_total = started.elapsed().as_secs_f64() * 1e3;
    let tiles = result.plan.tiles();
    Ok((result, TimingReport { tiles, ms_total, ms_per_tile: ms_total / tiles as f64 }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::ArchitectureSpec;
    use crate::graph::FusionMode;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_spec(classes: usize) -> ArchitectureSpec {
        ArchitectureSpec {
            fusion_mode: FusionMode::HyperDense,
            num_modalities: 2,
            conv_kernels: vec![2, 3],
            fc_kernels: vec![4],
            num_classes: classes,
            permutation_rule: Default::default(),
            dropout_rate: 0.5,
        }
    }

    fn random_volumes(dims: [usize; 3], n: usize, seed: u64) -> Vec<Volume3<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let data = (0..dims[0] * dims[1] * dims[2]).map(|_| rng.gen_range(-1.0..1.0)).collect();
                Volume3::new(dims, data).unwrap()
            })
            .collect()
    }

    #[test]
    fn seventeen_cube_is_a_single_tile() {
        let plan = plan_tiling([17, 17, 17]).unwrap();
        assert_eq!(plan.padded, [35, 35, 35]);
        assert_eq!(plan.tile_origins, vec![[0, 0, 0]]);
        assert_eq!(plan.input_edge(), 35);
    }

    #[test]
    fn thirty_four_cube_needs_eight_tiles() {
        let plan = plan_tiling([34, 34, 34]).unwrap();
        assert_eq!(plan.padded, [52, 52, 52]);
        assert_eq!(plan.tiles(), 8);
        // lexicographic (z, y, x)
        assert_eq!(plan.tile_origins[0], [0, 0, 0]);
        assert_eq!(plan.tile_origins[1], [0, 0, 17]);
        assert_eq!(plan.tile_origins[2], [0, 17, 0]);
        assert_eq!(plan.tile_origins[7], [17, 17, 17]);
    }

    #[test]
    fn tiles_partition_the_output_space() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..25 {
            let dims = [rng.gen_range(20..=120), rng.gen_range(20..=120), rng.gen_range(20..=120)];
            let plan = plan_tiling(dims).unwrap();
            for a in 0..3 {
                assert_eq!(plan.padded[a], 18 + 17 * dims[a].div_ceil(17));
            }
            let space = plan.output_space();
            let mut seen = vec![0u8; space[0] * space[1] * space[2]];
            for &o in &plan.tile_origins {
                for z in o[0]..o[0] + 17 {
                    for y in o[1]..o[1] + 17 {
                        for x in o[2]..o[2] + 17 {
                            seen[(z * space[1] + y) * space[2] + x] += 1;
                        }
                    }
                }
            }
            assert!(seen.iter().all(|&c| c == 1), "tiles must cover output space exactly once for {dims:?}");
        }
    }

    #[test]
    fn zero_parameters_label_everything_class_zero() {
        let spec = tiny_spec(3);
        let mut net = crate::graph::NetworkGraph::<f64>::build(&spec, 1).unwrap();
        for bank in &mut net.banks {
            bank.weights.iter_mut().for_each(|w| *w = 0.0);
            bank.bias.iter_mut().for_each(|b| *b = 0.0);
        }
        let volumes = random_volumes([12, 13, 14], 2, 2);
        let seg = segment_volume(&net, &volumes).unwrap();
        assert_eq!(seg.labels.dims, [12, 13, 14]);
        assert!(seg.labels.data.iter().all(|&l| l == 0));
        // probabilities are uniform
        let p = seg.probabilities.at(0, 5, 5, 5);
        assert!((p - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn tiled_equals_whole_volume_forward() {
        let spec = tiny_spec(3);
        let net = crate::graph::NetworkGraph::<f64>::build(&spec, 33).unwrap();
        // margin 2 -> tile edge 31, so these dims need 2 tiles per axis
        let volumes = random_volumes([35, 33, 40], 2, 5);
        let seg = segment_volume(&net, &volumes).unwrap();
        let whole = whole_volume_probabilities(&net, &volumes).unwrap();
        assert_eq!(seg.probabilities.dims, whole.dims);
        assert!(seg.plan.tiles() > 1, "shape chosen to need several tiles");
        let worst = seg
            .probabilities
            .data
            .iter()
            .zip(&whole.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(worst <= 1e-10, "tiled vs whole mismatch {worst}");
    }

    #[test]
    fn argmax_breaks_ties_toward_the_lowest_class() {
        let probs = ProbabilityVolume {
            classes: 3,
            dims: [1, 1, 2],
            // voxel 0: classes tie at 1/3; voxel 1: class 2 wins
            data: vec![
                1.0 / 3.0,
                0.2,
                1.0 / 3.0,
                0.3,
                1.0 / 3.0,
                0.5,
            ],
        };
        let labels = probs.argmax_labels([1.0; 3]);
        assert_eq!(labels.data, vec![0, 2]);
    }

    #[test]
    fn timing_report_counts_tiles() {
        let spec = tiny_spec(2);
        let net = crate::graph::NetworkGraph::<f32>::build(&spec, 3).unwrap();
        let volumes = random_volumes([10, 10, 10], 2, 9)
            .into_iter()
            .map(|v| Volume3::new(v.dims, v.data.iter().map(|&x| x as f32).collect()).unwrap())
            .collect::<Vec<_>>();
        let (seg, report) = timed_segment(&net, &volumes).unwrap();
        assert_eq!(report.tiles, seg.plan.tiles());
        assert!(report.ms_total >= 0.0);
        assert!((report.ms_per_tile - report.ms_total / report.tiles as f64).abs() < 1e-9);

        // determinism of the values themselves
        let (seg2, _) = timed_segment(&net, &volumes).unwrap();
        assert_eq!(seg.labels, seg2.labels);
        assert_eq!(seg.probabilities, seg2.probabilities);
    }

    #[test]
    fn mismatched_modalities_are_rejected() {
        let spec = tiny_spec(2);
        let net = crate::graph::NetworkGraph::<f64>::build(&spec, 3).unwrap();
        let mut volumes = random_volumes([10, 10, 10], 2, 9);
        volumes[1] = Volume3::new([10, 10, 11], vec![0.0; 1100]).unwrap();
        assert!(segment_volume(&net, &volumes).is_err());
        let one = random_volumes([10, 10, 10], 1, 9);
        assert!(segment_volume(&net, &one).is_err());
    }
}
