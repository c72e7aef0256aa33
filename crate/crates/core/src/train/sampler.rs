//! Sub-volume sampling: cubic input patches paired with the central label
//! core the network can actually predict after its valid convolutions.
//!
//! A patch of edge `patch_size` yields an output core of edge
//! `patch_size - 2 * margin`; both are centred on the same voxel, so core
//! voxel `i` corresponds to patch voxel `i + (patch - core) / 2` on every
//! axis. Volumes smaller than the patch are mirror-padded up to it before any
//! origin is drawn, and every emitted patch lies fully inside its (padded)
//! volume.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label::{LabelBatch, LabelVolume};
use crate::scalar::Scalar;
use crate::tensor::{mirror_pad3, Shape5, Volume3, VolumeTensor};

/// How patch centres are drawn.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingPolicy {
    /// Uniform over every origin whose patch fits inside the volume.
    #[default]
    UniformValid,
    /// Uniform over classes, then uniform over that class's voxels; the patch
    /// is centred on the drawn voxel (clamped so it still fits).
    ClassBalanced,
}

/// Which voxels may serve as patch centres under `uniform_valid`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskSource {
    /// Any voxel (origins drawn directly over the valid-origin box).
    #[default]
    FullVolume,
    /// Only voxels with a nonzero label; falls back to the full volume with a
    /// warning when a subject has no foreground at all.
    NonzeroLabels,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    #[serde(default)]
    pub policy: SamplingPolicy,
    #[serde(default)]
    pub mask: MaskSource,
    /// Input patch edge length.
    pub patch_size: usize,
    /// Label core edge length (the network's output for one patch).
    pub core_size: usize,
    /// Size of the class universe for `class_balanced` draws.
    pub num_classes: usize,
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.core_size == 0 {
            return Err(Error::InvalidConfig("patch and core sizes must be positive".into()));
        }
        if self.core_size > self.patch_size || (self.patch_size - self.core_size) % 2 != 0 {
            return Err(Error::InvalidConfig(format!(
                "label core {} must be centred inside patch {} (difference even and non-negative)",
                self.core_size, self.patch_size
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidConfig("sampling needs at least two classes".into()));
        }
        Ok(())
    }

    /// Per-axis offset of the label core inside the patch.
    pub fn core_offset(&self) -> usize {
        (self.patch_size - self.core_size) / 2
    }
}

/// One training subject held in memory: aligned modality volumes plus labels.
#[derive(Clone, Debug)]
pub struct TrainingSubject<T> {
    pub id: String,
    pub modalities: Vec<Volume3<T>>,
    pub labels: LabelVolume,
}

impl<T: Scalar> TrainingSubject<T> {
    pub fn validate(&self) -> Result<()> {
        if self.modalities.is_empty() {
            return Err(Error::InvalidConfig(format!("subject {} has no modalities", self.id)));
        }
        for (m, vol) in self.modalities.iter().enumerate() {
            if vol.dims != self.labels.dims {
                return Err(Error::ShapeMismatch(format!(
                    "subject {}: modality {} dims {:?} disagree with labels {:?}",
                    self.id,
                    m + 1,
                    vol.dims,
                    self.labels.dims
                )));
            }
        }
        Ok(())
    }
}

/// A subject after padding, with the per-class voxel index used by
/// class-balanced draws.
struct PreparedSubject<T> {
    id: String,
    dims: [usize; 3],
    modalities: Vec<Vec<T>>,
    labels: Vec<u8>,
    /// Linear voxel indices per class id.
    class_voxels: Vec<Vec<u32>>,
    /// Linear indices of nonzero-label voxels (for `MaskSource::NonzeroLabels`).
    foreground: Vec<u32>,
}

impl<T: Scalar> PreparedSubject<T> {
    fn prepare(subject: &TrainingSubject<T>, config: &SamplerConfig) -> Result<Self> {
        subject.validate()?;
        let dims = subject.labels.dims;
        // Mirror-pad any axis shorter than the patch, splitting the padding
        // as evenly as the parity allows.
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        for a in 0..3 {
            if dims[a] < config.patch_size {
                let deficit = config.patch_size - dims[a];
                lo[a] = deficit / 2;
                hi[a] = deficit - lo[a];
            }
        }
        let (labels, padded_dims) = mirror_pad3(&subject.labels.data, dims, lo, hi);
        let modalities = subject
            .modalities
            .iter()
            .map(|vol| mirror_pad3(&vol.data, dims, lo, hi).0)
            .collect();

        if labels.len() > u32::MAX as usize {
            return Err(Error::InvalidConfig(format!("subject {} is too large to index", subject.id)));
        }
        let mut class_voxels = vec![Vec::new(); config.num_classes];
        let mut foreground = Vec::new();
        for (i, &c) in labels.iter().enumerate() {
            let class = c as usize;
            if class >= config.num_classes {
                return Err(Error::InvalidConfig(format!(
                    "subject {}: label {} exceeds the configured class count {}",
                    subject.id, c, config.num_classes
                )));
            }
            class_voxels[class].push(i as u32);
            if c != 0 {
                foreground.push(i as u32);
            }
        }
        Ok(PreparedSubject { id: subject.id.clone(), dims: padded_dims, modalities, labels, class_voxels, foreground })
    }

    #[inline]
    fn unravel(&self, linear: u32) -> [usize; 3] {
        let i = linear as usize;
        let x = i % self.dims[2];
        let y = (i / self.dims[2]) % self.dims[1];
        let z = i / (self.dims[2] * self.dims[1]);
        [z, y, x]
    }
}

/// Why a draw could not follow the requested policy.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleWarning {
    pub subject: String,
    /// The class that had no voxels (class-balanced fallback), if any.
    pub empty_class: Option<u8>,
    pub message: String,
}

/// The product of one sampling call: per-modality patch tensors (batch axis =
/// sample), the aligned label cores, and the subject/origin bookkeeping.
#[derive(Clone, Debug)]
pub struct SampledBatch<T> {
    /// One tensor per modality, shape `(count, 1, patch, patch, patch)`.
    pub inputs: Vec<VolumeTensor<T>>,
    /// Label cores, shape `(count, core, core, core)`.
    pub labels: LabelBatch,
    /// Subject index each sample came from.
    pub subjects: Vec<usize>,
    /// Patch origin of each sample, in padded-volume coordinates.
    pub origins: Vec<[usize; 3]>,
    pub warnings: Vec<SampleWarning>,
}

/// Deterministic patch sampler over a set of subjects.
pub struct Sampler<T> {
    config: SamplerConfig,
    subjects: Vec<PreparedSubject<T>>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Sampler<T> {
    pub fn new(subjects: &[TrainingSubject<T>], config: SamplerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if subjects.is_empty() {
            return Err(Error::InvalidConfig("cannot sample from an empty subject set".into()));
        }
        let prepared = subjects
            .iter()
            .map(|s| PreparedSubject::prepare(s, &config))
            .collect::<Result<Vec<_>>>()?;
        let n_mod = prepared[0].modalities.len();
        if prepared.iter().any(|p| p.modalities.len() != n_mod) {
            return Err(Error::InvalidConfig("subjects disagree on modality count".into()));
        }
        Ok(Sampler { config, subjects: prepared, rng: ChaCha8Rng::seed_from_u64(seed) })
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.config
    }

    /// Restart the draw stream from a fresh seed without re-preparing the
    /// subjects (the training loop reseeds once per subepoch).
    pub fn reseed(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    pub fn num_modalities(&self) -> usize {
        self.subjects[0].modalities.len()
    }

    /// Draw `count` samples. Subjects are drawn uniformly per sample; then
    /// the origin per policy. Draw order is fixed (subject, then origin
    /// coordinates z, y, x or class then voxel), so a seed fully determines
    /// the output.
    pub fn sample(&mut self, count: usize) -> Result<SampledBatch<T>> {
        let patch = self.config.patch_size;
        let core = self.config.core_size;
        let off = self.config.core_offset();
        let n_mod = self.num_modalities();

        let mut inputs: Vec<Vec<T>> = (0..n_mod).map(|_| Vec::with_capacity(count * patch * patch * patch)).collect();
        let mut labels = Vec::with_capacity(count * core * core * core);
        let mut subjects = Vec::with_capacity(count);
        let mut origins = Vec::with_capacity(count);
        let mut warnings: Vec<SampleWarning> = Vec::new();

        for _ in 0..count {
            let si = self.rng.gen_range(0..self.subjects.len());
            let origin = self.draw_origin(si, &mut warnings);
            let subject = &self.subjects[si];
            for (m, buf) in inputs.iter_mut().enumerate() {
                copy_block(&subject.modalities[m], subject.dims, origin, patch, buf);
            }
            let core_origin = [origin[0] + off, origin[1] + off, origin[2] + off];
            copy_block(&subject.labels, subject.dims, core_origin, core, &mut labels);
            subjects.push(si);
            origins.push(origin);
        }

        let shape = Shape5::new(count, 1, patch, patch, patch);
        let inputs = inputs
            .into_iter()
            .map(|data| VolumeTensor::from_vec(shape, data))
            .collect::<Result<Vec<_>>>()?;
        let labels = LabelBatch::new(count, [core; 3], labels)?;
        Ok(SampledBatch { inputs, labels, subjects, origins, warnings })
    }

    fn draw_origin(&mut self, si: usize, warnings: &mut Vec<SampleWarning>) -> [usize; 3] {
        let patch = self.config.patch_size;
        let dims = self.subjects[si].dims;
        match self.config.policy {
            SamplingPolicy::UniformValid => match self.config.mask {
                MaskSource::FullVolume => self.draw_uniform_origin(si),
                MaskSource::NonzeroLabels => {
                    if self.subjects[si].foreground.is_empty() {
                        push_warning_once(
                            warnings,
                            &self.subjects[si].id,
                            None,
                            "no foreground voxels; sampling the full volume",
                        );
                        self.draw_uniform_origin(si)
                    } else {
                        let pick = self.rng.gen_range(0..self.subjects[si].foreground.len());
                        let centre = self.subjects[si].unravel(self.subjects[si].foreground[pick]);
                        clamp_origin(centre, dims, patch)
                    }
                }
            },
            SamplingPolicy::ClassBalanced => {
                let class = self.rng.gen_range(0..self.config.num_classes);
                if self.subjects[si].class_voxels[class].is_empty() {
                    push_warning_once(
                        warnings,
                        &self.subjects[si].id,
                        Some(class as u8),
                        "class has no voxels; falling back to uniform sampling",
                    );
                    self.draw_uniform_origin(si)
                } else {
                    let voxels = &self.subjects[si].class_voxels[class];
                    let pick = self.rng.gen_range(0..voxels.len());
                    let centre = self.subjects[si].unravel(voxels[pick]);
                    clamp_origin(centre, dims, patch)
                }
            }
        }
    }

    fn draw_uniform_origin(&mut self, si: usize) -> [usize; 3] {
        let patch = self.config.patch_size;
        let dims = self.subjects[si].dims;
        [
            self.rng.gen_range(0..=dims[0] - patch),
            self.rng.gen_range(0..=dims[1] - patch),
            self.rng.gen_range(0..=dims[2] - patch),
        ]
    }
}

/// One-shot form: a fresh sampler seeded with `seed`, drained for `count`
/// samples.
pub fn sample_subvolumes<T: Scalar>(
    subjects: &[TrainingSubject<T>],
    count: usize,
    config: SamplerConfig,
    seed: u64,
) -> Result<SampledBatch<T>> {
    Sampler::new(subjects, config, seed)?.sample(count)
}

fn clamp_origin(centre: [usize; 3], dims: [usize; 3], patch: usize) -> [usize; 3] {
    let mut origin = [0usize; 3];
    for a in 0..3 {
        let lo = centre[a].saturating_sub(patch / 2);
        origin[a] = lo.min(dims[a] - patch);
    }
    origin
}

fn push_warning_once(warnings: &mut Vec<SampleWarning>, subject: &str, empty_class: Option<u8>, message: &str) {
    if warnings.iter().any(|w| w.subject == subject && w.empty_class == empty_class) {
        return;
    }
    warnings.push(SampleWarning { subject: subject.to_string(), empty_class, message: message.to_string() });
}

/// Copy the cubic block starting at `origin` with edge `edge` out of a
/// row-major volume, appending to `out`.
pub(crate) fn copy_block<E: Copy>(data: &[E], dims: [usize; 3], origin: [usize; 3], edge: usize, out: &mut Vec<E>) {
    debug_assert!((0..3).all(|a| origin[a] + edge <= dims[a]), "block must lie inside the volume");
    for z in origin[0]..origin[0] + edge {
        for y in origin[1]..origin[1] + edge {
            let row = (z * dims[1] + y) * dims[2] + origin[2];
            out.extend_from_slice(&data[row..row + edge]);
        }
    }
}
