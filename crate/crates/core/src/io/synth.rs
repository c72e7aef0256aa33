//! Deterministic synthetic multi-modal dataset generator.
//!
//! Each subject is a set of concentric ellipsoidal shells: the innermost
//! shell carries the highest class id, the outermost foreground shell class
//! 1, everything outside is background. Every modality assigns the classes
//! a different intensity profile (a cyclic shift of a shared ramp), so no
//! single modality separates all classes the way the combination does.
//! Labels are exact; the intensity volumes get Gaussian noise. Everything
//! is a pure function of the spec, so the same spec writes byte-identical
//! files every time.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::path::Path;

use super::manifest::{write_manifest, Split, SubjectEntry};
use super::volume::{write_volume, StoredVolume, VolumePayload};
use crate::error::{Error, Result};
use crate::label::LabelVolume;

/// Generator parameters; all fields have defaults, unknown keys are
/// rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub subjects: usize,
    pub dims: [usize; 3],
    pub classes: usize,
    pub modalities: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            subjects: 1,
            dims: [48, 48, 48],
            classes: 4,
            modalities: 2,
            noise_sigma: 0.05,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.subjects == 0 {
            return Err(Error::InvalidConfig("subjects must be positive".into()));
        }
        if self.dims.iter().any(|&d| d < 8) {
            return Err(Error::InvalidConfig(format!("dims {:?} too small; need at least 8 per axis", self.dims)));
        }
        if !(2..=256).contains(&self.classes) {
            return Err(Error::InvalidConfig(format!("classes must lie in [2, 256], got {}", self.classes)));
        }
        if self.modalities == 0 {
            return Err(Error::InvalidConfig("modalities must be positive".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::InvalidConfig(format!("noise_sigma must be non-negative, got {}", self.noise_sigma)));
        }
        Ok(())
    }
}

/// Class mean intensity for one modality: a ramp over the class ids,
/// cyclically shifted per modality so the profiles differ.
fn class_intensity(class: usize, modality: usize, classes: usize) -> f64 {
    let shifted = (class + modality) % classes;
    0.15 + 0.7 * shifted as f64 / (classes - 1) as f64
}

struct SubjectVolumes {
    labels: LabelVolume,
    modalities: Vec<Vec<f32>>,
}

fn generate_subject(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> SubjectVolumes {
    let [d, h, w] = spec.dims;
    let voxels = d * h * w;
    let shells = spec.classes - 1;

    // per-subject geometry jitter keeps subjects distinct but deterministic
    let centre: [f64; 3] = std::array::from_fn(|a| {
        let half = spec.dims[a] as f64 / 2.0;
        half + rng.gen_range(-0.06..0.06) * spec.dims[a] as f64
    });
    let semi_axes: [f64; 3] = std::array::from_fn(|a| {
        spec.dims[a] as f64 * 0.42 * (1.0 + rng.gen_range(-0.08..0.08))
    });

    let mut label_data = vec![0u8; voxels];
    let mut idx = 0;
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let p = [z as f64, y as f64, x as f64];
                let rho2: f64 =
                    (0..3).map(|a| ((p[a] - centre[a]) / semi_axes[a]).powi(2)).sum();
                if rho2 <= 1.0 {
                    // shell index from the normalized radius: innermost shell
                    // gets the highest class id
                    let band = (rho2.sqrt() * shells as f64).floor() as usize;
                    label_data[idx] = (shells - band.min(shells - 1)) as u8;
                }
                idx += 1;
            }
        }
    }

    let modalities = (0..spec.modalities)
        .map(|m| {
            label_data
                .iter()
                .map(|&class| {
                    let noise: f64 = rng.sample(StandardNormal);
                    (class_intensity(class as usize, m, spec.classes) + spec.noise_sigma * noise) as f32
                })
                .collect()
        })
        .collect();

    let labels = LabelVolume::new(spec.dims, [1.0; 3], label_data).expect("generated length matches dims");
    SubjectVolumes { labels, modalities }
}

/// Generate the dataset under `out_dir` (one directory per subject, plus
/// `manifest.json`) and return the manifest entries.
pub fn synth_dataset(spec: &SynthSpec, out_dir: &Path) -> Result<Vec<SubjectEntry>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut entries = Vec::with_capacity(spec.subjects);
    for s in 0..spec.subjects {
        let id = format!("synth-{s:03}");
        let subject_dir = out_dir.join(&id);
        std::fs::create_dir_all(&subject_dir)
            .map_err(|e| Error::io(subject_dir.display().to_string(), e))?;
        let volumes = generate_subject(spec, &mut rng);

        let mut modality_paths = std::collections::BTreeMap::new();
        for (m, data) in volumes.modalities.into_iter().enumerate() {
            let name = format!("mod{m:02}");
            let rel = format!("{id}/{name}.raw");
            let stored = StoredVolume {
                dims: spec.dims,
                spacing_mm: [1.0; 3],
                channels: 1,
                payload: VolumePayload::F32(data),
            };
            write_volume(&out_dir.join(&rel), &stored)?;
            modality_paths.insert(name, rel);
        }
        let label_rel = format!("{id}/labels.raw");
        write_volume(&out_dir.join(&label_rel), &StoredVolume::from_labels(&volumes.labels))?;

        entries.push(SubjectEntry {
            id,
            modality_paths,
            label_path: Some(label_rel),
            split: Split::Train,
        });
    }
    write_manifest(&out_dir.join("manifest.json"), &entries)?;
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::manifest::load_training_subject;
    use tempfile::tempdir;

    #[test]
    fn spec_defaults_and_unknown_keys() {
        let spec: SynthSpec = serde_json::from_str("{}").unwrap();
        assert_eq!(spec, SynthSpec::default());
        assert_eq!(spec.dims, [48, 48, 48]);
        let spec: SynthSpec = serde_json::from_str(r#"{"subjects": 3, "noise_sigma": 0.0}"#).unwrap();
        assert_eq!(spec.subjects, 3);
        assert_eq!(spec.noise_sigma, 0.0);
        assert!(serde_json::from_str::<SynthSpec>(r#"{"subject_count": 3}"#).is_err());
        assert!(SynthSpec { classes: 1, ..SynthSpec::default() }.validate().is_err());
    }

    #[test]
    fn same_seed_writes_byte_identical_files() {
        let spec = SynthSpec { subjects: 2, dims: [20, 18, 22], ..SynthSpec::default() };
        let dir_a = tempdir().unwrap();
        let dir_b = tempdir().unwrap();
        let entries_a = synth_dataset(&spec, dir_a.path()).unwrap();
        let entries_b = synth_dataset(&spec, dir_b.path()).unwrap();
        assert_eq!(entries_a, entries_b);
        for entry in &entries_a {
            for rel in entry.modality_paths.values().chain(entry.label_path.iter()) {
                let a = std::fs::read(dir_a.path().join(rel)).unwrap();
                let b = std::fs::read(dir_b.path().join(rel)).unwrap();
                assert_eq!(a, b, "{rel} differs between runs");
            }
        }
    }

    #[test]
    fn zero_noise_gives_exact_class_intensities() {
        let spec = SynthSpec { noise_sigma: 0.0, dims: [16, 16, 16], ..SynthSpec::default() };
        let dir = tempdir().unwrap();
        let entries = synth_dataset(&spec, dir.path()).unwrap();
        let subject = load_training_subject::<f32>(&entries[0], dir.path()).unwrap();
        for (m, modality) in subject.modalities.iter().enumerate() {
            for (v, &class) in modality.data.iter().zip(&subject.labels.data) {
                let expect = class_intensity(class as usize, m, spec.classes) as f32;
                assert_eq!(*v, expect);
            }
        }
    }

    #[test]
    fn modalities_have_distinct_profiles() {
        let classes = 4;
        for m in 1..3 {
            let differs = (0..classes)
                .any(|c| class_intensity(c, 0, classes) != class_intensity(c, m, classes));
            assert!(differs);
        }
    }

    #[test]
    fn all_classes_appear_for_reasonable_dims() {
        let spec = SynthSpec { dims: [32, 32, 32], ..SynthSpec::default() };
        let dir = tempdir().unwrap();
        let entries = synth_dataset(&spec, dir.path()).unwrap();
        let subject = load_training_subject::<f32>(&entries[0], dir.path()).unwrap();
        for class in 0..4u8 {
            assert!(
                subject.labels.class_count(class) > 0,
                "class {class} missing from the synthetic labels"
            );
        }
        // labels look concentric: the centre voxel carries the top class
        let c = subject.labels.at(16, 16, 16);
        assert_eq!(c, 3);
    }
}
