//! Dataset manifests: a JSON list of subjects, each naming its modality
//! volume files, an optional label map, and a train/val/test split.
//!
//! Modalities map to network input streams in lexicographic order of their
//! names (a `BTreeMap` keeps that order canonical), so a manifest listing
//! `{"t1": ..., "t2": ...}` always feeds t1 to stream 1 and t2 to stream 2
//! no matter how the JSON was written.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

use super::volume::read_volume;
use crate::error::{Error, Result};
use crate::label::LabelVolume;
use crate::scalar::Scalar;
use crate::tensor::Volume3;
use crate::train::TrainingSubject;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One subject of a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectEntry {
    pub id: String,
    /// Modality name → volume path (relative paths resolve against the
    /// manifest's directory). Iteration order is the stream order.
    pub modality_paths: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_path: Option<String>,
    pub split: Split,
}

pub fn read_manifest(path: &Path) -> Result<Vec<SubjectEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let subjects: Vec<SubjectEntry> =
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
    let mut seen = std::collections::HashSet::new();
    for s in &subjects {
        if s.modality_paths.is_empty() {
            return Err(Error::format(
                path.display().to_string(),
                format!("subject '{}' lists no modalities", s.id),
            ));
        }
        if !seen.insert(&s.id) {
            return Err(Error::format(
                path.display().to_string(),
                format!("duplicate subject id '{}'", s.id),
            ));
        }
    }
    Ok(subjects)
}

pub fn write_manifest(path: &Path, subjects: &[SubjectEntry]) -> Result<()> {
    let mut text = serde_json::to_string_pretty(subjects)
        .map_err(|e| Error::json(path.display().to_string(), e))?;
    text.push('\n');
    super::atomic_write(path, text.as_bytes())
}

fn resolve(base: &Path, rel: &str) -> std::path::PathBuf {
    let p = Path::new(rel);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Load a subject's modality volumes in stream order, checking that every
/// file exists and that all modalities agree on dims and spacing. Returns
/// the volumes plus the common spacing.
pub fn load_modalities<T: Scalar>(
    entry: &SubjectEntry,
    base: &Path,
) -> Result<(Vec<Volume3<T>>, [f64; 3])> {
    let mut volumes = Vec::with_capacity(entry.modality_paths.len());
    let mut geometry: Option<([usize; 3], [f64; 3])> = None;
    for (name, rel) in &entry.modality_paths {
        let path = resolve(base, rel);
        if !path.exists() {
            return Err(Error::format(
                path.display().to_string(),
                format!("missing modality '{name}' of subject '{}'", entry.id),
            ));
        }
        let stored = read_volume(&path)?;
        if stored.channels != 1 {
            return Err(Error::format(
                path.display().to_string(),
                format!(
                    "modality '{name}' of subject '{}' must be single-channel, found {}",
                    entry.id, stored.channels
                ),
            ));
        }
        match geometry {
            None => geometry = Some((stored.dims, stored.spacing_mm)),
            Some((dims, spacing)) => {
                if stored.dims != dims || stored.spacing_mm != spacing {
                    return Err(Error::ShapeMismatch(format!(
                        "subject '{}': modality '{name}' is {:?} at {:?} mm but earlier modalities are {:?} at {:?} mm",
                        entry.id, stored.dims, stored.spacing_mm, dims, spacing
                    )));
                }
            }
        }
        volumes.push(stored.channel_as::<T>(0)?);
    }
    let (_, spacing) = geometry.expect("manifest validation rejects empty modality maps");
    Ok((volumes, spacing))
}

/// Load a subject's label map (requires `label_path`).
pub fn load_labels(entry: &SubjectEntry, base: &Path) -> Result<LabelVolume> {
    let rel = entry.label_path.as_ref().ok_or_else(|| {
        Error::format(entry.id.clone(), "subject has no label_path but labels were requested")
    })?;
    let path = resolve(base, rel);
    if !path.exists() {
        return Err(Error::format(
            path.display().to_string(),
            format!("missing label map of subject '{}'", entry.id),
        ));
    }
    read_volume(&path)?.to_labels()
}

/// Load modalities plus labels as one training subject, checking the label
/// geometry against the modalities.
pub fn load_training_subject<T: Scalar>(entry: &SubjectEntry, base: &Path) -> Result<TrainingSubject<T>> {
    let (modalities, spacing) = load_modalities(entry, base)?;
    let labels = load_labels(entry, base)?;
    if labels.dims != modalities[0].dims {
        return Err(Error::ShapeMismatch(format!(
            "subject '{}': labels are {:?} but modalities are {:?}",
            entry.id, labels.dims, modalities[0].dims
        )));
    }
    if labels.spacing_mm != spacing {
        return Err(Error::ShapeMismatch(format!(
            "subject '{}': label spacing {:?} disagrees with modality spacing {:?}",
            entry.id, labels.spacing_mm, spacing
        )));
    }
    let subject = TrainingSubject { id: entry.id.clone(), modalities, labels };
    subject.validate()?;
    Ok(subject)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::volume::{write_volume, StoredVolume, VolumePayload};
    use tempfile::tempdir;

    fn write_scalar_volume(path: &Path, dims: [usize; 3], spacing: [f64; 3], fill: f32) {
        let n = dims[0] * dims[1] * dims[2];
        let vol = StoredVolume {
            dims,
            spacing_mm: spacing,
            channels: 1,
            payload: VolumePayload::F32(vec![fill; n]),
        };
        write_volume(path, &vol).unwrap();
    }

    fn write_label_volume(path: &Path, dims: [usize; 3], spacing: [f64; 3]) {
        let n = dims[0] * dims[1] * dims[2];
        let labels = LabelVolume::new(dims, spacing, vec![1; n]).unwrap();
        write_volume(path, &StoredVolume::from_labels(&labels)).unwrap();
    }

    fn entry(id: &str, mods: &[(&str, &str)], label: Option<&str>) -> SubjectEntry {
        SubjectEntry {
            id: id.into(),
            modality_paths: mods.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
            label_path: label.map(str::to_string),
            split: Split::Train,
        }
    }

    #[test]
    fn manifest_roundtrips_and_validates() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        let subjects = vec![
            entry("a", &[("t1", "a/t1.raw"), ("t2", "a/t2.raw")], Some("a/labels.raw")),
            entry("b", &[("t1", "b/t1.raw")], None),
        ];
        write_manifest(&path, &subjects).unwrap();
        assert_eq!(read_manifest(&path).unwrap(), subjects);

        // duplicate ids rejected
        let dupes = vec![subjects[0].clone(), subjects[0].clone()];
        write_manifest(&path, &dupes).unwrap();
        assert!(read_manifest(&path).is_err());
    }

    #[test]
    fn modalities_load_in_lexicographic_name_order() {
        let dir = tempdir().unwrap();
        write_scalar_volume(&dir.path().join("x.raw"), [3, 3, 3], [1.0; 3], 7.0);
        write_scalar_volume(&dir.path().join("a.raw"), [3, 3, 3], [1.0; 3], 1.0);
        // json order deliberately reversed relative to name order
        let e = entry("s", &[("zmod", "x.raw"), ("amod", "a.raw")], None);
        let (mods, spacing) = load_modalities::<f32>(&e, dir.path()).unwrap();
        assert_eq!(spacing, [1.0; 3]);
        assert_eq!(mods[0].data[0], 1.0); // "amod" first
        assert_eq!(mods[1].data[0], 7.0);
    }

    #[test]
    fn missing_modality_error_names_the_modality() {
        let dir = tempdir().unwrap();
        write_scalar_volume(&dir.path().join("t1.raw"), [3, 3, 3], [1.0; 3], 0.0);
        let e = entry("subj-7", &[("t1", "t1.raw"), ("flair", "flair.raw")], None);
        let err = load_modalities::<f32>(&e, dir.path()).unwrap_err().to_string();
        assert!(err.contains("flair"), "{err}");
        assert!(err.contains("subj-7"), "{err}");
    }

    #[test]
    fn geometry_disagreements_are_rejected() {
        let dir = tempdir().unwrap();
        write_scalar_volume(&dir.path().join("t1.raw"), [3, 3, 3], [1.0; 3], 0.0);
        write_scalar_volume(&dir.path().join("t2.raw"), [3, 3, 4], [1.0; 3], 0.0);
        let e = entry("s", &[("t1", "t1.raw"), ("t2", "t2.raw")], None);
        assert!(load_modalities::<f32>(&e, dir.path()).is_err());

        // spacing mismatch between labels and modalities
        write_scalar_volume(&dir.path().join("t3.raw"), [3, 3, 3], [1.0; 3], 0.0);
        write_label_volume(&dir.path().join("l.raw"), [3, 3, 3], [2.0, 1.0, 1.0]);
        let e = entry("s", &[("t1", "t1.raw")], Some("l.raw"));
        assert!(load_training_subject::<f32>(&e, dir.path()).is_err());
    }

    #[test]
    fn training_subject_loads_completely() {
        let dir = tempdir().unwrap();
        write_scalar_volume(&dir.path().join("t1.raw"), [4, 5, 6], [0.96, 0.96, 3.0], 0.25);
        write_scalar_volume(&dir.path().join("t2.raw"), [4, 5, 6], [0.96, 0.96, 3.0], 0.5);
        write_label_volume(&dir.path().join("labels.raw"), [4, 5, 6], [0.96, 0.96, 3.0]);
        let e = entry("s", &[("t1", "t1.raw"), ("t2", "t2.raw")], Some("labels.raw"));
        let subject = load_training_subject::<f64>(&e, dir.path()).unwrap();
        assert_eq!(subject.modalities.len(), 2);
        assert_eq!(subject.labels.dims, [4, 5, 6]);
        assert_eq!(subject.modalities[1].data[0], 0.5);

        // label-less subjects still load for inference
        let e2 = entry("s2", &[("t1", "t1.raw")], None);
        assert!(load_training_subject::<f64>(&e2, dir.path()).is_err());
        assert!(load_modalities::<f64>(&e2, dir.path()).is_ok());
    }
}
