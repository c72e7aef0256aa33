//! On-disk formats: raw volumes with JSON sidecars, dataset manifests,
//! training checkpoints, run configuration, and a synthetic dataset
//! generator. All multi-byte payloads are little-endian, and every file
//! write goes through a temp-file-then-rename so readers never observe a
//! half-written file.

pub mod checkpoint;
pub mod config;
pub mod manifest;
pub mod synth;
pub mod volume;

pub use checkpoint::{load_checkpoint, peek_precision, save_checkpoint, TrainCheckpoint};
pub use config::{read_run_config, ArchChoice, Precision, RunConfig};
pub use manifest::{
    load_labels, load_modalities, load_training_subject, read_manifest, write_manifest, Split,
    SubjectEntry,
};
pub use synth::{synth_dataset, SynthSpec};
pub use volume::{read_volume, write_volume, Dtype, StoredVolume, VolumePayload};

use crate::error::{Error, Result};
use std::path::Path;

/// Write `bytes` to `path` atomically (temp file in the same directory,
/// then rename over the target).
pub(crate) fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::format(path.display().to_string(), "path has no file name"))?;
    let mut tmp_name = name.to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(tmp.display().to_string(), e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path.display().to_string(), e))
}
