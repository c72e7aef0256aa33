//! Raw binary volumes with a JSON sidecar header.
//!
//! The payload at `path` holds the voxels channel-major then row-major (x
//! fastest), little-endian; `path.json` describes it: dims, spacing,
//! dtype (`f32` or `u8`), channel count, byte order. The format is
//! deliberately trivial so nothing medical-specific is needed to read it.

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::label::LabelVolume;
use crate::scalar::Scalar;
use crate::tensor::Volume3;

/// Element type of a stored volume.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dtype {
    #[serde(rename = "f32")]
    F32,
    #[serde(rename = "u8")]
    U8,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::U8 => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SidecarHeader {
    dims: [usize; 3],
    spacing_mm: [f64; 3],
    dtype: Dtype,
    channels: usize,
    byte_order: String,
}

/// Voxel data of a stored volume.
#[derive(Clone, Debug, PartialEq)]
pub enum VolumePayload {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

/// An in-memory copy of one volume file: multi-channel voxel data plus the
/// geometry from its sidecar.
#[derive(Clone, Debug, PartialEq)]
pub struct StoredVolume {
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub channels: usize,
    pub payload: VolumePayload,
}

impl StoredVolume {
    pub fn dtype(&self) -> Dtype {
        match self.payload {
            VolumePayload::F32(_) => Dtype::F32,
            VolumePayload::U8(_) => Dtype::U8,
        }
    }

    pub fn voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    fn len(&self) -> usize {
        match &self.payload {
            VolumePayload::F32(d) => d.len(),
            VolumePayload::U8(d) => d.len(),
        }
    }

    fn validate(&self) -> Result<()> {
        let need = self.channels * self.voxels();
        if self.len() != need {
            return Err(Error::ShapeMismatch(format!(
                "volume payload has {} elements but {} channel(s) of {:?} need {}",
                self.len(),
                self.channels,
                self.dims,
                need
            )));
        }
        Ok(())
    }

    /// Wrap a label map as a single-channel u8 volume.
    pub fn from_labels(labels: &LabelVolume) -> Self {
        StoredVolume {
            dims: labels.dims,
            spacing_mm: labels.spacing_mm,
            channels: 1,
            payload: VolumePayload::U8(labels.data.clone()),
        }
    }

    /// Interpret a single-channel u8 volume as a label map.
    pub fn to_labels(&self) -> Result<LabelVolume> {
        if self.channels != 1 {
            return Err(Error::ShapeMismatch(format!(
                "label volumes are single-channel, this one has {}",
                self.channels
            )));
        }
        match &self.payload {
            VolumePayload::U8(d) => LabelVolume::new(self.dims, self.spacing_mm, d.clone()),
            VolumePayload::F32(_) => {
                Err(Error::ShapeMismatch("label volumes must be stored as u8, found f32".into()))
            }
        }
    }

    /// One channel, converted to the requested scalar type.
    pub fn channel_as<T: Scalar>(&self, c: usize) -> Result<Volume3<T>> {
        if c >= self.channels {
            return Err(Error::ShapeMismatch(format!(
                "channel {c} requested from a {}-channel volume",
                self.channels
            )));
        }
        let v = self.voxels();
        let data = match &self.payload {
            VolumePayload::F32(d) => {
                d[c * v..(c + 1) * v].iter().map(|&x| T::of_f64(x as f64)).collect()
            }
            VolumePayload::U8(d) => {
                d[c * v..(c + 1) * v].iter().map(|&x| T::of_f64(x as f64)).collect()
            }
        };
        Volume3::new(self.dims, data)
    }
}

/// Sidecar path of a payload path: the same name with `.json` appended.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_os_string();
    name.push(".json");
    PathBuf::from(name)
}

/// Write payload and sidecar atomically.
pub fn write_volume(path: &Path, volume: &StoredVolume) -> Result<()> {
    volume.validate()?;
    let header = SidecarHeader {
        dims: volume.dims,
        spacing_mm: volume.spacing_mm,
        dtype: volume.dtype(),
        channels: volume.channels,
        byte_order: "little".into(),
    };
    let sidecar = sidecar_path(path);
    let mut header_json = serde_json::to_string_pretty(&header)
        .map_err(|e| Error::json(sidecar.display().to_string(), e))?;
    header_json.push('\n');

    let bytes = match &volume.payload {
        VolumePayload::F32(d) => {
            let mut out = Vec::with_capacity(4 * d.len());
            for &v in d {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out
        }
        VolumePayload::U8(d) => d.clone(),
    };
    super::atomic_write(path, &bytes)?;
    super::atomic_write(&sidecar, header_json.as_bytes())
}

/// Read a volume back; fails on a missing sidecar, an unknown dtype, or a
/// payload whose length disagrees with the header.
pub fn read_volume(path: &Path) -> Result<StoredVolume> {
    let sidecar = sidecar_path(path);
    let header_text = std::fs::read_to_string(&sidecar).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::format(sidecar.display().to_string(), "missing sidecar header")
        } else {
            Error::io(sidecar.display().to_string(), e)
        }
    })?;
    let header: SidecarHeader = serde_json::from_str(&header_text)
        .map_err(|e| Error::json(sidecar.display().to_string(), e))?;
    if header.byte_order != "little" {
        return Err(Error::format(
            sidecar.display().to_string(),
            format!("unsupported byte order {:?}; volumes are little-endian", header.byte_order),
        ));
    }

    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let expected = header.channels * header.dims[0] * header.dims[1] * header.dims[2] * header.dtype.size();
    if bytes.len() != expected {
        return Err(Error::format(
            path.display().to_string(),
            format!("payload is {} bytes but the header needs {} bytes", bytes.len(), expected),
        ));
    }
    let payload = match header.dtype {
        Dtype::F32 => VolumePayload::F32(bytes.chunks_exact(4).map(f32::read_le).collect()),
        Dtype::U8 => VolumePayload::U8(bytes),
    };
    Ok(StoredVolume {
        dims: header.dims,
        spacing_mm: header.spacing_mm,
        channels: header.channels,
        payload,
    })
}
