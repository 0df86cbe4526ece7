//! Raw volume/sinogram files with a TOML sidecar header.
//!
//! `name.raw` holds little-endian `f32` values in C order (slowest axis
//! first); `name.raw.toml` holds the [`VolumeHeader`]. Every write goes to a
//! temporary file in the destination directory and is renamed into place.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tomo::Geometry;
use crate::{Sinogram, Volume};

pub const DTYPE_F32LE: &str = "f32le";
pub const LAYOUT_C_ORDER: &str = "c-order";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeHeader {
    pub shape: [usize; 3],
    pub dtype: String,
    pub layout: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    /// Acquisition geometry, present for sinograms.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub geometry: Option<Geometry>,
}

impl VolumeHeader {
    pub fn new(shape: [usize; 3]) -> Self {
        Self {
            shape,
            dtype: DTYPE_F32LE.into(),
            layout: LAYOUT_C_ORDER.into(),
            description: None,
            geometry: None,
        }
    }

    pub fn payload_bytes(&self) -> usize {
        self.shape.iter().product::<usize>() * 4
    }

    pub fn validate(&self) -> Result<()> {
        if self.shape.contains(&0) {
            return Err(format_err(
                "shape",
                format!("entries must be at least 1, got {:?}", self.shape),
            ));
        }
        if self.dtype != DTYPE_F32LE {
            return Err(format_err(
                "dtype",
                format!("unsupported element type `{}`", self.dtype),
            ));
        }
        if self.layout != LAYOUT_C_ORDER {
            return Err(format_err(
                "layout",
                format!("unsupported layout `{}`", self.layout),
            ));
        }
        if let Some(g) = &self.geometry {
            g.validate()
                .map_err(|e| format_err("geometry", e.to_string()))?;
            if g.sinogram_shape() != self.shape {
                return Err(format_err(
                    "geometry",
                    format!(
                        "describes a {:?} sinogram but shape is {:?}",
                        g.sinogram_shape(),
                        self.shape
                    ),
                ));
            }
        }
        Ok(())
    }
}

fn format_err(field: &str, reason: impl Into<String>) -> Error {
    Error::Format {
        field: field.into(),
        reason: reason.into(),
    }
}

pub fn header_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".toml");
    PathBuf::from(s)
}

/// Writes `bytes` to `path` through a temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

fn encode(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn write_pair(path: &Path, header: &VolumeHeader, values: &[f32]) -> Result<()> {
    header.validate()?;
    let text = toml::to_string(header).map_err(|e| format_err("header", e.to_string()))?;
    write_atomic(path, &encode(values))?;
    write_atomic(&header_path(path), text.as_bytes())
}

pub fn read_header(path: &Path) -> Result<VolumeHeader> {
    let text = fs::read_to_string(header_path(path))?;
    let header: VolumeHeader =
        toml::from_str(&text).map_err(|e| format_err("header", e.message().to_string()))?;
    header.validate()?;
    Ok(header)
}

fn read_pair(path: &Path) -> Result<(VolumeHeader, Vec<f32>)> {
    let header = read_header(path)?;
    let bytes = fs::read(path)?;
    if bytes.len() != header.payload_bytes() {
        return Err(format_err(
            "shape",
            format!(
                "header shape {:?} needs {} payload bytes, file has {}",
                header.shape,
                header.payload_bytes(),
                bytes.len()
            ),
        ));
    }
    let values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((header, values))
}

pub fn save_volume(path: &Path, x: &Volume) -> Result<()> {
    save_volume_described(path, x, None)
}

pub fn save_volume_described(path: &Path, x: &Volume, description: Option<&str>) -> Result<()> {
    let mut header = VolumeHeader::new(x.shape());
    header.description = description.map(str::to_owned);
    write_pair(path, &header, x.data())
}

pub fn load_volume(path: &Path) -> Result<Volume> {
    let (header, values) = read_pair(path)?;
    Volume::new(header.shape, values)
}

pub fn save_sinogram(path: &Path, y: &Sinogram, geometry: &Geometry) -> Result<()> {
    let mut header = VolumeHeader::new(y.shape());
    header.description = Some("sinogram (slice, view, bin)".into());
    header.geometry = Some(geometry.clone());
    write_pair(path, &header, y.data())
}

/// Loads a sinogram and the geometry stored alongside it, if any.
pub fn load_sinogram(path: &Path) -> Result<(Sinogram, Option<Geometry>)> {
    let (header, values) = read_pair(path)?;
    Ok((Sinogram::new(header.shape, values)?, header.geometry))
}
