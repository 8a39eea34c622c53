//! Volume files: a TOML header next to a raw little-endian payload.
//!
//! `scan_000.hdr` describes the grid and `scan_000.raw` holds the values in
//! x-fastest order (channel-major for multi-channel volumes). Images and
//! probabilities are stored as `f32`, labels as `u8`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{voxel_count, Dims, Role, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    U8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeHeader {
    pub dims: Dims,
    pub spacing_mm: [f64; 3],
    pub dtype: Dtype,
    pub role: Role,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_count: Option<usize>,
    #[serde(default = "one")]
    pub channels: usize,
}

fn one() -> usize {
    1
}

/// Payload path belonging to a header path.
pub fn raw_path(header: &Path) -> PathBuf {
    header.with_extension("raw")
}

pub fn header_for(v: &Volume) -> VolumeHeader {
    VolumeHeader {
        dims: v.dims(),
        spacing_mm: v.spacing(),
        dtype: if v.role() == Role::Label {
            Dtype::U8
        } else {
            Dtype::F32
        },
        role: v.role(),
        class_count: v.class_count(),
        channels: v.channels(),
    }
}

pub fn encode_payload(v: &Volume) -> Vec<u8> {
    match v.role() {
        Role::Label => v.labels(),
        _ => {
            let mut out = Vec::with_capacity(v.values().len() * 4);
            for x in v.values() {
                out.extend_from_slice(&x.to_le_bytes());
            }
            out
        }
    }
}

/// Writes `<path>` (header) and its `.raw` sibling.
pub fn write_volume(path: &Path, v: &Volume) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let header = toml::to_string(&header_for(v))
        .map_err(|e| Error::format(path, format!("cannot serialize header: {e}")))?;
    fs::write(path, header).map_err(|e| Error::io(path, e))?;
    let raw = raw_path(path);
    fs::write(&raw, encode_payload(v)).map_err(|e| Error::io(&raw, e))?;
    Ok(())
}

pub fn read_header(path: &Path) -> Result<VolumeHeader> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let header = read_header(path)?;
    let raw = raw_path(path);
    let bytes = fs::read(&raw).map_err(|e| Error::io(&raw, e))?;
    let count = voxel_count(header.dims) * header.channels;
    let values: Vec<f32> = match header.dtype {
        Dtype::U8 => {
            if bytes.len() != count {
                return Err(Error::format(
                    &raw,
                    format!("expected {count} bytes, found {}", bytes.len()),
                ));
            }
            bytes.iter().map(|&b| b as f32).collect()
        }
        Dtype::F32 => {
            if bytes.len() != count * 4 {
                return Err(Error::format(
                    &raw,
                    format!("expected {} bytes, found {}", count * 4, bytes.len()),
                ));
            }
            bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect()
        }
    };
    if header.role == Role::Label && header.dtype != Dtype::U8 {
        return Err(Error::format(path, "label volumes must use dtype u8"));
    }
    Volume::from_raw_parts(
        header.dims,
        header.channels,
        header.spacing_mm,
        header.role,
        header.class_count,
        values,
    )
    .map_err(|e| Error::format(path, e.to_string()))
}
