//! Binary checkpoint: an 8-byte magic, a little-endian `u32` format version
//! and `u64` header length, a JSON header, then the raw little-endian `f32`
//! data of the student, teacher and momentum tensors in header order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainState;
use crate::backbone::{Param, ParamSet, TeacherStudentState};
use crate::config::TrainConfig;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"PLGDFCK\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub class_count: usize,
    pub state: TrainState,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    step: u64,
    class_count: usize,
    config: TrainConfig,
    ema_decay: f64,
    best_val_dice: Option<f64>,
    best_step: Option<u64>,
    history: Vec<(u64, f64)>,
    tensors: Vec<TensorInfo>,
}

fn push_tensors(out: &mut Vec<u8>, set: &ParamSet<f32>) {
    for v in set.iter_values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let s = &ckpt.state;
    let header = Header {
        step: s.step,
        class_count: ckpt.class_count,
        config: ckpt.config.clone(),
        ema_decay: s.ts.ema_decay,
        best_val_dice: s.best_val_dice,
        best_step: s.best_step,
        history: s.history.clone(),
        tensors: s
            .ts
            .student
            .params
            .iter()
            .map(|p| TensorInfo {
                name: p.name.clone(),
                shape: p.shape.clone(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)
        .map_err(|e| Error::format(path, format!("cannot encode header: {e}")))?;
    let mut out = Vec::with_capacity(24 + json.len() + 12 * s.ts.student.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    push_tensors(&mut out, &s.ts.student);
    push_tensors(&mut out, &s.ts.teacher);
    push_tensors(&mut out, &s.momentum);
    // write to a sibling file first so an interrupted save never truncates
    let tmp = path.with_extension("ckpt.tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&out).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::format(path, msg.to_string());
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(bad(&format!("unsupported checkpoint version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(20..).ok_or_else(|| bad("truncated"))?;
    if body.len() < hlen {
        return Err(bad("truncated header"));
    }
    let header: Header = serde_json::from_slice(&body[..hlen])
        .map_err(|e| Error::format(path, format!("bad header: {e}")))?;
    let data = &body[hlen..];
    let count: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    if data.len() != 3 * 4 * count {
        return Err(bad(&format!(
            "expected {} data bytes, found {}",
            12 * count,
            data.len()
        )));
    }
    let mut floats = data
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
    let mut read_set = || ParamSet {
        params: header
            .tensors
            .iter()
            .map(|t| Param {
                name: t.name.clone(),
                shape: t.shape.clone(),
                data: floats.by_ref().take(t.shape.iter().product()).collect(),
            })
            .collect(),
    };
    let student = read_set();
    let teacher = read_set();
    let momentum = read_set();
    Ok(Checkpoint {
        config: header.config,
        class_count: header.class_count,
        state: TrainState {
            step: header.step,
            ts: TeacherStudentState {
                student,
                teacher,
                ema_decay: header.ema_decay,
            },
            momentum,
            best_val_dice: header.best_val_dice,
            best_step: header.best_step,
            history: header.history,
        },
    })
}
