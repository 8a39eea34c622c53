//! Sliding-window prediction over whole volumes.

use serde::{Deserialize, Serialize};

use crate::backbone::{Network, ParamSet};
use crate::data::{extract, Crop};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, MetricsRecord};
use crate::volume::{linear_index, voxel_count, Dims, Role, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlidingWindowSpec {
    pub patch_shape: Dims,
    pub stride: Dims,
}

impl SlidingWindowSpec {
    pub fn validate(&self) -> Result<()> {
        for a in 0..3 {
            if self.stride[a] == 0 || self.stride[a] > self.patch_shape[a] {
                return Err(Error::Config(format!(
                    "window stride {:?} must satisfy 1 <= stride <= patch {:?} on every axis",
                    self.stride, self.patch_shape
                )));
            }
        }
        Ok(())
    }
}

/// Window start positions along one axis. The last window is snapped flush
/// to the end; a single window at 0 covers axes shorter than the patch.
pub fn window_offsets(len: usize, patch: usize, stride: usize) -> Vec<usize> {
    let mut offsets = vec![0];
    if len <= patch {
        return offsets;
    }
    let last = len - patch;
    while *offsets.last().unwrap() < last {
        let next = (offsets.last().unwrap() + stride).min(last);
        offsets.push(next);
    }
    offsets
}

/// Averages the per-window outputs of `model` over `v`.
///
/// Windows that extend past a short axis are zero-padded and the padding is
/// discarded from the output. Returns the mean probabilities and how many
/// windows covered each voxel.
pub fn aggregate_windows(
    v: &Volume,
    spec: &SlidingWindowSpec,
    class_count: usize,
    mut model: impl FnMut(&Volume) -> Result<Volume>,
) -> Result<(Volume, Vec<u32>)> {
    spec.validate()?;
    if v.role() != Role::Image {
        return Err(Error::InvalidArgument("sliding-window input must be an image".into()));
    }
    let dims = v.dims();
    let patch = spec.patch_shape;
    let n = v.voxels();
    let mut sums = vec![0f64; class_count * n];
    let mut counts = vec![0u32; n];
    let axes: Vec<Vec<usize>> = (0..3).map(|a| window_offsets(dims[a], patch[a], spec.stride[a])).collect();
    let np = voxel_count(patch);
    for &oz in &axes[2] {
        for &oy in &axes[1] {
            for &ox in &axes[0] {
                let crop = Crop {
                    pad_before: [0; 3],
                    offset: [ox, oy, oz],
                };
                let window = extract(v, crop, patch)?;
                let probs = model(&window)?;
                if probs.channels() != class_count || probs.dims() != patch {
                    return Err(Error::shape(
                        "window prediction",
                        &[class_count, patch[0], patch[1], patch[2]],
                        &[probs.channels(), probs.dims()[0], probs.dims()[1], probs.dims()[2]],
                    ));
                }
                let hi = [
                    patch[0].min(dims[0] - ox),
                    patch[1].min(dims[1] - oy),
                    patch[2].min(dims[2] - oz),
                ];
                for z in 0..hi[2] {
                    for y in 0..hi[1] {
                        for x in 0..hi[0] {
                            let dst = linear_index(dims, x + ox, y + oy, z + oz);
                            let src = linear_index(patch, x, y, z);
                            counts[dst] += 1;
                            for c in 0..class_count {
                                sums[c * n + dst] += probs.values()[c * np + src] as f64;
                            }
                        }
                    }
                }
            }
        }
    }
    let values = sums
        .iter()
        .enumerate()
        .map(|(k, s)| (s / counts[k % n] as f64) as f32)
        .collect();
    let probs = Volume::probability(dims, v.spacing(), class_count, values)?;
    Ok((probs, counts))
}

/// Mean top-head probabilities over sliding windows, and their argmax.
pub fn predict_volume(
    net: &Network,
    params: &ParamSet<f32>,
    v: &Volume,
    spec: &SlidingWindowSpec,
    class_count: usize,
) -> Result<(Volume, Volume)> {
    if net.config().class_count != class_count {
        return Err(Error::InvalidArgument(format!(
            "model predicts {} classes, {class_count} requested",
            net.config().class_count
        )));
    }
    net.check_params(params)?;
    let (probs, _) = aggregate_windows(v, spec, class_count, |w| net.forward_top(params, w))?;
    let labels = Volume::label(v.dims(), v.spacing(), class_count, &probs.argmax_labels())?;
    Ok((probs, labels))
}

/// Scores a predicted label volume against ground truth.
pub fn evaluate_volume(pred: &Volume, gt: &Volume, spacing: [f64; 3]) -> Result<MetricsRecord> {
    evaluate(pred, gt, spacing)
}
