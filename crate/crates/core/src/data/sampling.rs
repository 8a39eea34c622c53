//! Random patch extraction and per-step batch assembly.

use rand::Rng;

use super::io::read_volume;
use super::manifest::DatasetManifest;
use super::preprocess::{clip_and_normalize, resample_isotropic};
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::rng::{seeded, stream_rng, Stream};
use crate::volume::{linear_index, voxel_count, Dims, Role, Volume};

/// Crop origin of a patch inside a (possibly padded) volume.
///
/// `pad_before[a]` voxels of padding precede the volume on axis `a`; the
/// crop starts at `offset[a]` in padded coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Crop {
    pub pad_before: [usize; 3],
    pub offset: [usize; 3],
}

pub fn random_crop(dims: Dims, patch: Dims, rng: &mut impl Rng) -> Crop {
    let mut crop = Crop {
        pad_before: [0; 3],
        offset: [0; 3],
    };
    for a in 0..3 {
        let padded = if dims[a] < patch[a] {
            crop.pad_before[a] = (patch[a] - dims[a]) / 2;
            patch[a]
        } else {
            dims[a]
        };
        crop.offset[a] = rng.gen_range(0..=padded - patch[a]);
    }
    crop
}

/// Cuts `patch` out of `v` at `crop`; padding voxels are zero (background
/// for label volumes).
pub fn extract(v: &Volume, crop: Crop, patch: Dims) -> Result<Volume> {
    let dims = v.dims();
    let n_out = voxel_count(patch);
    let n_in = v.voxels();
    let mut out = vec![0f32; n_out * v.channels()];
    for c in 0..v.channels() {
        let src = &v.values()[c * n_in..(c + 1) * n_in];
        let dst = &mut out[c * n_out..(c + 1) * n_out];
        for z in 0..patch[2] {
            let zs = (z + crop.offset[2]).checked_sub(crop.pad_before[2]);
            let Some(zs) = zs.filter(|&zs| zs < dims[2]) else { continue };
            for y in 0..patch[1] {
                let ys = (y + crop.offset[1]).checked_sub(crop.pad_before[1]);
                let Some(ys) = ys.filter(|&ys| ys < dims[1]) else { continue };
                for x in 0..patch[0] {
                    let xs = (x + crop.offset[0]).checked_sub(crop.pad_before[0]);
                    if let Some(xs) = xs.filter(|&xs| xs < dims[0]) {
                        dst[linear_index(patch, x, y, z)] = src[linear_index(dims, xs, ys, zs)];
                    }
                }
            }
        }
    }
    Volume::from_raw_parts(
        patch,
        v.channels(),
        v.spacing(),
        v.role(),
        v.class_count(),
        out,
    )
}

/// Uniform random crop of exactly `patch`, zero-padding symmetrically on
/// axes where the volume is smaller than the patch.
pub fn sample_patch(v: &Volume, patch: Dims, seed: u64) -> Result<Volume> {
    let crop = random_crop(v.dims(), patch, &mut seeded(seed));
    extract(v, crop, patch)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub labeled_images: Vec<Volume>,
    pub labels: Vec<Volume>,
    pub unlabeled_images: Vec<Volume>,
}

impl Batch {
    pub fn patch_shape(&self) -> Option<Dims> {
        self.labeled_images.first().map(Volume::dims)
    }
}

/// Preprocessed volumes held in memory for the duration of a run.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub class_count: usize,
    pub labeled: Vec<(Volume, Volume)>,
    pub unlabeled: Vec<Volume>,
    pub validation: Vec<(Volume, Volume)>,
}

/// Clip (when configured) and resample (when configured) one volume.
pub fn preprocess(v: Volume, cfg: &TrainConfig) -> Result<Volume> {
    let v = match (v.role(), cfg.clip_lo, cfg.clip_hi) {
        (Role::Image, Some(lo), Some(hi)) => clip_and_normalize(&v, lo, hi)?,
        _ => v,
    };
    match cfg.target_spacing {
        Some(t) => resample_isotropic(&v, t),
        None => Ok(v),
    }
}

fn load_pair(image: &std::path::Path, label: &std::path::Path, cfg: &TrainConfig) -> Result<(Volume, Volume)> {
    let img = preprocess(read_volume(image)?, cfg)?;
    let lab = preprocess(read_volume(label)?, cfg)?;
    if img.dims() != lab.dims() {
        return Err(Error::shape("image/label pair", &img.dims(), &lab.dims()));
    }
    Ok((img, lab))
}

impl Dataset {
    pub fn load(manifest: &DatasetManifest, cfg: &TrainConfig) -> Result<Self> {
        manifest.validate()?;
        let labeled = manifest
            .labeled
            .iter()
            .map(|e| load_pair(&e.image, &e.label, cfg))
            .collect::<Result<Vec<_>>>()?;
        let unlabeled = manifest
            .unlabeled
            .iter()
            .map(|p| preprocess(read_volume(p)?, cfg))
            .collect::<Result<Vec<_>>>()?;
        let validation = manifest
            .validation_entries()
            .iter()
            .map(|e| load_pair(&e.image, &e.label, cfg))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            class_count: manifest.class_count,
            labeled,
            unlabeled,
            validation,
        })
    }

    /// Batch for training step `step`: draws with replacement, keyed by
    /// `(seed, step)` so the sequence is reproducible from any step.
    pub fn assemble_batch(&self, cfg: &TrainConfig, seed: u64, step: u64) -> Result<Batch> {
        let semi = cfg.semi_losses_enabled();
        if semi && self.unlabeled.is_empty() {
            return Err(Error::Config(
                "semi-supervised losses are enabled but the manifest has no unlabeled volumes"
                    .into(),
            ));
        }
        if self.labeled.is_empty() {
            return Err(Error::Config("no labeled volumes".into()));
        }
        let mut rng = stream_rng(seed, step, Stream::Batch);
        let patch = cfg.patch_shape;
        let mut batch = Batch {
            labeled_images: Vec::with_capacity(cfg.labeled_per_batch),
            labels: Vec::with_capacity(cfg.labeled_per_batch),
            unlabeled_images: Vec::with_capacity(cfg.unlabeled_per_batch),
        };
        for _ in 0..cfg.labeled_per_batch {
            let (img, lab) = &self.labeled[rng.gen_range(0..self.labeled.len())];
            let crop = random_crop(img.dims(), patch, &mut rng);
            batch.labeled_images.push(extract(img, crop, patch)?);
            batch.labels.push(extract(lab, crop, patch)?);
        }
        if semi {
            for _ in 0..cfg.unlabeled_per_batch {
                let img = &self.unlabeled[rng.gen_range(0..self.unlabeled.len())];
                let crop = random_crop(img.dims(), patch, &mut rng);
                batch.unlabeled_images.push(extract(img, crop, patch)?);
            }
        }
        Ok(batch)
    }
}

/// Loads the manifest's volumes and assembles the batch for `seed`.
pub fn assemble_batch(manifest: &DatasetManifest, cfg: &TrainConfig, seed: u64) -> Result<Batch> {
    Dataset::load(manifest, cfg)?.assemble_batch(cfg, seed, 0)
}
