//! Dense 3D grids shared by every stage of the pipeline.
//!
//! Values are stored channel-major, and within a channel in x-fastest order:
//! `index = c * nvox + x + nx * (y + ny * z)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Grid extent along x, y, z.
pub type Dims = [usize; 3];

/// Semantic role of the stored values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Image,
    Label,
    Probability,
}

/// Tolerance on the per-voxel channel sum of probability volumes.
pub const SIMPLEX_TOL: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: Dims,
    channels: usize,
    spacing: [f64; 3],
    role: Role,
    class_count: Option<usize>,
    values: Vec<f32>,
}

pub fn voxel_count(dims: Dims) -> usize {
    dims[0] * dims[1] * dims[2]
}

#[inline]
pub fn linear_index(dims: Dims, x: usize, y: usize, z: usize) -> usize {
    x + dims[0] * (y + dims[1] * z)
}

fn check_spacing(spacing: [f64; 3]) -> Result<()> {
    if spacing.iter().all(|s| s.is_finite() && *s > 0.0) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "voxel spacing must be strictly positive, got {spacing:?}"
        )))
    }
}

impl Volume {
    pub fn image(dims: Dims, spacing: [f64; 3], values: Vec<f32>) -> Result<Self> {
        check_spacing(spacing)?;
        if values.len() != voxel_count(dims) {
            return Err(Error::shape(
                "image volume",
                &[voxel_count(dims)],
                &[values.len()],
            ));
        }
        Ok(Self {
            dims,
            channels: 1,
            spacing,
            role: Role::Image,
            class_count: None,
            values,
        })
    }

    pub fn zeros(dims: Dims, spacing: [f64; 3]) -> Result<Self> {
        Self::image(dims, spacing, vec![0.0; voxel_count(dims)])
    }

    pub fn label(dims: Dims, spacing: [f64; 3], class_count: usize, labels: &[u8]) -> Result<Self> {
        check_spacing(spacing)?;
        if labels.len() != voxel_count(dims) {
            return Err(Error::shape(
                "label volume",
                &[voxel_count(dims)],
                &[labels.len()],
            ));
        }
        if class_count < 2 || class_count > 256 {
            return Err(Error::InvalidArgument(format!(
                "class_count must be in [2, 256], got {class_count}"
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= class_count) {
            return Err(Error::InvalidArgument(format!(
                "label value {bad} outside [0, {}]",
                class_count - 1
            )));
        }
        Ok(Self {
            dims,
            channels: 1,
            spacing,
            role: Role::Label,
            class_count: Some(class_count),
            values: labels.iter().map(|&l| l as f32).collect(),
        })
    }

    /// Builds a probability volume and checks the simplex invariant.
    pub fn probability(dims: Dims, spacing: [f64; 3], classes: usize, values: Vec<f32>) -> Result<Self> {
        check_spacing(spacing)?;
        let n = voxel_count(dims);
        if values.len() != n * classes {
            return Err(Error::shape(
                "probability volume",
                &[classes, n],
                &[values.len()],
            ));
        }
        let v = Self {
            dims,
            channels: classes,
            spacing,
            role: Role::Probability,
            class_count: Some(classes),
            values,
        };
        v.check_simplex()?;
        Ok(v)
    }

    pub(crate) fn from_raw_parts(
        dims: Dims,
        channels: usize,
        spacing: [f64; 3],
        role: Role,
        class_count: Option<usize>,
        values: Vec<f32>,
    ) -> Result<Self> {
        let v = match role {
            Role::Image => Self::image(dims, spacing, values)?,
            Role::Label => {
                let cc = class_count.ok_or_else(|| {
                    Error::InvalidArgument("label volume requires class_count".into())
                })?;
                let mut labels = Vec::with_capacity(values.len());
                for (i, &v) in values.iter().enumerate() {
                    if v.fract() != 0.0 || v < 0.0 || v >= 256.0 {
                        return Err(Error::InvalidArgument(format!(
                            "label voxel {i} holds non-integer value {v}"
                        )));
                    }
                    labels.push(v as u8);
                }
                Self::label(dims, spacing, cc, &labels)?
            }
            Role::Probability => Self::probability(dims, spacing, channels, values)?,
        };
        Ok(v)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn class_count(&self) -> Option<usize> {
        self.class_count
    }

    pub fn voxels(&self) -> usize {
        voxel_count(self.dims)
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.voxels();
        &self.values[c * n..(c + 1) * n]
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.values[linear_index(self.dims, x, y, z)]
    }

    /// Label values as bytes. Only meaningful for label volumes.
    pub fn labels(&self) -> Vec<u8> {
        self.values.iter().map(|&v| v as u8).collect()
    }

    pub fn with_spacing(mut self, spacing: [f64; 3]) -> Result<Self> {
        check_spacing(spacing)?;
        self.spacing = spacing;
        Ok(self)
    }

    pub fn same_grid(&self, other: &Volume) -> bool {
        self.dims == other.dims
    }

    pub fn check_simplex(&self) -> Result<()> {
        let n = self.voxels();
        for i in 0..n {
            let mut sum = 0.0f64;
            for c in 0..self.channels {
                let p = self.values[c * n + i];
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::InvalidArgument(format!(
                        "probability {p} outside [0, 1] at voxel {i}, channel {c}"
                    )));
                }
                sum += p as f64;
            }
            if (sum - 1.0).abs() > SIMPLEX_TOL {
                return Err(Error::InvalidArgument(format!(
                    "channel sum {sum} at voxel {i} is not 1"
                )));
            }
        }
        Ok(())
    }

    /// Per-voxel argmax over channels, lowest index on ties.
    pub fn argmax_labels(&self) -> Vec<u8> {
        let n = self.voxels();
        (0..n)
            .map(|i| {
                let mut best = 0;
                let mut best_p = self.values[i];
                for c in 1..self.channels {
                    let p = self.values[c * n + i];
                    if p > best_p {
                        best = c;
                        best_p = p;
                    }
                }
                best as u8
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_positive_spacing() {
        assert!(Volume::zeros([2, 2, 2], [1.0, 0.0, 1.0]).is_err());
        assert!(Volume::zeros([2, 2, 2], [1.0, -1.0, 1.0]).is_err());
    }

    #[test]
    fn label_range_checked() {
        assert!(Volume::label([2, 1, 1], [1.0; 3], 2, &[0, 2]).is_err());
        let v = Volume::label([2, 1, 1], [1.0; 3], 3, &[0, 2]).unwrap();
        assert_eq!(v.labels(), vec![0, 2]);
    }

    #[test]
    fn simplex_checked() {
        assert!(Volume::probability([1, 1, 1], [1.0; 3], 2, vec![0.5, 0.6]).is_err());
        let p = Volume::probability([2, 1, 1], [1.0; 3], 2, vec![0.5, 0.3, 0.5, 0.7]).unwrap();
        assert_eq!(p.argmax_labels(), vec![0, 1]);
    }
}
