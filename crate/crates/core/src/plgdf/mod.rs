//! Pseudo-label generation, mixing, sharpening, the loss terms and the
//! consistency-weight schedule.
//!
//! Loss code works in `f64` on [`ProbMap`]s regardless of the network's
//! precision. Targets (pseudo labels, sharpened soft labels, rectification
//! weights) enter every loss as constants.

mod augment;
mod consistency;
mod losses;
mod schedule;
mod sharpen;
mod total;

pub use augment::{add_noise, make_pseudo_label, mix, mix_with_lambda, sample_mix_lambda, MixParams};
pub use consistency::{
    consis_frozen, consis_loss, consis_surrogate, ConsisFrozen, ConsisOptions, DTerm, NormKind,
};
pub use losses::{
    ce_loss, ce_loss_grad, dice_loss, dice_loss_grad, semi_loss, semi_loss_grad, sharp_loss,
    sharp_loss_grad, sup_loss, sup_loss_grad, PROB_FLOOR,
};
pub use schedule::{rampup_weight, RampupSchedule};
pub use sharpen::sharpen;
pub use total::{total_loss, total_loss_frozen, LossGrads, LossInputs, LossReport, LossSettings, LossToggles};

use crate::error::{Error, Result};
use crate::volume::{Dims, Role, Volume};

/// Per-voxel class probabilities, channel-major: `data[c * voxels + i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    classes: usize,
    voxels: usize,
    data: Vec<f64>,
}

impl ProbMap {
    pub fn new(classes: usize, voxels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != classes * voxels {
            return Err(Error::shape("probability map", &[classes, voxels], &[data.len()]));
        }
        Ok(Self {
            classes,
            voxels,
            data,
        })
    }

    pub fn zeros(classes: usize, voxels: usize) -> Self {
        Self {
            classes,
            voxels,
            data: vec![0.0; classes * voxels],
        }
    }

    /// Builds a map from per-voxel rows (`rows[i][c]`).
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let classes = rows.first().map_or(0, Vec::len);
        let voxels = rows.len();
        let mut data = vec![0.0; classes * voxels];
        for (i, r) in rows.iter().enumerate() {
            if r.len() != classes {
                return Err(Error::shape("probability row", &[classes], &[r.len()]));
            }
            for (c, &p) in r.iter().enumerate() {
                data[c * voxels + i] = p;
            }
        }
        Self::new(classes, voxels, data)
    }

    pub fn from_volume(v: &Volume) -> Result<Self> {
        if v.role() != Role::Probability {
            return Err(Error::InvalidArgument(format!(
                "expected a probability volume, got {:?}",
                v.role()
            )));
        }
        Self::new(
            v.channels(),
            v.voxels(),
            v.values().iter().map(|&p| p as f64).collect(),
        )
    }

    pub fn to_volume(&self, dims: Dims, spacing: [f64; 3]) -> Result<Volume> {
        Volume::probability(
            dims,
            spacing,
            self.classes,
            self.data.iter().map(|&p| p as f32).collect(),
        )
    }

    pub fn one_hot(labels: &[u8], classes: usize) -> Self {
        let n = labels.len();
        let mut m = Self::zeros(classes, n);
        for (i, &l) in labels.iter().enumerate() {
            m.data[l as usize * n + i] = 1.0;
        }
        m
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn voxels(&self) -> usize {
        self.voxels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, class: usize, voxel: usize) -> f64 {
        self.data[class * self.voxels + voxel]
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.classes, self.voxels]
    }

    pub(crate) fn check_same_shape(&self, other: &Self, context: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(context, &self.shape(), &other.shape()));
        }
        Ok(())
    }

    /// Concatenates maps along the voxel axis.
    pub fn concat(maps: &[&ProbMap]) -> Result<Self> {
        let Some(first) = maps.first() else {
            return Err(Error::InvalidArgument("cannot concatenate zero maps".into()));
        };
        let classes = first.classes;
        if let Some(bad) = maps.iter().find(|m| m.classes != classes) {
            return Err(Error::shape("concatenated class count", &[classes], &[bad.classes]));
        }
        let voxels: usize = maps.iter().map(|m| m.voxels).sum();
        let mut data = Vec::with_capacity(classes * voxels);
        for c in 0..classes {
            for m in maps {
                data.extend_from_slice(&m.data[c * m.voxels..(c + 1) * m.voxels]);
            }
        }
        Self::new(classes, voxels, data)
    }

    /// Inverse of [`ProbMap::concat`] for the given voxel counts.
    pub fn split(&self, sizes: &[usize]) -> Result<Vec<Self>> {
        if sizes.iter().sum::<usize>() != self.voxels {
            return Err(Error::shape("split sizes", &[self.voxels], sizes));
        }
        let mut out: Vec<Self> = sizes.iter().map(|&n| Self::zeros(self.classes, n)).collect();
        for c in 0..self.classes {
            let mut start = c * self.voxels;
            for (m, &n) in out.iter_mut().zip(sizes) {
                m.data[c * n..(c + 1) * n].copy_from_slice(&self.data[start..start + n]);
                start += n;
            }
        }
        Ok(out)
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    /// Per-voxel argmax, lowest class on ties.
    pub fn argmax(&self) -> Vec<u8> {
        (0..self.voxels)
            .map(|i| {
                let mut best = 0;
                for c in 1..self.classes {
                    if self.get(c, i) > self.get(best, i) {
                        best = c;
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
    fn concat_split_roundtrip() {
        let a = ProbMap::from_rows(&[vec![0.1, 0.9], vec![0.4, 0.6]]).unwrap();
        let b = ProbMap::from_rows(&[vec![0.7, 0.3]]).unwrap();
        let c = ProbMap::concat(&[&a, &b]).unwrap();
        assert_eq!(c.voxels(), 3);
        assert_eq!(c.get(0, 2), 0.7);
        assert_eq!(c.get(1, 1), 0.6);
        assert_eq!(c.split(&[2, 1]).unwrap(), vec![a, b]);
    }
}
