//! Multi-scale encoder–decoder, its parameters, and the mean-teacher link.

pub mod layers;
pub mod network;
pub mod params;
pub mod real;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Volume;

pub use layers::Feature;
pub use network::{ForwardCache, Network};
pub use params::{ema_update, Param, ParamSet, TeacherStudentState};
pub use real::Real;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub class_count: usize,
    pub base_filters: usize,
    /// Number of down/up stages.
    pub depth: usize,
    pub head_count: usize,
    /// 3³ convolutions per encoder/decoder stage.
    pub block_convs: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            class_count: 2,
            base_filters: 16,
            depth: 4,
            head_count: 4,
            block_convs: 2,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.in_channels == 0 {
            problems.push("in_channels must be >= 1".to_string());
        }
        if self.class_count < 2 {
            problems.push(format!("class_count must be >= 2, got {}", self.class_count));
        }
        if self.base_filters == 0 {
            problems.push("base_filters must be >= 1".into());
        }
        if self.depth == 0 {
            problems.push("depth must be >= 1".into());
        }
        if self.block_convs == 0 {
            problems.push("block_convs must be >= 1".into());
        }
        if self.head_count == 0 || self.head_count > self.depth + 1 {
            problems.push(format!(
                "head_count {} needs depth >= head_count - 1 (depth {})",
                self.head_count, self.depth
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

/// Head outputs of one patch, `maps[0]` being the full-resolution head.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiScalePrediction {
    pub maps: Vec<Volume>,
}

impl MultiScalePrediction {
    pub fn top(&self) -> &Volume {
        &self.maps[0]
    }
}
