//! Semi-supervised volumetric segmentation with a mean teacher,
//! pseudo-label-guided mixing, sharpening and multi-scale consistency.
//!
//! The crate is organised bottom-up: [`volume`] and [`data`] handle voxel
//! grids and datasets, [`backbone`] is the encoder-decoder with its
//! gradients, [`plgdf`] holds the loss terms, [`trainer`] runs the training
//! loop, and [`inference`] and [`metrics`] cover evaluation.

pub mod backbone;
pub mod config;
pub mod data;
pub mod error;
pub mod inference;
pub mod metrics;
pub mod plgdf;
pub mod rng;
pub mod trainer;
pub mod volume;

pub use backbone::{BackboneConfig, MultiScalePrediction, Network, ParamSet, TeacherStudentState};
pub use config::{LrSchedule, TrainConfig};
pub use data::{Batch, Dataset, DatasetManifest, PhantomSpec};
pub use error::{Error, Result};
pub use inference::SlidingWindowSpec;
pub use metrics::{MetricsRecord, MetricsSummary};
pub use plgdf::{LossReport, ProbMap};
pub use trainer::{Checkpoint, TrainOutcome, TrainState, Trainer};
pub use volume::{Dims, Role, Volume};
