//! Volume ingestion, preprocessing, synthetic phantoms and batch assembly.

pub mod io;
pub mod manifest;
pub mod phantom;
pub mod preprocess;
pub mod sampling;

pub use io::{read_volume, write_volume, VolumeHeader};
pub use manifest::{DatasetManifest, LabeledEntry};
pub use phantom::{generate_phantom, generate_phantom_dataset, PhantomSpec};
pub use preprocess::{clip_and_normalize, resample_isotropic};
pub use sampling::{assemble_batch, extract, random_crop, sample_patch, Batch, Crop, Dataset};
