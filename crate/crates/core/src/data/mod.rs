//! Datasets: a JSON manifest plus raw little-endian `f32` blobs, padded
//! batching with validity masks, and a planted-signal synthetic generator.

mod batch;
mod format;
mod synthetic;

pub use batch::{batch_indices, BatchIter, ModalityBatch};
pub use format::{read_dataset, write_dataset, Dataset, DatasetManifest, LabelsEntry, ModalityEntry, FORMAT_NAME, FORMAT_VERSION};
pub use synthetic::{generate_synthetic, PlantedInfo, SyntheticDataset, SyntheticSpec};
