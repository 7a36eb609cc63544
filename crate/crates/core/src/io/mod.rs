//! File formats and synthetic data generation.

pub mod embedding;
pub mod manifest;
pub mod toy;

pub use embedding::{read_embeddings, write_embeddings};
pub use manifest::{load_dataset, save_dataset, DatasetManifest, ManifestRecord};
pub use toy::{gen_toy, ToyData, ToyGenConfig};
