//! Synthetic surrogate datasets, Netpbm ingestion and tensor persistence.

pub mod checkpoint;
pub mod netpbm;
pub mod synthetic;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, TensorFile};
pub use netpbm::{load_image_directory, parse_netpbm, ImageDirectory};
pub use synthetic::{generate_synthetic_dataset, Domain, LabeledFrame, SyntheticSpec};
