//! IO, datasets, training protocol and CLI plumbing for the TSViT PEFT
//! experiments. Pure computation lives in `tsvit-core`; this crate adds
//! file formats, the synthetic data generator, the training loop and the
//! command-line interface.

pub mod batch;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod manifest;
pub mod metrics;
pub mod synthetic;
pub mod tile;
pub mod train;
pub mod util;

pub use config::ExperimentConfig;
pub use error::{Result, RunError};
pub use manifest::{DatasetManifest, Split};
pub use metrics::Metrics;
pub use tile::{read_tile, write_tile, Tile};
pub use train::{evaluate, lr_sweep, train, HParams, History};
