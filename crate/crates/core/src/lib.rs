//! Differential-attention Siamese change detection for bi-temporal SAR
//! flood mapping, with the data, training, evaluation and large-scene
//! mapping pipeline around it.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod determinism;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod inference;
pub mod maps;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tokens;
pub mod train;

pub use candle_core::{DType, Device};
pub use config::{ModelConfig, StageConfig};
pub use error::{Error, ErrorKind, Result};
pub use maps::{BinaryMask, ProbabilityMap};
pub use model::{DamNet, ModelOutput};
pub use nn::Mode;
