//! Referring image segmentation with mutual-aware attention.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod decoder;
pub mod encoders;
pub mod enhance;
pub mod error;
pub mod export;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod mutual;
pub mod nn;
pub mod optim;
pub mod tensor;
pub mod trainer;

pub use config::{Dims, TrainConfig};
pub use error::{Error, Result};
pub use model::SegmentationModel;
pub use metrics::EvalReport;
pub use tensor::Tensor;
pub use trainer::{evaluate, train, TrainLog, TrainOptions, TrainOutcome, Variant};
