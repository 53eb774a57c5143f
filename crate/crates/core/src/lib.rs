//! Future-frame video anomaly detection with prototype-constrained features.
//!
//! A small convolutional encoder/decoder predicts the fifth frame of a video
//! window from the preceding four. Bottleneck features are clustered online
//! by a self-organizing map, aggregated into learned normality prototypes,
//! and fused back before decoding; frames that predict poorly (low PSNR)
//! score as anomalous.

pub mod autoencoder;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod ops;
pub mod pipeline;
pub mod optim;
pub mod prototype;
pub mod scoring;
pub mod som;
pub mod tape;
pub mod tensor;

pub use error::{DataError, DiffError, PipelineError};
pub use tensor::{Element, ParamId, ParamStore, Parameter, Tensor};
