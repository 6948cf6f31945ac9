//! Handwritten mathematical expression recognition with implicit-character
//! auxiliary supervision: tensors and autodiff, encoder and decoder, training,
//! beam decoding and evaluation.

pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod flops;
pub mod error;
pub mod gradcheck;
pub mod iccm;
pub mod infer;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod seed;
pub mod tensor;
pub mod train;
pub mod vocab;

pub use config::{DecoderConfig, EncoderConfig, ModelConfig, Preset};
pub use error::{Error, Result};
pub use model::{LossToggles, Model, Readout};
