//! Scene text recognition with cross-script transfer training.
//!
//! The crate is self-contained: a deterministic tensor/autograd
//! substrate, a synthetic two-script corpus generator, the Transformer
//! encoder-decoder recognizer, the three-phase transfer-training recipe
//! (multilingual encoder pre-training, resource-poor decoder
//! pre-training, grafted fine-tuning), and an evaluation harness with
//! procedure comparisons and data-size ablations.

pub mod autograd;
pub mod config;
pub mod corpus;
pub mod error;
pub mod harness;
pub mod model;
pub mod params;
pub mod seeds;
pub mod tensor;
pub mod training;

pub use error::NumericsError;
pub use params::ParamSet;
pub use tensor::Tensor;
