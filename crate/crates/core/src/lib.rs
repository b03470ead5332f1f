//! Measures how much of the input signal an image classifier uses.
//!
//! A SegNet-style autoencoder is pre-trained for reconstruction, then
//! fine-tuned with gradients flowing through a frozen classifier. The
//! resulting reconstruction functions are compared through accuracy
//! cross-matrices, relative rates of change, formal concept lattices and
//! normalized mutual information.

pub mod data;
pub mod error;
pub mod evaluate;
pub mod fca;
pub mod finetune;
pub mod infometrics;
pub mod modelzoo;
pub mod nn;
pub mod orchestrator;
pub mod pretrain;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{ImageBatch, Tensor};
