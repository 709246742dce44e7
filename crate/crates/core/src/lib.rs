//! Sentence-pair matching with deep encoding and bidirectional interaction.
//!
//! The crate contains a small reverse-mode autodiff engine ([`autograd`]), the
//! model layers ([`encoder`], [`interaction`], [`heads`]), data handling
//! ([`data`], [`embedding`]), evaluation ([`metrics`]) and training
//! ([`trainer`], [`optim`], [`checkpoint`]).

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod embedding;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod heads;
pub mod interaction;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod tensor;
pub mod trainer;

pub use config::{Ablation, TrainConfig};
pub use data::Task;
pub use error::{Error, Result};
pub use model::Model;
pub use tensor::Tensor;
