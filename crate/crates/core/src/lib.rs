//! Contrastive self-supervised speech pre-training in the wav2vec 2.0
//! style, with the batching, scheduling, probing and fine-tuning tools
//! used to study the effect of batch size. Everything runs in `f64` on a
//! hand-written autodiff tape; see [`numerics::Graph`].

pub mod error;
pub mod numerics;

pub mod batch_assembler;
pub mod context_network;
pub mod ctc_finetune;
pub mod dataset;
pub mod experiment;
pub mod feature_encoder;
pub mod grad_probe;
pub mod model;
pub mod params;
pub mod quantizer;
pub mod ssl_objective;
pub mod trainer;

pub use error::{Error, Result};
pub use numerics::{Rng, Tensor};
