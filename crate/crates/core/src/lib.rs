//! Recurrent attention seq2seq translation with per-step source refinement.
//!
//! The model is a bidirectional-GRU encoder / additive-attention decoder
//! whose source representations can be re-gated and re-encoded at every
//! decoding step, conditioned on the decoder state. A small policy network
//! trained with straight-through Gumbel-Softmax decides per step whether to
//! refine the representations or reuse the previous ones, trading quality
//! against decoding speed.
//!
//! Everything runs on a self-contained f64 reverse-mode autodiff tape so
//! gradients are checkable against finite differences.

pub mod check;
pub mod config;
pub mod data;
pub mod decode;
pub mod error;
pub mod eval;
pub mod graph;
pub mod model;
pub mod params;
pub mod policy;
pub mod refiner;
pub mod seq2seq;
pub mod tensor;
pub mod training;
pub mod vocab;

pub use error::{Error, Result};
pub use graph::{Graph, NodeId};
pub use params::{GradSet, ParamId, ParamStore};
pub use tensor::Tensor;
