//! A small dual-encoder (image + text) contrastive model.
//!
//! The submodules are layered bottom-up:
//!
//! * [`backend`] — generic scalar trait plus a GEMM that uses a system
//!   BLAS when one can be loaded and a pure-Rust kernel otherwise.
//! * [`nn`] — forward/backward primitives (layer norm, linear, GELU,
//!   softmax, row normalization) over flat slices.
//! * [`params`] — a flat parameter/gradient store addressed by named
//!   handles.
//! * [`model`] — the two transformer towers and their manual backward
//!   pass.
//!
//! Everything is generic over `f32`/`f64`: training runs in `f32`, while
//! gradient checking uses `f64` so finite differences are meaningful.

pub mod backend;
pub mod checkpoint;
pub mod gradcheck;
pub mod loss;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod train;

pub use backend::Real;
pub use loss::symmetric_infonce;
pub use model::{DualEncoder, EncoderCache, ModelConfig};
pub use params::{Handle, ParamStore};
pub use train::{train, TrainConfig, TrainLog};
