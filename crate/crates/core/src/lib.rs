//! Mixed nearest-neighbor (MNN) self-supervised learning on synthetic data.
//!
//! The crate is organised bottom-up:
//!
//! * [`vecmath`] dense vector primitives, normalisation and cosine similarity
//! * [`support_set`] FIFO store of teacher embeddings and neighbor selection
//! * [`objective`] weight schemes, feature-space mixing and the weighted loss
//! * [`model`] MLP encoders with hand-written backprop, SGD, schedules, EMA
//! * [`diagnostics`] label-aware neighbor quality measurements
//! * [`evaluation`] frozen-feature KNN and linear probe
//! * [`harness`] dataset generation, training loop, sweeps and reports
//!
//! Data-parallel inner loops go through [`exec::Execution`], which uses rayon
//! when the `parallel` feature is enabled and plain iteration otherwise.
//! Results are bit-identical in both modes.

pub mod diagnostics;
pub mod error;
pub mod evaluation;
pub mod exec;
pub mod harness;
pub mod model;
pub mod objective;
pub mod rng;
pub mod support_set;
pub mod vecmath;

pub use error::{Error, Result};
