//! Conditional density estimation on tabular data with a transformer
//! encoder and a denoising-diffusion head.
//!
//! A row of a table becomes a set of tokens `(feature, magnitude)`. The
//! first token names the feature being requested and carries no magnitude.
//! An encoder-only transformer without positional encoding reads the set,
//! and its hidden state at the request position conditions a small DDPM
//! that turns unit Gaussian noise into samples of the requested feature.
//!
//! The crate is `no_std` with `alloc`; file formats, the CLI, and threading
//! live in the `tabdiff` crate.

#![no_std]

extern crate alloc;

pub mod data;
pub mod diffusion;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod model;
pub mod numerics;
pub mod params;
pub mod training;

pub use data::{FeatureId, FeatureRegistry, RawTable, Standardization, TokenizedRow};
pub use diffusion::{DenoiserParams, NoiseSchedule};
pub use encoder::{EmbeddingTable, EncoderParams};
pub use error::{Error, Result};
pub use eval::{CalibrationReport, DensityEstimate, Histogram};
pub use model::{Model, ModelConfig, ParamReport, Preset};
pub use numerics::{Graph, Tensor, Var};
pub use params::{Binder, ParamId, ParamStore, ParamValues};
pub use training::{Checkpoint, EpochStats, RngState, TrainConfig, Trainer};
