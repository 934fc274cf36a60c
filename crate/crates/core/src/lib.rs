//! Cross-layer attention (CLA) and adaptive cross-layer attention (ACLA)
//! for image restoration, on a small self-contained tensor engine.

pub mod attention;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod cost;
pub mod error;
pub mod gating;
pub mod gradcheck;
pub mod image;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod pnm;
pub mod sampler;
pub mod search;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Shape, Tensor};
