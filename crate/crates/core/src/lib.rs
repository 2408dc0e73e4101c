//! Desk-scale gloss-free sign language translation.
//!
//! The pipeline encodes a sign video twice — full frames through a multi-scale
//! spatial stub, landmark-cropped mouth regions through a mouthing stub —
//! fuses the streams with a learned sigmoid gate, aligns the result to text
//! with contrastive objectives, and trains a small LoRA-adapted decoder to
//! emit the target sentence. Everything runs on a hand-rolled `f64` autodiff
//! tape so gradients are checkable against finite differences.

pub mod decoder;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod io;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod pca;
pub mod synth;
pub mod train;
pub mod gradcheck;
pub mod harness;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
