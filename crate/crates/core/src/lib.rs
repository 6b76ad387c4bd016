//! Test-time adaptation on synthetic streams: a small autograd engine,
//! normalized MLP classifiers, adaptation objectives, entropy-based and
//! redundancy/equity-regularized sharpness-aware adaptation, corrupted and
//! label-shifted data streams, and an experiment harness.

pub mod autograd;
pub mod error;
pub mod harness;
pub mod nn;
pub mod objectives;
pub mod stream;
pub mod tta;

pub use error::{Error, Result};
