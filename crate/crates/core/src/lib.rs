//! Temporally predictive representation learning with feature
//! decorrelation.
//!
//! The crate bundles a small reverse-mode autodiff engine ([`ndgrad`]), a
//! synthetic trajectory source ([`synthdata`]), view augmentation
//! ([`augment`]), the encoder/projector/transition/predictor stack
//! ([`model`]), the training objectives ([`losses`]), collapse diagnostics
//! ([`diagnostics`]), the optimization loop ([`train`]), linear probing
//! ([`probe`]) and loop-based reference implementations ([`verify`]).

pub mod augment;
pub mod config;
pub mod diagnostics;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod ndgrad;
pub mod probe;
pub mod rng;
pub mod synthdata;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use ndgrad::{Precision, Tape, Tensor, Var};
