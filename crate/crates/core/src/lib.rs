//! Numerical core of a character-level Transformer encoder-decoder whose
//! upper encoder layers use NVIB denoising self-attention.
//!
//! The crate is `no_std` with `alloc`; file formats, logging and the CLI live
//! in the `nvib` companion crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod analysis;
pub mod autodiff;
mod error;
pub mod gradcheck;
pub mod matrix;
pub mod model;
pub mod nvib;
pub mod probing;
pub mod real;
pub mod special;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
pub use matrix::Matrix;
pub use real::Real;
