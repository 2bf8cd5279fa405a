//! Marker-adaptive hyperconvolutional encoder-decoder for multiplex images.

pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod hyperconv;
pub mod io;
pub mod masking;
pub mod network;
pub mod objective;
pub mod params;
pub mod preprocess;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
