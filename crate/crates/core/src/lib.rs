//! Masked video autoencoding with motion-guided token sampling.

pub mod data;
pub mod error;
pub mod evaluation;
pub mod masking;
pub mod model;
pub mod training;
pub mod tensor;
pub mod tokenizer;

pub use error::{Error, Result};
