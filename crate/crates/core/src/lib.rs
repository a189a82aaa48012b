//! Domain-oriented prefix-tuning for low-resource abstractive dialogue
//! summarization, at desk scale.

pub mod archive;
pub mod data;
pub mod domain_words;
pub mod error;
pub mod evaluation;
pub mod experiments;
pub mod optim;
pub mod prefix;
pub mod tensor;
pub mod training;
pub mod transformer;

pub use error::{DopError, Result};
