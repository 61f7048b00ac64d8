//! Reading-comprehension question answering over scenes described in text.
//!
//! Scene content arrives as natural-language region descriptions (optionally
//! augmented with retrieved knowledge facts), is encoded together with the
//! question by a convolution + self-attention encoder stack, and answered by
//! one of three heads: answer-span extraction, open-ended classification over
//! frequent answers, or multiple-choice triplet scoring.

pub mod cli;
pub mod error;
pub mod fixtures;
pub mod model;
pub mod retrieval;
pub mod tensor;
pub mod text;
pub mod train;

pub use error::{Error, Result};
