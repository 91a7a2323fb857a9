//! Card prediction for AAC boards with a masked language model trained on
//! Colourful Semantics annotated sentences.

pub mod corpus;
pub mod error;
pub mod eval;
pub mod mlm;
pub mod pipeline;
pub mod prediction;
pub mod tokenizer;

pub use error::{Error, Result};
