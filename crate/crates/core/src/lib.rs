//! Blockwise streaming speech recognition with a decoder-only transformer
//! that consumes CTC-filtered acoustic prompts and per-block context prompts.

pub mod corpus;
pub mod ctc;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod model;
pub mod nn;
pub mod prompts;
pub mod search;
pub mod stream;
pub mod train;
pub mod vocab;

pub use error::{AsrError, Result};
pub use vocab::{TokenId, Vocabulary};
