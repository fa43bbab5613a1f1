//! Prompt tokenisation and the transformer text encoder.

mod encoder;
pub mod vocab;

pub use encoder::{ConditioningEmbedding, EncoderCache, EncoderConfig, TextEncoder, ROOT as ENCODER_ROOT};
pub use vocab::{Tokens, Vocabulary};
