//! Sentence segmentation with lossless gaps, and reversible subword
//! tokenization.

mod split;
mod vocab;

pub use split::{reassemble, split_sentences, Abbreviations, AnnotatedText};
pub use vocab::{Vocabulary, EOS_MARKER, PAD_MARKER, UNK_MARKER};

use thiserror::Error;

use crate::model::TokenId;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TextError {
    #[error("expected {expected} translated sentences, got {found}")]
    SentenceCount { expected: usize, found: usize },
    #[error("token id {id} out of range for vocabulary of {vocab_size}")]
    TokenOutOfRange { id: TokenId, vocab_size: usize },
    #[error("invalid vocabulary: {0}")]
    Vocabulary(String),
}
