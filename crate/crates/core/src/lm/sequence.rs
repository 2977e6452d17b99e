//! Token sequences and their provenance.

use serde::{Deserialize, Serialize};

use crate::error::{Result, UlabError};

/// Where a sequence comes from relative to model training. The unseen pool
/// stands in for text the model never saw and anchors the forgetting
/// threshold; keeping the tag on every sequence lets downstream code assert
/// the two pools never mix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceTag {
    Train,
    Unseen,
}

/// A tokenized textual sequence: the unit of memorization and unlearning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub id: String,
    pub tokens: Vec<u32>,
    pub source: SourceTag,
}

impl TokenSequence {
    pub fn new(id: impl Into<String>, tokens: Vec<u32>, source: SourceTag) -> Result<Self> {
        if tokens.len() < 2 {
            return Err(UlabError::contract(format!(
                "sequence needs at least 2 tokens, got {}",
                tokens.len()
            )));
        }
        Ok(TokenSequence {
            id: id.into(),
            tokens,
            source,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}
