//! Byte-level tokenization.
//!
//! Every byte is its own token, so no tokenizer training is needed and the
//! round trip is total over valid UTF-8. Three specials sit above the byte
//! range; the default vocabulary is 256 + 3 = 259.

use super::sequence::{SourceTag, TokenSequence};
use crate::error::{Result, UlabError};

pub const BOS: u32 = 256;
pub const EOS: u32 = 257;
pub const PAD: u32 = 258;
pub const BYTE_VOCAB: usize = 259;

/// `text` -> [BOS, bytes..., EOS]
pub fn tokenize(id: impl Into<String>, text: &str, source: SourceTag) -> TokenSequence {
    let mut tokens = Vec::with_capacity(text.len() + 2);
    tokens.push(BOS);
    tokens.extend(text.as_bytes().iter().map(|&b| b as u32));
    tokens.push(EOS);
    TokenSequence {
        id: id.into(),
        tokens,
        source,
    }
}

/// Inverse of [`tokenize`]: collect byte tokens up to the first EOS, drop
/// specials, decode as UTF-8.
pub fn detokenize(tokens: &[u32]) -> Result<String> {
    let mut bytes = Vec::with_capacity(tokens.len());
    for &t in tokens {
        match t {
            BOS | PAD => continue,
            EOS => break,
            b if b < 256 => bytes.push(b as u8),
            other => {
                return Err(UlabError::TokenRange {
                    id: other,
                    vocab: BYTE_VOCAB,
                })
            }
        }
    }
    String::from_utf8(bytes).map_err(|e| UlabError::contract(format!("invalid UTF-8: {e}")))
}

/// Lossy variant for displaying generated token streams.
pub fn detokenize_lossy(tokens: &[u32]) -> String {
    let mut bytes = Vec::with_capacity(tokens.len());
    for &t in tokens {
        match t {
            BOS | PAD => continue,
            EOS => break,
            b if b < 256 => bytes.push(b as u8),
            _ => bytes.push(b'?'),
        }
    }
    String::from_utf8_lossy(&bytes).into_owned()
}
