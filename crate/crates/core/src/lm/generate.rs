//! Greedy and interpolated (privacy-preserving) decoding.
//!
//! The interpolated mode mixes the model's next-token distribution with the
//! uniform distribution, `p' = lambda * p + (1 - lambda) / V`, and samples
//! from the mixture. Weights are untouched; this is purely an inference-time
//! baseline. Default mixing factor 0.2.

use super::model::{forward, ModelCheckpoint};
use super::tokenizer::EOS;
use crate::autodiff::tensor::{argmax, softmax_slice};
use crate::error::{Result, UlabError};
use crate::rng::Rng;

pub const DPD_DEFAULT_LAMBDA: f32 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DecodeMode {
    Greedy,
    /// Uniform interpolation with weight `lambda` on the model.
    Dpd { lambda: f32 },
}

impl DecodeMode {
    pub fn dpd_default() -> Self {
        DecodeMode::Dpd {
            lambda: DPD_DEFAULT_LAMBDA,
        }
    }

    fn validate(&self) -> Result<()> {
        if let DecodeMode::Dpd { lambda } = self {
            if !(0.0..=1.0).contains(lambda) {
                return Err(UlabError::contract(format!(
                    "dpd lambda must be in [0, 1], got {lambda}"
                )));
            }
        }
        Ok(())
    }
}

/// The next-token sampling distribution for a prefix under a decode mode.
pub fn next_token_distribution(
    m: &ModelCheckpoint,
    prefix: &[u32],
    mode: DecodeMode,
) -> Result<Vec<f32>> {
    mode.validate()?;
    let pass = forward(m, prefix, false)?;
    let v = m.config.vocab;
    let last = &pass.tape.value(pass.logits)[(prefix.len() - 1) * v..];
    let p = softmax_slice(last);
    Ok(match mode {
        DecodeMode::Greedy => p,
        DecodeMode::Dpd { lambda } => {
            let uniform = (1.0 - lambda) / v as f32;
            p.iter().map(|&pi| lambda * pi + uniform).collect()
        }
    })
}

/// Extend `prompt` by up to `max_new` tokens. Greedy mode takes the argmax
/// (ties to the lowest id); interpolated mode samples with the given seed.
/// Stops early on EOS.
pub fn generate(
    m: &ModelCheckpoint,
    prompt: &[u32],
    max_new: usize,
    mode: DecodeMode,
    seed: u64,
) -> Result<Vec<u32>> {
    mode.validate()?;
    if prompt.is_empty() {
        return Err(UlabError::contract("generate: empty prompt"));
    }
    let mut rng = Rng::new(seed);
    let mut tokens = prompt.to_vec();
    for _ in 0..max_new {
        if tokens.len() >= m.config.context {
            break;
        }
        let next = match mode {
            DecodeMode::Greedy => {
                let pass = forward(m, &tokens, false)?;
                let v = m.config.vocab;
                let last = &pass.tape.value(pass.logits)[(tokens.len() - 1) * v..];
                argmax(last) as u32
            }
            DecodeMode::Dpd { .. } => {
                let dist = next_token_distribution(m, &tokens, mode)?;
                rng.categorical(&dist) as u32
            }
        };
        tokens.push(next);
        if next == EOS {
            break;
        }
    }
    Ok(tokens)
}
