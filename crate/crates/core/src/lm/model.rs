//! A small pre-norm causal transformer with learned absolute positions and a
//! vocabulary-tied output head, plus the checkpoint value type it trains
//! into.

use serde::{Deserialize, Serialize};

use super::sequence::TokenSequence;
use super::tokenizer::BYTE_VOCAB;
use crate::autodiff::tape::{Reduction, Tape, ValueId};
use crate::autodiff::tensor::Tensor;
use crate::error::{Result, UlabError};
use crate::rng::Rng;

pub const INIT_STD: f32 = 0.02;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab: usize,
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub context: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab: BYTE_VOCAB,
            layers: 2,
            heads: 4,
            dim: 64,
            context: 256,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.layers == 0 || self.vocab == 0 {
            return Err(UlabError::config("model dimensions must be positive"));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(UlabError::config(format!(
                "dim {} not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if self.context < 2 {
            return Err(UlabError::config("context length must be at least 2"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Full parameter state of one model. Value semantics: clone to snapshot.
/// Supports element-wise arithmetic against a shape-identical checkpoint,
/// which is all the task-vector algebra needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub config: ModelConfig,
    pub blocks: Vec<ParamBlock>,
    pub step: u64,
}

/// Canonical block layout: names and shapes in serialization order.
pub fn block_layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.dim;
    let mut layout = vec![
        ("tok_emb".to_string(), vec![cfg.vocab, d]),
        ("pos_emb".to_string(), vec![cfg.context, d]),
    ];
    for l in 0..cfg.layers {
        layout.push((format!("l{l}.ln1.g"), vec![d]));
        layout.push((format!("l{l}.ln1.b"), vec![d]));
        layout.push((format!("l{l}.attn.w_qkv"), vec![d, 3 * d]));
        layout.push((format!("l{l}.attn.b_qkv"), vec![3 * d]));
        layout.push((format!("l{l}.attn.w_proj"), vec![d, d]));
        layout.push((format!("l{l}.attn.b_proj"), vec![d]));
        layout.push((format!("l{l}.ln2.g"), vec![d]));
        layout.push((format!("l{l}.ln2.b"), vec![d]));
        layout.push((format!("l{l}.mlp.w_in"), vec![d, 4 * d]));
        layout.push((format!("l{l}.mlp.b_in"), vec![4 * d]));
        layout.push((format!("l{l}.mlp.w_out"), vec![4 * d, d]));
        layout.push((format!("l{l}.mlp.b_out"), vec![d]));
    }
    layout.push(("ln_f.g".to_string(), vec![d]));
    layout.push(("ln_f.b".to_string(), vec![d]));
    layout
}

impl ModelCheckpoint {
    /// Fresh parameters: N(0, 0.02) weights, unit norm gains, zero biases.
    /// Fully determined by `cfg` (including its seed).
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::new(cfg.seed);
        let blocks = block_layout(cfg)
            .into_iter()
            .map(|(name, shape)| {
                let numel: usize = shape.iter().product();
                let data = if name.ends_with(".g") {
                    vec![1.0; numel]
                } else if name.ends_with(".b") || name.contains(".b_") {
                    vec![0.0; numel]
                } else {
                    (0..numel).map(|_| rng.normal_f32(0.0, INIT_STD)).collect()
                };
                ParamBlock { name, shape, data }
            })
            .collect();
        Ok(ModelCheckpoint {
            config: cfg.clone(),
            blocks,
            step: 0,
        })
    }

    pub fn block(&self, name: &str) -> Result<&ParamBlock> {
        self.blocks
            .iter()
            .find(|b| b.name == name)
            .ok_or_else(|| UlabError::shape(format!("missing parameter block `{name}`")))
    }

    pub fn param_count(&self) -> usize {
        self.blocks.iter().map(|b| b.data.len()).sum()
    }

    pub fn assert_finite(&self) -> Result<()> {
        for b in &self.blocks {
            if !b.data.iter().all(|v| v.is_finite()) {
                return Err(UlabError::NonFinite {
                    op: format!("checkpoint block `{}`", b.name),
                });
            }
        }
        Ok(())
    }

    fn same_geometry(&self, other: &ModelCheckpoint) -> Result<()> {
        if self.config != other.config {
            return Err(UlabError::shape(
                "checkpoint arithmetic requires identical configs",
            ));
        }
        if self.blocks.len() != other.blocks.len() {
            return Err(UlabError::shape("checkpoint block counts differ"));
        }
        for (a, b) in self.blocks.iter().zip(&other.blocks) {
            if a.name != b.name || a.shape != b.shape {
                return Err(UlabError::shape(format!(
                    "block mismatch: `{}` {:?} vs `{}` {:?}",
                    a.name, a.shape, b.name, b.shape
                )));
            }
        }
        Ok(())
    }
}

/// Block-wise `a + s * b`. Identical configs required; the result keeps `a`'s
/// step counter.
pub fn checkpoint_axpy(a: &ModelCheckpoint, b: &ModelCheckpoint, s: f32) -> Result<ModelCheckpoint> {
    a.same_geometry(b)?;
    let mut out = a.clone();
    for (ob, bb) in out.blocks.iter_mut().zip(&b.blocks) {
        for (ov, &bv) in ob.data.iter_mut().zip(&bb.data) {
            *ov += s * bv;
        }
    }
    Ok(out)
}

/// One taped forward pass: parameter leaves (optionally differentiable) plus
/// the logits node.
pub struct ForwardPass {
    pub tape: Tape,
    pub logits: ValueId,
    param_ids: Vec<ValueId>,
}

impl ForwardPass {
    /// Per-block gradients in canonical block order. Blocks no gradient
    /// reached come back as zeros.
    pub fn block_grads(&self, m: &ModelCheckpoint) -> Vec<Vec<f32>> {
        self.param_ids
            .iter()
            .zip(&m.blocks)
            .map(|(&id, b)| match self.tape.grad(id) {
                Some(g) => g.to_vec(),
                None => vec![0.0; b.data.len()],
            })
            .collect()
    }
}

/// Run the transformer over `tokens`, producing next-token logits at every
/// position: row `t` is the distribution for the token after `tokens[..=t]`.
pub fn forward(m: &ModelCheckpoint, tokens: &[u32], with_grad: bool) -> Result<ForwardPass> {
    let cfg = &m.config;
    let t_len = tokens.len();
    if t_len == 0 {
        return Err(UlabError::contract("forward: empty token sequence"));
    }
    if t_len > cfg.context {
        return Err(UlabError::contract(format!(
            "forward: sequence length {t_len} exceeds context {}",
            cfg.context
        )));
    }
    for &tok in tokens {
        if tok as usize >= cfg.vocab {
            return Err(UlabError::TokenRange {
                id: tok,
                vocab: cfg.vocab,
            });
        }
    }

    let mut tape = Tape::new();
    let param_ids: Vec<ValueId> = m
        .blocks
        .iter()
        .map(|b| tape.leaf_from(b.data.clone(), b.shape.clone(), with_grad))
        .collect();
    let id_of = |name: &str| -> ValueId {
        let idx = m
            .blocks
            .iter()
            .position(|b| b.name == name)
            .unwrap_or_else(|| panic!("block `{name}` missing from checkpoint"));
        param_ids[idx]
    };

    let d = cfg.dim;
    let dh = cfg.head_dim();
    let tok_emb = id_of("tok_emb");
    let positions: Vec<u32> = (0..t_len as u32).collect();

    let emb = tape.embedding(tok_emb, tokens)?;
    let pos = tape.embedding(id_of("pos_emb"), &positions)?;
    let mut x = tape.add(emb, pos)?;

    for l in 0..cfg.layers {
        let pre = tape.layer_norm(x, id_of(&format!("l{l}.ln1.g")), id_of(&format!("l{l}.ln1.b")))?;
        let qkv = tape.matmul(pre, id_of(&format!("l{l}.attn.w_qkv")))?;
        let qkv = tape.add_bias(qkv, id_of(&format!("l{l}.attn.b_qkv")))?;
        let mut head_ctx = Vec::with_capacity(cfg.heads);
        for h in 0..cfg.heads {
            let q = tape.slice_cols(qkv, h * dh, (h + 1) * dh)?;
            let k = tape.slice_cols(qkv, d + h * dh, d + (h + 1) * dh)?;
            let v = tape.slice_cols(qkv, 2 * d + h * dh, 2 * d + (h + 1) * dh)?;
            let scores = tape.matmul_nt(q, k)?;
            let scores = tape.scale(scores, 1.0 / (dh as f32).sqrt())?;
            let probs = tape.causal_softmax(scores)?;
            head_ctx.push(tape.matmul(probs, v)?);
        }
        let merged = tape.concat_cols(&head_ctx)?;
        let proj = tape.matmul(merged, id_of(&format!("l{l}.attn.w_proj")))?;
        let proj = tape.add_bias(proj, id_of(&format!("l{l}.attn.b_proj")))?;
        x = tape.add(x, proj)?;

        let pre2 = tape.layer_norm(x, id_of(&format!("l{l}.ln2.g")), id_of(&format!("l{l}.ln2.b")))?;
        let hidden = tape.matmul(pre2, id_of(&format!("l{l}.mlp.w_in")))?;
        let hidden = tape.add_bias(hidden, id_of(&format!("l{l}.mlp.b_in")))?;
        let act = tape.gelu(hidden)?;
        let out = tape.matmul(act, id_of(&format!("l{l}.mlp.w_out")))?;
        let out = tape.add_bias(out, id_of(&format!("l{l}.mlp.b_out")))?;
        x = tape.add(x, out)?;
    }

    let final_norm = tape.layer_norm(x, id_of("ln_f.g"), id_of("ln_f.b"))?;
    // Output head tied to the token embedding.
    let logits = tape.matmul_nt(final_norm, tok_emb)?;

    Ok(ForwardPass {
        tape,
        logits,
        param_ids,
    })
}

/// Next-token logits for a sequence, as a plain [T x V] tensor.
pub fn forward_logits(m: &ModelCheckpoint, seq: &TokenSequence) -> Result<Tensor> {
    let pass = forward(m, &seq.tokens, false)?;
    Ok(pass.tape.to_tensor(pass.logits))
}

/// Causal-LM loss of `tokens` on the tape: rows `0..T-1` of the logits
/// against targets `tokens[1..]`.
pub fn sequence_loss(
    m: &ModelCheckpoint,
    tokens: &[u32],
    reduction: Reduction,
    with_grad: bool,
) -> Result<(ForwardPass, ValueId)> {
    if tokens.len() < 2 {
        return Err(UlabError::contract(format!(
            "loss needs at least 2 tokens, got {}",
            tokens.len()
        )));
    }
    let mut pass = forward(m, tokens, with_grad)?;
    let t_len = tokens.len();
    let predict = pass.tape.slice_rows(pass.logits, 0, t_len - 1)?;
    let loss = pass.tape.cross_entropy(predict, &tokens[1..], reduction)?;
    Ok((pass, loss))
}

/// Mean per-token negative log-likelihood of a sequence.
pub fn mean_nll(m: &ModelCheckpoint, seq: &TokenSequence) -> Result<f64> {
    let (pass, loss) = sequence_loss(m, &seq.tokens, Reduction::Mean, false)?;
    Ok(pass.tape.value(loss)[0] as f64)
}
