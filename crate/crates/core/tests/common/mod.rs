//! Shared oracle machinery for gradient checks.
//!
//! The reference path reimplements every primitive (and the whole
//! transformer loss) in plain scalar f64, independent of the tape. Central
//! finite differences are taken on the reference, where quantization noise
//! is nil at h = 1e-3, and the engine's analytic f32 gradients must agree at
//! vector level.

#![allow(dead_code)] // each integration test binary uses a subset

use ulab_core::lm::model::{ModelCheckpoint, ModelConfig};
use ulab_core::rng::Rng;

pub const FD_STEP: f64 = 1e-3;
pub const FD_TOL: f64 = 1e-3;
pub const LN_EPS: f64 = 1e-5;

/// Central-difference gradient of an f64 function at an f64 point.
pub fn finite_diff_grad(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut grad = Vec::with_capacity(x.len());
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let keep = probe[i];
        probe[i] = keep + h;
        let plus = f(&probe);
        probe[i] = keep - h;
        let minus = f(&probe);
        probe[i] = keep;
        grad.push((plus - minus) / (2.0 * h));
    }
    grad
}

/// ||a - n|| / max(||a||, ||n||), guarded for the all-zero case.
pub fn rel_norm_err(analytic: &[f32], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let mut diff2 = 0.0f64;
    let mut a2 = 0.0f64;
    let mut n2 = 0.0f64;
    for (&a, &n) in analytic.iter().zip(numeric) {
        let a = a as f64;
        diff2 += (a - n) * (a - n);
        a2 += a * a;
        n2 += n * n;
    }
    let scale = a2.sqrt().max(n2.sqrt());
    if scale < 1e-12 {
        return diff2.sqrt();
    }
    diff2.sqrt() / scale
}

pub fn random_vec(rng: &mut Rng, n: usize, std: f32) -> Vec<f32> {
    (0..n).map(|_| rng.normal_f32(0.0, std)).collect()
}

pub fn to_f64(x: &[f32]) -> Vec<f64> {
    x.iter().map(|&v| v as f64).collect()
}

// ── f64 reference primitives ───────────────────────────────────────────

pub fn ref_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for kk in 0..k {
                s += a[i * k + kk] * b[kk * n + j];
            }
            out[i * n + j] = s;
        }
    }
    out
}

pub fn ref_matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for kk in 0..k {
                s += a[i * k + kk] * b[j * k + kk];
            }
            out[i * n + j] = s;
        }
    }
    out
}

pub fn ref_gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + 0.044_715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub fn ref_layer_norm(x: &[f64], gain: &[f64], bias: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let xr = &x[r * cols..(r + 1) * cols];
        let mean = xr.iter().sum::<f64>() / cols as f64;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        for c in 0..cols {
            out[r * cols + c] = (xr[c] - mean) * inv * gain[c] + bias[c];
        }
    }
    out
}

pub fn ref_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
    let z: f64 = exp.iter().sum();
    exp.iter().map(|&e| e / z).collect()
}

pub fn ref_softmax(x: &[f64], rows: usize, cols: usize, axis: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    if axis == 1 {
        for r in 0..rows {
            let s = ref_softmax_row(&x[r * cols..(r + 1) * cols]);
            out[r * cols..(r + 1) * cols].copy_from_slice(&s);
        }
    } else {
        for c in 0..cols {
            let col: Vec<f64> = (0..rows).map(|r| x[r * cols + c]).collect();
            let s = ref_softmax_row(&col);
            for r in 0..rows {
                out[r * cols + c] = s[r];
            }
        }
    }
    out
}

pub fn ref_causal_softmax(x: &[f64], t: usize) -> Vec<f64> {
    let mut out = vec![0.0; t * t];
    for i in 0..t {
        let s = ref_softmax_row(&x[i * t..i * t + i + 1]);
        out[i * t..i * t + i + 1].copy_from_slice(&s);
    }
    out
}

pub fn ref_cross_entropy(logits: &[f64], targets: &[u32], vocab: usize, mean: bool) -> f64 {
    let mut total = 0.0;
    for (row, &tgt) in targets.iter().enumerate() {
        let xr = &logits[row * vocab..(row + 1) * vocab];
        let max = xr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = xr.iter().map(|&l| (l - max).exp()).sum::<f64>().ln() + max;
        total += lse - xr[tgt as usize];
    }
    if mean {
        total /= targets.len() as f64;
    }
    total
}

// ── f64 reference transformer ──────────────────────────────────────────

/// Sum-reduced causal-LM loss of the model on `tokens`, computed entirely in
/// f64 from the given parameter blocks (canonical order, optionally with one
/// block overridden by an f64 probe).
pub fn ref_transformer_loss(
    cfg: &ModelConfig,
    blocks: &[Vec<f64>],
    block_names: &[String],
    tokens: &[u32],
) -> f64 {
    let d = cfg.dim;
    let dh = d / cfg.heads;
    let t_len = tokens.len();
    let get = |name: &str| -> &[f64] {
        let idx = block_names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("missing block {name}"));
        &blocks[idx]
    };

    // embeddings
    let tok_emb = get("tok_emb");
    let pos_emb = get("pos_emb");
    let mut x = vec![0.0f64; t_len * d];
    for (t, &tok) in tokens.iter().enumerate() {
        for j in 0..d {
            x[t * d + j] = tok_emb[tok as usize * d + j] + pos_emb[t * d + j];
        }
    }

    for l in 0..cfg.layers {
        let pre = ref_layer_norm(&x, get(&format!("l{l}.ln1.g")), get(&format!("l{l}.ln1.b")), t_len, d);
        let mut qkv = ref_matmul(&pre, get(&format!("l{l}.attn.w_qkv")), t_len, d, 3 * d);
        let bq = get(&format!("l{l}.attn.b_qkv"));
        for t in 0..t_len {
            for j in 0..3 * d {
                qkv[t * 3 * d + j] += bq[j];
            }
        }
        let mut merged = vec![0.0f64; t_len * d];
        for h in 0..cfg.heads {
            let mut q = vec![0.0; t_len * dh];
            let mut k = vec![0.0; t_len * dh];
            let mut v = vec![0.0; t_len * dh];
            for t in 0..t_len {
                for j in 0..dh {
                    q[t * dh + j] = qkv[t * 3 * d + h * dh + j];
                    k[t * dh + j] = qkv[t * 3 * d + d + h * dh + j];
                    v[t * dh + j] = qkv[t * 3 * d + 2 * d + h * dh + j];
                }
            }
            let mut scores = ref_matmul_nt(&q, &k, t_len, dh, t_len);
            let scale = 1.0 / (dh as f64).sqrt();
            for s in &mut scores {
                *s *= scale;
            }
            let probs = ref_causal_softmax(&scores, t_len);
            let ctx = ref_matmul(&probs, &v, t_len, t_len, dh);
            for t in 0..t_len {
                for j in 0..dh {
                    merged[t * d + h * dh + j] = ctx[t * dh + j];
                }
            }
        }
        let mut proj = ref_matmul(&merged, get(&format!("l{l}.attn.w_proj")), t_len, d, d);
        let bp = get(&format!("l{l}.attn.b_proj"));
        for t in 0..t_len {
            for j in 0..d {
                proj[t * d + j] += bp[j];
                x[t * d + j] += proj[t * d + j];
            }
        }

        let pre2 = ref_layer_norm(&x, get(&format!("l{l}.ln2.g")), get(&format!("l{l}.ln2.b")), t_len, d);
        let mut hidden = ref_matmul(&pre2, get(&format!("l{l}.mlp.w_in")), t_len, d, 4 * d);
        let bi = get(&format!("l{l}.mlp.b_in"));
        for t in 0..t_len {
            for j in 0..4 * d {
                hidden[t * 4 * d + j] = ref_gelu(hidden[t * 4 * d + j] + bi[j]);
            }
        }
        let mut mlp_out = ref_matmul(&hidden, get(&format!("l{l}.mlp.w_out")), t_len, 4 * d, d);
        let bo = get(&format!("l{l}.mlp.b_out"));
        for t in 0..t_len {
            for j in 0..d {
                mlp_out[t * d + j] += bo[j];
                x[t * d + j] += mlp_out[t * d + j];
            }
        }
    }

    let hf = ref_layer_norm(&x, get("ln_f.g"), get("ln_f.b"), t_len, d);
    let logits = ref_matmul_nt(&hf, tok_emb, t_len, d, cfg.vocab);
    ref_cross_entropy(
        &logits[..(t_len - 1) * cfg.vocab],
        &tokens[1..],
        cfg.vocab,
        false,
    )
}

/// Checkpoint blocks in f64, canonical order, plus their names.
pub fn blocks_f64(m: &ModelCheckpoint) -> (Vec<Vec<f64>>, Vec<String>) {
    let blocks = m.blocks.iter().map(|b| to_f64(&b.data)).collect();
    let names = m.blocks.iter().map(|b| b.name.clone()).collect();
    (blocks, names)
}
