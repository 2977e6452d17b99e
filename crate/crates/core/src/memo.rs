//! Per-sequence memorization metrics.
//!
//! A sequence's score is the fraction of next-token positions where the
//! model's greedy prediction reproduces the true token. Forgetting counts as
//! successful once the forget-set average falls to or below the average over
//! text the model never saw, and the outlier count flags sequences left
//! either still-extractable or conspicuously over-forgotten.

use serde::{Deserialize, Serialize};

use crate::autodiff::tensor::argmax;
use crate::error::{Result, UlabError};
use crate::lm::model::{forward, ModelCheckpoint};
use crate::lm::sequence::{SourceTag, TokenSequence};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemorizationScore {
    pub id: String,
    /// matched / total, exactly.
    pub value: f64,
    pub matched: usize,
    pub total: usize,
}

/// Closed score intervals [0, lb] and [ub, 1] count as outliers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutlierBounds {
    pub lb: f64,
    pub ub: f64,
}

impl Default for OutlierBounds {
    fn default() -> Self {
        OutlierBounds { lb: 0.15, ub: 0.60 }
    }
}

impl OutlierBounds {
    pub fn new(lb: f64, ub: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&lb) || !(0.0..=1.0).contains(&ub) || lb >= ub {
            return Err(UlabError::contract(format!(
                "outlier bounds need 0 <= lb < ub <= 1, got lb={lb}, ub={ub}"
            )));
        }
        Ok(OutlierBounds { lb, ub })
    }
}

/// Greedy next-token agreement over all T-1 prediction positions.
pub fn exact_memorization(m: &ModelCheckpoint, x: &TokenSequence) -> Result<MemorizationScore> {
    let t_len = x.tokens.len();
    if t_len < 2 {
        return Err(UlabError::contract(format!(
            "exact_memorization: sequence `{}` has {t_len} tokens, need at least 2",
            x.id
        )));
    }
    let pass = forward(m, &x.tokens, false)?;
    let v = m.config.vocab;
    let logits = pass.tape.value(pass.logits);
    let mut matched = 0usize;
    for i in 1..t_len {
        let pred = argmax(&logits[(i - 1) * v..i * v]);
        if pred as u32 == x.tokens[i] {
            matched += 1;
        }
    }
    let total = t_len - 1;
    Ok(MemorizationScore {
        id: x.id.clone(),
        value: matched as f64 / total as f64,
        matched,
        total,
    })
}

pub fn score_set(m: &ModelCheckpoint, set: &[TokenSequence]) -> Result<Vec<MemorizationScore>> {
    set.iter().map(|x| exact_memorization(m, x)).collect()
}

/// Arithmetic mean of per-sequence scores over a non-empty set.
pub fn average_memorization(m: &ModelCheckpoint, set: &[TokenSequence]) -> Result<f64> {
    if set.is_empty() {
        return Err(UlabError::contract(
            "average_memorization: empty sequence set",
        ));
    }
    let scores = score_set(m, set)?;
    Ok(mean(&scores))
}

pub fn mean(scores: &[MemorizationScore]) -> f64 {
    scores.iter().map(|s| s.value).sum::<f64>() / scores.len() as f64
}

/// Average memorization over a pool of unseen sequences: the level an
/// arbitrary never-trained-on sequence scores, and the bar a forget set must
/// come down to.
pub fn empirical_threshold(m: &ModelCheckpoint, unseen: &[TokenSequence]) -> Result<f64> {
    for seq in unseen {
        if seq.source != SourceTag::Unseen {
            return Err(UlabError::Provenance(format!(
                "sequence `{}` is tagged {:?}; the threshold pool must be unseen-only",
                seq.id, seq.source
            )));
        }
    }
    average_memorization(m, unseen)
}

/// The forgetting success criterion: forget-set average at or below the
/// unseen-pool average.
pub fn forget_success(avg_forget: f64, threshold: f64) -> bool {
    avg_forget <= threshold
}

/// Count scores in [0, lb] or [ub, 1]. The boundary values themselves count:
/// the intervals are closed.
pub fn count_extractable(scores: &[f64], bounds: OutlierBounds) -> usize {
    scores
        .iter()
        .filter(|&&s| s <= bounds.lb || s >= bounds.ub)
        .count()
}

/// Absolute gap between the threshold and the forget-set average.
pub fn delta_mem(avg_forget: f64, threshold: f64) -> f64 {
    (threshold - avg_forget).abs()
}

/// Expected next-token match rate when decoding from the uniform-interpolated
/// distribution `lambda * p + (1 - lambda) / V` instead of the argmax. This is
/// the memorization a stochastic interpolated decoder actually exhibits; the
/// weights (and their argmax score) are untouched by that baseline.
pub fn dpd_expected_memorization(
    m: &ModelCheckpoint,
    x: &TokenSequence,
    lambda: f32,
) -> Result<f64> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(UlabError::contract(format!(
            "dpd lambda must be in [0, 1], got {lambda}"
        )));
    }
    let t_len = x.tokens.len();
    if t_len < 2 {
        return Err(UlabError::contract(format!(
            "dpd_expected_memorization: sequence `{}` too short",
            x.id
        )));
    }
    let pass = forward(m, &x.tokens, false)?;
    let v = m.config.vocab;
    let logits = pass.tape.value(pass.logits);
    let uniform = (1.0 - lambda as f64) / v as f64;
    let mut total = 0.0f64;
    for i in 1..t_len {
        let p = crate::autodiff::tensor::softmax_slice(&logits[(i - 1) * v..i * v]);
        total += lambda as f64 * p[x.tokens[i] as usize] as f64 + uniform;
    }
    Ok(total / (t_len - 1) as f64)
}

/// Everything the memorization suite says about one (model, forget set) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemorizationReport {
    pub model_tag: String,
    pub model_step: u64,
    pub scores: Vec<MemorizationScore>,
    pub average: f64,
    pub threshold: f64,
    pub extractable: usize,
    pub delta_mem: f64,
    pub bounds: OutlierBounds,
    pub success: bool,
}

impl MemorizationReport {
    pub fn compute(
        m: &ModelCheckpoint,
        forget: &[TokenSequence],
        threshold: f64,
        bounds: OutlierBounds,
        model_tag: impl Into<String>,
    ) -> Result<Self> {
        if forget.is_empty() {
            return Err(UlabError::contract("report over an empty forget set"));
        }
        let scores = score_set(m, forget)?;
        let average = mean(&scores);
        let values: Vec<f64> = scores.iter().map(|s| s.value).collect();
        Ok(MemorizationReport {
            model_tag: model_tag.into(),
            model_step: m.step,
            extractable: count_extractable(&values, bounds),
            delta_mem: delta_mem(average, threshold),
            success: forget_success(average, threshold),
            scores,
            average,
            threshold,
            bounds,
        })
    }

    /// Re-derive every aggregate from the stored per-sequence scores.
    pub fn verify_integrity(&self) -> Result<()> {
        let average = mean(&self.scores);
        if (average - self.average).abs() > 1e-12 {
            return Err(UlabError::contract(format!(
                "report average {} does not match recomputation {average}",
                self.average
            )));
        }
        let values: Vec<f64> = self.scores.iter().map(|s| s.value).collect();
        if count_extractable(&values, self.bounds) != self.extractable {
            return Err(UlabError::contract("extractable count mismatch"));
        }
        if (delta_mem(self.average, self.threshold) - self.delta_mem).abs() > 1e-12 {
            return Err(UlabError::contract("delta_mem mismatch"));
        }
        if forget_success(self.average, self.threshold) != self.success {
            return Err(UlabError::contract("success flag mismatch"));
        }
        for s in &self.scores {
            if s.total == 0 || (s.value - s.matched as f64 / s.total as f64).abs() > 1e-12 {
                return Err(UlabError::contract(format!(
                    "score row `{}` inconsistent",
                    s.id
                )));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization cannot fail")
    }

    /// One row per sequence: id, score, matched, total.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,score,matched,total\n");
        for s in &self.scores {
            out.push_str(&format!("{},{},{},{}\n", s.id, s.value, s.matched, s.total));
        }
        out
    }
}
