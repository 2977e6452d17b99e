//! Unlearning algorithms.
//!
//! - Gradient ascent (GA): maximize the causal-LM loss over the whole forget
//!   set until the forget-set average memorization reaches the threshold.
//! - Selective gradient ascent (SGA): ascend only on sequences still
//!   memorized above an upper limit, recomputed each epoch; once none remain
//!   and the average is still too high, ascend on the top-k most memorized.
//! - Task arithmetic (TA): fine-tune on the forget set, then subtract the
//!   scaled fine-tuning drift from the original weights.
//! - TA for unlearning (TAU): SGA down to a switch level first, then the
//!   drift subtraction around the intermediate weights.
//!
//! Stopping for the gradient methods: success, or the average failing to
//! improve by more than `PROGRESS_EPS` for `patience` consecutive epochs, or
//! the epoch budget. Divergence ends the run with the trace preserved.

use serde::{Deserialize, Serialize};

use crate::autodiff::optim::{Direction, OptimizerState};
use crate::clock::timer;
use crate::error::{Result, UlabError};
use crate::lm::model::{checkpoint_axpy, ModelCheckpoint};
use crate::lm::sequence::TokenSequence;
use crate::lm::train::run_epoch;
use crate::memo::{forget_success, mean, score_set, MemorizationScore};
use crate::rng::Rng;

/// Minimum drop in average memorization that counts as progress.
pub const PROGRESS_EPS: f64 = 1e-4;

/// Learning rate shared by every unlearning algorithm's defaults.
pub const DEFAULT_UNLEARN_LR: f32 = 5e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GaOptions {
    pub lr: f32,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch: usize,
    pub seed: u64,
    /// Global-norm clip on the ascent gradient (the clipped variant).
    pub clip: Option<f32>,
}

impl Default for GaOptions {
    fn default() -> Self {
        GaOptions {
            lr: DEFAULT_UNLEARN_LR,
            max_epochs: 200,
            patience: 5,
            batch: 8,
            seed: 0,
            clip: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgaConfig {
    /// Upper limit on any sequence's acceptable memorization; phase 1
    /// ascends on everything above it.
    pub gamma: f64,
    /// Phase-2 active-set size.
    pub top_k: usize,
    pub lr: f32,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for SgaConfig {
    fn default() -> Self {
        SgaConfig {
            gamma: 0.70,
            top_k: 1,
            lr: DEFAULT_UNLEARN_LR,
            max_epochs: 200,
            patience: 5,
            batch: 8,
            seed: 0,
        }
    }
}

impl SgaConfig {
    fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(UlabError::config(format!(
                "sga gamma must be in (0, 1], got {}",
                self.gamma
            )));
        }
        if self.top_k == 0 {
            return Err(UlabError::config("sga top_k must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaConfig {
    /// Drift scaling factor.
    pub lambda: f32,
    pub ft_epochs: usize,
    pub lr: f32,
    pub batch: usize,
    pub seed: u64,
}

impl Default for TaConfig {
    fn default() -> Self {
        TaConfig {
            lambda: 3.0,
            ft_epochs: 3,
            lr: DEFAULT_UNLEARN_LR,
            batch: 8,
            seed: 0,
        }
    }
}

impl TaConfig {
    fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 {
            return Err(UlabError::config(format!(
                "ta lambda must be non-negative, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TauConfig {
    pub sga: SgaConfig,
    /// Average memorization at which the SGA phase hands over to the drift
    /// subtraction. Must sit below `sga.gamma`.
    pub switch_level: f64,
    pub ta: TaConfig,
}

impl Default for TauConfig {
    fn default() -> Self {
        TauConfig {
            sga: SgaConfig::default(),
            switch_level: 0.50,
            ta: TaConfig {
                lambda: 1.0,
                ..TaConfig::default()
            },
        }
    }
}

impl TauConfig {
    fn validate(&self) -> Result<()> {
        self.sga.validate()?;
        self.ta.validate()?;
        if self.switch_level >= self.sga.gamma {
            return Err(UlabError::config(format!(
                "tau switch level {} must be below sga gamma {}",
                self.switch_level, self.sga.gamma
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MetThreshold,
    Stalled,
    EpochBudget,
    Diverged,
    /// Arithmetic-only algorithms (TA) have no epoch loop to stop.
    Completed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: String,
    pub avg_memorization: f64,
    pub scores: Vec<MemorizationScore>,
    /// Sequences ascended on after this record was taken.
    pub active_ids: Vec<String>,
    pub wall_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnlearnTrace {
    pub algorithm: String,
    pub records: Vec<EpochRecord>,
}

impl UnlearnTrace {
    fn new(algorithm: &str) -> Self {
        UnlearnTrace {
            algorithm: algorithm.to_string(),
            records: Vec::new(),
        }
    }

    pub fn final_average(&self) -> Option<f64> {
        self.records.last().map(|r| r.avg_memorization)
    }

    /// One JSON object per epoch, newline-delimited.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("epoch records serialize"));
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct UnlearnRun {
    pub model: ModelCheckpoint,
    pub trace: UnlearnTrace,
    pub stop: StopReason,
}

/// Which sequences the coming epoch will ascend on.
enum ActiveSet {
    All,
    AboveGamma(Vec<usize>),
    TopK(Vec<usize>),
}

/// Everything an ascent run needs besides the active-set policy.
struct AscentSetup {
    algorithm: &'static str,
    threshold: f64,
    lr: f32,
    clip: Option<f32>,
    max_epochs: usize,
    patience: usize,
    batch: usize,
    seed: u64,
}

/// Shared ascent loop. `select` maps this epoch's scores to the active set;
/// returning an empty set is impossible by construction of the callers.
fn ascent_loop(
    base: &ModelCheckpoint,
    forget: &[TokenSequence],
    setup: AscentSetup,
    mut select: impl FnMut(&[MemorizationScore], f64) -> ActiveSet,
) -> Result<UnlearnRun> {
    let AscentSetup {
        algorithm,
        threshold,
        lr,
        clip,
        max_epochs,
        patience,
        batch,
        seed,
    } = setup;
    if forget.is_empty() {
        return Err(UlabError::contract("unlearn: empty forget set"));
    }
    let elapsed = timer();
    let mut model = base.clone();
    let mut optimizer = OptimizerState::adam(lr);
    if let Some(c) = clip {
        optimizer = optimizer.with_clip(c);
    }
    let mut rng = Rng::new(seed);
    let mut trace = UnlearnTrace::new(algorithm);
    let mut best_avg = f64::INFINITY;
    let mut stalled = 0usize;

    for epoch in 0..=max_epochs {
        let scores = score_set(&model, forget)?;
        let avg = mean(&scores);

        let (phase, active_idx): (String, Vec<usize>) = match select(&scores, avg) {
            ActiveSet::All => ("ascent".into(), (0..forget.len()).collect()),
            ActiveSet::AboveGamma(idx) => ("ascent-above-limit".into(), idx),
            ActiveSet::TopK(idx) => ("ascent-top-k".into(), idx),
        };

        let met = forget_success(avg, threshold);
        if best_avg - avg >= PROGRESS_EPS {
            best_avg = avg;
            stalled = 0;
        } else {
            stalled += 1;
        }
        let out_of_budget = epoch == max_epochs;
        let out_of_patience = stalled >= patience && epoch > 0;

        trace.records.push(EpochRecord {
            epoch,
            phase: phase.clone(),
            avg_memorization: avg,
            scores,
            active_ids: if met || out_of_budget || out_of_patience {
                Vec::new()
            } else {
                active_idx.iter().map(|&i| forget[i].id.clone()).collect()
            },
            wall_secs: elapsed(),
        });

        if met {
            return Ok(UnlearnRun {
                model,
                trace,
                stop: StopReason::MetThreshold,
            });
        }
        if out_of_patience {
            return Ok(UnlearnRun {
                model,
                trace,
                stop: StopReason::Stalled,
            });
        }
        if out_of_budget {
            return Ok(UnlearnRun {
                model,
                trace,
                stop: StopReason::EpochBudget,
            });
        }

        let active: Vec<&TokenSequence> = active_idx.iter().map(|&i| &forget[i]).collect();
        let before = model.clone();
        match run_epoch(&mut model, &active, &mut optimizer, Direction::Ascent, batch, &mut rng) {
            Ok(_) => {}
            Err(UlabError::Diverged { .. }) | Err(UlabError::NonFinite { .. }) => {
                return Ok(UnlearnRun {
                    model: before,
                    trace,
                    stop: StopReason::Diverged,
                });
            }
            Err(other) => return Err(other),
        }
    }
    unreachable!("loop exits through a stop condition");
}

/// Gradient ascent over the whole forget set.
pub fn run_ga(
    base: &ModelCheckpoint,
    forget: &[TokenSequence],
    threshold: f64,
    opts: &GaOptions,
) -> Result<UnlearnRun> {
    ascent_loop(
        base,
        forget,
        AscentSetup {
            algorithm: "ga",
            threshold,
            lr: opts.lr,
            clip: opts.clip,
            max_epochs: opts.max_epochs,
            patience: opts.patience,
            batch: opts.batch,
            seed: opts.seed,
        },
        |_, _| ActiveSet::All,
    )
}

/// Indices of scores strictly above gamma.
fn above_gamma(scores: &[MemorizationScore], gamma: f64) -> Vec<usize> {
    scores
        .iter()
        .enumerate()
        .filter(|(_, s)| s.value > gamma)
        .map(|(i, _)| i)
        .collect()
}

/// Indices of the k highest scores; ties broken toward the earlier sequence.
fn top_k(scores: &[MemorizationScore], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .value
            .partial_cmp(&scores[a].value)
            .expect("scores are finite")
            .then(a.cmp(&b))
    });
    order.truncate(k.min(scores.len()));
    order
}

/// Selective gradient ascent: the two-phase routine.
pub fn run_sga(
    base: &ModelCheckpoint,
    forget: &[TokenSequence],
    cfg: &SgaConfig,
    threshold: f64,
) -> Result<UnlearnRun> {
    cfg.validate()?;
    let gamma = cfg.gamma;
    let k = cfg.top_k;
    ascent_loop(
        base,
        forget,
        AscentSetup {
            algorithm: "sga",
            threshold,
            lr: cfg.lr,
            clip: None,
            max_epochs: cfg.max_epochs,
            patience: cfg.patience,
            batch: cfg.batch,
            seed: cfg.seed,
        },
        move |scores, _avg| {
            let over = above_gamma(scores, gamma);
            if over.is_empty() {
                ActiveSet::TopK(top_k(scores, k))
            } else {
                ActiveSet::AboveGamma(over)
            }
        },
    )
}

/// Plain fine-tuning on the forget set: the inner algorithm of the
/// task-arithmetic methods. Descent, Adam, seeded shuffling.
pub fn fine_tune_on_forget(
    base: &ModelCheckpoint,
    forget: &[TokenSequence],
    epochs: usize,
    lr: f32,
    batch: usize,
    seed: u64,
) -> Result<ModelCheckpoint> {
    if forget.is_empty() {
        return Err(UlabError::contract("fine_tune: empty forget set"));
    }
    let mut model = base.clone();
    let mut optimizer = OptimizerState::adam(lr);
    let mut rng = Rng::new(seed);
    let refs: Vec<&TokenSequence> = forget.iter().collect();
    for epoch in 0..epochs {
        run_epoch(&mut model, &refs, &mut optimizer, Direction::Descent, batch, &mut rng).map_err(
            |e| match e {
                UlabError::Diverged { detail, .. } => UlabError::Diverged { epoch, detail },
                other => other,
            },
        )?;
    }
    Ok(model)
}

/// Task arithmetic: subtract the scaled fine-tuning drift from the weights.
pub fn run_ta(
    base: &ModelCheckpoint,
    forget: &[TokenSequence],
    cfg: &TaConfig,
) -> Result<UnlearnRun> {
    cfg.validate()?;
    if forget.is_empty() {
        return Err(UlabError::contract("unlearn: empty forget set"));
    }
    let elapsed = timer();
    let mut trace = UnlearnTrace::new("ta");

    let pre_scores = score_set(base, forget)?;
    trace.records.push(EpochRecord {
        epoch: 0,
        phase: "ta-before".into(),
        avg_memorization: mean(&pre_scores),
        scores: pre_scores,
        active_ids: forget.iter().map(|s| s.id.clone()).collect(),
        wall_secs: elapsed(),
    });

    let tuned = fine_tune_on_forget(base, forget, cfg.ft_epochs, cfg.lr, cfg.batch, cfg.seed)?;
    let drift = checkpoint_axpy(&tuned, base, -1.0)?;
    let unlearned = checkpoint_axpy(base, &drift, -cfg.lambda)?;

    let post_scores = score_set(&unlearned, forget)?;
    trace.records.push(EpochRecord {
        epoch: 1,
        phase: "ta-after".into(),
        avg_memorization: mean(&post_scores),
        scores: post_scores,
        active_ids: Vec::new(),
        wall_secs: elapsed(),
    });

    Ok(UnlearnRun {
        model: unlearned,
        trace,
        stop: StopReason::Completed,
    })
}

/// TAU: SGA down to the switch level, then task arithmetic around wherever
/// SGA landed.
pub fn run_tau(
    base: &ModelCheckpoint,
    forget: &[TokenSequence],
    cfg: &TauConfig,
) -> Result<UnlearnRun> {
    cfg.validate()?;
    // Phase 1: the switch level plays the role of the stopping threshold.
    let sga_run = run_sga(base, forget, &cfg.sga, cfg.switch_level)?;
    if sga_run.stop == StopReason::Diverged {
        return Ok(UnlearnRun {
            model: sga_run.model,
            trace: UnlearnTrace {
                algorithm: "tau".into(),
                records: sga_run.trace.records,
            },
            stop: StopReason::Diverged,
        });
    }

    // Phase 2: drift subtraction from the SGA endpoint.
    let ta_run = run_ta(&sga_run.model, forget, &cfg.ta)?;

    let mut records = sga_run.trace.records;
    for mut r in ta_run.trace.records {
        r.epoch = records.len();
        r.phase = format!("tau-{}", r.phase);
        records.push(r);
    }
    Ok(UnlearnRun {
        model: ta_run.model,
        trace: UnlearnTrace {
            algorithm: "tau".into(),
            records,
        },
        stop: ta_run.stop,
    })
}
