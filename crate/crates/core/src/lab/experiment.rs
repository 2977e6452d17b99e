//! Pipeline orchestration: train a base model to memorization, compute the
//! forgetting threshold, run each configured algorithm over each forget-set
//! replica, and measure memorization, attack exposure, and held-out utility
//! for every run.

use serde::{Deserialize, Serialize};

use super::config::{AlgorithmConfig, ExperimentConfig};
use super::corpus::{load_corpus, sample_forget_sets, split_corpus};
use crate::attack::{gen_neighbours, run_attack, AttackReport, ModelProxyFill, NeighbourSet};
use crate::autodiff::tensor::{argmax, softmax_slice};
use crate::clock::timer;
use crate::error::{Result, UlabError};
use crate::lm::model::{forward, ModelCheckpoint};
use crate::lm::sequence::TokenSequence;
use crate::lm::train::{train, TrainOptions};
use crate::memo::{
    dpd_expected_memorization, empirical_threshold, MemorizationReport,
};
use crate::rng::Rng;
use crate::unlearn::{run_ga, run_sga, run_ta, run_tau, StopReason, UnlearnRun, UnlearnTrace};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilityMetrics {
    /// Mean per-token negative log-likelihood over the unseen pool.
    pub cross_entropy: f64,
    /// Greedy next-token accuracy over the unseen pool.
    pub next_token_accuracy: f64,
}

/// Cross-entropy and accuracy from a single forward pass per sequence.
pub fn utility_metrics(m: &ModelCheckpoint, set: &[TokenSequence]) -> Result<UtilityMetrics> {
    if set.is_empty() {
        return Err(UlabError::contract("utility over an empty set"));
    }
    let v = m.config.vocab;
    let mut nll_sum = 0.0f64;
    let mut matches = 0usize;
    let mut positions = 0usize;
    for seq in set {
        let pass = forward(m, &seq.tokens, false)?;
        let logits = pass.tape.value(pass.logits);
        for i in 1..seq.tokens.len() {
            let row = &logits[(i - 1) * v..i * v];
            let p = softmax_slice(row);
            nll_sum -= (p[seq.tokens[i] as usize] as f64).max(1e-30).ln();
            matches += usize::from(argmax(row) as u32 == seq.tokens[i]);
            positions += 1;
        }
    }
    Ok(UtilityMetrics {
        cross_entropy: nll_sum / positions as f64,
        next_token_accuracy: matches as f64 / positions as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicaResult {
    pub algorithm: String,
    pub forget_size: usize,
    pub replica: usize,
    pub seed: u64,
    /// How the run ended; absent for the decoding-only baseline.
    pub stop: Option<StopReason>,
    pub epochs_run: usize,
    pub memorization: MemorizationReport,
    /// Decoding-level expected match rate; only for the dpd baseline.
    pub dpd_expected_average: Option<f64>,
    pub attack_base: AttackReport,
    pub attack_unlearned: AttackReport,
    pub utility: UtilityMetrics,
    /// Wall-clock seconds; excluded from report.json so identical seeds
    /// reproduce identical bytes. Exported via summary.csv instead.
    #[serde(skip)]
    pub runtime_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicaFailure {
    pub algorithm: String,
    pub forget_size: usize,
    pub replica: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlgorithmAggregate {
    pub algorithm: String,
    pub forget_size: usize,
    pub replicas: usize,
    pub mean_average_memorization: f64,
    pub mean_extractable: f64,
    pub mean_delta_mem: f64,
    pub success_rate: f64,
    pub mean_auc_base: f64,
    pub mean_auc_unlearned: f64,
    pub mean_utility_ce: f64,
    pub mean_utility_accuracy: f64,
    pub mean_epochs: f64,
    #[serde(skip)]
    pub mean_runtime_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseModelInfo {
    pub threshold: f64,
    pub utility: UtilityMetrics,
    pub param_count: usize,
    pub train_steps: u64,
    pub final_train_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: ExperimentConfig,
    /// Averaging order across replicas, fixed and recorded.
    pub averaging: String,
    pub base: BaseModelInfo,
    pub replicas: Vec<ReplicaResult>,
    pub failures: Vec<ReplicaFailure>,
    pub aggregates: Vec<AlgorithmAggregate>,
}

impl RunReport {
    /// Every aggregate mean must equal recomputation from its replicas.
    pub fn verify_aggregates(&self) -> Result<()> {
        for agg in &self.aggregates {
            let rows: Vec<&ReplicaResult> = self
                .replicas
                .iter()
                .filter(|r| r.algorithm == agg.algorithm && r.forget_size == agg.forget_size)
                .collect();
            if rows.len() != agg.replicas {
                return Err(UlabError::contract(format!(
                    "aggregate {}/{} counts {} replicas, found {}",
                    agg.algorithm,
                    agg.forget_size,
                    agg.replicas,
                    rows.len()
                )));
            }
            let n = rows.len() as f64;
            let checks = [
                (
                    agg.mean_average_memorization,
                    rows.iter().map(|r| r.memorization.average).sum::<f64>() / n,
                ),
                (
                    agg.mean_extractable,
                    rows.iter().map(|r| r.memorization.extractable as f64).sum::<f64>() / n,
                ),
                (
                    agg.mean_delta_mem,
                    rows.iter().map(|r| r.memorization.delta_mem).sum::<f64>() / n,
                ),
                (
                    agg.mean_auc_unlearned,
                    rows.iter().map(|r| r.attack_unlearned.roc.auc).sum::<f64>() / n,
                ),
                (
                    agg.mean_utility_ce,
                    rows.iter().map(|r| r.utility.cross_entropy).sum::<f64>() / n,
                ),
            ];
            for (stored, recomputed) in checks {
                if (stored - recomputed).abs() > 1e-9 {
                    return Err(UlabError::contract(format!(
                        "aggregate {}/{} mismatch: {stored} vs {recomputed}",
                        agg.algorithm, agg.forget_size
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TraceEntry {
    pub label: String,
    pub trace: UnlearnTrace,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub report: RunReport,
    pub traces: Vec<TraceEntry>,
    pub base_model: ModelCheckpoint,
}

fn replica_seed(base: u64, algo_idx: usize, size: usize, replica: usize) -> u64 {
    let rng = Rng::new(base ^ 0x5eed_0000);
    rng.fork((algo_idx as u64) << 40 | (size as u64) << 20 | replica as u64)
        .next_u64()
}

/// Everything shared between algorithms for one (size, replica) cell:
/// forget set, nonmember sample, neighbour sets, base-model attack.
struct ReplicaContext {
    forget: Vec<TokenSequence>,
    forget_neighbours: Vec<NeighbourSet>,
    nonmembers: Vec<TokenSequence>,
    nonmember_neighbours: Vec<NeighbourSet>,
    attack_base: AttackReport,
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let lines = load_corpus(&cfg.corpus)?;
    let need = cfg.train.train_lines + cfg.unseen_pool;
    if lines.len() < need {
        return Err(UlabError::Config(format!(
            "corpus has {} usable lines; config needs {need} (train {} + unseen {})",
            lines.len(),
            cfg.train.train_lines,
            cfg.unseen_pool
        )));
    }
    let (train_pool, unseen_all) = split_corpus(&lines, cfg.train.train_lines, cfg.seed)?;
    let unseen = &unseen_all[..cfg.unseen_pool];

    // Base model: train to memorization once, reuse everywhere.
    let mut base_model = ModelCheckpoint::init(&cfg.model.to_model_config(cfg.seed))?;
    let curve = train(
        &mut base_model,
        &train_pool,
        &TrainOptions {
            epochs: cfg.train.epochs,
            lr: cfg.train.lr,
            batch: cfg.train.batch,
            seed: cfg.seed,
        },
    )?;
    let threshold = empirical_threshold(&base_model, unseen)?;
    let base_utility = utility_metrics(&base_model, unseen)?;
    let base = BaseModelInfo {
        threshold,
        utility: base_utility.clone(),
        param_count: base_model.param_count(),
        train_steps: base_model.step,
        final_train_loss: curve.epoch_losses.last().copied(),
    };

    let mut replicas = Vec::new();
    let mut failures = Vec::new();
    let mut traces = Vec::new();

    for &size in &cfg.forget_sizes {
        let forget_sets = sample_forget_sets(
            &train_pool,
            size,
            cfg.replicas,
            cfg.seed.wrapping_add(size as u64),
        )?;
        let mut contexts = Vec::with_capacity(cfg.replicas);
        for (r, forget) in forget_sets.into_iter().enumerate() {
            contexts.push(build_replica_context(cfg, &base_model, unseen, forget, size, r)?);
        }

        for (algo_idx, algo) in cfg.algorithms.iter().enumerate() {
            for (r, ctx) in contexts.iter().enumerate() {
                let seed = replica_seed(cfg.seed, algo_idx, size, r);
                match run_replica(cfg, &base_model, threshold, unseen, ctx, algo, seed) {
                    Ok((result, trace)) => {
                        if let Some(t) = trace {
                            traces.push(TraceEntry {
                                label: format!("{}-s{}-r{}", algo.name(), size, r),
                                trace: t,
                            });
                        }
                        replicas.push(ReplicaResult {
                            forget_size: size,
                            replica: r,
                            seed,
                            ..result
                        });
                    }
                    Err(e) => failures.push(ReplicaFailure {
                        algorithm: algo.name().to_string(),
                        forget_size: size,
                        replica: r,
                        error: e.to_string(),
                    }),
                }
            }
        }
    }

    let aggregates = aggregate(cfg, &replicas);
    let report = RunReport {
        config: cfg.clone(),
        averaging: "per-replica-then-mean".to_string(),
        base,
        replicas,
        failures,
        aggregates,
    };
    report.verify_aggregates()?;
    Ok(ExperimentOutput {
        report,
        traces,
        base_model,
    })
}

fn build_replica_context(
    cfg: &ExperimentConfig,
    base_model: &ModelCheckpoint,
    unseen: &[TokenSequence],
    forget: Vec<TokenSequence>,
    size: usize,
    replica: usize,
) -> Result<ReplicaContext> {
    let nb_seed = cfg
        .seed
        .wrapping_add(0x4e42)
        .wrapping_add((size as u64) << 32)
        .wrapping_add(replica as u64);
    let generator = ModelProxyFill { model: base_model };

    let forget_neighbours: Vec<NeighbourSet> = forget
        .iter()
        .enumerate()
        .map(|(i, x)| {
            gen_neighbours(
                x,
                cfg.attack.neighbours,
                cfg.attack.mask_frac,
                &generator,
                nb_seed.wrapping_add(i as u64),
            )
        })
        .collect::<Result<_>>()?;

    let mut pool_rng = Rng::new(nb_seed ^ 0xcafe);
    let nonmembers: Vec<TokenSequence> = pool_rng
        .sample_indices(unseen.len(), cfg.attack.nonmembers)
        .into_iter()
        .map(|i| unseen[i].clone())
        .collect();
    let nonmember_neighbours: Vec<NeighbourSet> = nonmembers
        .iter()
        .enumerate()
        .map(|(i, x)| {
            gen_neighbours(
                x,
                cfg.attack.neighbours,
                cfg.attack.mask_frac,
                &generator,
                nb_seed.wrapping_add(0x1000).wrapping_add(i as u64),
            )
        })
        .collect::<Result<_>>()?;

    let attack_base = run_attack(
        base_model,
        &forget,
        &forget_neighbours,
        &nonmembers,
        &nonmember_neighbours,
        cfg.attack.bin_width,
    )?;
    Ok(ReplicaContext {
        forget,
        forget_neighbours,
        nonmembers,
        nonmember_neighbours,
        attack_base,
    })
}

fn run_replica(
    cfg: &ExperimentConfig,
    base_model: &ModelCheckpoint,
    threshold: f64,
    unseen: &[TokenSequence],
    ctx: &ReplicaContext,
    algo: &AlgorithmConfig,
    seed: u64,
) -> Result<(ReplicaResult, Option<UnlearnTrace>)> {
    let elapsed = timer();
    let (model, stop, epochs_run, trace, dpd_expected) = match algo {
        AlgorithmConfig::Ga(opts) => {
            let mut opts = opts.clone();
            opts.seed = seed;
            let UnlearnRun { model, trace, stop } = run_ga(base_model, &ctx.forget, threshold, &opts)?;
            let epochs = trace.records.len().saturating_sub(1);
            (model, Some(stop), epochs, Some(trace), None)
        }
        AlgorithmConfig::Sga(sga) => {
            let mut sga = sga.clone();
            sga.seed = seed;
            let UnlearnRun { model, trace, stop } = run_sga(base_model, &ctx.forget, &sga, threshold)?;
            let epochs = trace.records.len().saturating_sub(1);
            (model, Some(stop), epochs, Some(trace), None)
        }
        AlgorithmConfig::Ta(ta) => {
            let mut ta = ta.clone();
            ta.seed = seed;
            let UnlearnRun { model, trace, stop } = run_ta(base_model, &ctx.forget, &ta)?;
            (model, Some(stop), ta.ft_epochs, Some(trace), None)
        }
        AlgorithmConfig::Tau(tau) => {
            let mut tau = tau.clone();
            tau.sga.seed = seed;
            tau.ta.seed = seed.wrapping_add(1);
            let UnlearnRun { model, trace, stop } = run_tau(base_model, &ctx.forget, &tau)?;
            let sga_epochs = trace
                .records
                .iter()
                .filter(|r| r.phase.starts_with("ascent"))
                .count()
                .saturating_sub(1);
            (model, Some(stop), sga_epochs + tau.ta.ft_epochs, Some(trace), None)
        }
        AlgorithmConfig::Dpd(dpd) => {
            let mut total = 0.0f64;
            for x in &ctx.forget {
                total += dpd_expected_memorization(base_model, x, dpd.lambda)?;
            }
            let expected = total / ctx.forget.len() as f64;
            (
                base_model.clone(),
                None,
                0,
                None,
                Some(expected),
            )
        }
    };

    let memorization =
        MemorizationReport::compute(&model, &ctx.forget, threshold, cfg.bounds, algo.name())?;
    let attack_unlearned = run_attack(
        &model,
        &ctx.forget,
        &ctx.forget_neighbours,
        &ctx.nonmembers,
        &ctx.nonmember_neighbours,
        cfg.attack.bin_width,
    )?;
    let utility = utility_metrics(&model, unseen)?;

    Ok((
        ReplicaResult {
            algorithm: algo.name().to_string(),
            forget_size: 0, // caller fills
            replica: 0,     // caller fills
            seed,
            stop,
            epochs_run,
            memorization,
            dpd_expected_average: dpd_expected,
            attack_base: ctx.attack_base.clone(),
            attack_unlearned,
            utility,
            runtime_secs: elapsed(),
        },
        trace,
    ))
}

fn aggregate(cfg: &ExperimentConfig, replicas: &[ReplicaResult]) -> Vec<AlgorithmAggregate> {
    let mut out = Vec::new();
    for &size in &cfg.forget_sizes {
        for algo in &cfg.algorithms {
            let rows: Vec<&ReplicaResult> = replicas
                .iter()
                .filter(|r| r.algorithm == algo.name() && r.forget_size == size)
                .collect();
            if rows.is_empty() {
                continue;
            }
            let n = rows.len() as f64;
            let mean_of = |f: &dyn Fn(&ReplicaResult) -> f64| -> f64 {
                rows.iter().map(|r| f(r)).sum::<f64>() / n
            };
            out.push(AlgorithmAggregate {
                algorithm: algo.name().to_string(),
                forget_size: size,
                replicas: rows.len(),
                mean_average_memorization: mean_of(&|r| r.memorization.average),
                mean_extractable: mean_of(&|r| r.memorization.extractable as f64),
                mean_delta_mem: mean_of(&|r| r.memorization.delta_mem),
                success_rate: mean_of(&|r| f64::from(u8::from(r.memorization.success))),
                mean_auc_base: mean_of(&|r| r.attack_base.roc.auc),
                mean_auc_unlearned: mean_of(&|r| r.attack_unlearned.roc.auc),
                mean_utility_ce: mean_of(&|r| r.utility.cross_entropy),
                mean_utility_accuracy: mean_of(&|r| r.utility.next_token_accuracy),
                mean_epochs: mean_of(&|r| r.epochs_run as f64),
                mean_runtime_secs: mean_of(&|r| r.runtime_secs),
            });
        }
    }
    out
}
