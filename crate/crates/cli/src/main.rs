//! `ulab`: train a tiny causal LM to memorization, unlearn forget sets with
//! the gradient-ascent and task-arithmetic family, measure memorization, and
//! attack the result.
//!
//! Exit codes: 0 success, 2 configuration error, 1 runtime failure. The
//! `ULAB_OUT` environment variable overrides every output directory.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use ulab_core::attack::{gen_neighbours, run_attack, ModelProxyFill};
use ulab_core::lab::{
    self, export_report, load_report, run_experiment, summary_csv, ExperimentConfig,
};
use ulab_core::lm::{
    load_checkpoint, save_checkpoint, ModelCheckpoint, ModelConfig, TokenSequence, TrainOptions,
};
use ulab_core::memo::{empirical_threshold, MemorizationReport, OutlierBounds};
use ulab_core::plot::emit_plots;
use ulab_core::rng::Rng;
use ulab_core::unlearn::{
    run_ga, run_sga, run_ta, run_tau, GaOptions, SgaConfig, TaConfig, TauConfig, UnlearnRun,
};
use ulab_core::UlabError;

#[derive(Parser)]
#[command(name = "ulab", version, about = "desk-scale unlearning laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CorpusArgs {
    /// Plain UTF-8 corpus, one sequence per line.
    #[arg(long)]
    corpus: PathBuf,
    /// Lines assigned to the training pool by the seeded split.
    #[arg(long, default_value_t = 32)]
    train_lines: usize,
    /// Unseen-pool size used for thresholds and utility.
    #[arg(long, default_value_t = 256)]
    pool: usize,
    /// Seed for the split and all derived sampling.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl CorpusArgs {
    fn pools(&self) -> Result<(Vec<TokenSequence>, Vec<TokenSequence>)> {
        let lines = lab::load_corpus(&self.corpus)?;
        let (train, unseen) = lab::split_corpus(&lines, self.train_lines, self.seed)?;
        if unseen.len() < self.pool {
            return Err(UlabError::Config(format!(
                "unseen pool has {} lines, --pool wants {}",
                unseen.len(),
                self.pool
            ))
            .into());
        }
        Ok((train, unseen[..self.pool].to_vec()))
    }

    fn forget_set(&self, train: &[TokenSequence], size: usize) -> Result<Vec<TokenSequence>> {
        Ok(lab::sample_forget_sets(train, size, 1, self.seed)?.remove(0))
    }
}

#[derive(Args)]
struct ModelShape {
    #[arg(long, default_value_t = 259)]
    vocab: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 128)]
    context: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Train a fresh model on the corpus training pool until it memorizes.
    Train {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[command(flatten)]
        shape: ModelShape,
        #[arg(long, default_value_t = 300)]
        epochs: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f32,
        #[arg(long, default_value_t = 8)]
        batch: usize,
        /// Output directory for model.ulab and the loss curve.
        #[arg(long)]
        out: PathBuf,
    },
    /// Average memorization over the unseen pool: the forgetting bar.
    Threshold {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long)]
        model: PathBuf,
    },
    /// Run one unlearning algorithm over a sampled forget set.
    Unlearn {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long)]
        model: PathBuf,
        /// ga | sga | ta | tau
        #[arg(long)]
        algo: String,
        #[arg(long, default_value_t = 8)]
        forget_size: usize,
        #[arg(long, default_value_t = 5e-5)]
        lr: f32,
        #[arg(long, default_value_t = 200)]
        max_epochs: usize,
        #[arg(long, default_value_t = 5)]
        patience: usize,
        #[arg(long, default_value_t = 8)]
        batch: usize,
        /// Global-norm gradient clip (the clipped-ascent variant).
        #[arg(long)]
        clip: Option<f32>,
        /// Per-sequence memorization upper limit (sga, tau).
        #[arg(long, default_value_t = 0.70)]
        gamma: f64,
        /// Phase-2 active-set size (sga, tau).
        #[arg(long, default_value_t = 1)]
        top_k: usize,
        /// Drift scaling factor (ta, tau).
        #[arg(long)]
        lambda: Option<f32>,
        /// Fine-tuning epochs for the drift (ta, tau).
        #[arg(long, default_value_t = 3)]
        ft_epochs: usize,
        /// Average memorization at which tau switches to drift subtraction.
        #[arg(long, default_value_t = 0.50)]
        switch: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Membership inference against a model, neighbours from a baseline.
    Attack {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long)]
        model: PathBuf,
        /// Neighbour-generator checkpoint; defaults to --model.
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        forget_size: usize,
        #[arg(long, default_value_t = 8)]
        neighbours: usize,
        #[arg(long, default_value_t = 0.2)]
        mask_frac: f32,
        #[arg(long, default_value_t = 8)]
        nonmembers: usize,
        #[arg(long, default_value_t = 0.25)]
        bin_width: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Full config-driven pipeline: train, unlearn, measure, attack, report.
    Experiment {
        #[arg(long)]
        config: PathBuf,
    },
    /// Re-export artifacts from a saved report.json.
    Report {
        #[arg(long)]
        report: PathBuf,
        /// Also emit the SVG figure set.
        #[arg(long)]
        plots: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn out_dir(requested: PathBuf) -> PathBuf {
    match std::env::var_os("ULAB_OUT") {
        Some(dir) if !dir.is_empty() => PathBuf::from(dir),
        _ => requested,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            if err
                .chain()
                .any(|c| matches!(c.downcast_ref::<UlabError>(), Some(UlabError::Config(_))))
            {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train {
            corpus,
            shape,
            epochs,
            lr,
            batch,
            out,
        } => {
            let (train_pool, _) = corpus.pools()?;
            let cfg = ModelConfig {
                vocab: shape.vocab,
                layers: shape.layers,
                heads: shape.heads,
                dim: shape.dim,
                context: shape.context,
                seed: corpus.seed,
            };
            let mut model = ModelCheckpoint::init(&cfg)?;
            let curve = ulab_core::lm::train(
                &mut model,
                &train_pool,
                &TrainOptions {
                    epochs,
                    lr,
                    batch,
                    seed: corpus.seed,
                },
            )?;
            let avg = ulab_core::memo::average_memorization(&model, &train_pool)?;
            let dir = out_dir(out);
            std::fs::create_dir_all(&dir)
                .with_context(|| format!("creating {}", dir.display()))?;
            let model_path = dir.join("model.ulab");
            save_checkpoint(&model, &model_path)?;
            let mut curve_csv = String::from("epoch,mean_loss\n");
            for (i, l) in curve.epoch_losses.iter().enumerate() {
                curve_csv.push_str(&format!("{i},{l}\n"));
            }
            std::fs::write(dir.join("train-curve.csv"), curve_csv)?;
            println!(
                "trained {} params for {} epochs; train-pool memorization {:.4}",
                model.param_count(),
                epochs,
                avg
            );
            println!("saved {}", model_path.display());
            Ok(())
        }
        Command::Threshold { corpus, model } => {
            let model = load_checkpoint(&model)?;
            let (_, unseen) = corpus.pools()?;
            let threshold = empirical_threshold(&model, &unseen)?;
            println!(
                "{}",
                serde_json::json!({"threshold": threshold, "pool": unseen.len()})
            );
            Ok(())
        }
        Command::Unlearn {
            corpus,
            model,
            algo,
            forget_size,
            lr,
            max_epochs,
            patience,
            batch,
            clip,
            gamma,
            top_k,
            lambda,
            ft_epochs,
            switch,
            out,
        } => {
            let base = load_checkpoint(&model)?;
            let (train_pool, unseen) = corpus.pools()?;
            let forget = corpus.forget_set(&train_pool, forget_size)?;
            let threshold = empirical_threshold(&base, &unseen)?;

            let sga_cfg = SgaConfig {
                gamma,
                top_k,
                lr,
                max_epochs,
                patience,
                batch,
                seed: corpus.seed,
            };
            let ta_cfg = |default_lambda: f32| TaConfig {
                lambda: lambda.unwrap_or(default_lambda),
                ft_epochs,
                lr,
                batch,
                seed: corpus.seed,
            };
            let run: UnlearnRun = match algo.as_str() {
                "ga" => run_ga(
                    &base,
                    &forget,
                    threshold,
                    &GaOptions {
                        lr,
                        max_epochs,
                        patience,
                        batch,
                        seed: corpus.seed,
                        clip,
                    },
                )?,
                "sga" => run_sga(&base, &forget, &sga_cfg, threshold)?,
                "ta" => run_ta(&base, &forget, &ta_cfg(3.0))?,
                "tau" => run_tau(
                    &base,
                    &forget,
                    &TauConfig {
                        sga: sga_cfg,
                        switch_level: switch,
                        ta: ta_cfg(1.0),
                    },
                )?,
                other => {
                    return Err(UlabError::Config(format!(
                        "unknown algorithm `{other}`; expected ga, sga, ta, or tau"
                    ))
                    .into())
                }
            };

            let report = MemorizationReport::compute(
                &run.model,
                &forget,
                threshold,
                OutlierBounds::default(),
                &algo,
            )?;
            let dir = out_dir(out);
            std::fs::create_dir_all(&dir)
                .with_context(|| format!("creating {}", dir.display()))?;
            save_checkpoint(&run.model, dir.join("unlearned.ulab"))?;
            std::fs::write(dir.join("trace.jsonl"), run.trace.to_jsonl())?;
            std::fs::write(dir.join("memorization.json"), report.to_json())?;
            std::fs::write(dir.join("memorization.csv"), report.to_csv())?;
            println!(
                "{algo}: stop={:?} epochs={} avg={:.4} threshold={:.4} extractable={} success={}",
                run.stop,
                run.trace.records.len().saturating_sub(1),
                report.average,
                threshold,
                report.extractable,
                report.success,
            );
            println!("saved {}", dir.join("unlearned.ulab").display());
            Ok(())
        }
        Command::Attack {
            corpus,
            model,
            baseline,
            forget_size,
            neighbours,
            mask_frac,
            nonmembers,
            bin_width,
            out,
        } => {
            let target = load_checkpoint(&model)?;
            let reference = match &baseline {
                Some(p) => load_checkpoint(p)?,
                None => target.clone(),
            };
            let (train_pool, unseen) = corpus.pools()?;
            if nonmembers > unseen.len() {
                return Err(UlabError::Config(format!(
                    "--nonmembers {nonmembers} exceeds the unseen pool of {}",
                    unseen.len()
                ))
                .into());
            }
            let forget = corpus.forget_set(&train_pool, forget_size)?;
            let generator = ModelProxyFill { model: &reference };
            let forget_nb = forget
                .iter()
                .enumerate()
                .map(|(i, x)| {
                    gen_neighbours(x, neighbours, mask_frac, &generator, corpus.seed + i as u64)
                })
                .collect::<ulab_core::Result<Vec<_>>>()?;
            let mut rng = Rng::new(corpus.seed ^ 0xcafe);
            let picked: Vec<TokenSequence> = rng
                .sample_indices(unseen.len(), nonmembers)
                .into_iter()
                .map(|i| unseen[i].clone())
                .collect();
            let picked_nb = picked
                .iter()
                .enumerate()
                .map(|(i, x)| {
                    gen_neighbours(
                        x,
                        neighbours,
                        mask_frac,
                        &generator,
                        corpus.seed + 0x1000 + i as u64,
                    )
                })
                .collect::<ulab_core::Result<Vec<_>>>()?;
            let report = run_attack(&target, &forget, &forget_nb, &picked, &picked_nb, bin_width)?;
            let dir = out_dir(out);
            std::fs::create_dir_all(&dir)
                .with_context(|| format!("creating {}", dir.display()))?;
            let path = dir.join("attack-report.json");
            std::fs::write(&path, serde_json::to_string_pretty(&report)?)?;
            println!(
                "auc={:.4} members={} nonmembers={} generator={}",
                report.roc.auc,
                report.members.len(),
                report.nonmembers.len(),
                report.generator_tag,
            );
            println!("saved {}", path.display());
            Ok(())
        }
        Command::Experiment { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let output = run_experiment(&cfg)?;
            let dir = out_dir(PathBuf::from(&cfg.output_dir));
            let written = export_report(&output, &dir)?;
            save_checkpoint(&output.base_model, dir.join("base-model.ulab"))?;
            let plots = emit_plots(&output.report, dir.join("plots"))?;
            for notice in &plots.notices {
                eprintln!("notice: {notice}");
            }
            for agg in &output.report.aggregates {
                println!(
                    "{} size={} avg_mem={:.4} extractable={:.2} auc={:.4} -> {:.4} ce={:.4} acc={:.4}",
                    agg.algorithm,
                    agg.forget_size,
                    agg.mean_average_memorization,
                    agg.mean_extractable,
                    agg.mean_auc_base,
                    agg.mean_auc_unlearned,
                    agg.mean_utility_ce,
                    agg.mean_utility_accuracy,
                );
            }
            println!(
                "wrote {} files and {} plots under {}",
                written.len() + 1,
                plots.written.len(),
                dir.display()
            );
            Ok(())
        }
        Command::Report { report, plots, out } => {
            let loaded = load_report(&report)?;
            loaded.verify_aggregates()?;
            let dir = out_dir(out.unwrap_or_else(|| {
                report
                    .parent()
                    .map(PathBuf::from)
                    .unwrap_or_else(|| PathBuf::from("."))
            }));
            std::fs::create_dir_all(&dir)
                .with_context(|| format!("creating {}", dir.display()))?;
            std::fs::write(dir.join("summary.csv"), summary_csv(&loaded))?;
            if plots {
                let outcome = emit_plots(&loaded, dir.join("plots"))?;
                for notice in &outcome.notices {
                    eprintln!("notice: {notice}");
                }
                println!("emitted {} plots under {}", outcome.written.len(), dir.display());
            }
            for agg in &loaded.aggregates {
                println!(
                    "{} size={} avg_mem={:.4} extractable={:.2} delta_mem={:.4} success_rate={:.2}",
                    agg.algorithm,
                    agg.forget_size,
                    agg.mean_average_memorization,
                    agg.mean_extractable,
                    agg.mean_delta_mem,
                    agg.success_rate,
                );
            }
            Ok(())
        }
    }
}
