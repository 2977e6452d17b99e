//! Browser playground: train a tiny model until it memorizes a handful of
//! lines, watch an unlearning algorithm walk the memorization distribution
//! down to the threshold, then attack both checkpoints and compare.
//!
//! All heavy lifting lives in `ulab-core`; this crate only adapts it to a
//! JSON-over-strings surface that a static page can drive.

use ulab_core::attack::{gen_neighbours, run_attack, AttackReport, ModelProxyFill, NeighbourSet};
use ulab_core::autodiff::optim::{Direction, OptimizerState};
use ulab_core::lab::{split_corpus, utility_metrics};
use ulab_core::lm::{ModelCheckpoint, ModelConfig, TokenSequence};
use ulab_core::memo::{
    average_memorization, empirical_threshold, score_set, MemorizationReport, OutlierBounds,
};
use ulab_core::plot::{loma_histogram_svg, memorization_histogram_svg, roc_overlay_svg};
use ulab_core::rng::Rng;
use ulab_core::unlearn::{
    run_ga, run_sga, run_ta, run_tau, GaOptions, SgaConfig, TaConfig, TauConfig, UnlearnRun,
};

const DEMO_SEED: u64 = 7;
const TRAIN_LR: f32 = 2e-3;
const UNLEARN_LR: f32 = 8e-4;
const FORGET_SIZE: usize = 6;
const NEIGHBOURS: usize = 6;
const MASK_FRAC: f32 = 0.2;
const BIN_WIDTH: f64 = 0.25;

fn err_js(e: impl std::fmt::Display) -> String {
    e.to_string()
}

pub struct LabDemo {
    model: ModelCheckpoint,
    trained_snapshot: Option<ModelCheckpoint>,
    unlearned: Option<ModelCheckpoint>,
    last_algo: Option<String>,
    optimizer: OptimizerState,
    rng: Rng,
    train_pool: Vec<TokenSequence>,
    unseen_pool: Vec<TokenSequence>,
    forget: Vec<TokenSequence>,
    epochs_done: usize,
    threshold: Option<f64>,
}

impl LabDemo {
    /// Build pools from textarea lines: half train, half unseen, with the
    /// first `FORGET_SIZE` training lines as the forget set.
    pub fn new(corpus_text: &str) -> Result<LabDemo, String> {
        let lines: Vec<String> = corpus_text
            .lines()
            .map(|l| l.trim().to_string())
            .filter(|l| !l.is_empty())
            .collect();
        if lines.len() < 8 {
            return Err(err_js("need at least 8 non-empty corpus lines"));
        }
        let max_len = lines.iter().map(String::len).max().unwrap_or(0);
        let n_train = lines.len() / 2;
        let (train_pool, unseen_pool) =
            split_corpus(&lines, n_train, DEMO_SEED).map_err(err_js)?;
        let forget: Vec<TokenSequence> = train_pool[..FORGET_SIZE.min(n_train)].to_vec();
        let config = ModelConfig {
            layers: 1,
            heads: 2,
            dim: 32,
            context: (max_len + 2).next_power_of_two().max(64),
            seed: DEMO_SEED,
            ..ModelConfig::default()
        };
        let model = ModelCheckpoint::init(&config).map_err(err_js)?;
        Ok(LabDemo {
            model,
            trained_snapshot: None,
            unlearned: None,
            last_algo: None,
            optimizer: OptimizerState::adam(TRAIN_LR),
            rng: Rng::new(DEMO_SEED),
            train_pool,
            unseen_pool,
            forget,
            epochs_done: 0,
            threshold: None,
        })
    }

    /// Run `n` training epochs and report progress as JSON. Call repeatedly
    /// from a timer so the page stays responsive.
    pub fn train_epochs(&mut self, n: usize) -> Result<String, String> {
        let refs: Vec<&TokenSequence> = self.train_pool.iter().collect();
        let mut last_loss = 0.0f64;
        for _ in 0..n {
            last_loss = ulab_core::lm::train::run_epoch(
                &mut self.model,
                &refs,
                &mut self.optimizer,
                Direction::Descent,
                8,
                &mut self.rng,
            )
            .map_err(err_js)?;
            self.epochs_done += 1;
        }
        let avg = average_memorization(&self.model, &self.forget).map_err(err_js)?;
        let threshold = empirical_threshold(&self.model, &self.unseen_pool).map_err(err_js)?;
        self.threshold = Some(threshold);
        self.trained_snapshot = Some(self.model.clone());
        self.unlearned = None;
        self.last_algo = None;
        Ok(serde_json::json!({
            "epochs": self.epochs_done,
            "loss": last_loss,
            "forget_memorization": avg,
            "threshold": threshold,
        })
        .to_string())
    }

    /// Histogram of forget-set memorization for the current checkpoint
    /// (the unlearned one once an algorithm has run).
    pub fn memorization_svg(&self) -> Result<String, String> {
        let model = self.unlearned.as_ref().unwrap_or(&self.model);
        let scores = score_set(model, &self.forget).map_err(err_js)?;
        let values: Vec<f64> = scores.iter().map(|s| s.value).collect();
        let title = match &self.last_algo {
            Some(algo) => format!("forget-set memorization after {algo}"),
            None => "forget-set memorization".to_string(),
        };
        Ok(memorization_histogram_svg(
            &title,
            &values,
            OutlierBounds::default(),
            self.threshold.unwrap_or(0.0),
        ))
    }

    /// Run one unlearning algorithm from the trained snapshot. Returns the
    /// full trace as JSON so the page can replay the distribution epoch by
    /// epoch. `overshoot` drives gradient ascent past the threshold down to
    /// the lower outlier bound, the setting where the attack gets stronger.
    pub fn run_unlearn(&mut self, algo: &str, overshoot: bool) -> Result<String, String> {
        let base = self
            .trained_snapshot
            .clone()
            .ok_or_else(|| err_js("train first"))?;
        let threshold = self.threshold.ok_or_else(|| err_js("train first"))?;
        let target = if overshoot {
            OutlierBounds::default().lb / 2.0
        } else {
            threshold
        };
        let run: UnlearnRun = match algo {
            "ga" => run_ga(
                &base,
                &self.forget,
                target,
                &GaOptions {
                    lr: UNLEARN_LR,
                    max_epochs: 80,
                    patience: 10,
                    batch: 4,
                    seed: DEMO_SEED,
                    clip: None,
                },
            )
            .map_err(err_js)?,
            "sga" => run_sga(
                &base,
                &self.forget,
                &SgaConfig {
                    lr: UNLEARN_LR,
                    max_epochs: 80,
                    patience: 10,
                    batch: 4,
                    seed: DEMO_SEED,
                    ..SgaConfig::default()
                },
                target,
            )
            .map_err(err_js)?,
            "ta" => run_ta(
                &base,
                &self.forget,
                &TaConfig {
                    lambda: 3.0,
                    ft_epochs: 4,
                    lr: UNLEARN_LR,
                    batch: 4,
                    seed: DEMO_SEED,
                },
            )
            .map_err(err_js)?,
            "tau" => run_tau(
                &base,
                &self.forget,
                &TauConfig {
                    sga: SgaConfig {
                        lr: UNLEARN_LR,
                        max_epochs: 80,
                        patience: 10,
                        batch: 4,
                        seed: DEMO_SEED,
                        ..SgaConfig::default()
                    },
                    switch_level: 0.5,
                    ta: TaConfig {
                        lambda: 1.0,
                        ft_epochs: 4,
                        lr: UNLEARN_LR,
                        batch: 4,
                        seed: DEMO_SEED,
                    },
                },
            )
            .map_err(err_js)?,
            other => return Err(err_js(format!("unknown algorithm `{other}`"))),
        };
        let report = MemorizationReport::compute(
            &run.model,
            &self.forget,
            threshold,
            OutlierBounds::default(),
            algo,
        )
        .map_err(err_js)?;
        self.model = run.model.clone();
        self.unlearned = Some(run.model);
        self.last_algo = Some(algo.to_string());
        Ok(serde_json::json!({
            "algorithm": algo,
            "stop": format!("{:?}", run.stop),
            "epochs": run.trace.records.len().saturating_sub(1),
            "final_average": report.average,
            "threshold": threshold,
            "extractable": report.extractable,
            "success": report.success,
            "trace": run.trace.records.iter().map(|r| serde_json::json!({
                "epoch": r.epoch,
                "phase": r.phase,
                "avg": r.avg_memorization,
                "scores": r.scores.iter().map(|s| s.value).collect::<Vec<f64>>(),
                "active": r.active_ids,
            })).collect::<Vec<_>>(),
        })
        .to_string())
    }

    /// Membership-inference comparison of the trained snapshot against the
    /// unlearned checkpoint: ROC overlay plus the loss-distance histogram.
    pub fn attack_svg(&self) -> Result<String, String> {
        let base = self
            .trained_snapshot
            .as_ref()
            .ok_or_else(|| err_js("train first"))?;
        let target = self.unlearned.as_ref().unwrap_or(base);
        let generator = ModelProxyFill { model: base };
        let build = |seqs: &[TokenSequence], salt: u64| -> Result<Vec<NeighbourSet>, String> {
            seqs.iter()
                .enumerate()
                .map(|(i, x)| {
                    gen_neighbours(x, NEIGHBOURS, MASK_FRAC, &generator, DEMO_SEED + salt + i as u64)
                        .map_err(err_js)
                })
                .collect()
        };
        let nonmembers: Vec<TokenSequence> = self
            .unseen_pool
            .iter()
            .take(self.forget.len().max(4))
            .cloned()
            .collect();
        let forget_nb = build(&self.forget, 0)?;
        let nonmember_nb = build(&nonmembers, 0x100)?;
        let attack_of = |m: &ModelCheckpoint| -> Result<AttackReport, String> {
            run_attack(m, &self.forget, &forget_nb, &nonmembers, &nonmember_nb, BIN_WIDTH)
                .map_err(err_js)
        };
        let on_base = attack_of(base)?;
        let on_target = attack_of(target)?;
        let roc_svg = roc_overlay_svg(
            "membership inference: member vs unseen",
            &[
                ("trained model".to_string(), &on_base.roc),
                ("after unlearning".to_string(), &on_target.roc),
            ],
        );
        let forget_d: Vec<f64> = on_target.members.iter().map(|s| s.distance).collect();
        let unseen_d: Vec<f64> = on_target.nonmembers.iter().map(|s| s.distance).collect();
        let loma_svg = loma_histogram_svg(
            "loss distances vs the unseen band",
            &forget_d,
            &unseen_d,
            BIN_WIDTH,
        );
        Ok(serde_json::json!({
            "roc_svg": roc_svg,
            "loma_svg": loma_svg,
            "auc_base": on_base.roc.auc,
            "auc_unlearned": on_target.roc.auc,
        })
        .to_string())
    }

    /// Drop the unlearned checkpoint and return to the trained snapshot.
    pub fn reset_to_trained(&mut self) -> Result<(), String> {
        let snap = self
            .trained_snapshot
            .clone()
            .ok_or_else(|| err_js("train first"))?;
        self.model = snap;
        self.unlearned = None;
        self.last_algo = None;
        Ok(())
    }

    pub fn status(&self) -> String {
        let utility = self
            .trained_snapshot
            .as_ref()
            .and_then(|m| utility_metrics(m, &self.unseen_pool).ok());
        serde_json::json!({
            "params": self.model.param_count(),
            "train_lines": self.train_pool.len(),
            "unseen_lines": self.unseen_pool.len(),
            "forget_size": self.forget.len(),
            "epochs": self.epochs_done,
            "threshold": self.threshold,
            "unseen_ce": utility.map(|u| u.cross_entropy),
        })
        .to_string()
    }
}

/// wasm-bindgen surface: a thin wrapper so the engine itself stays free of
/// browser types and testable on the host.
#[cfg(target_arch = "wasm32")]
mod wasm {
    use super::LabDemo;
    use wasm_bindgen::prelude::*;

    #[wasm_bindgen(js_name = LabDemo)]
    pub struct JsLabDemo(LabDemo);

    #[wasm_bindgen(js_class = LabDemo)]
    impl JsLabDemo {
        #[wasm_bindgen(constructor)]
        pub fn new(corpus_text: &str) -> Result<JsLabDemo, JsValue> {
            LabDemo::new(corpus_text).map(JsLabDemo).map_err(|e| JsValue::from_str(&e))
        }

        pub fn train_epochs(&mut self, n: usize) -> Result<String, JsValue> {
            self.0.train_epochs(n).map_err(|e| JsValue::from_str(&e))
        }

        pub fn memorization_svg(&self) -> Result<String, JsValue> {
            self.0.memorization_svg().map_err(|e| JsValue::from_str(&e))
        }

        pub fn run_unlearn(&mut self, algo: &str, overshoot: bool) -> Result<String, JsValue> {
            self.0.run_unlearn(algo, overshoot).map_err(|e| JsValue::from_str(&e))
        }

        pub fn attack_svg(&self) -> Result<String, JsValue> {
            self.0.attack_svg().map_err(|e| JsValue::from_str(&e))
        }

        pub fn reset_to_trained(&mut self) -> Result<(), JsValue> {
            self.0.reset_to_trained().map_err(|e| JsValue::from_str(&e))
        }

        pub fn status(&self) -> String {
            self.0.status()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus() -> String {
        ulab_core::lab::synthetic_corpus(16, 36, 3).join("\n")
    }

    #[test]
    fn demo_drives_the_full_loop() {
        let mut demo = LabDemo::new(&corpus()).unwrap();
        let progress = demo.train_epochs(60).unwrap();
        let v: serde_json::Value = serde_json::from_str(&progress).unwrap();
        assert_eq!(v["epochs"], 60);
        assert!(v["forget_memorization"].as_f64().unwrap() > 0.3);

        let svg = demo.memorization_svg().unwrap();
        assert!(svg.starts_with("<svg "));

        let out = demo.run_unlearn("sga", false).unwrap();
        let v: serde_json::Value = serde_json::from_str(&out).unwrap();
        assert!(v["trace"].as_array().unwrap().len() >= 1);

        let attack = demo.attack_svg().unwrap();
        let v: serde_json::Value = serde_json::from_str(&attack).unwrap();
        assert!(v["roc_svg"].as_str().unwrap().contains("</svg>"));
        assert!(v["loma_svg"].as_str().unwrap().contains("</svg>"));

        demo.reset_to_trained().unwrap();
        let status: serde_json::Value = serde_json::from_str(&demo.status()).unwrap();
        assert_eq!(status["forget_size"], 6);
    }

    #[test]
    fn unlearn_before_train_is_an_error() {
        let mut demo = LabDemo::new(&corpus()).unwrap();
        assert!(demo.run_unlearn("ga", false).is_err());
    }

    #[test]
    fn tiny_corpus_is_rejected() {
        assert!(LabDemo::new("one line\ntwo lines").is_err());
    }
}
