//! Report persistence: canonical JSON, per-replica CSV, JSONL traces.

use std::path::{Path, PathBuf};

use super::experiment::{ExperimentOutput, RunReport};
use crate::error::{Result, UlabError};

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)
            .map_err(|e| UlabError::io(parent.display().to_string(), e))?;
    }
    std::fs::write(path, bytes).map_err(|e| UlabError::io(path.display().to_string(), e))
}

pub fn report_to_json(report: &RunReport) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("report serializes");
    s.push('\n');
    s
}

pub fn load_report(path: impl AsRef<Path>) -> Result<RunReport> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| UlabError::io(path.display().to_string(), e))?;
    Ok(serde_json::from_str(&text)?)
}

/// One row per algorithm x forget-size x replica. Runtime lives here rather
/// than in report.json, which stays bit-reproducible under fixed seeds.
pub fn summary_csv(report: &RunReport) -> String {
    let mut out = String::from(
        "algorithm,forget_size,replica,seed,avg_memorization,threshold,delta_mem,extractable,\
         success,auc_base,auc_unlearned,utility_ce,utility_accuracy,epochs,runtime_secs\n",
    );
    for r in &report.replicas {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{:.3}\n",
            r.algorithm,
            r.forget_size,
            r.replica,
            r.seed,
            r.memorization.average,
            r.memorization.threshold,
            r.memorization.delta_mem,
            r.memorization.extractable,
            r.memorization.success,
            r.attack_base.roc.auc,
            r.attack_unlearned.roc.auc,
            r.utility.cross_entropy,
            r.utility.next_token_accuracy,
            r.epochs_run,
            r.runtime_secs,
        ));
    }
    out
}

/// Write report.json, summary.csv, and one JSONL trace file per run into
/// `dir`. Returns the paths written.
pub fn export_report(output: &ExperimentOutput, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let mut written = Vec::new();

    let report_path = dir.join("report.json");
    write(&report_path, report_to_json(&output.report).as_bytes())?;
    written.push(report_path);

    let csv_path = dir.join("summary.csv");
    write(&csv_path, summary_csv(&output.report).as_bytes())?;
    written.push(csv_path);

    for entry in &output.traces {
        let path = dir.join(format!("trace-{}.jsonl", entry.label));
        write(&path, entry.trace.to_jsonl().as_bytes())?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lab::config::ExperimentConfig;
    use crate::lab::experiment::run_experiment;

    fn tiny_experiment_output(tag: &str) -> ExperimentOutput {
        let dir = std::env::temp_dir().join(format!("ulab-report-test-{tag}"));
        std::fs::create_dir_all(&dir).unwrap();
        let corpus_path = dir.join("corpus.txt");
        let lines = crate::lab::corpus::synthetic_corpus(24, 24, 3);
        std::fs::write(&corpus_path, lines.join("\n")).unwrap();
        let cfg = ExperimentConfig::from_json(&format!(
            r#"{{
                "corpus": {corpus:?},
                "output_dir": {out:?},
                "seed": 5,
                "model": {{"layers": 1, "heads": 2, "dim": 16, "context": 32}},
                "train": {{"epochs": 3, "lr": 0.001, "batch": 4, "train_lines": 8}},
                "unseen_pool": 8,
                "forget_sizes": [4],
                "replicas": 2,
                "algorithms": [ {{"ta": {{"ft_epochs": 1}}}}, {{"dpd": {{}}}} ],
                "attack": {{"neighbours": 2, "mask_frac": 0.2, "nonmembers": 4, "bin_width": 0.5}}
            }}"#,
            corpus = corpus_path.display().to_string(),
            out = dir.display().to_string(),
        ))
        .unwrap();
        run_experiment(&cfg).unwrap()
    }

    #[test]
    fn export_layout_and_reexport_identity() {
        let output = tiny_experiment_output("a");
        let dir = std::env::temp_dir().join("ulab-report-test-a").join("out");
        let written = export_report(&output, &dir).unwrap();
        assert!(written.iter().any(|p| p.ends_with("report.json")));
        assert!(written.iter().any(|p| p.ends_with("summary.csv")));

        let first = std::fs::read(dir.join("report.json")).unwrap();
        export_report(&output, &dir).unwrap();
        let second = std::fs::read(dir.join("report.json")).unwrap();
        assert_eq!(first, second, "re-export must be byte-identical");
    }

    #[test]
    fn csv_row_count_is_algorithms_times_replicas() {
        let output = tiny_experiment_output("b");
        let csv = summary_csv(&output.report);
        // 2 algorithms x 2 replicas + header
        assert_eq!(csv.lines().count(), 5);
    }

    #[test]
    fn report_json_round_trips() {
        let output = tiny_experiment_output("c");
        let dir = std::env::temp_dir().join("ulab-report-test-c").join("out");
        export_report(&output, &dir).unwrap();
        let loaded = load_report(dir.join("report.json")).unwrap();
        // runtime is deliberately not serialized; compare canonical forms
        assert_eq!(report_to_json(&loaded), report_to_json(&output.report));
        loaded.verify_aggregates().unwrap();
    }
}
