//! Config-driven experiment harness: corpus pools, forget-set sampling,
//! pipeline orchestration, and report persistence.

pub mod config;
pub mod corpus;
pub mod experiment;
pub mod report;

pub use config::{AlgorithmConfig, ExperimentConfig};
pub use corpus::{load_corpus, sample_forget_sets, split_corpus, synthetic_corpus};
pub use experiment::{
    run_experiment, utility_metrics, ExperimentOutput, ReplicaResult, RunReport, TraceEntry,
    UtilityMetrics,
};
pub use report::{export_report, load_report, report_to_json, summary_csv};
