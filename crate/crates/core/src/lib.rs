//! Desk-scale machine-unlearning laboratory for causal language models.
//!
//! The pieces, bottom to top:
//!
//! - [`autodiff`]: tape-based reverse-mode AD with SGD/Adam in either
//!   gradient direction.
//! - [`lm`]: byte-level tokenizer, a small causal transformer, training,
//!   greedy and interpolated decoding, and a binary checkpoint format.
//! - [`memo`]: per-sequence exact-memorization scoring, success criterion,
//!   extractable-outlier counting, empirical thresholds.
//! - [`unlearn`]: gradient ascent, selective gradient ascent, task
//!   arithmetic, and the warm-started combination of the two.
//! - [`attack`]: neighbour-based membership inference, ROC/AUC, and
//!   loss-distance histograms.
//! - [`lab`]: config-driven experiment harness with JSON/CSV/JSONL reports.
//! - [`plot`]: standalone SVG renderings of the standard figures.

pub mod attack;
pub mod autodiff;
pub mod clock;
pub mod error;
pub mod lab;
pub mod lm;
pub mod memo;
pub mod plot;
pub mod rng;
pub mod unlearn;

pub use error::{Result, UlabError};
