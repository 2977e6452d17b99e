//! Byte-level tokenizer, small causal transformer, training, decoding, and
//! checkpoint persistence.

pub mod generate;
pub mod io;
pub mod model;
pub mod sequence;
pub mod tokenizer;
pub mod train;

pub use generate::{generate, next_token_distribution, DecodeMode, DPD_DEFAULT_LAMBDA};
pub use io::{load_checkpoint, save_checkpoint};
pub use model::{
    checkpoint_axpy, forward, forward_logits, mean_nll, sequence_loss, ModelCheckpoint,
    ModelConfig, ParamBlock,
};
pub use sequence::{SourceTag, TokenSequence};
pub use tokenizer::{detokenize, detokenize_lossy, tokenize, BOS, BYTE_VOCAB, EOS, PAD};
pub use train::{train, TrainCurve, TrainOptions};
