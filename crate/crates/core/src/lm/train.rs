//! Gradient-descent training and the shared epoch machinery that unlearning
//! reuses with the direction flipped.

use super::model::{sequence_loss, ModelCheckpoint};
use super::sequence::TokenSequence;
use crate::autodiff::optim::{Direction, OptimizerState};
use crate::autodiff::tape::Reduction;
use crate::error::{Result, UlabError};
use crate::rng::Rng;

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub epochs: usize,
    pub lr: f32,
    pub batch: usize,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 300,
            lr: 1e-3,
            batch: 8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainCurve {
    /// Mean per-token loss, averaged over each epoch.
    pub epoch_losses: Vec<f64>,
}

/// One pass over `seqs` in seeded shuffled order, stepping the optimizer once
/// per batch with batch-averaged gradients. Returns the mean per-token loss.
pub fn run_epoch(
    model: &mut ModelCheckpoint,
    seqs: &[&TokenSequence],
    optimizer: &mut OptimizerState,
    direction: Direction,
    batch: usize,
    rng: &mut Rng,
) -> Result<f64> {
    if seqs.is_empty() {
        return Err(UlabError::contract("epoch over an empty sequence set"));
    }
    let batch = batch.max(1);
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    rng.shuffle(&mut order);

    let mut epoch_loss = 0.0f64;
    for chunk in order.chunks(batch) {
        let mut grad_acc: Option<Vec<Vec<f32>>> = None;
        let inv = 1.0 / chunk.len() as f32;
        for &idx in chunk {
            let seq = seqs[idx];
            let (mut pass, loss) = sequence_loss(model, &seq.tokens, Reduction::Mean, true)?;
            let loss_val = pass.tape.value(loss)[0] as f64;
            if !loss_val.is_finite() {
                return Err(UlabError::Diverged {
                    epoch: 0,
                    detail: format!("non-finite loss on sequence `{}`", seq.id),
                });
            }
            epoch_loss += loss_val;
            pass.tape.backward(loss)?;
            let grads = pass.block_grads(model);
            match &mut grad_acc {
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(&grads) {
                        crate::autodiff::kernels::axpy(a, g, inv);
                    }
                }
                None => {
                    let mut scaled = grads;
                    for g in &mut scaled {
                        for v in g.iter_mut() {
                            *v *= inv;
                        }
                    }
                    grad_acc = Some(scaled);
                }
            }
        }
        let grads = grad_acc.expect("chunks are non-empty");
        let mut views: Vec<&mut [f32]> = model.blocks.iter_mut().map(|b| b.data.as_mut_slice()).collect();
        optimizer.step(&mut views, &grads, direction)?;
        model.step += 1;
    }
    Ok(epoch_loss / seqs.len() as f64)
}

/// Train with Adam until the epoch budget is spent. `epochs == 0` returns the
/// model unchanged. A non-finite loss aborts with the epoch in the error.
pub fn train(
    model: &mut ModelCheckpoint,
    corpus: &[TokenSequence],
    opts: &TrainOptions,
) -> Result<TrainCurve> {
    if corpus.is_empty() {
        return Err(UlabError::contract("train: empty corpus"));
    }
    for seq in corpus {
        if seq.tokens.len() > model.config.context {
            return Err(UlabError::contract(format!(
                "train: sequence `{}` length {} exceeds context {}",
                seq.id,
                seq.tokens.len(),
                model.config.context
            )));
        }
    }
    let mut optimizer = OptimizerState::adam(opts.lr);
    let mut rng = Rng::new(opts.seed);
    let refs: Vec<&TokenSequence> = corpus.iter().collect();
    let mut curve = TrainCurve {
        epoch_losses: Vec::with_capacity(opts.epochs),
    };
    for epoch in 0..opts.epochs {
        let loss = run_epoch(
            model,
            &refs,
            &mut optimizer,
            Direction::Descent,
            opts.batch,
            &mut rng,
        )
        .map_err(|e| match e {
            UlabError::Diverged { detail, .. } => UlabError::Diverged { epoch, detail },
            other => other,
        })?;
        curve.epoch_losses.push(loss);
    }
    Ok(curve)
}
