//! Finite-difference checks for every tape primitive and the full
//! transformer loss.
//!
//! Oracle discipline: the numeric side never touches the tape. Each op has a
//! plain scalar f64 reimplementation in `common`; central differences are
//! taken on that reference, and the engine's analytic f32 gradients must
//! agree to 1e-3 relative error at vector level, 20 random trials per
//! primitive.

mod common;

use common::*;
use ulab_core::autodiff::tape::{Reduction, Tape, ValueId};
use ulab_core::autodiff::tensor::Tensor;
use ulab_core::lm::model::{sequence_loss, ModelCheckpoint, ModelConfig};
use ulab_core::rng::Rng;

const TRIALS: usize = 20;

fn grad_leaf(tape: &mut Tape, shape: &[usize], data: &[f32]) -> ValueId {
    let t = Tensor::new(shape.to_vec(), data.to_vec()).unwrap().with_grad();
    tape.leaf(&t)
}

fn const_leaf(tape: &mut Tape, shape: &[usize], data: &[f32]) -> ValueId {
    let t = Tensor::new(shape.to_vec(), data.to_vec()).unwrap();
    tape.leaf(&t)
}

/// Generic two-sided check. The engine computes `loss = sum(op(x...) * W)`
/// with W a fixed random projection (a plain sum is blind to softmax and
/// layer-norm null directions); the reference computes the same projected
/// loss in f64 and is differentiated numerically, one input at a time.
fn check_op(
    name: &str,
    rng: &mut Rng,
    input_shapes: &[Vec<usize>],
    build: impl Fn(&mut Tape, &[ValueId]) -> ValueId,
    reference: impl Fn(&[Vec<f64>]) -> Vec<f64>,
) {
    for trial in 0..TRIALS {
        let inputs: Vec<Vec<f32>> = input_shapes
            .iter()
            .map(|s| random_vec(rng, s.iter().product(), 1.0))
            .collect();

        // Engine side: analytic gradients for every input at once.
        let mut tape = Tape::new();
        let ids: Vec<ValueId> = input_shapes
            .iter()
            .zip(&inputs)
            .map(|(s, d)| grad_leaf(&mut tape, s, d))
            .collect();
        let out = build(&mut tape, &ids);
        let out_shape = tape.shape(out).to_vec();
        let projection = random_vec(rng, tape.value(out).len(), 1.0);
        let w = const_leaf(&mut tape, &out_shape, &projection);
        let weighted = tape.mul(out, w).unwrap();
        let loss = tape.sum(weighted).unwrap();
        tape.backward(loss).unwrap();

        // Cross-check the forward against the reference while we are here.
        let inputs64: Vec<Vec<f64>> = inputs.iter().map(|v| to_f64(v)).collect();
        let ref_out = reference(&inputs64);
        let engine_out = tape.value(out);
        assert_eq!(ref_out.len(), engine_out.len(), "{name}: forward size");
        for (e, r) in engine_out.iter().zip(&ref_out) {
            assert!(
                (*e as f64 - r).abs() < 1e-4 * (1.0 + r.abs()),
                "{name}: forward mismatch {e} vs {r}"
            );
        }

        let proj64 = to_f64(&projection);
        for (i, &id) in ids.iter().enumerate() {
            let analytic = match tape.grad(id) {
                Some(g) => g.to_vec(),
                None => vec![0.0; inputs[i].len()],
            };
            let mut probe_inputs = inputs64.clone();
            let numeric = finite_diff_grad(
                |probe| {
                    probe_inputs[i] = probe.to_vec();
                    reference(&probe_inputs)
                        .iter()
                        .zip(&proj64)
                        .map(|(o, w)| o * w)
                        .sum()
                },
                &inputs64[i],
                FD_STEP,
            );
            let err = rel_norm_err(&analytic, &numeric);
            assert!(
                err < FD_TOL,
                "{name}: trial {trial}, input {i}: relative error {err:.3e}"
            );
        }
    }
}

#[test]
fn gradcheck_matmul() {
    let mut rng = Rng::new(0xA1);
    check_op(
        "matmul",
        &mut rng,
        &[vec![3, 4], vec![4, 2]],
        |t, ids| t.matmul(ids[0], ids[1]).unwrap(),
        |x| ref_matmul(&x[0], &x[1], 3, 4, 2),
    );
}

#[test]
fn gradcheck_matmul_sum_vs_finite_difference_3x3() {
    // gradient of sum(A . B) wrt A on random 3x3 matrices
    let mut rng = Rng::new(0xA2);
    for _ in 0..TRIALS {
        let a = random_vec(&mut rng, 9, 1.0);
        let b = random_vec(&mut rng, 9, 1.0);
        let mut tape = Tape::new();
        let pa = grad_leaf(&mut tape, &[3, 3], &a);
        let pb = const_leaf(&mut tape, &[3, 3], &b);
        let y = tape.matmul(pa, pb).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        let b64 = to_f64(&b);
        let numeric = finite_diff_grad(
            |probe| ref_matmul(probe, &b64, 3, 3, 3).iter().sum(),
            &to_f64(&a),
            FD_STEP,
        );
        let err = rel_norm_err(tape.grad(pa).unwrap(), &numeric);
        assert!(err < FD_TOL, "relative error {err:.3e}");
    }
}

#[test]
fn gradcheck_matmul_nt() {
    let mut rng = Rng::new(0xA3);
    check_op(
        "matmul_nt",
        &mut rng,
        &[vec![3, 5], vec![4, 5]],
        |t, ids| t.matmul_nt(ids[0], ids[1]).unwrap(),
        |x| ref_matmul_nt(&x[0], &x[1], 3, 5, 4),
    );
}

#[test]
fn gradcheck_add() {
    let mut rng = Rng::new(0xA4);
    check_op(
        "add",
        &mut rng,
        &[vec![4, 3], vec![4, 3]],
        |t, ids| t.add(ids[0], ids[1]).unwrap(),
        |x| x[0].iter().zip(&x[1]).map(|(a, b)| a + b).collect(),
    );
}

#[test]
fn gradcheck_mul() {
    let mut rng = Rng::new(0xA5);
    check_op(
        "mul",
        &mut rng,
        &[vec![4, 3], vec![4, 3]],
        |t, ids| t.mul(ids[0], ids[1]).unwrap(),
        |x| x[0].iter().zip(&x[1]).map(|(a, b)| a * b).collect(),
    );
}

#[test]
fn gradcheck_add_bias() {
    let mut rng = Rng::new(0xA6);
    check_op(
        "add_bias",
        &mut rng,
        &[vec![5, 4], vec![4]],
        |t, ids| t.add_bias(ids[0], ids[1]).unwrap(),
        |x| {
            let mut out = x[0].clone();
            for r in 0..5 {
                for c in 0..4 {
                    out[r * 4 + c] += x[1][c];
                }
            }
            out
        },
    );
}

#[test]
fn gradcheck_scale() {
    let mut rng = Rng::new(0xA7);
    check_op(
        "scale",
        &mut rng,
        &[vec![6]],
        |t, ids| t.scale(ids[0], -1.7).unwrap(),
        |x| x[0].iter().map(|v| v * (-1.7f32) as f64).collect(),
    );
}

#[test]
fn gradcheck_gelu() {
    let mut rng = Rng::new(0xA8);
    check_op(
        "gelu",
        &mut rng,
        &[vec![3, 5]],
        |t, ids| t.gelu(ids[0]).unwrap(),
        |x| x[0].iter().map(|&v| ref_gelu(v)).collect(),
    );
}

#[test]
fn gradcheck_layer_norm() {
    let mut rng = Rng::new(0xA9);
    check_op(
        "layer_norm",
        &mut rng,
        &[vec![4, 6], vec![6], vec![6]],
        |t, ids| t.layer_norm(ids[0], ids[1], ids[2]).unwrap(),
        |x| ref_layer_norm(&x[0], &x[1], &x[2], 4, 6),
    );
}

#[test]
fn gradcheck_embedding() {
    let ids = [2u32, 0, 6, 2, 5];
    let mut rng = Rng::new(0xAA);
    check_op(
        "embedding",
        &mut rng,
        &[vec![7, 4]],
        |t, leaf_ids| t.embedding(leaf_ids[0], &ids).unwrap(),
        |x| {
            let mut out = Vec::with_capacity(ids.len() * 4);
            for &id in &ids {
                out.extend_from_slice(&x[0][id as usize * 4..(id as usize + 1) * 4]);
            }
            out
        },
    );
}

#[test]
fn gradcheck_softmax_rows() {
    let mut rng = Rng::new(0xAB);
    check_op(
        "softmax axis 1",
        &mut rng,
        &[vec![3, 6]],
        |t, ids| t.softmax(ids[0], 1).unwrap(),
        |x| ref_softmax(&x[0], 3, 6, 1),
    );
}

#[test]
fn gradcheck_softmax_cols() {
    let mut rng = Rng::new(0xAC);
    check_op(
        "softmax axis 0",
        &mut rng,
        &[vec![5, 3]],
        |t, ids| t.softmax(ids[0], 0).unwrap(),
        |x| ref_softmax(&x[0], 5, 3, 0),
    );
}

#[test]
fn gradcheck_causal_softmax() {
    let mut rng = Rng::new(0xAD);
    check_op(
        "causal_softmax",
        &mut rng,
        &[vec![5, 5]],
        |t, ids| t.causal_softmax(ids[0]).unwrap(),
        |x| ref_causal_softmax(&x[0], 5),
    );
}

#[test]
fn gradcheck_cross_entropy() {
    let mut rng = Rng::new(0xAE);
    let targets = [1u32, 8, 0, 4];
    for trial in 0..TRIALS {
        let logits = random_vec(&mut rng, 4 * 9, 1.5);
        for (reduction, mean) in [(Reduction::Sum, false), (Reduction::Mean, true)] {
            let mut tape = Tape::new();
            let l = grad_leaf(&mut tape, &[4, 9], &logits);
            let loss = tape.cross_entropy(l, &targets, reduction).unwrap();
            tape.backward(loss).unwrap();
            let numeric = finite_diff_grad(
                |probe| ref_cross_entropy(probe, &targets, 9, mean),
                &to_f64(&logits),
                FD_STEP,
            );
            let err = rel_norm_err(tape.grad(l).unwrap(), &numeric);
            assert!(err < FD_TOL, "cross_entropy trial {trial}: {err:.3e}");
        }
    }
}

#[test]
fn gradcheck_slice_and_concat() {
    let mut rng = Rng::new(0xAF);
    check_op(
        "slice_rows",
        &mut rng,
        &[vec![6, 3]],
        |t, ids| t.slice_rows(ids[0], 1, 4).unwrap(),
        |x| x[0][3..12].to_vec(),
    );
    check_op(
        "slice_cols",
        &mut rng,
        &[vec![3, 6]],
        |t, ids| t.slice_cols(ids[0], 2, 5).unwrap(),
        |x| {
            let mut out = Vec::new();
            for r in 0..3 {
                out.extend_from_slice(&x[0][r * 6 + 2..r * 6 + 5]);
            }
            out
        },
    );
    check_op(
        "concat_cols",
        &mut rng,
        &[vec![3, 2], vec![3, 4]],
        |t, ids| t.concat_cols(&[ids[0], ids[1]]).unwrap(),
        |x| {
            let mut out = Vec::new();
            for r in 0..3 {
                out.extend_from_slice(&x[0][r * 2..(r + 1) * 2]);
                out.extend_from_slice(&x[1][r * 4..(r + 1) * 4]);
            }
            out
        },
    );
}

/// The whole model at once: analytic gradient of every parameter block
/// against central differences of the f64 reference loss, 2 layers, d = 16.
#[test]
fn gradcheck_full_transformer() {
    let cfg = ModelConfig {
        vocab: 32,
        layers: 2,
        heads: 2,
        dim: 16,
        context: 16,
        seed: 0x5EED,
    };
    let mut rng = Rng::new(0xB0);
    for trial in 0..3 {
        let mut model = ModelCheckpoint::init(&ModelConfig {
            seed: cfg.seed + trial,
            ..cfg.clone()
        })
        .unwrap();
        // Noise the parameters so norms and attention see varied data.
        for b in &mut model.blocks {
            for v in &mut b.data {
                *v += rng.normal_f32(0.0, 0.05);
            }
        }
        let tokens: Vec<u32> = (0..7).map(|_| rng.below(32) as u32).collect();

        let (mut pass, loss) = sequence_loss(&model, &tokens, Reduction::Sum, true).unwrap();
        pass.tape.backward(loss).unwrap();
        let analytic = pass.block_grads(&model);

        let (ref_blocks, names) = blocks_f64(&model);
        let base_loss = ref_transformer_loss(&model.config, &ref_blocks, &names, &tokens);
        let engine_loss = pass.tape.value(loss)[0] as f64;
        assert!(
            (base_loss - engine_loss).abs() < 1e-3 * (1.0 + base_loss.abs()),
            "forward mismatch: engine {engine_loss} vs reference {base_loss}"
        );

        for (bi, block) in model.blocks.iter().enumerate() {
            let mut probe_blocks = ref_blocks.clone();
            let numeric = finite_diff_grad(
                |probe| {
                    probe_blocks[bi] = probe.to_vec();
                    ref_transformer_loss(&model.config, &probe_blocks, &names, &tokens)
                },
                &ref_blocks[bi],
                FD_STEP,
            );
            let err = rel_norm_err(&analytic[bi], &numeric);
            assert!(
                err < FD_TOL,
                "trial {trial}, block `{}`: relative error {err:.3e}",
                block.name
            );
        }
    }
}
