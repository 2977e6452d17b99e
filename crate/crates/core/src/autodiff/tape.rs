//! Wengert tape: eager forward execution with recorded operations, replayed
//! in reverse for gradients.
//!
//! Values live in an arena and are addressed by [`ValueId`]. An operation is
//! recorded only when at least one of its inputs needs a gradient; forward
//! results are stored either way. Backward walks the recorded ops exactly
//! once, in reverse, accumulating vector-Jacobian products.

use super::kernels;
use super::tensor::Tensor;
use crate::error::{Result, UlabError};

pub const LN_EPS: f32 = 1e-5;

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)
const GELU_A: f32 = 0.044_715;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

struct Slot {
    data: Vec<f32>,
    shape: Vec<usize>,
    needs_grad: bool,
    is_leaf: bool,
}

enum Op {
    Add { a: ValueId, b: ValueId, out: ValueId },
    Mul { a: ValueId, b: ValueId, out: ValueId },
    AddBias { a: ValueId, bias: ValueId, out: ValueId },
    Scale { a: ValueId, factor: f32, out: ValueId },
    Matmul { a: ValueId, b: ValueId, out: ValueId },
    MatmulNT { a: ValueId, b: ValueId, out: ValueId },
    Gelu { a: ValueId, out: ValueId },
    LayerNorm { a: ValueId, gain: ValueId, bias: ValueId, out: ValueId, stats: Vec<(f32, f32)> },
    Embedding { table: ValueId, ids: Vec<u32>, out: ValueId },
    Softmax { a: ValueId, out: ValueId, axis: usize },
    CausalSoftmax { a: ValueId, out: ValueId },
    CrossEntropy { logits: ValueId, targets: Vec<u32>, reduction: Reduction, out: ValueId },
    SliceRows { a: ValueId, r0: usize, out: ValueId },
    SliceCols { a: ValueId, c0: usize, c1: usize, out: ValueId },
    ConcatCols { parts: Vec<ValueId>, out: ValueId },
    Sum { a: ValueId, out: ValueId },
}

#[derive(Default)]
pub struct Tape {
    slots: Vec<Slot>,
    ops: Vec<Op>,
    grads: Vec<Option<Vec<f32>>>,
    backward_visits: usize,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Snapshot a tensor onto the tape as a leaf.
    pub fn leaf(&mut self, t: &Tensor) -> ValueId {
        self.push_slot(t.data().to_vec(), t.shape().to_vec(), t.requires_grad(), true)
    }

    pub fn leaf_from(&mut self, data: Vec<f32>, shape: Vec<usize>, requires_grad: bool) -> ValueId {
        self.push_slot(data, shape, requires_grad, true)
    }

    pub fn value(&self, id: ValueId) -> &[f32] {
        &self.slots[id.0].data
    }

    pub fn shape(&self, id: ValueId) -> &[usize] {
        &self.slots[id.0].shape
    }

    pub fn to_tensor(&self, id: ValueId) -> Tensor {
        Tensor::new(self.shape(id).to_vec(), self.value(id).to_vec())
            .expect("tape slots hold consistent shapes")
    }

    /// Gradient accumulated on `id` by previous backward calls.
    pub fn grad(&self, id: ValueId) -> Option<&[f32]> {
        self.grads[id.0].as_deref()
    }

    pub fn op_count(&self) -> usize {
        self.ops.len()
    }

    /// Total op visits performed across all backward calls.
    pub fn backward_visits(&self) -> usize {
        self.backward_visits
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    fn push_slot(&mut self, data: Vec<f32>, shape: Vec<usize>, needs_grad: bool, is_leaf: bool) -> ValueId {
        let id = ValueId(self.slots.len());
        self.slots.push(Slot { data, shape, needs_grad, is_leaf });
        self.grads.push(None);
        id
    }

    fn finite_checked(&mut self, op: &str, data: Vec<f32>, shape: Vec<usize>, needs_grad: bool) -> Result<ValueId> {
        if !data.iter().all(|v| v.is_finite()) {
            return Err(UlabError::NonFinite { op: op.to_string() });
        }
        Ok(self.push_slot(data, shape, needs_grad, false))
    }

    fn needs(&self, ids: &[ValueId]) -> bool {
        ids.iter().any(|id| self.slots[id.0].needs_grad)
    }

    fn dims2(&self, id: ValueId, op: &str) -> Result<(usize, usize)> {
        match self.shape(id) {
            [r, c] => Ok((*r, *c)),
            other => Err(UlabError::shape(format!("{op}: expected rank-2 tensor, got {other:?}"))),
        }
    }

    // ── Forward ops ─────────────────────────────────────────────────────

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        if self.shape(a) != self.shape(b) {
            return Err(UlabError::shape(format!(
                "add: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data: Vec<f32> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let needs = self.needs(&[a, b]);
        let out = self.finite_checked("add", data, self.shape(a).to_vec(), needs)?;
        if needs {
            self.ops.push(Op::Add { a, b, out });
        }
        Ok(out)
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        if self.shape(a) != self.shape(b) {
            return Err(UlabError::shape(format!(
                "mul: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data: Vec<f32> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let needs = self.needs(&[a, b]);
        let out = self.finite_checked("mul", data, self.shape(a).to_vec(), needs)?;
        if needs {
            self.ops.push(Op::Mul { a, b, out });
        }
        Ok(out)
    }

    /// Broadcast-add a [c] bias row onto every row of [r x c].
    pub fn add_bias(&mut self, a: ValueId, bias: ValueId) -> Result<ValueId> {
        let (r, c) = self.dims2(a, "add_bias")?;
        if self.shape(bias) != [c] {
            return Err(UlabError::shape(format!(
                "add_bias: bias {:?} does not match row width {c}",
                self.shape(bias)
            )));
        }
        let mut data = self.value(a).to_vec();
        for row in 0..r {
            let b = self.value(bias);
            for j in 0..c {
                data[row * c + j] += b[j];
            }
        }
        let needs = self.needs(&[a, bias]);
        let out = self.finite_checked("add_bias", data, vec![r, c], needs)?;
        if needs {
            self.ops.push(Op::AddBias { a, bias, out });
        }
        Ok(out)
    }

    pub fn scale(&mut self, a: ValueId, factor: f32) -> Result<ValueId> {
        let data: Vec<f32> = self.value(a).iter().map(|x| x * factor).collect();
        let needs = self.needs(&[a]);
        let out = self.finite_checked("scale", data, self.shape(a).to_vec(), needs)?;
        if needs {
            self.ops.push(Op::Scale { a, factor, out });
        }
        Ok(out)
    }

    /// [m x k] . [k x n]
    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(UlabError::shape(format!(
                "matmul: inner dims {k} vs {k2}"
            )));
        }
        let mut data = vec![0.0; m * n];
        kernels::matmul(self.value(a), self.value(b), &mut data, m, k, n);
        let needs = self.needs(&[a, b]);
        let out = self.finite_checked("matmul", data, vec![m, n], needs)?;
        if needs {
            self.ops.push(Op::Matmul { a, b, out });
        }
        Ok(out)
    }

    /// [m x k] . [n x k]^T — the attention-score and tied-head product.
    pub fn matmul_nt(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (m, k) = self.dims2(a, "matmul_nt")?;
        let (n, k2) = self.dims2(b, "matmul_nt")?;
        if k != k2 {
            return Err(UlabError::shape(format!(
                "matmul_nt: inner dims {k} vs {k2}"
            )));
        }
        let mut data = vec![0.0; m * n];
        kernels::matmul_nt(self.value(a), self.value(b), &mut data, m, k, n);
        let needs = self.needs(&[a, b]);
        let out = self.finite_checked("matmul_nt", data, vec![m, n], needs)?;
        if needs {
            self.ops.push(Op::MatmulNT { a, b, out });
        }
        Ok(out)
    }

    pub fn gelu(&mut self, a: ValueId) -> Result<ValueId> {
        let data: Vec<f32> = self.value(a).iter().map(|&x| gelu(x)).collect();
        let needs = self.needs(&[a]);
        let out = self.finite_checked("gelu", data, self.shape(a).to_vec(), needs)?;
        if needs {
            self.ops.push(Op::Gelu { a, out });
        }
        Ok(out)
    }

    /// Row-wise layer normalization with affine gain/bias of width c.
    pub fn layer_norm(&mut self, a: ValueId, gain: ValueId, bias: ValueId) -> Result<ValueId> {
        let (r, c) = self.dims2(a, "layer_norm")?;
        if self.shape(gain) != [c] || self.shape(bias) != [c] {
            return Err(UlabError::shape(format!(
                "layer_norm: affine params {:?}/{:?} vs width {c}",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let mut data = vec![0.0; r * c];
        let mut stats = Vec::with_capacity(r);
        {
            let x = self.value(a);
            let g = self.value(gain);
            let b = self.value(bias);
            for row in 0..r {
                let xr = &x[row * c..(row + 1) * c];
                let mean = xr.iter().sum::<f32>() / c as f32;
                let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<f32>() / c as f32;
                let inv_std = 1.0 / (var + LN_EPS).sqrt();
                stats.push((mean, inv_std));
                for j in 0..c {
                    data[row * c + j] = (xr[j] - mean) * inv_std * g[j] + b[j];
                }
            }
        }
        let needs = self.needs(&[a, gain, bias]);
        let out = self.finite_checked("layer_norm", data, vec![r, c], needs)?;
        if needs {
            self.ops.push(Op::LayerNorm { a, gain, bias, out, stats });
        }
        Ok(out)
    }

    /// Gather rows of a [v x d] table: out[t] = table[ids[t]].
    pub fn embedding(&mut self, table: ValueId, ids: &[u32]) -> Result<ValueId> {
        let (v, d) = self.dims2(table, "embedding")?;
        if ids.is_empty() {
            return Err(UlabError::contract("embedding: empty id list"));
        }
        let mut data = vec![0.0; ids.len() * d];
        for (t, &id) in ids.iter().enumerate() {
            if id as usize >= v {
                return Err(UlabError::TokenRange { id, vocab: v });
            }
            let src = &self.value(table)[id as usize * d..(id as usize + 1) * d];
            data[t * d..(t + 1) * d].copy_from_slice(src);
        }
        let needs = self.needs(&[table]);
        let out = self.finite_checked("embedding", data, vec![ids.len(), d], needs)?;
        if needs {
            self.ops.push(Op::Embedding { table, ids: ids.to_vec(), out });
        }
        Ok(out)
    }

    /// Softmax along `axis` of a rank-1 or rank-2 tensor, with max
    /// subtraction for stability.
    pub fn softmax(&mut self, a: ValueId, axis: usize) -> Result<ValueId> {
        let shape = self.shape(a).to_vec();
        let (r, c, row_major) = match shape.as_slice() {
            [n] => {
                if axis != 0 {
                    return Err(UlabError::contract(format!(
                        "softmax: axis {axis} invalid for rank-1 tensor"
                    )));
                }
                (1usize, *n, true)
            }
            [r, c] => match axis {
                1 => (*r, *c, true),
                0 => (*c, *r, false),
                _ => {
                    return Err(UlabError::contract(format!(
                        "softmax: axis {axis} invalid for rank-2 tensor"
                    )))
                }
            },
            other => {
                return Err(UlabError::shape(format!(
                    "softmax: expected rank 1 or 2, got {other:?}"
                )))
            }
        };
        let x = self.value(a);
        let mut data = vec![0.0f32; x.len()];
        let cols_actual = if row_major { c } else { r };
        for lane in 0..r {
            let index = |j: usize| if row_major { lane * c + j } else { j * cols_actual + lane };
            let mut max = f32::NEG_INFINITY;
            for j in 0..c {
                max = max.max(x[index(j)]);
            }
            let mut z = 0.0f64;
            for j in 0..c {
                let e = ((x[index(j)] - max) as f64).exp();
                data[index(j)] = e as f32;
                z += e;
            }
            for j in 0..c {
                data[index(j)] = (data[index(j)] as f64 / z) as f32;
            }
        }
        let needs = self.needs(&[a]);
        let out = self.finite_checked("softmax", data, shape, needs)?;
        if needs {
            self.ops.push(Op::Softmax { a, out, axis });
        }
        Ok(out)
    }

    /// Row-wise softmax over a square [t x t] score matrix where row i only
    /// attends to columns j <= i; masked entries come out exactly zero.
    pub fn causal_softmax(&mut self, a: ValueId) -> Result<ValueId> {
        let (t, t2) = self.dims2(a, "causal_softmax")?;
        if t != t2 {
            return Err(UlabError::shape(format!(
                "causal_softmax: matrix must be square, got {t} x {t2}"
            )));
        }
        let x = self.value(a);
        let mut data = vec![0.0f32; t * t];
        for i in 0..t {
            let row = &x[i * t..i * t + i + 1];
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut z = 0.0f64;
            for j in 0..=i {
                let e = ((row[j] - max) as f64).exp();
                data[i * t + j] = e as f32;
                z += e;
            }
            for j in 0..=i {
                data[i * t + j] = (data[i * t + j] as f64 / z) as f32;
            }
        }
        let needs = self.needs(&[a]);
        let out = self.finite_checked("causal_softmax", data, vec![t, t], needs)?;
        if needs {
            self.ops.push(Op::CausalSoftmax { a, out });
        }
        Ok(out)
    }

    /// Negative log-likelihood of `targets` under row-wise softmax of the
    /// logits, reduced to a scalar.
    pub fn cross_entropy(&mut self, logits: ValueId, targets: &[u32], reduction: Reduction) -> Result<ValueId> {
        let (t, v) = self.dims2(logits, "cross_entropy")?;
        if targets.len() != t {
            return Err(UlabError::shape(format!(
                "cross_entropy: {t} logit rows vs {} targets",
                targets.len()
            )));
        }
        let x = self.value(logits);
        let mut total = 0.0f64;
        for (row, &target) in targets.iter().enumerate() {
            if target as usize >= v {
                return Err(UlabError::TokenRange { id: target, vocab: v });
            }
            let xr = &x[row * v..(row + 1) * v];
            let max = xr.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let lse: f64 = xr.iter().map(|&l| ((l - max) as f64).exp()).sum::<f64>().ln() + max as f64;
            total += lse - xr[target as usize] as f64;
        }
        if reduction == Reduction::Mean {
            total /= t as f64;
        }
        let needs = self.needs(&[logits]);
        let out = self.finite_checked("cross_entropy", vec![total as f32], Vec::new(), needs)?;
        if needs {
            self.ops.push(Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                reduction,
                out,
            });
        }
        Ok(out)
    }

    pub fn slice_rows(&mut self, a: ValueId, r0: usize, r1: usize) -> Result<ValueId> {
        let (r, c) = self.dims2(a, "slice_rows")?;
        if r0 >= r1 || r1 > r {
            return Err(UlabError::shape(format!(
                "slice_rows: [{r0}, {r1}) out of {r} rows"
            )));
        }
        let data = self.value(a)[r0 * c..r1 * c].to_vec();
        let needs = self.needs(&[a]);
        let out = self.finite_checked("slice_rows", data, vec![r1 - r0, c], needs)?;
        if needs {
            self.ops.push(Op::SliceRows { a, r0, out });
        }
        Ok(out)
    }

    pub fn slice_cols(&mut self, a: ValueId, c0: usize, c1: usize) -> Result<ValueId> {
        let (r, c) = self.dims2(a, "slice_cols")?;
        if c0 >= c1 || c1 > c {
            return Err(UlabError::shape(format!(
                "slice_cols: [{c0}, {c1}) out of {c} cols"
            )));
        }
        let w = c1 - c0;
        let mut data = vec![0.0; r * w];
        for row in 0..r {
            data[row * w..(row + 1) * w]
                .copy_from_slice(&self.value(a)[row * c + c0..row * c + c1]);
        }
        let needs = self.needs(&[a]);
        let out = self.finite_checked("slice_cols", data, vec![r, w], needs)?;
        if needs {
            self.ops.push(Op::SliceCols { a, c0, c1, out });
        }
        Ok(out)
    }

    pub fn concat_cols(&mut self, parts: &[ValueId]) -> Result<ValueId> {
        if parts.is_empty() {
            return Err(UlabError::contract("concat_cols: no parts"));
        }
        let (r, _) = self.dims2(parts[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (rp, cp) = self.dims2(p, "concat_cols")?;
            if rp != r {
                return Err(UlabError::shape(format!(
                    "concat_cols: row counts differ ({r} vs {rp})"
                )));
            }
            widths.push(cp);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; r * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            for row in 0..r {
                data[row * total + offset..row * total + offset + w]
                    .copy_from_slice(&self.value(p)[row * w..(row + 1) * w]);
            }
            offset += w;
        }
        let needs = self.needs(parts);
        let out = self.finite_checked("concat_cols", data, vec![r, total], needs)?;
        if needs {
            self.ops.push(Op::ConcatCols { parts: parts.to_vec(), out });
        }
        Ok(out)
    }

    pub fn sum(&mut self, a: ValueId) -> Result<ValueId> {
        let total: f64 = self.value(a).iter().map(|&v| v as f64).sum();
        let needs = self.needs(&[a]);
        let out = self.finite_checked("sum", vec![total as f32], Vec::new(), needs)?;
        if needs {
            self.ops.push(Op::Sum { a, out });
        }
        Ok(out)
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Propagate d(root)/d(value) to every recorded value and add the result
    /// into the persistent per-value gradient accumulators. Repeated calls
    /// accumulate.
    pub fn backward(&mut self, root: ValueId) -> Result<()> {
        let slot = &self.slots[root.0];
        if slot.data.len() != 1 || slot.shape.len() > 1 {
            return Err(UlabError::contract(format!(
                "backward: root must be scalar, got shape {:?}",
                slot.shape
            )));
        }
        let mut work: Vec<Option<Vec<f32>>> = vec![None; self.slots.len()];
        work[root.0] = Some(vec![1.0]);

        for idx in (0..self.ops.len()).rev() {
            self.backward_visits += 1;
            self.backward_op(idx, &mut work);
        }

        for (slot_idx, grad) in work.into_iter().enumerate() {
            if let Some(g) = grad {
                match &mut self.grads[slot_idx] {
                    Some(existing) => kernels::axpy(existing, &g, 1.0),
                    none => *none = Some(g),
                }
            }
        }
        Ok(())
    }

    fn backward_op(&mut self, idx: usize, work: &mut [Option<Vec<f32>>]) {
        // Accumulate `delta` into the work gradient of `id` if it needs grad.
        macro_rules! accum {
            ($self:ident, $work:ident, $id:expr, $delta:expr) => {{
                let id: ValueId = $id;
                if $self.slots[id.0].needs_grad {
                    let delta = $delta;
                    match &mut $work[id.0] {
                        Some(existing) => kernels::axpy(existing, &delta, 1.0),
                        none => *none = Some(delta),
                    }
                }
            }};
        }

        let d_out: Vec<f32> = {
            let out = match &self.ops[idx] {
                Op::Add { out, .. }
                | Op::Mul { out, .. }
                | Op::AddBias { out, .. }
                | Op::Scale { out, .. }
                | Op::Matmul { out, .. }
                | Op::MatmulNT { out, .. }
                | Op::Gelu { out, .. }
                | Op::LayerNorm { out, .. }
                | Op::Embedding { out, .. }
                | Op::Softmax { out, .. }
                | Op::CausalSoftmax { out, .. }
                | Op::CrossEntropy { out, .. }
                | Op::SliceRows { out, .. }
                | Op::SliceCols { out, .. }
                | Op::ConcatCols { out, .. }
                | Op::Sum { out, .. } => *out,
            };
            match &work[out.0] {
                Some(g) => g.clone(),
                None => return, // nothing flowed into this op's output
            }
        };

        match &self.ops[idx] {
            &Op::Add { a, b, .. } => {
                accum!(self, work, a, d_out.clone());
                accum!(self, work, b, d_out);
            }
            &Op::Mul { a, b, .. } => {
                let da: Vec<f32> = d_out.iter().zip(self.value(b)).map(|(g, y)| g * y).collect();
                let db: Vec<f32> = d_out.iter().zip(self.value(a)).map(|(g, x)| g * x).collect();
                accum!(self, work, a, da);
                accum!(self, work, b, db);
            }
            &Op::AddBias { a, bias, .. } => {
                let c = self.shape(bias)[0];
                let mut db = vec![0.0; c];
                for chunk in d_out.chunks(c) {
                    kernels::axpy(&mut db, chunk, 1.0);
                }
                accum!(self, work, a, d_out);
                accum!(self, work, bias, db);
            }
            &Op::Scale { a, factor, .. } => {
                let da: Vec<f32> = d_out.iter().map(|g| g * factor).collect();
                accum!(self, work, a, da);
            }
            &Op::Matmul { a, b, .. } => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                if self.slots[a.0].needs_grad {
                    let mut da = vec![0.0; m * k];
                    kernels::matmul_nt(&d_out, self.value(b), &mut da, m, n, k);
                    accum!(self, work, a, da);
                }
                if self.slots[b.0].needs_grad {
                    let mut db = vec![0.0; k * n];
                    kernels::matmul_tn(self.value(a), &d_out, &mut db, m, k, n);
                    accum!(self, work, b, db);
                }
            }
            &Op::MatmulNT { a, b, .. } => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[0];
                if self.slots[a.0].needs_grad {
                    let mut da = vec![0.0; m * k];
                    kernels::matmul(&d_out, self.value(b), &mut da, m, n, k);
                    accum!(self, work, a, da);
                }
                if self.slots[b.0].needs_grad {
                    let mut db = vec![0.0; n * k];
                    kernels::matmul_tn(&d_out, self.value(a), &mut db, m, n, k);
                    accum!(self, work, b, db);
                }
            }
            &Op::Gelu { a, .. } => {
                let da: Vec<f32> = d_out
                    .iter()
                    .zip(self.value(a))
                    .map(|(g, &x)| g * gelu_grad(x))
                    .collect();
                accum!(self, work, a, da);
            }
            Op::LayerNorm { a, gain, bias, stats, .. } => {
                let (a, gain, bias) = (*a, *gain, *bias);
                let c = self.shape(gain)[0];
                let r = self.shape(a)[0];
                let x = self.value(a);
                let g = self.value(gain);
                let mut da = vec![0.0; r * c];
                let mut dg = vec![0.0; c];
                let mut db = vec![0.0; c];
                for row in 0..r {
                    let (mean, inv_std) = stats[row];
                    let xr = &x[row * c..(row + 1) * c];
                    let dy = &d_out[row * c..(row + 1) * c];
                    let mut sum_dxhat = 0.0f32;
                    let mut sum_dxhat_xhat = 0.0f32;
                    for j in 0..c {
                        let xhat = (xr[j] - mean) * inv_std;
                        let dxhat = dy[j] * g[j];
                        db[j] += dy[j];
                        dg[j] += dy[j] * xhat;
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                    }
                    let inv_c = 1.0 / c as f32;
                    for j in 0..c {
                        let xhat = (xr[j] - mean) * inv_std;
                        let dxhat = dy[j] * g[j];
                        da[row * c + j] =
                            inv_std * (dxhat - inv_c * sum_dxhat - xhat * inv_c * sum_dxhat_xhat);
                    }
                }
                accum!(self, work, a, da);
                accum!(self, work, gain, dg);
                accum!(self, work, bias, db);
            }
            Op::Embedding { table, ids, .. } => {
                let table = *table;
                let (v, d) = (self.shape(table)[0], self.shape(table)[1]);
                let mut dt = vec![0.0; v * d];
                for (t, &id) in ids.iter().enumerate() {
                    let dst = &mut dt[id as usize * d..(id as usize + 1) * d];
                    kernels::axpy(dst, &d_out[t * d..(t + 1) * d], 1.0);
                }
                accum!(self, work, table, dt);
            }
            &Op::Softmax { a, out, axis } => {
                let shape = self.shape(out).to_vec();
                let (lanes, width, row_major) = match shape.as_slice() {
                    [n] => (1usize, *n, true),
                    [r, c] => {
                        if axis == 1 {
                            (*r, *c, true)
                        } else {
                            (*c, *r, false)
                        }
                    }
                    _ => unreachable!("softmax outputs are rank 1 or 2"),
                };
                let y = self.value(out);
                let mut da = vec![0.0f32; y.len()];
                let stride = if row_major { width } else { lanes };
                for lane in 0..lanes {
                    let index = |j: usize| if row_major { lane * width + j } else { j * stride + lane };
                    let mut dot = 0.0f32;
                    for j in 0..width {
                        dot += d_out[index(j)] * y[index(j)];
                    }
                    for j in 0..width {
                        da[index(j)] = y[index(j)] * (d_out[index(j)] - dot);
                    }
                }
                accum!(self, work, a, da);
            }
            &Op::CausalSoftmax { a, out } => {
                let t = self.shape(out)[0];
                let y = self.value(out);
                let mut da = vec![0.0f32; t * t];
                for i in 0..t {
                    let mut dot = 0.0f32;
                    for j in 0..=i {
                        dot += d_out[i * t + j] * y[i * t + j];
                    }
                    for j in 0..=i {
                        da[i * t + j] = y[i * t + j] * (d_out[i * t + j] - dot);
                    }
                }
                accum!(self, work, a, da);
            }
            Op::CrossEntropy { logits, targets, reduction, .. } => {
                let logits = *logits;
                let (t, v) = (self.shape(logits)[0], self.shape(logits)[1]);
                let scale = d_out[0]
                    * match reduction {
                        Reduction::Sum => 1.0,
                        Reduction::Mean => 1.0 / t as f32,
                    };
                let x = self.value(logits);
                let mut dl = vec![0.0f32; t * v];
                for (row, &target) in targets.iter().enumerate() {
                    let xr = &x[row * v..(row + 1) * v];
                    let max = xr.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                    let z: f64 = xr.iter().map(|&l| ((l - max) as f64).exp()).sum();
                    for j in 0..v {
                        let p = (((xr[j] - max) as f64).exp() / z) as f32;
                        let indicator = if j == target as usize { 1.0 } else { 0.0 };
                        dl[row * v + j] = scale * (p - indicator);
                    }
                }
                accum!(self, work, logits, dl);
            }
            &Op::SliceRows { a, r0, .. } => {
                let c = self.shape(a)[1];
                let mut da = vec![0.0; self.value(a).len()];
                kernels::axpy(&mut da[r0 * c..r0 * c + d_out.len()], &d_out, 1.0);
                accum!(self, work, a, da);
            }
            &Op::SliceCols { a, c0, c1, .. } => {
                let (r, c) = (self.shape(a)[0], self.shape(a)[1]);
                let w = c1 - c0;
                let mut da = vec![0.0; r * c];
                for row in 0..r {
                    kernels::axpy(
                        &mut da[row * c + c0..row * c + c1],
                        &d_out[row * w..(row + 1) * w],
                        1.0,
                    );
                }
                accum!(self, work, a, da);
            }
            Op::ConcatCols { parts, .. } => {
                let parts = parts.clone();
                let r = self.shape(parts[0])[0];
                let total: usize = parts.iter().map(|&p| self.shape(p)[1]).sum();
                let mut offset = 0;
                for &p in &parts {
                    let w = self.shape(p)[1];
                    if self.slots[p.0].needs_grad {
                        let mut dp = vec![0.0; r * w];
                        for row in 0..r {
                            dp[row * w..(row + 1) * w].copy_from_slice(
                                &d_out[row * total + offset..row * total + offset + w],
                            );
                        }
                        accum!(self, work, p, dp);
                    }
                    offset += w;
                }
            }
            &Op::Sum { a, .. } => {
                let da = vec![d_out[0]; self.value(a).len()];
                accum!(self, work, a, da);
            }
        }
    }

    /// True when the id was created as a leaf (input), not by an op.
    pub fn is_leaf(&self, id: ValueId) -> bool {
        self.slots[id.0].is_leaf
    }
}

fn gelu(x: f32) -> f32 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f32) -> f32 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}
