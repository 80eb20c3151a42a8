//! Eager tape for reverse-mode differentiation.
//!
//! Every op evaluates immediately and appends a node; node indices are a
//! topological order, so backward is a single reverse sweep.

use std::sync::Arc;

use crate::gemm::{gemm, View};
use crate::{Tensor, TensorError};

/// Additive logit offset for disallowed attention positions.
pub const MASK_OFFSET: f64 = -1e9;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    MulConst(Var, Arc<Vec<f64>>),
    Relu(Var),
    Sum(Var),
    Mean(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    LogSoftmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    MaskedCrossEntropy {
        logits: Var,
        rows: Vec<(usize, usize)>,
        smoothing: f64,
        probs: Vec<f64>,
    },
    HeadScores {
        q: Var,
        k: Var,
        batch: usize,
        heads: usize,
        scale: f64,
    },
    HeadMix {
        p: Var,
        v: Var,
        batch: usize,
        heads: usize,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddBias(..) => "add_bias",
            Op::Scale(..) => "scale",
            Op::AddConst(..) => "add_const",
            Op::MulConst(..) => "mul_const",
            Op::Relu(..) => "relu",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::Concat { .. } => "concat",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::GatherRows { .. } => "gather_rows",
            Op::MaskedCrossEntropy { .. } => "masked_cross_entropy",
            Op::HeadScores { .. } => "head_scores",
            Op::HeadMix { .. } => "head_mix",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddBias(a, b) | Op::MatMul(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(a, _)
            | Op::AddConst(a)
            | Op::MulConst(a, _)
            | Op::Relu(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Transpose(a)
            | Op::Reshape(a) => vec![*a],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::Softmax { x, .. } | Op::LogSoftmax { x, .. } => vec![*x],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::GatherRows { table, .. } => vec![*table],
            Op::MaskedCrossEntropy { logits, .. } => vec![*logits],
            Op::HeadScores { q, k, .. } => vec![*q, *k],
            Op::HeadMix { p, v, .. } => vec![*p, *v],
        }
    }
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Gradients of a scalar root with respect to every node that requires one.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

/// Splits `shape` around `axis` into (outer, axis_len, inner).
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var, TensorError> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite(op.name()));
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf(&mut self, value: Arc<Tensor>, requires_grad: bool) -> Result<Var, TensorError> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite("leaf"));
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Arc<Tensor>) -> Result<Var, TensorError> {
        self.leaf(value, true)
    }

    /// A shared leaf that receives no gradient.
    pub fn constant_shared(&mut self, value: Arc<Tensor>) -> Result<Var, TensorError> {
        self.leaf(value, false)
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var, TensorError> {
        self.leaf(Arc::new(value), false)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(TensorError::Shape {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::raw(ta.shape().to_vec(), data)
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(a);
        Tensor::raw(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("add", a, b)?;
        let v = self.zip_with(a, b, |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_with(a, b, |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_with(a, b, |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    /// Adds a vector of length `last_dim(x)` to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let d = tx.last_dim();
        if tb.len() != d {
            return Err(TensorError::Shape {
                op: "add_bias",
                lhs: tx.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let mut out = tx.data().to_vec();
        for row in out.chunks_mut(d) {
            add_into(row, tb.data());
        }
        let v = Tensor::raw(tx.shape().to_vec(), out);
        self.push(v, Op::AddBias(x, bias))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var, TensorError> {
        let v = self.map(a, |x| x * factor);
        self.push(v, Op::Scale(a, factor))
    }

    /// Adds a constant tensor of the same shape (no gradient flows to it).
    pub fn add_const(&mut self, a: Var, c: &Tensor) -> Result<Var, TensorError> {
        let ta = self.value(a);
        if ta.shape() != c.shape() {
            return Err(TensorError::Shape {
                op: "add_const",
                lhs: ta.shape().to_vec(),
                rhs: c.shape().to_vec(),
            });
        }
        let data = ta.data().iter().zip(c.data()).map(|(x, y)| x + y).collect();
        let v = Tensor::raw(ta.shape().to_vec(), data);
        self.push(v, Op::AddConst(a))
    }

    /// Elementwise product with a constant factor vector.
    pub fn mul_const(&mut self, a: Var, factors: Arc<Vec<f64>>) -> Result<Var, TensorError> {
        let ta = self.value(a);
        if ta.len() != factors.len() {
            return Err(TensorError::Shape {
                op: "mul_const",
                lhs: ta.shape().to_vec(),
                rhs: vec![factors.len()],
            });
        }
        let data = ta.data().iter().zip(factors.iter()).map(|(x, y)| x * y).collect();
        let v = Tensor::raw(ta.shape().to_vec(), data);
        self.push(v, Op::MulConst(a, factors))
    }

    /// Adds [`MASK_OFFSET`] wherever `allowed` is false.
    pub fn apply_attention_mask(&mut self, scores: Var, allowed: &[bool]) -> Result<Var, TensorError> {
        let ts = self.value(scores);
        if ts.len() != allowed.len() {
            return Err(TensorError::Shape {
                op: "apply_attention_mask",
                lhs: ts.shape().to_vec(),
                rhs: vec![allowed.len()],
            });
        }
        let data = ts
            .data()
            .iter()
            .zip(allowed)
            .map(|(&x, &ok)| if ok { x } else { x + MASK_OFFSET })
            .collect();
        let v = Tensor::raw(ts.shape().to_vec(), data);
        self.push(v, Op::AddConst(scores))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        let v = self.map(a, |x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, TensorError> {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(TensorError::Shape {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            ta.data(),
            View::rows(0, k),
            tb.data(),
            View::rows(0, n),
            0.0,
            &mut out,
            View::rows(0, n),
        );
        self.push(Tensor::raw(vec![m, n], out), Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let ta = self.value(a);
        if ta.rank() != 2 {
            return Err(TensorError::Invalid(format!(
                "transpose expects rank 2, got {:?}",
                ta.shape()
            )));
        }
        let (r, c) = (ta.shape()[0], ta.shape()[1]);
        let src = ta.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        self.push(Tensor::raw(vec![c, r], out), Op::Transpose(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let t = (*self.nodes[a.0].value).clone().reshaped(shape.to_vec())?;
        self.push(t, Op::Reshape(a))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = inputs
            .first()
            .ok_or_else(|| TensorError::Invalid("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::Axis {
                axis,
                rank: base.len(),
            });
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(TensorError::Shape {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut shape = base.clone();
        shape[axis] = total;
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let t = self.value(*v);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        self.push(
            Tensor::raw(shape, out),
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        )
    }

    fn check_axis(&self, x: Var, axis: usize) -> Result<(), TensorError> {
        let rank = self.value(x).rank();
        if axis >= rank {
            return Err(TensorError::Axis { axis, rank });
        }
        Ok(())
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        self.check_axis(x, axis)?;
        let t = self.value(x);
        let (outer, len, inner) = axis_split(t.shape(), axis);
        let src = t.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..len {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    z += e;
                }
                for j in 0..len {
                    out[at(j)] /= z;
                }
            }
        }
        let v = Tensor::raw(t.shape().to_vec(), out);
        self.push(v, Op::Softmax { x, axis })
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        self.check_axis(x, axis)?;
        let t = self.value(x);
        let (outer, len, inner) = axis_split(t.shape(), axis);
        let src = t.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = (0..len).map(|j| (src[at(j)] - max).exp()).sum::<f64>().ln();
                for j in 0..len {
                    out[at(j)] = src[at(j)] - max - lse;
                }
            }
        }
        let v = Tensor::raw(t.shape().to_vec(), out);
        self.push(v, Op::LogSoftmax { x, axis })
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, TensorError> {
        let tx = self.value(x);
        let d = tx.last_dim();
        for p in [gain, bias] {
            if self.value(p).len() != d {
                return Err(TensorError::Shape {
                    op: "layer_norm",
                    lhs: tx.shape().to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = tx.outer_len();
        let mut xhat = vec![0.0; tx.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; tx.len()];
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[r] = s;
            for j in 0..d {
                let h = (row[j] - mean) * s;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let v = Tensor::raw(tx.shape().to_vec(), out);
        self.push(
            v,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        )
    }

    /// Row gather from a 2-D table; backward scatter-adds.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(TensorError::Invalid(format!(
                "gather_rows expects a 2-D table, got {:?}",
                t.shape()
            )));
        }
        if ids.is_empty() {
            return Err(TensorError::Invalid("gather_rows with no ids".into()));
        }
        let (v, e) = (t.shape()[0], t.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * e);
        for &id in ids {
            if id >= v {
                return Err(TensorError::Index {
                    op: "gather_rows",
                    index: id,
                    bound: v,
                });
            }
            out.extend_from_slice(t.row(id));
        }
        self.push(
            Tensor::raw(vec![ids.len(), e], out),
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    /// Token embedding lookup: `table[v×e]`, ids → `[L×e]`.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        self.gather_rows(table, ids)
    }

    /// Mean label-smoothed negative log-likelihood over rows with `mask` set.
    ///
    /// Targets are `(1 - smoothing)` on the label plus `smoothing / C` on every
    /// class. With no row selected the loss is exactly zero and contributes no
    /// gradient.
    pub fn masked_cross_entropy(
        &mut self,
        logits: Var,
        labels: &[usize],
        mask: &[bool],
        smoothing: f64,
    ) -> Result<Var, TensorError> {
        let t = self.value(logits);
        if t.rank() != 2 || labels.len() != t.shape()[0] || mask.len() != t.shape()[0] {
            return Err(TensorError::Shape {
                op: "masked_cross_entropy",
                lhs: t.shape().to_vec(),
                rhs: vec![labels.len(), mask.len()],
            });
        }
        if !(0.0..1.0).contains(&smoothing) {
            return Err(TensorError::Invalid(format!(
                "label smoothing must be in [0, 1), got {smoothing}"
            )));
        }
        let c = t.shape()[1];
        let mut rows = Vec::new();
        for (i, (&label, &on)) in labels.iter().zip(mask).enumerate() {
            if on {
                if label >= c {
                    return Err(TensorError::Index {
                        op: "masked_cross_entropy",
                        index: label,
                        bound: c,
                    });
                }
                rows.push((i, label));
            }
        }
        let mut probs = Vec::with_capacity(rows.len() * c);
        let mut total = 0.0;
        for &(i, label) in &rows {
            let z = t.row(i);
            let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = z.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            let mean_logp = z.iter().map(|v| v - lse).sum::<f64>() / c as f64;
            total += -(1.0 - smoothing) * (z[label] - lse) - smoothing * mean_logp;
            probs.extend(z.iter().map(|v| (v - lse).exp()));
        }
        let loss = if rows.is_empty() {
            0.0
        } else {
            total / rows.len() as f64
        };
        self.push(
            Tensor::scalar(loss),
            Op::MaskedCrossEntropy {
                logits,
                rows,
                smoothing,
                probs,
            },
        )
    }

    /// Scaled dot-product scores for every (batch, head) block.
    ///
    /// `q` is `[batch·Lq, H·dh]`, `k` is `[batch·Lk, H·dh]`; the result is
    /// `[batch·H·Lq, Lk]` with block `(b, h)` starting at row `(b·H + h)·Lq`.
    pub fn head_scores(
        &mut self,
        q: Var,
        k: Var,
        batch: usize,
        heads: usize,
        scale: f64,
    ) -> Result<Var, TensorError> {
        let (tq, tk) = (self.value(q), self.value(k));
        let geometry = head_geometry(tq, tk, batch, heads).ok_or_else(|| TensorError::Shape {
            op: "head_scores",
            lhs: tq.shape().to_vec(),
            rhs: tk.shape().to_vec(),
        })?;
        let HeadGeometry { lq, lk, width, dh } = geometry;
        let mut out = vec![0.0; batch * heads * lq * lk];
        for b in 0..batch {
            for h in 0..heads {
                gemm(
                    lq,
                    dh,
                    lk,
                    tq.data(),
                    View::rows(b * lq * width + h * dh, width),
                    tk.data(),
                    View::transposed(b * lk * width + h * dh, width),
                    0.0,
                    &mut out,
                    View::rows((b * heads + h) * lq * lk, lk),
                );
            }
        }
        if scale != 1.0 {
            out.iter_mut().for_each(|v| *v *= scale);
        }
        self.push(
            Tensor::raw(vec![batch * heads * lq, lk], out),
            Op::HeadScores {
                q,
                k,
                batch,
                heads,
                scale,
            },
        )
    }

    /// Applies attention weights `p` `[batch·H·Lq, Lk]` to values `v`
    /// `[batch·Lk, H·dh]`, producing `[batch·Lq, H·dh]` with heads re-joined.
    pub fn head_mix(&mut self, p: Var, v: Var, batch: usize, heads: usize) -> Result<Var, TensorError> {
        let (tp, tv) = (self.value(p), self.value(v));
        let bad = || TensorError::Shape {
            op: "head_mix",
            lhs: tp.shape().to_vec(),
            rhs: tv.shape().to_vec(),
        };
        if tp.rank() != 2 || tv.rank() != 2 || batch == 0 || heads == 0 {
            return Err(bad());
        }
        let lk = tp.shape()[1];
        let width = tv.shape()[1];
        if tv.shape()[0] != batch * lk || width % heads != 0 || tp.shape()[0] % (batch * heads) != 0 {
            return Err(bad());
        }
        let lq = tp.shape()[0] / (batch * heads);
        let dh = width / heads;
        let mut out = vec![0.0; batch * lq * width];
        for b in 0..batch {
            for h in 0..heads {
                gemm(
                    lq,
                    lk,
                    dh,
                    tp.data(),
                    View::rows((b * heads + h) * lq * lk, lk),
                    tv.data(),
                    View::rows(b * lk * width + h * dh, width),
                    0.0,
                    &mut out,
                    View::rows(b * lq * width + h * dh, width),
                );
            }
        }
        self.push(
            Tensor::raw(vec![batch * lq, width], out),
            Op::HeadMix { p, v, batch, heads },
        )
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients, TensorError> {
        let root_value = self.value(root);
        if root_value.len() != 1 {
            return Err(TensorError::NonScalarRoot(root_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0]);
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.map(|g| Tensor::raw(n.value.shape().to_vec(), g)))
            .collect();
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        macro_rules! acc {
            ($v:expr) => {{
                let var: Var = $v;
                let n = self.nodes[var.0].value.len();
                grads[var.0]
                    .get_or_insert_with(|| vec![0.0; n])
                    .as_mut_slice()
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        add_into(acc!(v), g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    add_into(acc!(*a), g);
                }
                if self.wants(*b) {
                    for (d, s) in acc!(*b).iter_mut().zip(g) {
                        *d -= s;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    for ((d, s), y) in acc!(*a).iter_mut().zip(g).zip(vb) {
                        *d += s * y;
                    }
                }
                if self.wants(*b) {
                    for ((d, s), x) in acc!(*b).iter_mut().zip(g).zip(va) {
                        *d += s * x;
                    }
                }
            }
            Op::AddBias(x, bias) => {
                if self.wants(*x) {
                    add_into(acc!(*x), g);
                }
                if self.wants(*bias) {
                    let gb = acc!(*bias);
                    for row in g.chunks(gb.len()) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Scale(a, f) => {
                if self.wants(*a) {
                    for (d, s) in acc!(*a).iter_mut().zip(g) {
                        *d += s * f;
                    }
                }
            }
            Op::AddConst(a) | Op::Reshape(a) => {
                if self.wants(*a) {
                    add_into(acc!(*a), g);
                }
            }
            Op::MulConst(a, factors) => {
                if self.wants(*a) {
                    for ((d, s), f) in acc!(*a).iter_mut().zip(g).zip(factors.iter()) {
                        *d += s * f;
                    }
                }
            }
            Op::Relu(a) => {
                if self.wants(*a) {
                    let x = self.value(*a).data();
                    for ((d, s), &xv) in acc!(*a).iter_mut().zip(g).zip(x) {
                        if xv > 0.0 {
                            *d += s;
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if self.wants(*a) {
                    acc!(*a).iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(a) => {
                if self.wants(*a) {
                    let ga = acc!(*a);
                    let share = g[0] / ga.len() as f64;
                    ga.iter_mut().for_each(|d| *d += share);
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.wants(*a) {
                    // dA = dC · Bᵀ
                    gemm(
                        m,
                        n,
                        k,
                        g,
                        View::rows(0, n),
                        tb.data(),
                        View::transposed(0, n),
                        1.0,
                        acc!(*a),
                        View::rows(0, k),
                    );
                }
                if self.wants(*b) {
                    // dB = Aᵀ · dC
                    gemm(
                        k,
                        m,
                        n,
                        ta.data(),
                        View::transposed(0, k),
                        g,
                        View::rows(0, n),
                        1.0,
                        acc!(*b),
                        View::rows(0, n),
                    );
                }
            }
            Op::Transpose(a) => {
                if self.wants(*a) {
                    let s = self.shape(*a);
                    let (r, c) = (s[0], s[1]);
                    let ga = acc!(*a);
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let (outer, total, inner) = axis_split(shape, *axis);
                let mut start = 0;
                for v in inputs {
                    let width = self.shape(*v)[*axis] * inner;
                    if self.wants(*v) {
                        let gv = acc!(*v);
                        for o in 0..outer {
                            let src = &g[o * total * inner + start..o * total * inner + start + width];
                            add_into(&mut gv[o * width..(o + 1) * width], src);
                        }
                    }
                    start += width;
                }
            }
            Op::Softmax { x, axis } => {
                if self.wants(*x) {
                    let y = node.value.data();
                    let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                    let gx = acc!(*x);
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * len * inner + j * inner + i;
                            let dot: f64 = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..len {
                                gx[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LogSoftmax { x, axis } => {
                if self.wants(*x) {
                    let y = node.value.data();
                    let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                    let gx = acc!(*x);
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * len * inner + j * inner + i;
                            let total: f64 = (0..len).map(|j| g[at(j)]).sum();
                            for j in 0..len {
                                gx[at(j)] += g[at(j)] - y[at(j)].exp() * total;
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = node.value.last_dim();
                if self.wants(*gain) {
                    let gg = acc!(*gain);
                    for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += grow[j] * hrow[j];
                        }
                    }
                }
                if self.wants(*bias) {
                    let gb = acc!(*bias);
                    for grow in g.chunks(d) {
                        add_into(gb, grow);
                    }
                }
                if self.wants(*x) {
                    let gain_v = self.value(*gain).data();
                    let gx = acc!(*x);
                    let mut dh = vec![0.0; d];
                    for (r, (grow, hrow)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        for j in 0..d {
                            dh[j] = grow[j] * gain_v[j];
                        }
                        let mean_dh = dh.iter().sum::<f64>() / d as f64;
                        let mean_dh_h = dh.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            gx[r * d + j] += rstd[r] * (dh[j] - mean_dh - hrow[j] * mean_dh_h);
                        }
                    }
                }
            }
            Op::GatherRows { table, ids } => {
                if self.wants(*table) {
                    let e = self.shape(*table)[1];
                    let gt = acc!(*table);
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * e..(id + 1) * e], &g[r * e..(r + 1) * e]);
                    }
                }
            }
            Op::MaskedCrossEntropy {
                logits,
                rows,
                smoothing,
                probs,
            } => {
                if self.wants(*logits) && !rows.is_empty() {
                    let c = self.shape(*logits)[1];
                    let share = g[0] / rows.len() as f64;
                    let uniform = smoothing / c as f64;
                    let gl = acc!(*logits);
                    for (n, &(i, label)) in rows.iter().enumerate() {
                        let p = &probs[n * c..(n + 1) * c];
                        let row = &mut gl[i * c..(i + 1) * c];
                        for j in 0..c {
                            let target = uniform + if j == label { 1.0 - smoothing } else { 0.0 };
                            row[j] += share * (p[j] - target);
                        }
                    }
                }
            }
            Op::HeadScores {
                q,
                k,
                batch,
                heads,
                scale,
            } => {
                let (tq, tk) = (self.value(*q), self.value(*k));
                let HeadGeometry { lq, lk, width, dh } =
                    head_geometry(tq, tk, *batch, *heads).expect("validated in forward");
                let gs: Vec<f64> = g.iter().map(|v| v * scale).collect();
                if self.wants(*q) {
                    let gq = acc!(*q);
                    for b in 0..*batch {
                        for h in 0..*heads {
                            gemm(
                                lq,
                                lk,
                                dh,
                                &gs,
                                View::rows((b * heads + h) * lq * lk, lk),
                                tk.data(),
                                View::rows(b * lk * width + h * dh, width),
                                1.0,
                                gq,
                                View::rows(b * lq * width + h * dh, width),
                            );
                        }
                    }
                }
                if self.wants(*k) {
                    let gk = acc!(*k);
                    for b in 0..*batch {
                        for h in 0..*heads {
                            gemm(
                                lk,
                                lq,
                                dh,
                                &gs,
                                View::transposed((b * heads + h) * lq * lk, lk),
                                tq.data(),
                                View::rows(b * lq * width + h * dh, width),
                                1.0,
                                gk,
                                View::rows(b * lk * width + h * dh, width),
                            );
                        }
                    }
                }
            }
            Op::HeadMix { p, v, batch, heads } => {
                let (tp, tv) = (self.value(*p), self.value(*v));
                let lk = tp.shape()[1];
                let width = tv.shape()[1];
                let lq = tp.shape()[0] / (batch * heads);
                let dh = width / heads;
                if self.wants(*p) {
                    let gp = acc!(*p);
                    for b in 0..*batch {
                        for h in 0..*heads {
                            // dP = dO · Vᵀ
                            gemm(
                                lq,
                                dh,
                                lk,
                                g,
                                View::rows(b * lq * width + h * dh, width),
                                tv.data(),
                                View::transposed(b * lk * width + h * dh, width),
                                1.0,
                                gp,
                                View::rows((b * heads + h) * lq * lk, lk),
                            );
                        }
                    }
                }
                if self.wants(*v) {
                    let gv = acc!(*v);
                    for b in 0..*batch {
                        for h in 0..*heads {
                            // dV = Pᵀ · dO
                            gemm(
                                lk,
                                lq,
                                dh,
                                tp.data(),
                                View::transposed((b * heads + h) * lq * lk, lk),
                                g,
                                View::rows(b * lq * width + h * dh, width),
                                1.0,
                                gv,
                                View::rows(b * lk * width + h * dh, width),
                            );
                        }
                    }
                }
            }
        }
    }
}

struct HeadGeometry {
    lq: usize,
    lk: usize,
    width: usize,
    dh: usize,
}

fn head_geometry(q: &Tensor, k: &Tensor, batch: usize, heads: usize) -> Option<HeadGeometry> {
    if q.rank() != 2 || k.rank() != 2 || batch == 0 || heads == 0 {
        return None;
    }
    let width = q.shape()[1];
    if k.shape()[1] != width || width % heads != 0 {
        return None;
    }
    if q.shape()[0] % batch != 0 || k.shape()[0] % batch != 0 {
        return None;
    }
    Some(HeadGeometry {
        lq: q.shape()[0] / batch,
        lk: k.shape()[0] / batch,
        width,
        dh: width / heads,
    })
}
