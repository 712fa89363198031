//! Reverse-mode differentiation over a tensor tape.
//!
//! A [`Tape`] records every operation of a forward pass. Values are either
//! leaves (registered with [`Tape::leaf`]), constants, or results of recorded
//! operations. [`Tape::differentiate`] walks the tape backwards from a
//! single-element result and returns gradients for the leaves only.
//!
//! The operation set is deliberately narrow: what a pre-norm decoder with
//! gated MLPs needs, the two alignment losses, weighted sums of task-vector
//! segments, and an L1 anchor penalty. Constants are borrowed for the tape's
//! lifetime, so frozen model weights are never copied into the graph.

use alloc::borrow::Cow;
use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::{
    argmax, dot, matmul_at_into, matmul_bt_into, softmax_in_place, Tensor, TensorError,
};

const RMS_EPS: f64 = 1e-6;
const ROPE_BASE: f64 = 10_000.0;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Source of the scalar multiplying one task-vector segment in a merge.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Coefficient {
    /// Index into the coefficient variable passed to [`Tape::merge`].
    Trainable(usize),
    /// A constant factor that receives no gradient.
    Fixed(f64),
}

/// `out[start..end] += coefficient * task_vectors[expert][start..end]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub expert: usize,
    pub start: usize,
    pub end: usize,
    pub coefficient: Coefficient,
}

enum Op<'a> {
    Leaf,
    Constant,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<f64>,
    },
    Rope {
        x: Var,
        heads: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    Embedding {
        table: Var,
        tokens: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
    SoftmaxKl {
        logits: Var,
        residual: Vec<f64>,
    },
    SqL2 {
        a: Var,
        diff: Vec<f64>,
        rows: usize,
    },
    Merge {
        coeffs: Option<Var>,
        task_vectors: Vec<&'a Tensor>,
        segments: Vec<Segment>,
    },
    AbsDeviation {
        x: Var,
        signs: Vec<f64>,
        scale: f64,
    },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op<'a>,
    tracked: bool,
}

/// Single-use recording of a forward computation.
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to every leaf of its tape.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    leaves: Vec<(Var, Tensor)>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.leaves.iter().find(|(v, _)| *v == var).map(|(_, g)| g)
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &Tensor)> {
        self.leaves.iter().map(|(v, g)| (*v, g))
    }
}

/// A scalar value together with its leaf gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct DifferentiableScalar {
    pub value: f64,
    pub gradients: Gradients,
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op<'a>, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn push_result(
        &mut self,
        value: Tensor,
        op: Op<'a>,
        tracked: bool,
        name: &'static str,
    ) -> Result<Var, TensorError> {
        value.check_finite(name)?;
        Ok(self.push(Cow::Owned(value), op, tracked))
    }

    /// Registers a differentiable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Cow::Owned(value), Op::Constant, false)
    }

    /// Registers a borrowed constant without copying it.
    pub fn constant_ref(&mut self, value: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(value), Op::Constant, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn scalar_value(&self, var: Var) -> f64 {
        self.value(var).data()[0]
    }

    pub fn is_tracked(&self, var: Var) -> bool {
        self.nodes[var.0].tracked
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn tracked2(&self, a: Var, b: Var) -> bool {
        self.is_tracked(a) || self.is_tracked(b)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = self.value(a).matmul(self.value(b))?;
        let tracked = self.tracked2(a, b);
        self.push_result(value, Op::MatMul(a, b), tracked, "matmul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = self.value(a).add(self.value(b))?;
        let tracked = self.tracked2(a, b);
        self.push_result(value, Op::Add(a, b), tracked, "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::from_parts(ta.shape().to_vec(), data);
        let tracked = self.tracked2(a, b);
        self.push_result(value, Op::Mul(a, b), tracked, "mul")
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var, TensorError> {
        let value = self.value(a).scale(factor)?;
        let tracked = self.is_tracked(a);
        self.push_result(value, Op::Scale(a, factor), tracked, "scale")
    }

    /// Sum of single-element values, accumulated in slice order.
    pub fn sum(&mut self, terms: &[Var]) -> Result<Var, TensorError> {
        let Some((&first, rest)) = terms.split_first() else {
            return Ok(self.constant(Tensor::scalar(0.0)));
        };
        let mut acc = first;
        for &t in rest {
            acc = self.add(acc, t)?;
        }
        Ok(acc)
    }

    /// SiLU activation `x * sigmoid(x)`.
    pub fn silu(&mut self, x: Var) -> Result<Var, TensorError> {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| v * sigmoid(v)).collect();
        let value = Tensor::from_parts(t.shape().to_vec(), data);
        let tracked = self.is_tracked(x);
        self.push_result(value, Op::Silu(x), tracked, "silu")
    }

    /// Row-wise RMS normalization scaled by `gain` (one entry per column).
    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Result<Var, TensorError> {
        let (tx, tg) = (self.value(x), self.value(gain));
        let d = tx.cols();
        if tg.numel() != d {
            return Err(TensorError::ShapeMismatch {
                op: "rms_norm",
                left: tx.shape().to_vec(),
                right: tg.shape().to_vec(),
            });
        }
        let rows = tx.rows();
        let mut out = vec![0.0; tx.numel()];
        let mut inv_rms = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = tx.row(r);
            let ms = dot(row, row) / d as f64;
            let inv = 1.0 / libm::sqrt(ms + RMS_EPS);
            inv_rms.push(inv);
            for j in 0..d {
                out[r * d + j] = row[j] * inv * tg.data()[j];
            }
        }
        let value = Tensor::from_parts(tx.shape().to_vec(), out);
        let tracked = self.tracked2(x, gain);
        self.push_result(value, Op::RmsNorm { x, gain, inv_rms }, tracked, "rms_norm")
    }

    /// Rotary position embedding applied per head to a `[positions, d_model]` input.
    pub fn rope(&mut self, x: Var, heads: usize) -> Result<Var, TensorError> {
        let t = self.value(x);
        let (rows, d) = (t.rows(), t.cols());
        if heads == 0 || d % heads != 0 || (d / heads) % 2 != 0 {
            return Err(TensorError::InvalidArgument(
                "rope needs an even head dimension dividing d_model",
            ));
        }
        let mut out = t.data().to_vec();
        rotate(&mut out, rows, d, heads, 1.0);
        let value = Tensor::from_parts(t.shape().to_vec(), out);
        let tracked = self.is_tracked(x);
        self.push_result(value, Op::Rope { x, heads }, tracked, "rope")
    }

    /// Causal multi-head scaled dot-product attention over `[positions, d_model]` inputs.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
    ) -> Result<Var, TensorError> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        if tq.shape() != tk.shape() || tq.shape() != tv.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "causal_attention",
                left: tq.shape().to_vec(),
                right: tk.shape().to_vec(),
            });
        }
        let (t, d) = (tq.rows(), tq.cols());
        if heads == 0 || d % heads != 0 {
            return Err(TensorError::InvalidArgument("heads must divide d_model"));
        }
        let dh = d / heads;
        let scale = 1.0 / libm::sqrt(dh as f64);
        let mut probs = vec![0.0; heads * t * t];
        let mut out = vec![0.0; t * d];
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        for h in 0..heads {
            let off = h * dh;
            for i in 0..t {
                let p = &mut probs[(h * t + i) * t..(h * t + i) * t + i + 1];
                for (j, pj) in p.iter_mut().enumerate() {
                    *pj = dot(
                        &qd[i * d + off..i * d + off + dh],
                        &kd[j * d + off..j * d + off + dh],
                    ) * scale;
                }
                softmax_in_place(p);
                let orow = &mut out[i * d + off..i * d + off + dh];
                for (j, &pj) in p.iter().enumerate() {
                    for (o, &vv) in orow.iter_mut().zip(&vd[j * d + off..j * d + off + dh]) {
                        *o += pj * vv;
                    }
                }
            }
        }
        let value = Tensor::from_parts(vec![t, d], out);
        let tracked = self.is_tracked(q) || self.is_tracked(k) || self.is_tracked(v);
        self.push_result(
            value,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            tracked,
            "causal_attention",
        )
    }

    /// Gathers rows of `table` (shape `[vocab, d]`).
    pub fn embedding(&mut self, table: Var, tokens: &[usize]) -> Result<Var, TensorError> {
        let tt = self.value(table);
        let (vocab, d) = (tt.rows(), tt.cols());
        let mut out = Vec::with_capacity(tokens.len() * d);
        for &tok in tokens {
            if tok >= vocab {
                return Err(TensorError::InvalidArgument(
                    "token outside embedding table",
                ));
            }
            out.extend_from_slice(tt.row(tok));
        }
        let value = Tensor::from_parts(vec![tokens.len(), d], out);
        let tracked = self.is_tracked(table);
        self.push_result(
            value,
            Op::Embedding {
                table,
                tokens: tokens.to_vec(),
            },
            tracked,
            "embedding",
        )
    }

    /// Mean next-token cross-entropy over the rows that carry a target.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[Option<usize>],
    ) -> Result<Var, TensorError> {
        let tl = self.value(logits);
        let (rows, vocab) = (tl.rows(), tl.cols());
        if targets.len() != rows {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                left: tl.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        let probs = tl.softmax_rows().into_data();
        let mut loss = 0.0;
        let mut count = 0;
        for (r, target) in targets.iter().enumerate() {
            if let Some(t) = *target {
                if t >= vocab {
                    return Err(TensorError::InvalidArgument("target outside vocabulary"));
                }
                loss -= libm::log(probs[r * vocab + t]);
                count += 1;
            }
        }
        if count == 0 {
            return Err(TensorError::InvalidArgument(
                "cross_entropy without targets",
            ));
        }
        let value = Tensor::scalar(loss / count as f64);
        let tracked = self.is_tracked(logits);
        self.push_result(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            tracked,
            "cross_entropy",
        )
    }

    /// `T^2 * KL(softmax(target/T) || softmax(model/T))`, averaged over rows.
    ///
    /// The target is a constant; gradient flows only into `model_logits`.
    pub fn softmax_kl(
        &mut self,
        target_logits: &Tensor,
        model_logits: Var,
        temperature: f64,
    ) -> Result<Var, TensorError> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(TensorError::InvalidArgument("temperature must be positive"));
        }
        let tm = self.value(model_logits);
        if tm.shape() != target_logits.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "softmax_kl",
                left: target_logits.shape().to_vec(),
                right: tm.shape().to_vec(),
            });
        }
        let (rows, vocab) = (tm.rows(), tm.cols());
        if rows == 0 {
            return Err(TensorError::InvalidArgument(
                "softmax_kl over zero positions",
            ));
        }
        let mut residual = vec![0.0; rows * vocab];
        let mut total = 0.0;
        for r in 0..rows {
            let p = log_softmax_scaled(target_logits.row(r), temperature);
            let q = log_softmax_scaled(tm.row(r), temperature);
            let mut kl = 0.0;
            for j in 0..vocab {
                let pj = libm::exp(p[j]);
                if pj > 0.0 {
                    kl += pj * (p[j] - q[j]);
                }
                residual[r * vocab + j] = libm::exp(q[j]) - pj;
            }
            total += kl;
        }
        let t2 = temperature * temperature;
        let value = Tensor::scalar(t2 * total / rows as f64);
        let g = temperature / rows as f64;
        for x in residual.iter_mut() {
            *x *= g;
        }
        let tracked = self.is_tracked(model_logits);
        self.push_result(
            value,
            Op::SoftmaxKl {
                logits: model_logits,
                residual,
            },
            tracked,
            "softmax_kl",
        )
    }

    /// Mean over rows of the squared Euclidean distance between `a` and the constant `b`.
    pub fn sq_l2_distance(&mut self, a: Var, b: &Tensor) -> Result<Var, TensorError> {
        let ta = self.value(a);
        if ta.shape() != b.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "sq_l2_distance",
                left: ta.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        let rows = ta.rows();
        if rows == 0 {
            return Err(TensorError::InvalidArgument(
                "sq_l2_distance over zero positions",
            ));
        }
        let diff: Vec<f64> = ta.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
        let value = Tensor::scalar(dot(&diff, &diff) / rows as f64);
        let tracked = self.is_tracked(a);
        self.push_result(value, Op::SqL2 { a, diff, rows }, tracked, "sq_l2_distance")
    }

    /// `base + sum over segments of coefficient * task_vector[segment]`.
    ///
    /// Segments are applied in slice order, which fixes the floating-point
    /// accumulation order per element.
    pub fn merge(
        &mut self,
        base: &Tensor,
        task_vectors: Vec<&'a Tensor>,
        coeffs: Option<Var>,
        segments: Vec<Segment>,
    ) -> Result<Var, TensorError> {
        let coeff_values = coeffs.map(|c| self.value(c).data());
        let mut out = base.clone();
        apply_segments(out.data_mut(), &task_vectors, &segments, |c| match c {
            Coefficient::Fixed(v) => Ok(v),
            Coefficient::Trainable(i) => coeff_values.and_then(|vals| vals.get(i).copied()).ok_or(
                TensorError::InvalidArgument("trainable coefficient out of range"),
            ),
        })?;
        for tv in &task_vectors {
            if tv.shape() != base.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "merge",
                    left: base.shape().to_vec(),
                    right: tv.shape().to_vec(),
                });
            }
        }
        let tracked = coeffs.is_some_and(|c| self.is_tracked(c));
        self.push_result(
            out,
            Op::Merge {
                coeffs,
                task_vectors,
                segments,
            },
            tracked,
            "merge",
        )
    }

    /// `scale * sum_i |x_i - anchors_i|`. The subgradient at a kink is 0.
    pub fn abs_deviation(
        &mut self,
        x: Var,
        anchors: &[f64],
        scale: f64,
    ) -> Result<Var, TensorError> {
        let tx = self.value(x);
        if tx.numel() != anchors.len() {
            return Err(TensorError::ShapeMismatch {
                op: "abs_deviation",
                left: tx.shape().to_vec(),
                right: vec![anchors.len()],
            });
        }
        let mut total = 0.0;
        let mut signs = Vec::with_capacity(anchors.len());
        for (&v, &a) in tx.data().iter().zip(anchors) {
            let d = v - a;
            total += libm::fabs(d);
            signs.push(if d > 0.0 {
                1.0
            } else if d < 0.0 {
                -1.0
            } else {
                0.0
            });
        }
        let value = Tensor::scalar(scale * total);
        let tracked = self.is_tracked(x);
        self.push_result(
            value,
            Op::AbsDeviation { x, signs, scale },
            tracked,
            "abs_deviation",
        )
    }

    /// Index of the largest logit in `row` of a rank-2 value.
    pub fn argmax_row(&self, var: Var, row: usize) -> usize {
        argmax(self.value(var).row(row))
    }

    /// Runs the backward pass from a single-element `output`.
    pub fn differentiate(&self, output: Var) -> Result<DifferentiableScalar, TensorError> {
        let out = self.value(output);
        if out.numel() != 1 {
            return Err(TensorError::InvalidArgument(
                "differentiate expects a scalar",
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[output.0].tracked {
            grads[output.0] = Some(vec![1.0]);
        }
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            self.backward_node(node, &g, &mut grads);
        }
        let mut leaves = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) {
                let g = grads[i]
                    .take()
                    .unwrap_or_else(|| vec![0.0; node.value.numel()]);
                let g = Tensor::from_parts(node.value.shape().to_vec(), g);
                g.check_finite("backward")?;
                leaves.push((Var(i), g));
            }
        }
        Ok(DifferentiableScalar {
            value: out.data()[0],
            gradients: Gradients { leaves },
        })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], var: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[var.0].tracked {
            return;
        }
        let n = self.nodes[var.0].value.numel();
        let slot = grads[var.0].get_or_insert_with(|| vec![0.0; n]);
        f(slot);
    }

    fn backward_node(&self, node: &Node<'a>, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                self.accumulate(grads, *a, |ga| matmul_bt_into(g, tb.data(), ga, m, n, k));
                self.accumulate(grads, *b, |gb| matmul_at_into(ta.data(), g, gb, m, k, n));
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |ga| add_into(ga, g));
                self.accumulate(grads, *b, |gb| add_into(gb, g));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |ga| {
                    for ((x, gi), y) in ga.iter_mut().zip(g).zip(tb) {
                        *x += gi * y;
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for ((x, gi), y) in gb.iter_mut().zip(g).zip(ta) {
                        *x += gi * y;
                    }
                });
            }
            Op::Scale(a, f) => {
                self.accumulate(grads, *a, |ga| {
                    for (x, gi) in ga.iter_mut().zip(g) {
                        *x += gi * f;
                    }
                });
            }
            Op::Silu(x) => {
                let tx = self.value(*x).data();
                self.accumulate(grads, *x, |gx| {
                    for ((o, gi), &v) in gx.iter_mut().zip(g).zip(tx) {
                        let s = sigmoid(v);
                        *o += gi * s * (1.0 + v * (1.0 - s));
                    }
                });
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (tx, tg) = (self.value(*x), self.value(*gain).data());
                let d = tx.cols();
                self.accumulate(grads, *gain, |gg| {
                    for (r, &inv) in inv_rms.iter().enumerate() {
                        let row = tx.row(r);
                        for j in 0..d {
                            gg[j] += g[r * d + j] * row[j] * inv;
                        }
                    }
                });
                self.accumulate(grads, *x, |gx| {
                    let mut gxhat = vec![0.0; d];
                    for (r, &inv) in inv_rms.iter().enumerate() {
                        let row = tx.row(r);
                        let mut proj = 0.0;
                        for j in 0..d {
                            gxhat[j] = g[r * d + j] * tg[j];
                            proj += gxhat[j] * row[j] * inv;
                        }
                        proj /= d as f64;
                        for j in 0..d {
                            gx[r * d + j] += (gxhat[j] - row[j] * inv * proj) * inv;
                        }
                    }
                });
            }
            Op::Rope { x, heads } => {
                let t = self.value(*x);
                let (rows, d) = (t.rows(), t.cols());
                let mut back = g.to_vec();
                rotate(&mut back, rows, d, *heads, -1.0);
                self.accumulate(grads, *x, |gx| add_into(gx, &back));
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => self.backward_attention(*q, *k, *v, *heads, probs, g, grads),
            Op::Embedding { table, tokens } => {
                let d = self.value(*table).cols();
                self.accumulate(grads, *table, |gt| {
                    for (r, &tok) in tokens.iter().enumerate() {
                        add_into(&mut gt[tok * d..(tok + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let vocab = self.value(*logits).cols();
                let scale = g[0] / *count as f64;
                self.accumulate(grads, *logits, |gl| {
                    for (r, target) in targets.iter().enumerate() {
                        if let Some(t) = *target {
                            for j in 0..vocab {
                                let hot = if j == t { 1.0 } else { 0.0 };
                                gl[r * vocab + j] += scale * (probs[r * vocab + j] - hot);
                            }
                        }
                    }
                });
            }
            Op::SoftmaxKl { logits, residual } => {
                self.accumulate(grads, *logits, |gl| {
                    for (o, r) in gl.iter_mut().zip(residual) {
                        *o += g[0] * r;
                    }
                });
            }
            Op::SqL2 { a, diff, rows } => {
                let f = 2.0 * g[0] / *rows as f64;
                self.accumulate(grads, *a, |ga| {
                    for (o, dv) in ga.iter_mut().zip(diff) {
                        *o += f * dv;
                    }
                });
            }
            Op::Merge {
                coeffs,
                task_vectors,
                segments,
            } => {
                if let Some(c) = coeffs {
                    self.accumulate(grads, *c, |gc| {
                        for seg in segments {
                            if let Coefficient::Trainable(i) = seg.coefficient {
                                let tv = &task_vectors[seg.expert].data()[seg.start..seg.end];
                                gc[i] += dot(&g[seg.start..seg.end], tv);
                            }
                        }
                    });
                }
            }
            Op::AbsDeviation { x, signs, scale } => {
                self.accumulate(grads, *x, |gx| {
                    for (o, s) in gx.iter_mut().zip(signs) {
                        *o += g[0] * scale * s;
                    }
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (t, d) = (tq.rows(), tq.cols());
        let dh = d / heads;
        let scale = 1.0 / libm::sqrt(dh as f64);
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        let mut gq = vec![0.0; t * d];
        let mut gk = vec![0.0; t * d];
        let mut gv = vec![0.0; t * d];
        let mut gp = vec![0.0; t];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..t {
                let p = &probs[(h * t + i) * t..(h * t + i) * t + i + 1];
                let go = &g[i * d + off..i * d + off + dh];
                let mut weighted = 0.0;
                for (j, &pj) in p.iter().enumerate() {
                    let vj = &vd[j * d + off..j * d + off + dh];
                    gp[j] = dot(go, vj);
                    weighted += pj * gp[j];
                    for (o, &gov) in gv[j * d + off..j * d + off + dh].iter_mut().zip(go) {
                        *o += pj * gov;
                    }
                }
                for (j, &pj) in p.iter().enumerate() {
                    let gs = pj * (gp[j] - weighted) * scale;
                    if gs == 0.0 {
                        continue;
                    }
                    for c in 0..dh {
                        gq[i * d + off + c] += gs * kd[j * d + off + c];
                        gk[j * d + off + c] += gs * qd[i * d + off + c];
                    }
                }
            }
        }
        self.accumulate(grads, q, |x| add_into(x, &gq));
        self.accumulate(grads, k, |x| add_into(x, &gk));
        self.accumulate(grads, v, |x| add_into(x, &gv));
    }
}

/// Shared by the tape's merge op and the tape-free merge paths so both
/// produce bitwise-identical parameters.
pub(crate) fn apply_segments<F>(
    out: &mut [f64],
    task_vectors: &[&Tensor],
    segments: &[Segment],
    mut coefficient: F,
) -> Result<(), TensorError>
where
    F: FnMut(Coefficient) -> Result<f64, TensorError>,
{
    for seg in segments {
        let tv = task_vectors
            .get(seg.expert)
            .ok_or(TensorError::InvalidArgument("segment expert out of range"))?;
        if seg.start > seg.end || seg.end > out.len() || tv.numel() != out.len() {
            return Err(TensorError::InvalidArgument("segment outside tensor"));
        }
        let c = coefficient(seg.coefficient)?;
        for (o, &t) in out[seg.start..seg.end]
            .iter_mut()
            .zip(&tv.data()[seg.start..seg.end])
        {
            *o += c * t;
        }
    }
    Ok(())
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-x))
}

fn log_softmax_scaled(row: &[f64], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = row.iter().map(|x| x / temperature).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for &x in &scaled {
        sum += libm::exp(x - max);
    }
    let lse = max + libm::log(sum);
    scaled.into_iter().map(|x| x - lse).collect()
}

/// Rotates consecutive pairs within each head by `sign * position * freq`.
fn rotate(data: &mut [f64], rows: usize, d: usize, heads: usize, sign: f64) {
    let dh = d / heads;
    for pos in 0..rows {
        for h in 0..heads {
            for i in 0..dh / 2 {
                let freq = libm::pow(ROPE_BASE, -2.0 * i as f64 / dh as f64);
                let angle = sign * pos as f64 * freq;
                let (s, c) = (libm::sin(angle), libm::cos(angle));
                let a = pos * d + h * dh + 2 * i;
                let (x0, x1) = (data[a], data[a + 1]);
                data[a] = x0 * c - x1 * s;
                data[a + 1] = x0 * s + x1 * c;
            }
        }
    }
}

/// Convenience wrapper: KL loss and its gradient with respect to `model_logits`.
pub fn softmax_kl(
    target_logits: &Tensor,
    model_logits: &Tensor,
    temperature: f64,
) -> Result<DifferentiableScalar, TensorError> {
    let mut tape = Tape::new();
    let z = tape.leaf(model_logits.clone());
    let loss = tape.softmax_kl(target_logits, z, temperature)?;
    tape.differentiate(loss)
}

/// Convenience wrapper: squared distance and its gradient with respect to `a`.
pub fn sq_l2_distance(a: &Tensor, b: &Tensor) -> Result<DifferentiableScalar, TensorError> {
    let mut tape = Tape::new();
    let x = tape.leaf(a.clone());
    let loss = tape.sq_l2_distance(x, b)?;
    tape.differentiate(loss)
}

/// Outcome of comparing analytic gradients to central finite differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
}

/// Gradient magnitudes below this are compared absolutely rather than relatively.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Relative error `|a - n| / max(|a|, |n|, GRAD_CHECK_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = libm::fmax(
        libm::fmax(libm::fabs(analytic), libm::fabs(numeric)),
        GRAD_CHECK_FLOOR,
    );
    libm::fabs(analytic - numeric) / denom
}

/// Compares tape gradients of `f` at `point` against central differences with step `epsilon`.
pub fn grad_check<'a, F>(f: F, point: &[Tensor], epsilon: f64) -> Result<GradCheck, TensorError>
where
    F: Fn(&mut Tape<'a>, &[Var]) -> Result<Var, TensorError>,
{
    if !(epsilon > 0.0) {
        return Err(TensorError::InvalidArgument("epsilon must be positive"));
    }
    let eval = |values: &[Tensor],
                track: bool|
     -> Result<(f64, Option<Gradients>, Vec<Var>), TensorError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values
            .iter()
            .map(|v| {
                if track {
                    tape.leaf(v.clone())
                } else {
                    tape.constant(v.clone())
                }
            })
            .collect();
        let out = f(&mut tape, &vars)?;
        let value = tape.scalar_value(out);
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: "grad_check" });
        }
        let grads = if track {
            Some(tape.differentiate(out)?.gradients)
        } else {
            None
        };
        Ok((value, grads, vars))
    };

    let (_, grads, vars) = eval(point, true)?;
    let grads = grads.expect("tracked evaluation yields gradients");
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|&v| grads.get(v).cloned().expect("every leaf has a gradient"))
        .collect();

    let mut numeric = Vec::with_capacity(point.len());
    let mut max_rel_error: f64 = 0.0;
    let mut work: Vec<Tensor> = point.to_vec();
    for (li, leaf) in point.iter().enumerate() {
        let mut fd = vec![0.0; leaf.numel()];
        for (e, slot) in fd.iter_mut().enumerate() {
            let orig = leaf.data()[e];
            work[li].data_mut()[e] = orig + epsilon;
            let (plus, _, _) = eval(&work, false)?;
            work[li].data_mut()[e] = orig - epsilon;
            let (minus, _, _) = eval(&work, false)?;
            work[li].data_mut()[e] = orig;
            *slot = (plus - minus) / (2.0 * epsilon);
            max_rel_error = max_rel_error.max(relative_error(analytic[li].data()[e], *slot));
        }
        numeric.push(Tensor::from_parts(leaf.shape().to_vec(), fd));
    }
    Ok(GradCheck {
        max_rel_error,
        analytic,
        numeric,
    })
}
