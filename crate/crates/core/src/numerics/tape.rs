//! Reverse-mode differentiation over a linear operation record.
//!
//! Every primitive appends one node holding its value and the operands it
//! was computed from. `backward` walks the record once in reverse order and
//! accumulates vector-Jacobian products into nodes that require gradients.
//! Leaves registered with [`Tape::constant`] never receive gradients, which
//! is how the frozen base model stays out of the backward pass.

use std::borrow::Cow;

use super::tensor::{matmul_at_raw, matmul_bt_raw, matmul_raw, Tensor};
use super::NumericError;

/// Stabilizer added to the mean square inside RMSNorm.
pub const RMSNORM_EPS: f64 = 1e-6;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Deliberate defects that can be injected into backward rules so the
/// gradient self-check can demonstrate that it catches them.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackwardMutation {
    /// Flips the sign of the left-operand gradient of `matmul`.
    NegateMatMulLhs,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    MulCols(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Softmax(Var),
    RmsNorm { input: Var, gain: Var },
    Silu(Var),
    Embedding { table: Var, ids: Vec<usize> },
    SliceCols { input: Var, start: usize },
    ConcatCols(Vec<Var>),
    CrossEntropy { logits: Var, targets: Vec<usize>, mask: Vec<bool> },
}

struct Node<'a> {
    value: Cow<'a, [f64]>,
    shape: Vec<usize>,
    op: Op,
    requires_grad: bool,
}

impl Node<'_> {
    fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    fn rows(&self) -> usize {
        self.value.len() / self.cols().max(1)
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, or `None` when the node
    /// does not require gradients.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Like [`get`](Self::get) but materializes zeros for nodes outside the
    /// differentiated subgraph.
    pub fn get_or_zeros(&self, var: Var, len: usize) -> Vec<f64> {
        self.get(var).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; len])
    }
}

/// Operation record for one forward pass. Confined to a single worker.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    mutation: Option<BackwardMutation>,
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_mutation(mutation: Option<BackwardMutation>) -> Self {
        Self {
            nodes: Vec::new(),
            mutation,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, [f64]>, shape: Vec<usize>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            shape,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<'a> {
        &self.nodes[v.0]
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.node(*v).requires_grad)
    }

    /// Borrowed leaf that never receives a gradient.
    pub fn constant(&mut self, t: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(t.data()), t.shape().to_vec(), Op::Leaf, false)
    }

    /// Borrowed leaf that receives a gradient.
    pub fn param(&mut self, t: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(t.data()), t.shape().to_vec(), Op::Leaf, true)
    }

    pub fn constant_owned(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(Cow::Owned(t.into_data()), shape, Op::Leaf, false)
    }

    pub fn param_owned(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(Cow::Owned(t.into_data()), shape, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.to_vec()).expect("tape nodes hold consistent shapes")
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize), NumericError> {
        match self.node(v).shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(NumericError::Shape(format!("expected a matrix, got shape {other:?}"))),
        }
    }

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        let (m, k) = self.dims2(a)?;
        let (k2, n) = self.dims2(b)?;
        if k != k2 {
            return Err(NumericError::Shape(format!(
                "matmul inner dimensions disagree: [{m}, {k}] x [{k2}, {n}]"
            )));
        }
        let out = matmul_raw(self.value(a), self.value(b), m, k, n);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Cow::Owned(out), vec![m, n], Op::MatMul(a, b), rg))
    }

    /// `a[m×k] · b[n×k]ᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        let (m, k) = self.dims2(a)?;
        let (n, k2) = self.dims2(b)?;
        if k != k2 {
            return Err(NumericError::Shape(format!(
                "matmul_bt inner dimensions disagree: [{m}, {k}] x [{n}, {k2}]^T"
            )));
        }
        let out = matmul_bt_raw(self.value(a), self.value(b), m, k, n);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Cow::Owned(out), vec![m, n], Op::MatMulBt(a, b), rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<(), NumericError> {
        if self.shape(a) != self.shape(b) {
            return Err(NumericError::Shape(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        self.same_shape(a, b, "add")?;
        let out: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let rg = self.any_grad(&[a, b]);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Cow::Owned(out), shape, Op::Add(a, b), rg))
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        self.same_shape(a, b, "mul")?;
        let out: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let rg = self.any_grad(&[a, b]);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Cow::Owned(out), shape, Op::Mul(a, b), rg))
    }

    /// Scales every column `j` of `x[…×n]` by `v[j]`.
    pub fn mul_cols(&mut self, x: Var, v: Var) -> Result<Var, NumericError> {
        let n = self.node(x).cols();
        if self.shape(v) != [n] {
            return Err(NumericError::Shape(format!(
                "mul_cols: scale vector {:?} does not match width {n}",
                self.shape(v)
            )));
        }
        let scale = self.value(v);
        let out: Vec<f64> = self
            .value(x)
            .chunks(n)
            .flat_map(|row| row.iter().zip(scale).map(|(a, s)| a * s))
            .collect();
        let rg = self.any_grad(&[x, v]);
        let shape = self.shape(x).to_vec();
        Ok(self.push(Cow::Owned(out), shape, Op::MulCols(x, v), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out: Vec<f64> = self.value(a).iter().map(|x| x * c).collect();
        let rg = self.requires_grad(a);
        let shape = self.shape(a).to_vec();
        self.push(Cow::Owned(out), shape, Op::Scale(a, c), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).iter().sum();
        let rg = self.requires_grad(a);
        self.push(Cow::Owned(vec![s]), vec![1], Op::Sum(a), rg)
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var, NumericError> {
        self.softmax_impl(a, false)
    }

    /// Row-wise softmax over a square score matrix where row `i` only sees
    /// columns `0..=i`; masked entries are exactly zero.
    pub fn causal_softmax(&mut self, a: Var) -> Result<Var, NumericError> {
        let (r, c) = self.dims2(a)?;
        if r != c {
            return Err(NumericError::Shape(format!("causal softmax needs a square matrix, got [{r}, {c}]")));
        }
        self.softmax_impl(a, true)
    }

    fn softmax_impl(&mut self, a: Var, causal: bool) -> Result<Var, NumericError> {
        let node = self.node(a);
        if node.value.iter().any(|x| x.is_nan()) {
            return Err(NumericError::NonFinite("softmax input contains NaN".into()));
        }
        let n = node.cols();
        let mut out = vec![0.0; node.value.len()];
        for (i, (row, orow)) in node.value.chunks(n).zip(out.chunks_mut(n)).enumerate() {
            let width = if causal { i + 1 } else { n };
            let live = &row[..width];
            let max = live.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (o, &x) in orow[..width].iter_mut().zip(live) {
                *o = (x - max).exp();
                total += *o;
            }
            for o in &mut orow[..width] {
                *o /= total;
            }
        }
        let rg = node.requires_grad;
        let shape = node.shape.clone();
        Ok(self.push(Cow::Owned(out), shape, Op::Softmax(a), rg))
    }

    /// `x / sqrt(mean(x²) + ε) ⊙ g` over the last dimension.
    pub fn rmsnorm(&mut self, x: Var, g: Var) -> Result<Var, NumericError> {
        let d = self.node(x).cols();
        if self.shape(g) != [d] {
            return Err(NumericError::Shape(format!(
                "rmsnorm: gain {:?} does not match width {d}",
                self.shape(g)
            )));
        }
        let gain = self.value(g);
        let mut out = Vec::with_capacity(self.value(x).len());
        for row in self.value(x).chunks(d) {
            let inv = inv_rms(row);
            out.extend(row.iter().zip(gain).map(|(v, gj)| v * inv * gj));
        }
        let rg = self.any_grad(&[x, g]);
        let shape = self.shape(x).to_vec();
        Ok(self.push(Cow::Owned(out), shape, Op::RmsNorm { input: x, gain: g }, rg))
    }

    /// `x · sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Var {
        let out: Vec<f64> = self.value(a).iter().map(|&x| silu(x)).collect();
        let rg = self.requires_grad(a);
        let shape = self.shape(a).to_vec();
        self.push(Cow::Owned(out), shape, Op::Silu(a), rg)
    }

    /// Gathers rows of `table[V×d]` into a `[ids.len()×d]` matrix.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, NumericError> {
        let (v, d) = self.dims2(table)?;
        if ids.is_empty() {
            return Err(NumericError::Shape("embedding lookup with no ids".into()));
        }
        let src = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(NumericError::Shape(format!("embedding id {id} out of range for {v} rows")));
            }
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let rg = self.requires_grad(table);
        Ok(self.push(
            Cow::Owned(out),
            vec![ids.len(), d],
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, NumericError> {
        let (r, c) = self.dims2(a)?;
        if len == 0 || start + len > c {
            return Err(NumericError::Shape(format!(
                "column slice {start}..{} out of range for width {c}",
                start + len
            )));
        }
        let src = self.value(a);
        let mut out = Vec::with_capacity(r * len);
        for row in src.chunks(c) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let rg = self.requires_grad(a);
        Ok(self.push(Cow::Owned(out), vec![r, len], Op::SliceCols { input: a, start }, rg))
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericError> {
        let first = parts
            .first()
            .ok_or_else(|| NumericError::Shape("concat of zero tensors".into()))?;
        let (r, _) = self.dims2(*first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.dims2(p)?;
            if pr != r {
                return Err(NumericError::Shape(format!("concat row mismatch: {pr} vs {r}")));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[i * w..(i + 1) * w]);
            }
        }
        let rg = self.any_grad(parts);
        Ok(self.push(Cow::Owned(out), vec![r, total], Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Mean over masked-in rows of `-log softmax(logits[t])[targets[t]]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var, NumericError> {
        let (t, v) = self.dims2(logits)?;
        if targets.len() != t || mask.len() != t {
            return Err(NumericError::Shape(format!(
                "cross entropy: {t} rows but {} targets and {} mask entries",
                targets.len(),
                mask.len()
            )));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(NumericError::NoSupervisedPositions);
        }
        let vals = self.value(logits);
        let mut total = 0.0;
        for (i, row) in vals.chunks(v).enumerate() {
            if !mask[i] {
                continue;
            }
            if targets[i] >= v {
                return Err(NumericError::Shape(format!(
                    "target id {} out of range for vocabulary {v}",
                    targets[i]
                )));
            }
            total += log_sum_exp(row) - row[targets[i]];
        }
        let loss = total / count as f64;
        if !loss.is_finite() {
            return Err(NumericError::NonFinite("cross entropy loss".into()));
        }
        let rg = self.requires_grad(logits);
        Ok(self.push(
            Cow::Owned(vec![loss]),
            vec![1],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Each recorded node is visited once.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumericError> {
        let node = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| NumericError::Graph(format!("variable {} is not on this tape", loss.0)))?;
        if node.value.len() != 1 {
            return Err(NumericError::Graph(format!(
                "backward needs a scalar loss, got shape {:?}",
                node.shape
            )));
        }
        if !node.requires_grad {
            return Err(NumericError::Graph("loss is not connected to any trainable tensor".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        grads.resize(self.nodes.len(), None);
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], target: Var, contrib: impl FnOnce(&mut [f64])) {
        let node = &self.nodes[target.0];
        if !node.requires_grad {
            return;
        }
        let slot = grads[target.0].get_or_insert_with(|| vec![0.0; node.value.len()]);
        contrib(slot);
    }

    fn propagate(&self, node: &Node<'a>, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.node(*a).rows(), self.node(*a).cols());
                let n = self.node(*b).cols();
                let negate = self.mutation == Some(BackwardMutation::NegateMatMulLhs);
                if self.requires_grad(*a) {
                    let b_val = self.value(*b);
                    let da = matmul_bt_raw(g, b_val, m, n, k);
                    self.accumulate(grads, *a, |s| {
                        for (x, d) in s.iter_mut().zip(&da) {
                            if negate {
                                *x -= d;
                            } else {
                                *x += d;
                            }
                        }
                    });
                }
                if self.requires_grad(*b) {
                    let db = matmul_at_raw(self.value(*a), g, m, k, n);
                    self.accumulate(grads, *b, |s| add_into(s, &db));
                }
            }
            Op::MatMulBt(a, b) => {
                let (m, k) = (self.node(*a).rows(), self.node(*a).cols());
                let n = self.node(*b).rows();
                if self.requires_grad(*a) {
                    let da = matmul_raw(g, self.value(*b), m, n, k);
                    self.accumulate(grads, *a, |s| add_into(s, &da));
                }
                if self.requires_grad(*b) {
                    let db = matmul_at_raw(g, self.value(*a), m, n, k);
                    self.accumulate(grads, *b, |s| add_into(s, &db));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |s| add_into(s, g));
                self.accumulate(grads, *b, |s| add_into(s, g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, |s| {
                    for ((x, gi), bi) in s.iter_mut().zip(g).zip(bv) {
                        *x += gi * bi;
                    }
                });
                self.accumulate(grads, *b, |s| {
                    for ((x, gi), ai) in s.iter_mut().zip(g).zip(av) {
                        *x += gi * ai;
                    }
                });
            }
            Op::MulCols(x, v) => {
                let n = self.node(*v).value.len();
                let (xv, vv) = (self.value(*x), self.value(*v));
                self.accumulate(grads, *x, |s| {
                    for (srow, grow) in s.chunks_mut(n).zip(g.chunks(n)) {
                        for ((o, gi), vi) in srow.iter_mut().zip(grow).zip(vv) {
                            *o += gi * vi;
                        }
                    }
                });
                self.accumulate(grads, *v, |s| {
                    for (xrow, grow) in xv.chunks(n).zip(g.chunks(n)) {
                        for ((o, gi), xi) in s.iter_mut().zip(grow).zip(xrow) {
                            *o += gi * xi;
                        }
                    }
                });
            }
            Op::Scale(a, c) => {
                self.accumulate(grads, *a, |s| {
                    for (x, gi) in s.iter_mut().zip(g) {
                        *x += gi * c;
                    }
                });
            }
            Op::Sum(a) => {
                let g0 = g[0];
                self.accumulate(grads, *a, |s| s.iter_mut().for_each(|x| *x += g0));
            }
            Op::Softmax(input) => {
                let n = node.cols();
                let y = &node.value;
                self.accumulate(grads, *input, |s| {
                    for ((srow, yrow), grow) in s.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                        let dot: f64 = yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                        for ((o, yi), gi) in srow.iter_mut().zip(yrow).zip(grow) {
                            *o += yi * (gi - dot);
                        }
                    }
                });
            }
            Op::RmsNorm { input, gain } => {
                let d = node.cols();
                let (xv, gv) = (self.value(*input), self.value(*gain));
                self.accumulate(grads, *gain, |s| {
                    for (xrow, grow) in xv.chunks(d).zip(g.chunks(d)) {
                        let inv = inv_rms(xrow);
                        for ((o, xi), gi) in s.iter_mut().zip(xrow).zip(grow) {
                            *o += gi * xi * inv;
                        }
                    }
                });
                self.accumulate(grads, *input, |s| {
                    for ((srow, xrow), grow) in s.chunks_mut(d).zip(xv.chunks(d)).zip(g.chunks(d)) {
                        let inv = inv_rms(xrow);
                        let proj: f64 = xrow.iter().zip(grow).zip(gv).map(|((x, dy), gj)| x * dy * gj).sum();
                        let coef = inv * inv * inv * proj / d as f64;
                        for (((o, xi), dy), gj) in srow.iter_mut().zip(xrow).zip(grow).zip(gv) {
                            *o += inv * dy * gj - coef * xi;
                        }
                    }
                });
            }
            Op::Silu(a) => {
                let av = self.value(*a);
                self.accumulate(grads, *a, |s| {
                    for ((o, &x), gi) in s.iter_mut().zip(av).zip(g) {
                        let sig = sigmoid(x);
                        *o += gi * sig * (1.0 + x * (1.0 - sig));
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = node.cols();
                self.accumulate(grads, *table, |s| {
                    for (&id, grow) in ids.iter().zip(g.chunks(d)) {
                        add_into(&mut s[id * d..(id + 1) * d], grow);
                    }
                });
            }
            Op::SliceCols { input, start } => {
                let w = node.cols();
                let c = self.node(*input).cols();
                self.accumulate(grads, *input, |s| {
                    for (srow, grow) in s.chunks_mut(c).zip(g.chunks(w)) {
                        add_into(&mut srow[*start..start + w], grow);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = node.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.node(p).cols();
                    self.accumulate(grads, p, |s| {
                        for (srow, grow) in s.chunks_mut(w).zip(g.chunks(total)) {
                            add_into(srow, &grow[offset..offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::CrossEntropy { logits, targets, mask } => {
                let v = self.node(*logits).cols();
                let count = mask.iter().filter(|&&m| m).count() as f64;
                let scale = g[0] / count;
                let lv = self.value(*logits);
                self.accumulate(grads, *logits, |s| {
                    for (i, (srow, row)) in s.chunks_mut(v).zip(lv.chunks(v)).enumerate() {
                        if !mask[i] {
                            continue;
                        }
                        let lse = log_sum_exp(row);
                        for (o, &z) in srow.iter_mut().zip(row) {
                            *o += scale * (z - lse).exp();
                        }
                        srow[targets[i]] -= scale;
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn inv_rms(row: &[f64]) -> f64 {
    let ms = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
    1.0 / (ms + RMSNORM_EPS).sqrt()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub(crate) fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}
