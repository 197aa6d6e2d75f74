//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every primitive executed during a forward pass, in
//! execution order, so the record is topologically sorted by construction.
//! [`Tape::backward`] walks it in reverse and returns a [`Gradients`] table
//! holding one gradient per node that requires one.
//!
//! Leaves borrow their values when possible, so binding a full parameter set
//! to a tape costs no copies. One tape belongs to one forward pass on one
//! thread; separate tapes over the same parameters are independent.

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::tensor::{matmul_into, matmul_nt_into, matmul_tn_into, Tensor};

/// Additive score applied to masked logits before normalisation.
pub const MASK_SCORE: f64 = -1e30;

/// `sqrt(2/π)` for the tanh approximation of GELU.
const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
/// Cubic coefficient of the tanh approximation of GELU.
const GELU_CUBIC: f64 = 0.044_715;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How targets are interpreted by [`Tape::cross_entropy`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelMode {
    /// One-hot targets, softmax cross-entropy.
    #[default]
    Single,
    /// Multi-hot targets, independent per-label sigmoid cross-entropy.
    Multi,
}

impl std::str::FromStr for LabelMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(Self::Single),
            "multi" => Ok(Self::Multi),
            other => Err(Error::Config(format!(
                "label mode must be single or multi, got `{other}`"
            ))),
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Vec<f64>),
    Sum(Var),
    SliceCols {
        input: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    GatherCols {
        input: Var,
        index: Vec<usize>,
    },
    SelectRows {
        input: Var,
        rows: Vec<usize>,
    },
    MaskedSoftmax {
        input: Var,
        mask: Vec<bool>,
    },
    Gelu(Var),
    LayerNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<f64>,
        mode: LabelMode,
        probs: Vec<f64>,
    },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed primitives.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    backward_done: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn matrix_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [m, n] => Ok((*m, *n)),
        other => Err(Error::ShapeMismatch {
            op,
            left: other.to_vec(),
            right: vec![0, 0],
        }),
    }
}

fn gelu(x: f64) -> f64 {
    let inner = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    0.5 * x * (1.0 + inner.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = inner.tanh();
    let d_inner = GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Borrowed leaf; no copy of `value` is made.
    pub fn leaf(&mut self, value: &'a Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf_owned(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = matrix_dims("matmul", av)?;
        let (k2, n) = matrix_dims("matmul", bv)?;
        if k != k2 {
            return Err(mismatch("matmul", av, bv));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(av.data(), bv.data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let (m, n) = matrix_dims("transpose", av)?;
        let d = av.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = d[i * n + j];
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::Transpose(a), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(mismatch("add", av, bv));
        }
        let out: Vec<f64> = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let shape = av.shape().to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Add(a, b), rg))
    }

    /// Adds vector `row` (shape `[n]`) to every row of matrix `a` (`[m×n]`).
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        let (_, n) = matrix_dims("add_row", av)?;
        if rv.shape() != [n] {
            return Err(mismatch("add_row", av, rv));
        }
        let r = rv.data();
        let out: Vec<f64> = av
            .data()
            .chunks(n)
            .flat_map(|chunk| chunk.iter().zip(r).map(|(x, y)| x + y))
            .collect();
        let shape = av.shape().to_vec();
        let rg = self.rg(&[a, row]);
        Ok(self.push(Tensor::new(shape, out)?, Op::AddRow(a, row), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(mismatch("mul", av, bv));
        }
        let out: Vec<f64> = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let shape = av.shape().to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let av = self.value(a);
        let out: Vec<f64> = av.data().iter().map(|x| x * factor).collect();
        let t = Tensor::new(av.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale(a, factor), rg)
    }

    /// Elementwise product with a constant factor buffer (dropout masks).
    pub fn mul_const(&mut self, a: Var, factors: Vec<f64>) -> Result<Var> {
        let av = self.value(a);
        if factors.len() != av.len() {
            return Err(Error::ShapeMismatch {
                op: "mul_const",
                left: av.shape().to_vec(),
                right: vec![factors.len()],
            });
        }
        let out: Vec<f64> = av.data().iter().zip(&factors).map(|(x, f)| x * f).collect();
        let t = Tensor::new(av.shape().to_vec(), out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::MulConst(a, factors), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        let (m, n) = matrix_dims("slice_cols", av)?;
        if len == 0 || start + len > n {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                left: av.shape().to_vec(),
                right: vec![start, len],
            });
        }
        let mut out = Vec::with_capacity(m * len);
        for row in av.data().chunks(n) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(vec![m, len], out)?, Op::SliceCols { input: a, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(*parts.first().ok_or(Error::ShapeMismatch {
            op: "concat_cols",
            left: vec![],
            right: vec![],
        })?);
        let (m, _) = matrix_dims("concat_cols", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let pv = self.value(p);
            let (pm, pn) = matrix_dims("concat_cols", pv)?;
            if pm != m {
                return Err(mismatch("concat_cols", first, pv));
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(vec![m, total], out)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// `out[i][j] = a[i][index[i·cols + j]]`, producing an `[m×cols]` matrix.
    pub fn gather_cols(&mut self, a: Var, index: Vec<usize>, cols: usize) -> Result<Var> {
        let av = self.value(a);
        let (m, n) = matrix_dims("gather_cols", av)?;
        if cols == 0 || index.len() != m * cols {
            return Err(Error::ShapeMismatch {
                op: "gather_cols",
                left: av.shape().to_vec(),
                right: vec![index.len(), cols],
            });
        }
        if let Some(&bad) = index.iter().find(|&&c| c >= n) {
            return Err(Error::IndexOutOfRange { id: bad, size: n });
        }
        let d = av.data();
        let out: Vec<f64> = index
            .iter()
            .enumerate()
            .map(|(flat, &c)| d[(flat / cols) * n + c])
            .collect();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(vec![m, cols], out)?, Op::GatherCols { input: a, index }, rg))
    }

    /// Gathers rows of a matrix; gradient scatters back into the chosen rows.
    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let av = self.value(a);
        let (m, n) = matrix_dims("select_rows", av)?;
        if rows.is_empty() {
            return Err(Error::ShapeMismatch {
                op: "select_rows",
                left: av.shape().to_vec(),
                right: vec![0],
            });
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(Error::IndexOutOfRange { id: bad, size: m });
        }
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            out.extend_from_slice(av.row(r));
        }
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::new(vec![rows.len(), n], out)?,
            Op::SelectRows {
                input: a,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Row gather from an embedding table `[V×d]`.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.select_rows(table, ids)
    }

    /// Row-wise softmax where `mask[k] == false` blocks entry `k`.
    ///
    /// Blocked entries get [`MASK_SCORE`] added before normalisation and are
    /// then pinned to exactly zero. A row with nothing allowed is an error.
    pub fn masked_softmax(&mut self, scores: Var, mask: &[bool]) -> Result<Var> {
        self.masked_softmax_impl(scores, mask, false)
    }

    /// Like [`Tape::masked_softmax`], but a fully blocked row yields all zeros.
    pub fn masked_softmax_or_zero(&mut self, scores: Var, mask: &[bool]) -> Result<Var> {
        self.masked_softmax_impl(scores, mask, true)
    }

    fn masked_softmax_impl(&mut self, scores: Var, mask: &[bool], allow_empty: bool) -> Result<Var> {
        let sv = self.value(scores);
        if mask.len() != sv.len() {
            return Err(Error::ShapeMismatch {
                op: "masked_softmax",
                left: sv.shape().to_vec(),
                right: vec![mask.len()],
            });
        }
        let n = sv.cols();
        let mut out = vec![0.0; sv.len()];
        for (row, (x, m)) in sv.data().chunks(n).zip(mask.chunks(n)).enumerate() {
            if !m.iter().any(|&allowed| allowed) {
                if allow_empty {
                    continue;
                }
                return Err(Error::AllMaskedRow { row });
            }
            let shifted: Vec<f64> = x
                .iter()
                .zip(m)
                .map(|(&s, &allowed)| if allowed { s } else { s + MASK_SCORE })
                .collect();
            let max = shifted.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let o = &mut out[row * n..(row + 1) * n];
            let mut total = 0.0;
            for ((dst, &s), &allowed) in o.iter_mut().zip(&shifted).zip(m) {
                if allowed {
                    *dst = (s - max).exp();
                    total += *dst;
                }
            }
            for dst in o.iter_mut() {
                *dst /= total;
            }
        }
        let t = Tensor::new(sv.shape().to_vec(), out)?;
        let rg = self.rg(&[scores]);
        Ok(self.push(
            t,
            Op::MaskedSoftmax {
                input: scores,
                mask: mask.to_vec(),
            },
            rg,
        ))
    }

    /// GELU, tanh approximation: `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
    pub fn gelu(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let out: Vec<f64> = av.data().iter().map(|&x| gelu(x)).collect();
        let t = Tensor::new(av.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(t, Op::Gelu(a), rg)
    }

    /// Row-wise layer normalisation with learned scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let (_, n) = matrix_dims("layer_norm", xv)?;
        if gv.shape() != [n] || bv.shape() != [n] {
            return Err(mismatch("layer_norm", xv, gv));
        }
        let mut normalized = Vec::with_capacity(xv.len());
        let mut inv_std = Vec::with_capacity(xv.rows());
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.data().chunks(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            for ((v, g), b) in row.iter().zip(gv.data()).zip(bv.data()) {
                let xhat = (v - mean) * inv;
                normalized.push(xhat);
                out.push(g * xhat + b);
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            t,
            Op::LayerNorm {
                input: x,
                gamma,
                beta,
                normalized,
                inv_std,
            },
            rg,
        ))
    }

    /// Mean cross-entropy of `logits [B×K]` against `targets [B×K]`.
    ///
    /// Single mode: `mean_b −log softmax(logits_b)[gold_b]`.
    /// Multi mode: sigmoid cross-entropy averaged over all `B·K` entries.
    pub fn cross_entropy(&mut self, logits: Var, targets: &Tensor, mode: LabelMode) -> Result<Var> {
        let lv = self.value(logits);
        let (b, k) = matrix_dims("cross_entropy", lv)?;
        if targets.shape() != lv.shape() {
            return Err(mismatch("cross_entropy", lv, targets));
        }
        for (row, t) in targets.data().chunks(k).enumerate() {
            if t.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::InvalidTarget {
                    row,
                    reason: "entries must be 0 or 1".into(),
                });
            }
            if mode == LabelMode::Single && t.iter().filter(|&&v| v == 1.0).count() != 1 {
                return Err(Error::InvalidTarget {
                    row,
                    reason: "single-label target must be one-hot".into(),
                });
            }
        }
        let mut probs = Vec::with_capacity(b * k);
        let mut loss = 0.0;
        match mode {
            LabelMode::Single => {
                for (x, t) in lv.data().chunks(k).zip(targets.data().chunks(k)) {
                    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                    for (v, y) in x.iter().zip(t) {
                        probs.push((v - lse).exp());
                        if *y == 1.0 {
                            loss += lse - v;
                        }
                    }
                }
                loss /= b as f64;
            }
            LabelMode::Multi => {
                for (&x, &y) in lv.data().iter().zip(targets.data()) {
                    probs.push(sigmoid(x));
                    loss += x.max(0.0) - x * y + (-x.abs()).exp().ln_1p();
                }
                loss /= (b * k) as f64;
            }
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.data().to_vec(),
                mode,
                probs,
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// A tape supports one backward pass; a second call returns
    /// [`Error::BackwardTwice`] rather than silently accumulating.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                grads[idx] = None;
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| g.map(|data| Tensor::new(node.value.shape().to_vec(), data).expect("grad shape")))
            .collect();
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], var: Var, contrib: Vec<f64>) {
        match &mut grads[var.0] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contrib) {
                    *e += c;
                }
            }
            slot => *slot = Some(contrib),
        }
    }

    fn wants(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                if self.wants(*a) {
                    let mut da = vec![0.0; m * k];
                    matmul_nt_into(g, bv.data(), &mut da, m, n, k);
                    self.accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; k * n];
                    matmul_tn_into(av.data(), g, &mut db, m, k, n);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Transpose(a) => {
                let (n, m) = (node.value.shape()[0], node.value.shape()[1]);
                let mut da = vec![0.0; m * n];
                for j in 0..n {
                    for i in 0..m {
                        da[i * n + j] = g[j * m + i];
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.to_vec());
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.to_vec());
                }
            }
            Op::AddRow(a, row) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.to_vec());
                }
                if self.wants(*row) {
                    let n = node.value.cols();
                    let mut dr = vec![0.0; n];
                    for chunk in g.chunks(n) {
                        for (d, v) in dr.iter_mut().zip(chunk) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, *row, dr);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let da = g.iter().zip(bv.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    let db = g.iter().zip(av.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Scale(a, f) => {
                self.accumulate(grads, *a, g.iter().map(|x| x * f).collect());
            }
            Op::MulConst(a, factors) => {
                self.accumulate(grads, *a, g.iter().zip(factors).map(|(x, f)| x * f).collect());
            }
            Op::Sum(a) => {
                let len = self.value(*a).len();
                self.accumulate(grads, *a, vec![g[0]; len]);
            }
            Op::SliceCols { input, start } => {
                let iv = self.value(*input);
                let (m, n) = (iv.shape()[0], iv.shape()[1]);
                let len = node.value.cols();
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    da[i * n + start..i * n + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                self.accumulate(grads, *input, da);
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let m = node.value.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.wants(p) {
                        let mut dp = Vec::with_capacity(m * w);
                        for i in 0..m {
                            dp.extend_from_slice(&g[i * total + offset..i * total + offset + w]);
                        }
                        self.accumulate(grads, p, dp);
                    }
                    offset += w;
                }
            }
            Op::GatherCols { input, index } => {
                let iv = self.value(*input);
                let n = iv.cols();
                let cols = node.value.cols();
                let mut da = vec![0.0; iv.len()];
                for (flat, (&c, gv)) in index.iter().zip(g).enumerate() {
                    da[(flat / cols) * n + c] += gv;
                }
                self.accumulate(grads, *input, da);
            }
            Op::SelectRows { input, rows } => {
                let iv = self.value(*input);
                let n = iv.cols();
                let mut da = vec![0.0; iv.len()];
                for (r, &src) in rows.iter().enumerate() {
                    for (d, v) in da[src * n..(src + 1) * n].iter_mut().zip(&g[r * n..(r + 1) * n]) {
                        *d += v;
                    }
                }
                self.accumulate(grads, *input, da);
            }
            Op::MaskedSoftmax { input, mask } => {
                let p = node.value.data();
                let n = node.value.cols();
                let mut da = vec![0.0; p.len()];
                for ((dst, (pr, gr)), mr) in da.chunks_mut(n).zip(p.chunks(n).zip(g.chunks(n))).zip(mask.chunks(n)) {
                    let dot: f64 = pr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (((d, &pv), &gv), &allowed) in dst.iter_mut().zip(pr).zip(gr).zip(mr) {
                        if allowed {
                            *d = pv * (gv - dot);
                        }
                    }
                }
                self.accumulate(grads, *input, da);
            }
            Op::Gelu(a) => {
                let av = self.value(*a);
                let da = g.iter().zip(av.data()).map(|(gv, &x)| gv * gelu_grad(x)).collect();
                self.accumulate(grads, *a, da);
            }
            Op::LayerNorm {
                input,
                gamma,
                beta,
                normalized,
                inv_std,
            } => {
                let n = node.value.cols();
                let gam = self.value(*gamma).data();
                if self.wants(*input) {
                    let mut dx = Vec::with_capacity(g.len());
                    for ((gr, xr), &inv) in g.chunks(n).zip(normalized.chunks(n)).zip(inv_std) {
                        let dxhat: Vec<f64> = gr.iter().zip(gam).map(|(a, b)| a * b).collect();
                        let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                        let mean_dx = dxhat.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for (d, x) in dxhat.iter().zip(xr) {
                            dx.push(inv * (d - mean_d - x * mean_dx));
                        }
                    }
                    self.accumulate(grads, *input, dx);
                }
                if self.wants(*gamma) {
                    let mut dg = vec![0.0; n];
                    for (gr, xr) in g.chunks(n).zip(normalized.chunks(n)) {
                        for ((d, a), b) in dg.iter_mut().zip(gr).zip(xr) {
                            *d += a * b;
                        }
                    }
                    self.accumulate(grads, *gamma, dg);
                }
                if self.wants(*beta) {
                    let mut db = vec![0.0; n];
                    for gr in g.chunks(n) {
                        for (d, a) in db.iter_mut().zip(gr) {
                            *d += a;
                        }
                    }
                    self.accumulate(grads, *beta, db);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                mode,
                probs,
            } => {
                let lv = self.value(*logits);
                let denom = match mode {
                    LabelMode::Single => lv.rows() as f64,
                    LabelMode::Multi => lv.len() as f64,
                };
                let scale = g[0] / denom;
                let dl = probs.iter().zip(targets).map(|(p, y)| (p - y) * scale).collect();
                self.accumulate(grads, *logits, dl);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let a = tape.constant(mat(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let b = tape.constant(mat(&[&[3.0, 4.0], &[5.0, 6.0]]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn matmul_row_by_column() {
        let mut tape = Tape::new();
        let a = tape.constant(mat(&[&[1.0, 2.0]]));
        let b = tape.constant(mat(&[&[3.0], &[4.0]]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        assert!(err.to_string().contains("[2, 3] vs [2, 3]"), "{err}");
    }

    #[test]
    fn softmax_uniform() {
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::vector(vec![1.0, 1.0, 1.0]).unwrap());
        let p = tape.masked_softmax(s, &[true; 3]).unwrap();
        for &v in tape.value(p).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_hand_evaluated() {
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::vector(vec![0.0, 0.0, 3f64.ln()]).unwrap());
        let p = tape.masked_softmax(s, &[true; 3]).unwrap();
        let expected = [0.2, 0.2, 0.6];
        for (v, e) in tape.value(p).data().iter().zip(expected) {
            assert!((v - e).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_single_survivor() {
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::vector(vec![5.0, 7.0]).unwrap());
        let p = tape.masked_softmax(s, &[true, false]).unwrap();
        assert_eq!(tape.value(p).data(), &[1.0, 0.0]);
    }

    #[test]
    fn softmax_all_masked_row_is_reported() {
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::zeros(&[3, 2]));
        let err = tape
            .masked_softmax(s, &[true, true, false, false, true, false])
            .unwrap_err();
        assert!(matches!(err, Error::AllMaskedRow { row: 1 }));
        let z = tape
            .masked_softmax_or_zero(s, &[true, true, false, false, true, false])
            .unwrap();
        assert_eq!(tape.value(z).row(1), &[0.0, 0.0]);
    }

    #[test]
    fn embedding_lookup_rows_and_accumulation() {
        let table = mat(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]);
        let mut tape = Tape::new();
        let t = tape.leaf(&table, true);
        let e = tape.embedding_lookup(t, &[0]).unwrap();
        assert_eq!(tape.value(e).data(), table.row(0));
        let e2 = tape.embedding_lookup(t, &[1, 1]).unwrap();
        let s = tape.sum(e2);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(t).unwrap().data(), &[0.0, 0.0, 0.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn embedding_lookup_out_of_range() {
        let mut tape = Tape::new();
        let t = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(
            tape.embedding_lookup(t, &[5]),
            Err(Error::IndexOutOfRange { id: 5, size: 2 })
        ));
    }

    fn ce(logits: &[f64], gold: usize) -> f64 {
        let mut target = vec![0.0; logits.len()];
        target[gold] = 1.0;
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::new(vec![1, logits.len()], logits.to_vec()).unwrap());
        let t = Tensor::new(vec![1, logits.len()], target).unwrap();
        let loss = tape.cross_entropy(l, &t, LabelMode::Single).unwrap();
        tape.value(loss).item()
    }

    #[test]
    fn cross_entropy_values() {
        assert!((ce(&[0.0, 0.0, 0.0], 1) - 3f64.ln()).abs() < 1e-15);
        assert!(ce(&[20.0, -20.0], 0) < 1e-16);
        let expected = 1.0 + (-1f64).exp().ln_1p();
        assert!((ce(&[1.0, 2.0], 0) - expected).abs() < 1e-15);
        assert!((expected - 1.3133).abs() < 1e-4);
    }

    #[test]
    fn cross_entropy_rejects_bad_targets() {
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::zeros(&[2, 2]));
        let bad = mat(&[&[1.0, 0.0], &[1.0, 1.0]]);
        assert!(matches!(
            tape.cross_entropy(l, &bad, LabelMode::Single),
            Err(Error::InvalidTarget { row: 1, .. })
        ));
        let half = mat(&[&[0.5, 0.0], &[1.0, 1.0]]);
        assert!(matches!(
            tape.cross_entropy(l, &half, LabelMode::Multi),
            Err(Error::InvalidTarget { row: 0, .. })
        ));
        assert!(tape.cross_entropy(l, &bad, LabelMode::Multi).is_ok());
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let x = Tensor::zeros(&[2, 3]);
        let mut tape = Tape::new();
        let v = tape.leaf(&x, true);
        let s = tape.sum(v);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(v).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn backward_of_half_square() {
        let x = Tensor::vector(vec![3.0, -1.0]).unwrap();
        let mut tape = Tape::new();
        let v = tape.leaf(&x, true);
        let sq = tape.mul(v, v).unwrap();
        let s = tape.sum(sq);
        let half = tape.scale(s, 0.5);
        let g = tape.backward(half).unwrap();
        assert_eq!(g.get(v).unwrap().data(), &[3.0, -1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_second_call() {
        let x = Tensor::zeros(&[2]);
        let mut tape = Tape::new();
        let v = tape.leaf(&x, true);
        assert!(matches!(tape.backward(v), Err(Error::NonScalarLoss(_))));
        let s = tape.sum(v);
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::BackwardTwice)));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let x = Tensor::vector(vec![1.0, 2.0]).unwrap();
        let mut tape = Tape::new();
        let v = tape.leaf(&x, true);
        let c = tape.constant(Tensor::vector(vec![5.0, 6.0]).unwrap());
        let p = tape.mul(v, c).unwrap();
        let s = tape.sum(p);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(v).unwrap().data(), &[5.0, 6.0]);
        assert!(g.get(c).is_none());
    }
}
