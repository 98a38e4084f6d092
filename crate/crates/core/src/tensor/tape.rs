use std::collections::HashMap;
use std::rc::Rc;

use super::{gemm, gemm_nt, gemm_tn, ParamStore, Precision, Result, Tensor, TensorError};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for [`Tape::custom`]: receives the input values, the output
/// value and the upstream gradient; returns one gradient buffer per input.
pub type CustomBackward = Rc<dyn Fn(&[&Tensor], &Tensor, &[f64]) -> Vec<Vec<f64>>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bcast {
    Same,
    Row,
    Scalar,
}

enum Op {
    Leaf { param: Option<String> },
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var, Bcast),
    Sub(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softmax(Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Rc<[usize]>),
    GatherTable(Var, Rc<[Option<usize>]>),
    Reshape(Var),
    CrossEntropy { logits: Var, label: usize },
    Hinge { scores: Var, correct: usize },
    Custom { inputs: Vec<Var>, backward: CustomBackward },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf { .. } => vec![],
            MatMul(a, b) | Add(a, b, _) | Sub(a, b, _) | Mul(a, b, _) => vec![*a, *b],
            Transpose(x)
            | Scale(x, _)
            | Relu(x)
            | Tanh(x)
            | Sigmoid(x)
            | Softmax(x)
            | Sum(x)
            | Mean(x)
            | MeanRows(x)
            | SliceRows(x, _)
            | SliceCols(x, _)
            | GatherRows(x, _)
            | GatherTable(x, _)
            | Reshape(x) => vec![*x],
            ConcatRows(xs) | ConcatCols(xs) => xs.clone(),
            CrossEntropy { logits, .. } => vec![*logits],
            Hinge { scores, .. } => vec![*scores],
            Custom { inputs, .. } => inputs.clone(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records operations in execution order and replays their backward rules.
///
/// Parameters enter through [`Tape::param`] (one leaf per name per tape) and
/// receive their gradients in the [`ParamStore`] on [`Tape::backward`]; all
/// other inputs are constants.
pub struct Tape {
    nodes: Vec<Node>,
    precision: Precision,
    params: HashMap<String, Var>,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new(Precision::default())
    }
}

fn bcast(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Bcast> {
    if a.shape() == b.shape() {
        return Ok(Bcast::Same);
    }
    if b.numel() == 1 {
        return Ok(Bcast::Scalar);
    }
    let (_, ac) = a.dims2();
    let row_like = matches!(b.shape(), [n] if *n == ac) || matches!(b.shape(), [1, n] if *n == ac);
    if a.rank() == 2 && row_like {
        return Ok(Bcast::Row);
    }
    Err(TensorError::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    })
}

#[inline]
fn bval(b: &[f64], mode: Bcast, idx: usize, cols: usize) -> f64 {
    match mode {
        Bcast::Same => b[idx],
        Bcast::Row => b[idx % cols],
        Bcast::Scalar => b[0],
    }
}

fn reduce_to(mode: Bcast, g: &[f64], cols: usize, len: usize) -> Vec<f64> {
    match mode {
        Bcast::Same => g.to_vec(),
        Bcast::Row => {
            let mut out = vec![0.0; len];
            for (i, x) in g.iter().enumerate() {
                out[i % cols] += x;
            }
            out
        }
        Bcast::Scalar => vec![g.iter().sum()],
    }
}

fn softmax_rows(x: &[f64], rows: usize, cols: usize, mask: Option<&[bool]>) -> Vec<Option<Vec<f64>>> {
    (0..rows)
        .map(|r| {
            let row = &x[r * cols..(r + 1) * cols];
            let keep = |j: usize| mask.is_none_or(|m| m[r * cols + j]);
            let max = (0..cols)
                .filter(|&j| keep(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return None;
            }
            let mut out: Vec<f64> = (0..cols)
                .map(|j| if keep(j) { (row[j] - max).exp() } else { 0.0 })
                .collect();
            let z: f64 = out.iter().sum();
            out.iter_mut().for_each(|v| *v /= z);
            Some(out)
        })
        .collect()
}

impl Tape {
    pub fn new(precision: Precision) -> Self {
        Tape {
            nodes: Vec::new(),
            precision,
            params: HashMap::new(),
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Operand indices of every node, in recording order.
    pub fn operands(&self) -> Vec<Vec<usize>> {
        self.nodes
            .iter()
            .map(|n| n.op.inputs().into_iter().map(Var::index).collect())
            .collect()
    }

    fn push(&mut self, mut value: Tensor, op: Op) -> Var {
        let needs_grad = match &op {
            Op::Leaf { param } => param.is_some(),
            other => other.inputs().iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.precision.round_slice(value.data_mut());
        let id = self.nodes.len();
        self.nodes.push(Node {
            value: value.with_tape_id(id),
            op,
            needs_grad,
        });
        Var(id)
    }

    /// Records a constant input; it never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.detached(), Op::Leaf { param: None })
    }

    /// Records (once per tape) the named trainable parameter.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = store.get(name)?.detached();
        let param = store.is_trainable(name).then(|| name.to_string());
        let v = self.push(t, Op::Leaf { param });
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = ta.dims2();
        let (k2, n) = tb.dims2();
        if ta.rank() > 2 || tb.rank() > 2 || k != k2 {
            return Err(TensorError::Shape {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let out = gemm(ta.data(), tb.data(), m, k, n);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() > 2 {
            return Err(TensorError::Contract(format!(
                "transpose needs rank ≤ 2, got {:?}",
                t.shape()
            )));
        }
        let out = t.transpose();
        Ok(self.push(out, Op::Transpose(x)))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        make: impl Fn(Bcast) -> Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let mode = bcast(name, ta, tb)?;
        let cols = ta.cols();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bval(tb.data(), mode, i, cols)))
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, make(mode)))
    }

    /// Elementwise sum; `b` may be a scalar or a row vector broadcast over rows.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, |m| Op::Add(a, b, m))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, |m| Op::Sub(a, b, m))
    }

    /// Elementwise (Hadamard) product with the same broadcasting as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, |m| Op::Mul(a, b, m))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v * c).collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::Scale(x, c))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(out, op)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| if v > 0.0 { v } else { 0.0 }, Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, |v| 1.0 / (1.0 + (-v).exp()), Op::Sigmoid(x))
    }

    fn softmax_impl(&mut self, x: Var, mask: Option<&[bool]>, allow_empty: bool) -> Result<Var> {
        let t = self.value(x);
        let (rows, cols) = t.dims2();
        if let Some(m) = mask {
            if m.len() != rows * cols {
                return Err(TensorError::Shape {
                    op: "row_softmax",
                    lhs: t.shape().to_vec(),
                    rhs: vec![m.len()],
                });
            }
        }
        let mut data = Vec::with_capacity(rows * cols);
        for (r, row) in softmax_rows(t.data(), rows, cols, mask).into_iter().enumerate() {
            match row {
                Some(vals) => data.extend(vals),
                None if allow_empty => data.extend(std::iter::repeat_n(0.0, cols)),
                None => {
                    return Err(TensorError::DegenerateRow {
                        op: "row_softmax",
                        row: r,
                    })
                }
            }
        }
        let out = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Softmax(x)))
    }

    /// Per-row softmax over the unmasked entries; masked entries are exactly 0.
    /// A row with no unmasked entry is an error.
    pub fn row_softmax(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        self.softmax_impl(x, mask, false)
    }

    /// As [`Tape::row_softmax`], but fully masked rows become all-zero rows.
    pub fn row_softmax_or_zero(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        self.softmax_impl(x, Some(mask), true)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    /// Mean over the row axis: `[m×n] → [1×n]`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (r, c) = t.dims2();
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, v) in out.iter_mut().zip(t.row(i)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= r as f64);
        let out = Tensor::matrix(1, c, out).expect("positive");
        self.push(out, Op::MeanRows(x))
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| TensorError::Contract("concat_rows of nothing".into()))?;
        let cols = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &x in xs {
            let t = self.value(x);
            if t.cols() != cols || t.rank() > 2 {
                return Err(TensorError::Shape {
                    op: "concat_rows",
                    lhs: self.value(*first).shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let out = Tensor::matrix(rows, cols, data)?;
        Ok(self.push(out, Op::ConcatRows(xs.to_vec())))
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| TensorError::Contract("concat_cols of nothing".into()))?;
        let rows = self.value(*first).rows();
        let mut total = 0;
        for &x in xs {
            let t = self.value(x);
            if t.rows() != rows || t.rank() > 2 {
                return Err(TensorError::Shape {
                    op: "concat_cols",
                    lhs: self.value(*first).shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            total += t.cols();
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &x in xs {
                data.extend_from_slice(self.value(x).row(r));
            }
        }
        let out = Tensor::matrix(rows, total, data)?;
        Ok(self.push(out, Op::ConcatCols(xs.to_vec())))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = t.dims2();
        if len == 0 || start + len > r {
            return Err(TensorError::Contract(format!(
                "row slice {start}..{} out of {r} rows",
                start + len
            )));
        }
        let data = t.data()[start * c..(start + len) * c].to_vec();
        let out = Tensor::matrix(len, c, data)?;
        Ok(self.push(out, Op::SliceRows(x, start)))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = t.dims2();
        if len == 0 || start + len > c {
            return Err(TensorError::Contract(format!(
                "column slice {start}..{} out of {c} columns",
                start + len
            )));
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&t.row(i)[start..start + len]);
        }
        let out = Tensor::matrix(r, len, data)?;
        Ok(self.push(out, Op::SliceCols(x, start)))
    }

    /// Stacks the selected rows of `x` (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = t.dims2();
        if idx.is_empty() {
            return Err(TensorError::Contract("gather_rows with no indices".into()));
        }
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(TensorError::Contract(format!("row {i} out of {r}")));
            }
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::matrix(idx.len(), c, data)?;
        Ok(self.push(out, Op::GatherRows(x, idx.into())))
    }

    /// Looks up scalars of `table` by index; `None` slots are zero. The output
    /// takes `shape`, which must hold `idx.len()` elements.
    pub fn gather_table(&mut self, table: Var, idx: &[Option<usize>], shape: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let data = idx
            .iter()
            .map(|i| match i {
                Some(k) if *k < t.numel() => Ok(t.data()[*k]),
                Some(k) => Err(TensorError::Contract(format!("table index {k} out of {}", t.numel()))),
                None => Ok(0.0),
            })
            .collect::<Result<Vec<_>>>()?;
        let out = Tensor::new(shape.to_vec(), data)?;
        Ok(self.push(out, Op::GatherTable(table, idx.into())))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).detached().reshaped(shape)?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    /// `−log softmax(logits)[label]`, stabilized by log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let t = self.value(logits);
        if t.rows() != 1 {
            return Err(TensorError::Contract(format!(
                "cross_entropy expects one logit row, got {:?}",
                t.shape()
            )));
        }
        if label >= t.numel() {
            return Err(TensorError::Contract(format!(
                "label {label} out of range for {} classes",
                t.numel()
            )));
        }
        let (max, tail) = log_sum_exp(t.data());
        let loss = (max - t.data()[label]) + tail;
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, label }))
    }

    /// `Σ_{t≠correct} max(0, 1 − (s_correct − s_t))`.
    pub fn hinge_loss(&mut self, scores: Var, correct: usize) -> Result<Var> {
        let s = self.value(scores).data();
        if correct >= s.len() {
            return Err(TensorError::Contract(format!(
                "correct index {correct} out of range for {} candidates",
                s.len()
            )));
        }
        let loss = hinge_value(s, correct);
        Ok(self.push(Tensor::scalar(loss), Op::Hinge { scores, correct }))
    }

    /// Records an operation with a caller-supplied value and backward rule.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, backward: CustomBackward) -> Var {
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                backward,
            },
        )
    }

    /// Replays backward rules from `loss`, accumulating into the store's
    /// gradient buffers, then clears the tape.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let precision = self.precision;
        for k in (0..=loss.0).rev() {
            let Some(mut g) = grads[k].take() else { continue };
            let node = &self.nodes[k];
            if !node.needs_grad {
                continue;
            }
            precision.round_slice(&mut g);
            if let Op::Leaf { param: Some(name) } = &node.op {
                store.accumulate_grad(name, &g)?;
                continue;
            }
            for (input, contrib) in self.backward_rule(k, &g) {
                if !self.nodes[input.0].needs_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        self.clear();
        Ok(())
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
        self.params.clear();
    }

    fn backward_rule(&self, k: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[k];
        let out = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf { .. } => vec![],
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, kk) = ta.dims2();
                let n = tb.cols();
                vec![
                    (*a, gemm_nt(g, tb.data(), m, n, kk)),
                    (*b, gemm_tn(ta.data(), g, m, kk, n)),
                ]
            }
            Op::Transpose(x) => {
                let (r, c) = out.dims2();
                let gt = Tensor::matrix(r, c, g.to_vec()).expect("shape").transpose();
                vec![(*x, gt.into_data())]
            }
            Op::Add(a, b, mode) | Op::Sub(a, b, mode) => {
                let cols = val(*a).cols();
                let mut gb = reduce_to(*mode, g, cols, val(*b).numel());
                if matches!(node.op, Op::Sub(..)) {
                    gb.iter_mut().for_each(|x| *x = -*x);
                }
                vec![(*a, g.to_vec()), (*b, gb)]
            }
            Op::Mul(a, b, mode) => {
                let (ta, tb) = (val(*a), val(*b));
                let cols = ta.cols();
                let ga = g
                    .iter()
                    .enumerate()
                    .map(|(i, gi)| gi * bval(tb.data(), *mode, i, cols))
                    .collect();
                let gab: Vec<f64> = g.iter().zip(ta.data()).map(|(gi, x)| gi * x).collect();
                vec![(*a, ga), (*b, reduce_to(*mode, &gab, cols, tb.numel()))]
            }
            Op::Scale(x, c) => vec![(*x, g.iter().map(|v| v * c).collect())],
            Op::Relu(x) => {
                let gx = g
                    .iter()
                    .zip(val(*x).data())
                    .map(|(gi, xi)| if *xi > 0.0 { *gi } else { 0.0 })
                    .collect();
                vec![(*x, gx)]
            }
            Op::Tanh(x) => {
                let gx = g.iter().zip(out.data()).map(|(gi, y)| gi * (1.0 - y * y)).collect();
                vec![(*x, gx)]
            }
            Op::Sigmoid(x) => {
                let gx = g.iter().zip(out.data()).map(|(gi, y)| gi * y * (1.0 - y)).collect();
                vec![(*x, gx)]
            }
            Op::Softmax(x) => {
                let (rows, cols) = out.dims2();
                let y = out.data();
                let mut gx = vec![0.0; rows * cols];
                for r in 0..rows {
                    let span = r * cols..(r + 1) * cols;
                    let dot: f64 = g[span.clone()].iter().zip(&y[span.clone()]).map(|(a, b)| a * b).sum();
                    for i in span {
                        gx[i] = y[i] * (g[i] - dot);
                    }
                }
                vec![(*x, gx)]
            }
            Op::Sum(x) => vec![(*x, vec![g[0]; val(*x).numel()])],
            Op::Mean(x) => {
                let n = val(*x).numel();
                vec![(*x, vec![g[0] / n as f64; n])]
            }
            Op::MeanRows(x) => {
                let (r, c) = val(*x).dims2();
                let gx = (0..r * c).map(|i| g[i % c] / r as f64).collect();
                vec![(*x, gx)]
            }
            Op::ConcatRows(xs) => {
                let mut offset = 0;
                xs.iter()
                    .map(|&x| {
                        let n = val(x).numel();
                        let part = g[offset..offset + n].to_vec();
                        offset += n;
                        (x, part)
                    })
                    .collect()
            }
            Op::ConcatCols(xs) => {
                let (rows, total) = out.dims2();
                let mut offset = 0;
                xs.iter()
                    .map(|&x| {
                        let c = val(x).cols();
                        let mut part = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            part.extend_from_slice(&g[r * total + offset..r * total + offset + c]);
                        }
                        offset += c;
                        (x, part)
                    })
                    .collect()
            }
            Op::SliceRows(x, start) => {
                let c = out.cols();
                let mut gx = vec![0.0; val(*x).numel()];
                gx[start * c..start * c + g.len()].copy_from_slice(g);
                vec![(*x, gx)]
            }
            Op::SliceCols(x, start) => {
                let (r, len) = out.dims2();
                let c = val(*x).cols();
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    gx[i * c + start..i * c + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                vec![(*x, gx)]
            }
            Op::GatherRows(x, idx) => {
                let c = out.cols();
                let mut gx = vec![0.0; val(*x).numel()];
                for (k, &i) in idx.iter().enumerate() {
                    for j in 0..c {
                        gx[i * c + j] += g[k * c + j];
                    }
                }
                vec![(*x, gx)]
            }
            Op::GatherTable(t, idx) => {
                let mut gt = vec![0.0; val(*t).numel()];
                for (gi, i) in g.iter().zip(idx.iter()) {
                    if let Some(k) = i {
                        gt[*k] += gi;
                    }
                }
                vec![(*t, gt)]
            }
            Op::Reshape(x) => vec![(*x, g.to_vec())],
            Op::CrossEntropy { logits, label } => {
                let z = val(*logits).data();
                let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = z.iter().map(|x| (x - max).exp()).collect();
                let s: f64 = e.iter().sum();
                let gx = e
                    .iter()
                    .enumerate()
                    .map(|(i, ei)| g[0] * (ei / s - if i == *label { 1.0 } else { 0.0 }))
                    .collect();
                vec![(*logits, gx)]
            }
            Op::Hinge { scores, correct } => {
                let s = val(*scores).data();
                let mut gs = vec![0.0; s.len()];
                for t in 0..s.len() {
                    if t != *correct && 1.0 - (s[*correct] - s[t]) > 0.0 {
                        gs[t] += g[0];
                        gs[*correct] -= g[0];
                    }
                }
                vec![(*scores, gs)]
            }
            Op::Custom { inputs, backward } => {
                let vals: Vec<&Tensor> = inputs.iter().map(|&v| val(v)).collect();
                inputs.iter().copied().zip(backward(&vals, out, g)).collect()
            }
        }
    }
}

/// `ln Σ exp(z)` split as `(max, ln(1 + Σ_{i≠argmax} exp(zᵢ − max)))` so
/// callers can subtract a logit from `max` before adding the small tail.
fn log_sum_exp(z: &[f64]) -> (f64, f64) {
    let (arg, max) = z.iter().copied().enumerate().fold(
        (0, f64::NEG_INFINITY),
        |acc, (i, x)| if x > acc.1 { (i, x) } else { acc },
    );
    let rest: f64 = z
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != arg)
        .map(|(_, x)| (x - max).exp())
        .sum();
    (max, rest.ln_1p())
}

pub(crate) fn hinge_value(s: &[f64], correct: usize) -> f64 {
    s.iter()
        .enumerate()
        .filter(|(t, _)| *t != correct)
        .map(|(_, st)| (1.0 - (s[correct] - st)).max(0.0))
        .sum()
}
