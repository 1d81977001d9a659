//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records every operation in creation order. Because a node can
//! only reference nodes created before it, walking the record backwards visits
//! each node after all of its consumers, and gradients from fan-out simply
//! accumulate.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{gemm, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Reduce over rows, leaving a `1 x cols` row.
    Rows,
    /// Reduce over columns, leaving a `rows x 1` column.
    Cols,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    LogSoftmax(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    MaxOver(Vec<Var>, Vec<u32>),
    MeanOver(Vec<Var>),
    MaxAxis(Var, Axis, Vec<u32>),
    SumAxis(Var, Axis),
    SumAll(Var),
    Dropout(Var, Vec<f64>),
    Gather(Var, Vec<usize>),
    BagMean(Var, Vec<Vec<usize>>),
    Pick(Var, Vec<usize>),
    ClampMin(Var, f64),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Operation record for one forward pass. Confined to one thread.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    stochastic: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` when the variable does not require a gradient or the loss does
    /// not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        left: a.shape(),
        right: b.shape(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// True once a train-mode dropout with `p > 0` has been recorded.
    pub fn is_stochastic(&self) -> bool {
        self.stochastic
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    fn zip_with(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_vec(ta.rows(), ta.cols(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with("add", a, b, |x, y| x + y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with("sub", a, b, |x, y| x - y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with("mul", a, b, |x, y| x * y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// Adds a `1 x n` row to every row of an `m x n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        if tr.rows() != 1 || tr.cols() != ta.cols() {
            return Err(shape_err("add_row", ta, tr));
        }
        let mut value = ta.clone();
        let n = ta.cols();
        for chunk in value.data_mut().chunks_mut(n.max(1)) {
            for (x, b) in chunk.iter_mut().zip(tr.data()) {
                *x += b;
            }
        }
        let rg = self.any_grad(&[a, row]);
        Ok(self.push(value, Op::AddRow(a, row), rg))
    }

    pub fn scale(&mut self, a: Var, alpha: f64) -> Var {
        let value = self.value(a).map(|x| alpha * x);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Scale(a, alpha), rg)
    }

    /// `a + c` for a constant scalar `c`.
    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x + c);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Offset(a), rg)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).map(f);
        let rg = self.any_grad(&[a]);
        self.push(value, op, rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, libm::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, libm::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, libm::log, Op::Log(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, libm::sqrt, Op::Sqrt(a))
    }

    /// Row-wise log-softmax, stabilised by subtracting each row's maximum.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let value = log_softmax_rows(self.value(a));
        let rg = self.any_grad(&[a]);
        self.push(value, Op::LogSoftmax(a), rg)
    }

    /// Horizontal concatenation; all parts must have the same row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(parts[0]);
        let rows = first.rows();
        let mut cols = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows {
                return Err(shape_err("concat_cols", first, t));
            }
            cols += t.cols();
        }
        let mut value = Tensor::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let t = &self.nodes[p.0].value;
            for r in 0..rows {
                value.row_mut(r)[off..off + t.cols()].copy_from_slice(t.row(r));
            }
            off += t.cols();
        }
        let rg = self.any_grad(parts);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Vertical concatenation; all parts must have the same column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(parts[0]);
        let cols = first.cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(shape_err("concat_rows", first, t));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let rg = self.any_grad(parts);
        Ok(self.push(
            Tensor::from_vec(rows, cols, data),
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a);
        if start > end || end > t.cols() {
            return Err(shape_err("slice_cols", t, &Tensor::zeros(0, end)));
        }
        let mut value = Tensor::zeros(t.rows(), end - start);
        for r in 0..t.rows() {
            value.row_mut(r).copy_from_slice(&t.row(r)[start..end]);
        }
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::SliceCols(a, start), rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a);
        if start > end || end > t.rows() {
            return Err(shape_err("slice_rows", t, &Tensor::zeros(end, 0)));
        }
        let value = t.slice_rows(start, end);
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::SliceRows(a, start), rg))
    }

    fn check_same(&self, name: &'static str, parts: &[Var]) -> Result<()> {
        if parts.is_empty() {
            return Err(Error::Contract(format!("{name} over an empty list")));
        }
        let first = self.value(parts[0]);
        for &p in &parts[1..] {
            if self.value(p).shape() != first.shape() {
                return Err(shape_err(name, first, self.value(p)));
            }
        }
        Ok(())
    }

    /// Elementwise maximum across a list of equally-shaped values (a max over
    /// the stacking axis). Ties resolve to the earliest entry.
    pub fn max_over(&mut self, parts: &[Var]) -> Result<Var> {
        self.check_same("max_over", parts)?;
        let mut value = self.value(parts[0]).clone();
        let mut argmax = vec![0u32; value.len()];
        for (k, &p) in parts.iter().enumerate().skip(1) {
            for (i, &x) in self.nodes[p.0].value.data().iter().enumerate() {
                if x > value.data()[i] {
                    value.data_mut()[i] = x;
                    argmax[i] = k as u32;
                }
            }
        }
        let rg = self.any_grad(parts);
        Ok(self.push(value, Op::MaxOver(parts.to_vec(), argmax), rg))
    }

    /// Elementwise mean across a list of equally-shaped values.
    pub fn mean_over(&mut self, parts: &[Var]) -> Result<Var> {
        self.check_same("mean_over", parts)?;
        let mut value = self.value(parts[0]).clone();
        for &p in &parts[1..] {
            value.axpy(1.0, &self.nodes[p.0].value);
        }
        value.scale_in_place(1.0 / parts.len() as f64);
        let rg = self.any_grad(parts);
        Ok(self.push(value, Op::MeanOver(parts.to_vec()), rg))
    }

    /// Maximum along an axis; ties resolve to the first index.
    pub fn max_axis(&mut self, a: Var, axis: Axis) -> Var {
        let t = self.value(a);
        let (value, arg) = match axis {
            Axis::Rows => {
                let mut v = Tensor::from_vec(1, t.cols(), t.row(0).to_vec());
                let mut arg = vec![0u32; t.cols()];
                for r in 1..t.rows() {
                    for (c, &x) in t.row(r).iter().enumerate() {
                        if x > v.data()[c] {
                            v.data_mut()[c] = x;
                            arg[c] = r as u32;
                        }
                    }
                }
                (v, arg)
            }
            Axis::Cols => {
                let mut v = Tensor::zeros(t.rows(), 1);
                let mut arg = vec![0u32; t.rows()];
                for r in 0..t.rows() {
                    let (i, m) = argmax_first(t.row(r));
                    v.data_mut()[r] = m;
                    arg[r] = i as u32;
                }
                (v, arg)
            }
        };
        let rg = self.any_grad(&[a]);
        self.push(value, Op::MaxAxis(a, axis, arg), rg)
    }

    pub fn sum_axis(&mut self, a: Var, axis: Axis) -> Var {
        let t = self.value(a);
        let value = match axis {
            Axis::Rows => {
                let mut v = Tensor::zeros(1, t.cols());
                for r in 0..t.rows() {
                    for (acc, x) in v.data_mut().iter_mut().zip(t.row(r)) {
                        *acc += x;
                    }
                }
                v
            }
            Axis::Cols => {
                let data = (0..t.rows()).map(|r| t.row(r).iter().sum()).collect();
                Tensor::from_vec(t.rows(), 1, data)
            }
        };
        let rg = self.any_grad(&[a]);
        self.push(value, Op::SumAxis(a, axis), rg)
    }

    pub fn mean_axis(&mut self, a: Var, axis: Axis) -> Var {
        let n = match axis {
            Axis::Rows => self.value(a).rows(),
            Axis::Cols => self.value(a).cols(),
        };
        let s = self.sum_axis(a, axis);
        self.scale(s, 1.0 / n as f64)
    }

    /// Sum of all entries, as a `1 x 1` scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.any_grad(&[a]);
        self.push(value, Op::SumAll(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Inverted dropout: survivors are scaled by `1 / (1 - p)`. Identity when
    /// `train` is false or `p == 0`. The mask is drawn from `seed` alone.
    pub fn dropout(&mut self, a: Var, p: f64, train: bool, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} not in [0, 1)")));
        }
        if !train || p == 0.0 {
            return Ok(a);
        }
        self.stochastic = true;
        let mut r = rng::rng(seed);
        let keep = 1.0 / (1.0 - p);
        let t = self.value(a);
        let mask: Vec<f64> = (0..t.len())
            .map(|_| if r.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data = t.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let value = Tensor::from_vec(t.rows(), t.cols(), data);
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::Dropout(a, mask), rg))
    }

    /// Embedding lookup: row `ids[i]` of `table` becomes output row `i`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= t.rows()) {
            return Err(Error::Shape {
                op: "gather",
                left: t.shape(),
                right: (bad, 0),
            });
        }
        let value = t.select_rows(ids);
        let rg = self.any_grad(&[table]);
        Ok(self.push(value, Op::Gather(table, ids.to_vec()), rg))
    }

    /// Mean of the table rows listed in each bag; one output row per bag.
    pub fn bag_mean(&mut self, table: Var, bags: &[Vec<usize>]) -> Result<Var> {
        let t = self.value(table);
        let mut value = Tensor::zeros(bags.len(), t.cols());
        for (b, bag) in bags.iter().enumerate() {
            if bag.is_empty() {
                return Err(Error::EmptyDocument);
            }
            let w = 1.0 / bag.len() as f64;
            for &id in bag {
                if id >= t.rows() {
                    return Err(Error::Shape {
                        op: "bag_mean",
                        left: t.shape(),
                        right: (id, 0),
                    });
                }
                for (o, x) in value.row_mut(b).iter_mut().zip(t.row(id)) {
                    *o += w * x;
                }
            }
        }
        let rg = self.any_grad(&[table]);
        Ok(self.push(value, Op::BagMean(table, bags.to_vec()), rg))
    }

    /// Picks single entries `(rows[i], cols[i])`, returning an `n x 1` column.
    pub fn pick(&mut self, a: Var, rows: &[usize], cols: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if rows.len() != cols.len() {
            return Err(Error::Shape {
                op: "pick",
                left: (rows.len(), 1),
                right: (cols.len(), 1),
            });
        }
        let mut flat = Vec::with_capacity(rows.len());
        for (&r, &c) in rows.iter().zip(cols) {
            if r >= t.rows() || c >= t.cols() {
                return Err(Error::Shape {
                    op: "pick",
                    left: t.shape(),
                    right: (r, c),
                });
            }
            flat.push(r * t.cols() + c);
        }
        let data = flat.iter().map(|&i| t.data()[i]).collect();
        let value = Tensor::from_vec(flat.len(), 1, data);
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::Pick(a, flat), rg))
    }

    /// `max(a, floor)` elementwise. The gradient passes only where `a > floor`.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        self.unary(a, |x| if x > floor { x } else { floor }, Op::ClampMin(a, floor))
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a 1x1 loss, got {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut leaves: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(g) = grads[i].take() else { continue };
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaves[i] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
        }
        Ok(Gradients { grads: leaves })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.wants(*a) {
                    let (buf, beta) = slot(grads, *a, m, k);
                    gemm(false, true, m, n, k, g.data(), tb.data(), buf.data_mut(), beta);
                }
                if self.wants(*b) {
                    let (buf, beta) = slot(grads, *b, k, n);
                    gemm(true, false, k, m, n, ta.data(), g.data(), buf.data_mut(), beta);
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g, 1.0);
                self.acc(grads, *b, g, 1.0);
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g, 1.0);
                self.acc(grads, *b, g, -1.0);
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let d = hadamard(g, self.value(*b));
                    self.acc(grads, *a, &d, 1.0);
                }
                if self.wants(*b) {
                    let d = hadamard(g, self.value(*a));
                    self.acc(grads, *b, &d, 1.0);
                }
            }
            Op::AddRow(a, row) => {
                self.acc(grads, *a, g, 1.0);
                if self.wants(*row) {
                    let (buf, _) = slot(grads, *row, 1, g.cols());
                    for r in 0..g.rows() {
                        for (acc, x) in buf.data_mut().iter_mut().zip(g.row(r)) {
                            *acc += x;
                        }
                    }
                }
            }
            Op::Scale(a, alpha) => self.acc(grads, *a, g, *alpha),
            Op::Offset(a) => self.acc(grads, *a, g, 1.0),
            Op::Tanh(a) => {
                let d = zip_map(g, y, |g, y| g * (1.0 - y * y));
                self.acc(grads, *a, &d, 1.0);
            }
            Op::Sigmoid(a) => {
                let d = zip_map(g, y, |g, y| g * y * (1.0 - y));
                self.acc(grads, *a, &d, 1.0);
            }
            Op::Relu(a) => {
                let d = zip_map(g, self.value(*a), |g, x| if x > 0.0 { g } else { 0.0 });
                self.acc(grads, *a, &d, 1.0);
            }
            Op::Exp(a) => {
                let d = hadamard(g, y);
                self.acc(grads, *a, &d, 1.0);
            }
            Op::Log(a) => {
                let d = zip_map(g, self.value(*a), |g, x| g / x);
                self.acc(grads, *a, &d, 1.0);
            }
            Op::Sqrt(a) => {
                let d = zip_map(g, y, |g, y| 0.5 * g / y);
                self.acc(grads, *a, &d, 1.0);
            }
            Op::LogSoftmax(a) => {
                let mut d = g.clone();
                for r in 0..g.rows() {
                    let s: f64 = g.row(r).iter().sum();
                    for (dx, ly) in d.row_mut(r).iter_mut().zip(y.row(r)) {
                        *dx -= libm::exp(*ly) * s;
                    }
                }
                self.acc(grads, *a, &d, 1.0);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.wants(p) {
                        let (buf, _) = slot(grads, p, g.rows(), w);
                        for r in 0..g.rows() {
                            for (acc, x) in buf.row_mut(r).iter_mut().zip(&g.row(r)[off..off + w]) {
                                *acc += x;
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let h = self.value(p).rows();
                    if self.wants(p) {
                        let part = g.slice_rows(off, off + h);
                        self.acc(grads, p, &part, 1.0);
                    }
                    off += h;
                }
            }
            Op::SliceCols(a, start) => {
                if self.wants(*a) {
                    let src = self.value(*a);
                    let (buf, _) = slot(grads, *a, src.rows(), src.cols());
                    for r in 0..g.rows() {
                        let dst = &mut buf.row_mut(r)[*start..*start + g.cols()];
                        for (acc, x) in dst.iter_mut().zip(g.row(r)) {
                            *acc += x;
                        }
                    }
                }
            }
            Op::SliceRows(a, start) => {
                if self.wants(*a) {
                    let src = self.value(*a);
                    let (buf, _) = slot(grads, *a, src.rows(), src.cols());
                    let c = src.cols();
                    let dst = &mut buf.data_mut()[start * c..(start + g.rows()) * c];
                    for (acc, x) in dst.iter_mut().zip(g.data()) {
                        *acc += x;
                    }
                }
            }
            Op::MaxOver(parts, argmax) => {
                for (k, &p) in parts.iter().enumerate() {
                    if !self.wants(p) {
                        continue;
                    }
                    let (buf, _) = slot(grads, p, g.rows(), g.cols());
                    for (i, (&which, gx)) in argmax.iter().zip(g.data()).enumerate() {
                        if which as usize == k {
                            buf.data_mut()[i] += gx;
                        }
                    }
                }
            }
            Op::MeanOver(parts) => {
                let w = 1.0 / parts.len() as f64;
                for &p in parts {
                    self.acc(grads, p, g, w);
                }
            }
            Op::MaxAxis(a, axis, arg) => {
                if self.wants(*a) {
                    let src = self.value(*a);
                    let cols = src.cols();
                    let (buf, _) = slot(grads, *a, src.rows(), cols);
                    match axis {
                        Axis::Rows => {
                            for (c, &r) in arg.iter().enumerate() {
                                buf.data_mut()[r as usize * cols + c] += g.data()[c];
                            }
                        }
                        Axis::Cols => {
                            for (r, &c) in arg.iter().enumerate() {
                                buf.data_mut()[r * cols + c as usize] += g.data()[r];
                            }
                        }
                    }
                }
            }
            Op::SumAxis(a, axis) => {
                if self.wants(*a) {
                    let src = self.value(*a);
                    let cols = src.cols();
                    let (buf, _) = slot(grads, *a, src.rows(), cols);
                    for r in 0..src.rows() {
                        for c in 0..cols {
                            buf.data_mut()[r * cols + c] += match axis {
                                Axis::Rows => g.data()[c],
                                Axis::Cols => g.data()[r],
                            };
                        }
                    }
                }
            }
            Op::SumAll(a) => {
                if self.wants(*a) {
                    let src = self.value(*a);
                    let (buf, _) = slot(grads, *a, src.rows(), src.cols());
                    let s = g.item();
                    for x in buf.data_mut() {
                        *x += s;
                    }
                }
            }
            Op::Dropout(a, mask) => {
                let d = Tensor::from_vec(
                    g.rows(),
                    g.cols(),
                    g.data().iter().zip(mask).map(|(g, m)| g * m).collect(),
                );
                self.acc(grads, *a, &d, 1.0);
            }
            Op::Gather(table, ids) => {
                if self.wants(*table) {
                    let src = self.value(*table);
                    let (buf, _) = slot(grads, *table, src.rows(), src.cols());
                    for (i, &id) in ids.iter().enumerate() {
                        for (acc, x) in buf.row_mut(id).iter_mut().zip(g.row(i)) {
                            *acc += x;
                        }
                    }
                }
            }
            Op::BagMean(table, bags) => {
                if self.wants(*table) {
                    let src = self.value(*table);
                    let (buf, _) = slot(grads, *table, src.rows(), src.cols());
                    for (b, bag) in bags.iter().enumerate() {
                        let w = 1.0 / bag.len() as f64;
                        for &id in bag {
                            for (acc, x) in buf.row_mut(id).iter_mut().zip(g.row(b)) {
                                *acc += w * x;
                            }
                        }
                    }
                }
            }
            Op::Pick(a, flat) => {
                if self.wants(*a) {
                    let src = self.value(*a);
                    let (buf, _) = slot(grads, *a, src.rows(), src.cols());
                    for (&i, gx) in flat.iter().zip(g.data()) {
                        buf.data_mut()[i] += gx;
                    }
                }
            }
            Op::ClampMin(a, floor) => {
                let d = zip_map(g, self.value(*a), |g, x| if x > *floor { g } else { 0.0 });
                self.acc(grads, *a, &d, 1.0);
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: &Tensor, alpha: f64) {
        if !self.wants(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.axpy(alpha, g),
            slot @ None => {
                *slot = Some(if alpha == 1.0 {
                    g.clone()
                } else {
                    g.map(|x| alpha * x)
                });
            }
        }
    }
}

/// Gradient buffer for `v`, created zeroed when absent. The returned `beta`
/// is 1 if the buffer already held a partial sum.
fn slot(grads: &mut [Option<Tensor>], v: Var, rows: usize, cols: usize) -> (&mut Tensor, f64) {
    let beta = if grads[v.0].is_some() { 1.0 } else { 0.0 };
    let buf = grads[v.0].get_or_insert_with(|| Tensor::zeros(rows, cols));
    (buf, beta)
}

fn hadamard(a: &Tensor, b: &Tensor) -> Tensor {
    zip_map(a, b, |x, y| x * y)
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.rows(), a.cols(), data)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// Index and value of the first maximum.
pub fn argmax_first(xs: &[f64]) -> (usize, f64) {
    let mut best = (0, xs[0]);
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > best.1 {
            best = (i, x);
        }
    }
    best
}

/// Stable `log(sum(exp(xs)))`; `-inf` for an empty slice.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + libm::log(xs.iter().map(|x| libm::exp(x - m)).sum::<f64>())
}

pub fn log_softmax_rows(t: &Tensor) -> Tensor {
    let mut out = t.clone();
    for r in 0..t.rows() {
        let row = out.row_mut(r);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for x in row.iter_mut() {
            *x -= m;
        }
        let lse = libm::log(row.iter().map(|x| libm::exp(*x)).sum::<f64>());
        for x in row.iter_mut() {
            *x -= lse;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn log_softmax_symmetric_and_stable() {
        let ln2 = core::f64::consts::LN_2;
        for v in [0.0, 1000.0] {
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::row_vector(vec![v, v]));
            let y = tape.log_softmax(x);
            for &o in tape.value(y).data() {
                assert!(close(o, -ln2, 1e-15), "{o}");
            }
        }
    }

    #[test]
    fn relu_values() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::row_vector(vec![-3.0, 2.0]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 2.0]);
    }

    #[test]
    fn quadratic_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(1.5));
        let y = tape.add(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 2.0);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros(1, 2));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn max_routes_to_first_tie() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::row_vector(vec![2.0, 1.0]));
        let b = tape.param(Tensor::row_vector(vec![2.0, 3.0]));
        let m = tape.max_over(&[a, b]).unwrap();
        let loss = tape.sum(m);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[1.0, 0.0]);
        assert_eq!(g.get(b).unwrap().data(), &[0.0, 1.0]);

        let mut tape = Tape::new();
        let x = tape.param(Tensor::row_vector(vec![5.0, 5.0, 1.0]));
        let m = tape.max_axis(x, Axis::Cols);
        let loss = tape.sum(m);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn dropout_identity_cases() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::row_vector(vec![1.0, -2.0, 3.0]));
        assert_eq!(tape.dropout(x, 0.0, true, 7).unwrap(), x);
        assert_eq!(tape.dropout(x, 0.9, false, 7).unwrap(), x);
        assert!(!tape.is_stochastic());
        let y = tape.dropout(x, 0.5, true, 7).unwrap();
        assert!(tape.is_stochastic());
        for (&o, &i) in tape.value(y).data().iter().zip(&[1.0, -2.0, 3.0]) {
            assert!(o == 0.0 || o == 2.0 * i);
        }
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(2, 3));
        let b = tape.constant(Tensor::zeros(3, 2));
        match tape.add(a, b) {
            Err(Error::Shape { op, left, right }) => {
                assert_eq!(op, "add");
                assert_eq!(left, (2, 3));
                assert_eq!(right, (3, 2));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn cross_entropy_on_random_logits_passes_grad_check() {
        let logits = crate::rng::standard_normal(4, 6, 11);
        let targets = [0usize, 5, 2, 2];
        let err = grad_check(
            |tape, p| {
                let lp = tape.log_softmax(p[0]);
                let picked = tape.pick(lp, &[0, 1, 2, 3], &targets)?;
                let s = tape.sum(picked);
                Ok(tape.scale(s, -1.0))
            },
            &[logits],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }
}
