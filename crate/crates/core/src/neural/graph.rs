//! Tape-based reverse-mode differentiation over rank-2 tensors.
//!
//! A [`Graph`] records every operation as it is evaluated. Calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse and returns
//! gradients for every parameter of the bound [`ParameterStore`].

use std::borrow::Cow;
use std::collections::HashMap;

use super::params::ParameterStore;
use super::tensor::{matmul_at_into, matmul_bt_into, matmul_into, Tensor};
use crate::error::{Error, Result};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Sigmoid(Var),
    Gelu(Var),
    Relu(Var),
    Log(Var),
    Clamp(Var, f64, f64),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    MaxRows {
        x: Var,
        argmax: Vec<usize>,
    },
    Dropout {
        x: Var,
        scale: Vec<f64>,
    },
    Sum(Var),
    Pick {
        x: Var,
        idx: Vec<usize>,
    },
    Cosine(Var, Var),
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'a> {
    store: Option<&'a ParameterStore>,
    nodes: Vec<Node<'a>>,
    params: HashMap<String, Var>,
    param_names: Vec<(Var, String)>,
}

fn shape_err(what: &str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape(format!("{what}: {:?} vs {:?}", a.shape(), b.shape()))
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParameterStore) -> Self {
        Self {
            store: Some(store),
            nodes: Vec::new(),
            params: HashMap::new(),
            param_names: Vec::new(),
        }
    }

    /// A graph with no bound parameters; only constants can enter it.
    pub fn detached() -> Graph<'static> {
        Graph {
            store: None,
            nodes: Vec::new(),
            params: HashMap::new(),
            param_names: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf bound to a named parameter; repeated calls return the same node.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(v) = self.params.get(name) {
            return Ok(*v);
        }
        let store = self
            .store
            .ok_or_else(|| Error::Config("graph has no parameter store".into()))?;
        let t = store.get(name)?;
        self.nodes.push(Node {
            value: Cow::Borrowed(t),
            op: Op::Leaf,
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(name.to_string(), v);
        self.param_names.push((v, name.to_string()));
        Ok(v)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(t),
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.cols() {
            return Err(shape_err("matmul_bt", ta, tb));
        }
        let (n, k, m) = (ta.rows(), ta.cols(), tb.rows());
        let mut out = vec![0.0; n * m];
        matmul_bt_into(ta.data(), tb.data(), &mut out, n, k, m);
        let out = Tensor::matrix(n, m, out)?;
        Ok(self.push(out, Op::MatMulBt(a, b), &[a, b]))
    }

    fn zip_same(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rows() != tb.rows() || ta.cols() != tb.cols() {
            return Err(shape_err(what, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::matrix(ta.rows(), ta.cols(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a `1 × c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        if tr.len() != ta.cols() {
            return Err(shape_err("add_row", ta, tr));
        }
        let c = ta.cols();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + tr.data()[i % c])
            .collect();
        let out = Tensor::matrix(ta.rows(), c, data)?;
        Ok(self.push(out, Op::AddRow(a, row), &[a, row]))
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|x| f(*x)).collect();
        let out = Tensor::matrix(t.rows(), t.cols(), data).expect("same size");
        self.push(out, op, &[a])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.map(a, Op::Scale(a, s), |x| x * s)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.map(a, Op::AddScalar(a), |x| x + s)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, Op::Tanh(a), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Op::Sigmoid(a), super::sigmoid)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(a, Op::Gelu(a), |x| {
            0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
        })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.map(a, Op::Log(a), f64::ln)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.map(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    /// Row-wise softmax. Columns whose `key_mask` entry is false get weight
    /// exactly zero; a row needs at least one unmasked column.
    pub fn softmax_rows(&mut self, a: Var, key_mask: Option<&[bool]>) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = (t.rows(), t.cols());
        if let Some(m) = key_mask {
            if m.len() != c {
                return Err(Error::Shape(format!("mask length {} for {} columns", m.len(), c)));
            }
            if !m.iter().any(|&b| b) {
                return Err(Error::EmptySequence);
            }
        }
        let valid = |j: usize| key_mask.is_none_or(|m| m[j]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = t.row_slice(i);
            let max = (0..c)
                .filter(|&j| valid(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in (0..c).filter(|&j| valid(j)) {
                let e = (row[j] - max).exp();
                out[i * c + j] = e;
                total += e;
            }
            for v in &mut out[i * c..(i + 1) * c] {
                *v /= total;
            }
        }
        let out = Tensor::matrix(r, c, out)?;
        Ok(self.push(out, Op::SoftmaxRows(a), &[a]))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (r, c) = (t.rows(), t.cols());
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = t.row_slice(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|x| x - lse));
        }
        let out = Tensor::matrix(r, c, out).expect("same size");
        self.push(out, Op::LogSoftmaxRows(a), &[a])
    }

    /// Per-row layer normalization with gain and bias rows.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let (r, c) = (tx.rows(), tx.cols());
        if tg.len() != c || tb.len() != c {
            return Err(shape_err("layer_norm", tx, tg));
        }
        let mut xhat = Vec::with_capacity(r * c);
        let mut inv_std = Vec::with_capacity(r);
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = tx.row_slice(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * inv;
                xhat.push(h);
                out.push(tg.data()[j] * h + tb.data()[j]);
            }
        }
        let out = Tensor::matrix(r, c, out)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// Selects rows of `table` by id.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (vocab, c) = (t.rows(), t.cols());
        let mut out = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= vocab {
                return Err(Error::TokenOutOfRange { id, vocab });
            }
            out.extend_from_slice(t.row_slice(id));
        }
        let out = Tensor::matrix(ids.len(), c, out)?;
        Ok(self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if start + len > t.cols() {
            return Err(Error::Shape(format!("columns {start}..{} of {}", start + len, t.cols())));
        }
        let mut out = Vec::with_capacity(t.rows() * len);
        for i in 0..t.rows() {
            out.extend_from_slice(&t.row_slice(i)[start..start + len]);
        }
        let out = Tensor::matrix(t.rows(), len, out)?;
        Ok(self.push(out, Op::SliceCols { x, start }, &[x]))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if start + len > t.rows() {
            return Err(Error::Shape(format!("rows {start}..{} of {}", start + len, t.rows())));
        }
        let c = t.cols();
        let out = Tensor::matrix(len, c, t.data()[start * c..(start + len) * c].to_vec())?;
        Ok(self.push(out, Op::SliceRows { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        if parts.iter().any(|p| self.value(*p).rows() != rows) {
            return Err(Error::Shape("concat_cols row mismatch".into()));
        }
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for p in parts {
                out.extend_from_slice(self.value(*p).row_slice(i));
            }
        }
        let out = Tensor::matrix(rows, total, out)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        if parts.iter().any(|p| self.value(*p).cols() != cols) {
            return Err(Error::Shape("concat_rows column mismatch".into()));
        }
        let mut out = Vec::new();
        for p in parts {
            out.extend_from_slice(self.value(*p).data());
        }
        let rows = out.len() / cols.max(1);
        let out = Tensor::matrix(rows, cols, out)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Column-wise maximum over all rows, as a `1 × c` row.
    pub fn max_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rows() == 0 {
            return Err(Error::EmptySequence);
        }
        let c = t.cols();
        let mut argmax = vec![0; c];
        let mut out = t.row_slice(0).to_vec();
        for i in 1..t.rows() {
            for (j, v) in t.row_slice(i).iter().enumerate() {
                if *v > out[j] {
                    out[j] = *v;
                    argmax[j] = i;
                }
            }
        }
        Ok(self.push(Tensor::row(out), Op::MaxRows { x, argmax }, &[x]))
    }

    /// Multiplies element-wise by a fixed per-element factor (a scaled keep mask).
    pub fn dropout_mask(&mut self, x: Var, scale: Vec<f64>) -> Result<Var> {
        let t = self.value(x);
        if scale.len() != t.len() {
            return Err(Error::Shape("dropout mask size".into()));
        }
        let data = t.data().iter().zip(&scale).map(|(a, s)| a * s).collect();
        let out = Tensor::matrix(t.rows(), t.cols(), data)?;
        Ok(self.push(out, Op::Dropout { x, scale }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Gathers elements at `(row, col)` positions into a `1 × n` row.
    pub fn pick(&mut self, x: Var, positions: &[(usize, usize)]) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = (t.rows(), t.cols());
        let mut idx = Vec::with_capacity(positions.len());
        for &(i, j) in positions {
            if i >= r || j >= c {
                return Err(Error::Shape(format!("pick ({i},{j}) outside {r}x{c}")));
            }
            idx.push(i * c + j);
        }
        let data = idx.iter().map(|&k| t.data()[k]).collect();
        Ok(self.push(Tensor::row(data), Op::Pick { x, idx }, &[x]))
    }

    /// Cosine similarity of two equally sized tensors, as a `1 × 1` node.
    pub fn cosine(&mut self, u: Var, v: Var) -> Result<Var> {
        let (tu, tv) = (self.value(u), self.value(v));
        if tu.len() != tv.len() {
            return Err(shape_err("cosine", tu, tv));
        }
        let c = super::cosine_similarity(tu.data(), tv.data())?;
        Ok(self.push(Tensor::scalar(c), Op::Cosine(u, v), &[u, v]))
    }

    /// Gradients of the scalar `loss` with respect to every parameter of the
    /// bound store. Parameters the loss does not touch get zero gradients.
    pub fn backward(&self, loss: Var) -> Result<ParameterStore> {
        let store = self
            .store
            .ok_or_else(|| Error::Config("graph has no parameter store".into()))?;
        let grads = self.backward_nodes(loss)?;
        let mut out = store.zeros_like();
        for (v, name) in &self.param_names {
            if let Some(g) = &grads[v.0] {
                let slot = out.get_mut(name)?;
                slot.data_mut().copy_from_slice(g);
                if !slot.is_finite() {
                    return Err(Error::NonFinite(format!("gradient of `{name}`")));
                }
            }
        }
        Ok(out)
    }

    /// Gradient of a scalar node with respect to an arbitrary node.
    pub fn grad_of(&self, loss: Var, wrt: Var) -> Result<Tensor> {
        let grads = self.backward_nodes(loss)?;
        let t = self.value(wrt);
        let data = grads[wrt.0].clone().unwrap_or_else(|| vec![0.0; t.len()]);
        Tensor::new(t.shape().to_vec(), data)
    }

    fn backward_nodes(&self, loss: Var) -> Result<Vec<Option<Vec<f64>>>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape("backward needs a scalar loss".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.propagate(i, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        Ok(grads)
    }

    fn propagate(&self, i: usize, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.as_ref();
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].needs_grad {
                return;
            }
            let n = nodes[v.0].value.len();
            let g = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
            f(g);
        };
        let val = |v: Var| nodes[v.0].value.as_ref();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (n, k, m) = (ta.rows(), ta.cols(), tb.cols());
                acc(*a, &mut |g| matmul_bt_into(dy, tb.data(), g, n, m, k));
                acc(*b, &mut |g| matmul_at_into(ta.data(), dy, g, n, k, m));
            }
            Op::MatMulBt(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (n, k, m) = (ta.rows(), ta.cols(), tb.rows());
                acc(*a, &mut |g| matmul_into(dy, tb.data(), g, n, m, k));
                acc(*b, &mut |g| matmul_at_into(dy, ta.data(), g, n, m, k));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |g| add_into(g, dy));
                acc(*b, &mut |g| add_into(g, dy));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |g| add_into(g, dy));
                acc(*b, &mut |g| g.iter_mut().zip(dy).for_each(|(x, d)| *x -= d));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                acc(*a, &mut |g| {
                    for ((x, d), o) in g.iter_mut().zip(dy).zip(tb.data()) {
                        *x += d * o;
                    }
                });
                acc(*b, &mut |g| {
                    for ((x, d), o) in g.iter_mut().zip(dy).zip(ta.data()) {
                        *x += d * o;
                    }
                });
            }
            Op::AddRow(a, row) => {
                acc(*a, &mut |g| add_into(g, dy));
                let c = val(*row).len();
                acc(*row, &mut |g| {
                    for (k, d) in dy.iter().enumerate() {
                        g[k % c] += d;
                    }
                });
            }
            Op::Scale(a, s) => acc(*a, &mut |g| g.iter_mut().zip(dy).for_each(|(x, d)| *x += s * d)),
            Op::AddScalar(a) => acc(*a, &mut |g| add_into(g, dy)),
            Op::Tanh(a) => acc(*a, &mut |g| {
                for ((x, d), yv) in g.iter_mut().zip(dy).zip(y.data()) {
                    *x += d * (1.0 - yv * yv);
                }
            }),
            Op::Sigmoid(a) => acc(*a, &mut |g| {
                for ((x, d), yv) in g.iter_mut().zip(dy).zip(y.data()) {
                    *x += d * yv * (1.0 - yv);
                }
            }),
            Op::Gelu(a) => {
                let ta = val(*a);
                acc(*a, &mut |g| {
                    for ((x, d), &v) in g.iter_mut().zip(dy).zip(ta.data()) {
                        let t = (GELU_C * (v + GELU_A * v * v * v)).tanh();
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                        *x += d * (0.5 * (1.0 + t) + 0.5 * v * dt);
                    }
                });
            }
            Op::Relu(a) => {
                let ta = val(*a);
                acc(*a, &mut |g| {
                    for ((x, d), v) in g.iter_mut().zip(dy).zip(ta.data()) {
                        if *v > 0.0 {
                            *x += d;
                        }
                    }
                });
            }
            Op::Log(a) => {
                let ta = val(*a);
                acc(*a, &mut |g| {
                    for ((x, d), v) in g.iter_mut().zip(dy).zip(ta.data()) {
                        *x += d / v;
                    }
                });
            }
            Op::Clamp(a, lo, hi) => {
                let ta = val(*a);
                acc(*a, &mut |g| {
                    for ((x, d), v) in g.iter_mut().zip(dy).zip(ta.data()) {
                        if *v >= *lo && *v <= *hi {
                            *x += d;
                        }
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let c = y.cols();
                acc(*a, &mut |g| {
                    for r in 0..y.rows() {
                        let ys = &y.data()[r * c..(r + 1) * c];
                        let ds = &dy[r * c..(r + 1) * c];
                        let dot: f64 = ys.iter().zip(ds).map(|(p, q)| p * q).sum();
                        for j in 0..c {
                            g[r * c + j] += ys[j] * (ds[j] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmaxRows(a) => {
                let c = y.cols();
                acc(*a, &mut |g| {
                    for r in 0..y.rows() {
                        let ys = &y.data()[r * c..(r + 1) * c];
                        let ds = &dy[r * c..(r + 1) * c];
                        let total: f64 = ds.iter().sum();
                        for j in 0..c {
                            g[r * c + j] += ds[j] - ys[j].exp() * total;
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let c = y.cols();
                let tg = val(*gamma);
                acc(*beta, &mut |g| {
                    for (k, d) in dy.iter().enumerate() {
                        g[k % c] += d;
                    }
                });
                acc(*gamma, &mut |g| {
                    for (k, d) in dy.iter().enumerate() {
                        g[k % c] += d * xhat[k];
                    }
                });
                acc(*x, &mut |g| {
                    let n = c as f64;
                    for r in 0..y.rows() {
                        let span = r * c..(r + 1) * c;
                        let dxhat: Vec<f64> = dy[span.clone()]
                            .iter()
                            .zip(tg.data())
                            .map(|(d, gm)| d * gm)
                            .collect();
                        let h = &xhat[span];
                        let s1: f64 = dxhat.iter().sum();
                        let s2: f64 = dxhat.iter().zip(h).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            g[r * c + j] += inv_std[r] / n * (n * dxhat[j] - s1 - h[j] * s2);
                        }
                    }
                });
            }
            Op::Gather { table, ids } => {
                let c = y.cols();
                acc(*table, &mut |g| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut g[id * c..(id + 1) * c], &dy[r * c..(r + 1) * c]);
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let total = val(*x).cols();
                let len = y.cols();
                acc(*x, &mut |g| {
                    for r in 0..y.rows() {
                        add_into(
                            &mut g[r * total + start..r * total + start + len],
                            &dy[r * len..(r + 1) * len],
                        );
                    }
                });
            }
            Op::SliceRows { x, start } => {
                let c = y.cols();
                acc(*x, &mut |g| add_into(&mut g[start * c..start * c + dy.len()], dy));
            }
            Op::ConcatCols(parts) => {
                let total = y.cols();
                let mut offset = 0;
                for p in parts {
                    let w = val(*p).cols();
                    acc(*p, &mut |g| {
                        for r in 0..y.rows() {
                            add_into(
                                &mut g[r * w..(r + 1) * w],
                                &dy[r * total + offset..r * total + offset + w],
                            );
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = val(*p).len();
                    acc(*p, &mut |g| add_into(g, &dy[offset..offset + n]));
                    offset += n;
                }
            }
            Op::MaxRows { x, argmax } => {
                let c = y.cols();
                acc(*x, &mut |g| {
                    for (j, &r) in argmax.iter().enumerate() {
                        g[r * c + j] += dy[j];
                    }
                });
            }
            Op::Dropout { x, scale } => acc(*x, &mut |g| {
                for ((a, d), s) in g.iter_mut().zip(dy).zip(scale) {
                    *a += d * s;
                }
            }),
            Op::Sum(x) => acc(*x, &mut |g| g.iter_mut().for_each(|a| *a += dy[0])),
            Op::Pick { x, idx } => acc(*x, &mut |g| {
                for (k, &p) in idx.iter().enumerate() {
                    g[p] += dy[k];
                }
            }),
            Op::Cosine(u, v) => {
                let (tu, tv) = (val(*u), val(*v));
                let nu = norm(tu.data());
                let nv = norm(tv.data());
                let c = y.data()[0];
                let d = dy[0];
                acc(*u, &mut |g| {
                    for ((a, ui), vi) in g.iter_mut().zip(tu.data()).zip(tv.data()) {
                        *a += d * (vi / (nu * nv) - c * ui / (nu * nu));
                    }
                });
                acc(*v, &mut |g| {
                    for ((a, vi), ui) in g.iter_mut().zip(tv.data()).zip(tu.data()) {
                        *a += d * (ui / (nu * nv) - c * vi / (nv * nv));
                    }
                });
            }
        }
    }
}

fn add_into(g: &mut [f64], d: &[f64]) {
    for (a, b) in g.iter_mut().zip(d) {
        *a += b;
    }
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}
