//! Reverse-mode autodiff tape.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! evaluation order, so a single reverse sweep over the node list is a valid
//! topological order for backpropagation.

use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use super::tensor::{matmul_into, moments, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        // cached per-row (mean, 1/std)
        stats: Vec<(f64, f64)>,
    },
    Transpose(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    MeanRows(Var),
    BroadcastRows(Var),
    PickCols(Var, Vec<usize>),
    ScatterCols(Var, Vec<usize>),
    LogClamp(Var, f64),
    WeightedSum(Var, Vec<f64>),
    Sum(Var),
    MaskMul(Var, Vec<f64>),
    CosineDistance(Var, Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, graph: &Graph, v: Var) -> Option<Tensor> {
        self.grads[v.0].as_ref().map(|g| {
            Tensor::new(graph.nodes[v.0].value.shape().to_vec(), g.clone())
                .expect("gradient shape")
        })
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
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

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf tracked for gradients that is not backed by a parameter store.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf node for a stored parameter. Repeated calls within one graph
    /// return the same node, so gradients from every use accumulate.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Leaf, true);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(shape_err("matmul", ta, tb));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(ta.data(), tb.data(), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// `a[r×c] + row[1×c]`, broadcasting the row.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        if tr.rows() != 1 || tr.cols() != ta.cols() {
            return Err(shape_err("add_row", ta, tr));
        }
        let c = ta.cols();
        let mut data = ta.data().to_vec();
        for chunk in data.chunks_mut(c.max(1)) {
            for (v, &b) in chunk.iter_mut().zip(tr.data()) {
                *v += b;
            }
        }
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, row]);
        Ok(self.push(value, Op::AddRow(a, row), rg))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).map(|v| v * k);
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, k), rg)
    }

    /// Multiplies `a` by the trainable scalar `s[1×1]`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        let ts = self.value(s);
        if ts.numel() != 1 {
            return Err(shape_err("scale_by", self.value(a), ts));
        }
        let k = ts.item();
        let value = self.value(a).map(|v| v * k);
        let rg = self.rg(&[a, s]);
        Ok(self.push(value, Op::ScaleBy(a, s), rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).map(f);
        let rg = self.rg(&[a]);
        self.push(value, op, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, |v| 1.0 / (1.0 + (-v).exp()), Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |v| if v > 0.0 { v } else { 0.0 }, Op::Relu(a))
    }

    /// `ln(max(x, floor))`; gradient is zero where the floor is active.
    pub fn log_clamp(&mut self, a: Var, floor: f64) -> Var {
        self.unary(a, |v| v.max(floor).ln(), Op::LogClamp(a, floor))
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let value = super::tensor::softmax(self.value(a));
        let rg = self.rg(&[a]);
        self.push(value, Op::Softmax(a), rg)
    }

    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let d = tx.cols();
        if tg.numel() != d || tb.numel() != d {
            return Err(shape_err("layernorm", tx, tg));
        }
        let mut data = tx.data().to_vec();
        let mut stats = Vec::with_capacity(tx.rows());
        for row in data.chunks_mut(d.max(1)) {
            let (mean, inv) = moments(row);
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * inv * tg.data()[j] + tb.data()[j];
            }
            stats.push((mean, inv));
        }
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(value, Op::LayerNorm { x, gain, bias, stats }, rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = super::tensor::transpose(self.value(a));
        let rg = self.rg(&[a]);
        self.push(value, Op::Transpose(a), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let mut total = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows {
                return Err(shape_err("concat_cols", self.value(parts[0]), t));
            }
            total += t.cols();
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = Tensor::new(vec![rows, total], data)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(shape_err("concat_rows", self.value(parts[0]), t));
            }
            data.extend_from_slice(t.data());
            rows += t.rows();
        }
        let value = Tensor::new(vec![rows, cols], data)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.value(a).slice_rows(start, len)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::SliceRows(a, start), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        if start + len > t.cols() {
            return Err(Error::Shape {
                op: "slice_cols",
                lhs: t.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let mut data = Vec::with_capacity(t.rows() * len);
        for r in 0..t.rows() {
            data.extend_from_slice(&t.row(r)[start..start + len]);
        }
        let value = Tensor::new(vec![t.rows(), len], data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::SliceCols(a, start), rg))
    }

    /// Mean over rows: `[r×c] -> [1×c]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (r, c) = (t.rows(), t.cols());
        let mut data = vec![0.0; c];
        for i in 0..r {
            for (d, &v) in data.iter_mut().zip(t.row(i)) {
                *d += v;
            }
        }
        for d in &mut data {
            *d /= r as f64;
        }
        let value = Tensor::row_vector(data);
        let rg = self.rg(&[a]);
        self.push(value, Op::MeanRows(a), rg)
    }

    /// Repeats a `[1×c]` row `rows` times.
    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Result<Var> {
        let t = self.value(a);
        if t.rows() != 1 {
            return Err(Error::Shape {
                op: "broadcast_rows",
                lhs: t.shape().to_vec(),
                rhs: vec![rows],
            });
        }
        let mut data = Vec::with_capacity(rows * t.cols());
        for _ in 0..rows {
            data.extend_from_slice(t.data());
        }
        let value = Tensor::new(vec![rows, t.cols()], data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::BroadcastRows(a), rg))
    }

    /// Selects columns `idx` of a `[1×n]` row.
    pub fn pick_cols(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if t.rows() != 1 || idx.iter().any(|&i| i >= t.cols()) {
            return Err(Error::Shape {
                op: "pick_cols",
                lhs: t.shape().to_vec(),
                rhs: idx.to_vec(),
            });
        }
        let value = Tensor::row_vector(idx.iter().map(|&i| t.data()[i]).collect());
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::PickCols(a, idx.to_vec()), rg))
    }

    /// Places a `[1×k]` row at columns `idx` of a zero `[1×width]` row.
    pub fn scatter_cols(&mut self, a: Var, idx: &[usize], width: usize) -> Result<Var> {
        let t = self.value(a);
        if t.rows() != 1 || t.cols() != idx.len() || idx.iter().any(|&i| i >= width) {
            return Err(Error::Shape {
                op: "scatter_cols",
                lhs: t.shape().to_vec(),
                rhs: vec![idx.len(), width],
            });
        }
        let mut data = vec![0.0; width];
        for (k, &i) in idx.iter().enumerate() {
            data[i] = t.data()[k];
        }
        let value = Tensor::row_vector(data);
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::ScatterCols(a, idx.to_vec()), rg))
    }

    /// `Σ_i w_i a_i` over all elements, as a `[1×1]` scalar.
    pub fn weighted_sum(&mut self, a: Var, weights: Vec<f64>) -> Result<Var> {
        let t = self.value(a);
        if weights.len() != t.numel() {
            return Err(Error::Shape {
                op: "weighted_sum",
                lhs: t.shape().to_vec(),
                rhs: vec![weights.len()],
            });
        }
        let s = t.data().iter().zip(&weights).map(|(x, w)| x * w).sum();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum(a, weights), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Elementwise product with a constant mask (dropout).
    pub fn mask_mul(&mut self, a: Var, mask: Vec<f64>) -> Result<Var> {
        let t = self.value(a);
        if mask.len() != t.numel() {
            return Err(Error::Shape {
                op: "mask_mul",
                lhs: t.shape().to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let data = t.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::MaskMul(a, mask), rg))
    }

    /// `1 - a·b / (|a||b|)` as a `[1×1]` scalar. If either vector is zero
    /// the value is 1 and no gradient flows.
    pub fn cosine_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.numel() != tb.numel() {
            return Err(shape_err("cosine_distance", ta, tb));
        }
        let (dot, na, nb) = cos_parts(ta.data(), tb.data());
        let value = if na == 0.0 || nb == 0.0 {
            log::debug!("cosine distance of a zero vector; loss fixed at 1");
            1.0
        } else {
            1.0 - dot / (na * nb)
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::scalar(value), Op::CosineDistance(a, b), rg))
    }

    /// Reverse sweep from a scalar `loss` node (seed gradient 1).
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0; self.nodes[loss.0].value.numel()]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &node.value;
        let needs = |v: &Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if needs(a) {
                    // dA = G @ Bᵀ
                    let ga = accumulate(&mut grads[a.0], m * k);
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i * n + j] * tb.data()[p * n + j];
                            }
                            ga[i * k + p] += s;
                        }
                    }
                }
                if needs(b) {
                    // dB = Aᵀ @ G
                    let gb = accumulate(&mut grads[b.0], k * n);
                    for i in 0..m {
                        for p in 0..k {
                            let av = ta.data()[i * k + p];
                            for j in 0..n {
                                gb[p * n + j] += av * g[i * n + j];
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if needs(v) {
                        let gv = accumulate(&mut grads[v.0], g.len());
                        for (x, y) in gv.iter_mut().zip(g) {
                            *x += y;
                        }
                    }
                }
            }
            Op::Sub(a, b) => {
                if needs(a) {
                    let ga = accumulate(&mut grads[a.0], g.len());
                    for (x, y) in ga.iter_mut().zip(g) {
                        *x += y;
                    }
                }
                if needs(b) {
                    let gb = accumulate(&mut grads[b.0], g.len());
                    for (x, y) in gb.iter_mut().zip(g) {
                        *x -= y;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                if needs(a) {
                    let ga = accumulate(&mut grads[a.0], g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * tb[i];
                    }
                }
                if needs(b) {
                    let gb = accumulate(&mut grads[b.0], g.len());
                    for i in 0..g.len() {
                        gb[i] += g[i] * ta[i];
                    }
                }
            }
            Op::AddRow(a, row) => {
                if needs(a) {
                    let ga = accumulate(&mut grads[a.0], g.len());
                    for (x, y) in ga.iter_mut().zip(g) {
                        *x += y;
                    }
                }
                if needs(row) {
                    let c = out.cols();
                    let gr = accumulate(&mut grads[row.0], c);
                    for chunk in g.chunks(c.max(1)) {
                        for (x, y) in gr.iter_mut().zip(chunk) {
                            *x += y;
                        }
                    }
                }
            }
            Op::Scale(a, k) => {
                let ga = accumulate(&mut grads[a.0], g.len());
                for (x, y) in ga.iter_mut().zip(g) {
                    *x += k * y;
                }
            }
            Op::ScaleBy(a, s) => {
                let k = self.value(*s).item();
                if needs(a) {
                    let ga = accumulate(&mut grads[a.0], g.len());
                    for (x, y) in ga.iter_mut().zip(g) {
                        *x += k * y;
                    }
                }
                if needs(s) {
                    let ta = self.value(*a).data();
                    let d: f64 = ta.iter().zip(g).map(|(x, y)| x * y).sum();
                    accumulate(&mut grads[s.0], 1)[0] += d;
                }
            }
            Op::Sigmoid(a) => {
                let ga = accumulate(&mut grads[a.0], g.len());
                for i in 0..g.len() {
                    let y = out.data()[i];
                    ga[i] += g[i] * y * (1.0 - y);
                }
            }
            Op::Tanh(a) => {
                let ga = accumulate(&mut grads[a.0], g.len());
                for i in 0..g.len() {
                    let y = out.data()[i];
                    ga[i] += g[i] * (1.0 - y * y);
                }
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let ga = accumulate(&mut grads[a.0], g.len());
                for i in 0..g.len() {
                    if x[i] > 0.0 {
                        ga[i] += g[i];
                    }
                }
            }
            Op::LogClamp(a, floor) => {
                let x = self.value(*a).data();
                let ga = accumulate(&mut grads[a.0], g.len());
                for i in 0..g.len() {
                    if x[i] > *floor {
                        ga[i] += g[i] / x[i];
                    }
                }
            }
            Op::Softmax(a) => {
                let c = out.cols();
                let ga = accumulate(&mut grads[a.0], g.len());
                for ((y, gy), gx) in out
                    .data()
                    .chunks(c)
                    .zip(g.chunks(c))
                    .zip(ga.chunks_mut(c))
                {
                    let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        gx[j] += y[j] * (gy[j] - dot);
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, stats } => {
                let tx = self.value(*x).data();
                let tg = self.value(*gain).data();
                let d = tg.len();
                let dn = d as f64;
                if needs(gain) || needs(bias) {
                    let mut dg = vec![0.0; d];
                    let mut db = vec![0.0; d];
                    for (r, &(mean, inv)) in stats.iter().enumerate() {
                        for j in 0..d {
                            let xhat = (tx[r * d + j] - mean) * inv;
                            dg[j] += g[r * d + j] * xhat;
                            db[j] += g[r * d + j];
                        }
                    }
                    if needs(gain) {
                        for (x, y) in accumulate(&mut grads[gain.0], d).iter_mut().zip(&dg) {
                            *x += y;
                        }
                    }
                    if needs(bias) {
                        for (x, y) in accumulate(&mut grads[bias.0], d).iter_mut().zip(&db) {
                            *x += y;
                        }
                    }
                }
                if needs(x) {
                    let gx = accumulate(&mut grads[x.0], g.len());
                    for (r, &(mean, inv)) in stats.iter().enumerate() {
                        let row = r * d..(r + 1) * d;
                        let mut sum_gh = 0.0;
                        let mut sum_gh_xhat = 0.0;
                        for j in 0..d {
                            let gh = g[row.start + j] * tg[j];
                            let xhat = (tx[row.start + j] - mean) * inv;
                            sum_gh += gh;
                            sum_gh_xhat += gh * xhat;
                        }
                        for j in 0..d {
                            let gh = g[row.start + j] * tg[j];
                            let xhat = (tx[row.start + j] - mean) * inv;
                            gx[row.start + j] += inv * (gh - sum_gh / dn - xhat * sum_gh_xhat / dn);
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                // out is [c×r] of input [r×c]
                let (r, c) = (out.cols(), out.rows());
                let ga = accumulate(&mut grads[a.0], g.len());
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] += g[j * r + i];
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut offset = 0;
                for p in parts {
                    let t = self.value(*p);
                    let (rows, c) = (t.rows(), t.cols());
                    if needs(p) {
                        let gp = accumulate(&mut grads[p.0], rows * c);
                        for r in 0..rows {
                            for j in 0..c {
                                gp[r * c + j] += g[r * total + offset + j];
                            }
                        }
                    }
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).numel();
                    if needs(p) {
                        let gp = accumulate(&mut grads[p.0], n);
                        for (x, y) in gp.iter_mut().zip(&g[offset..offset + n]) {
                            *x += y;
                        }
                    }
                    offset += n;
                }
            }
            Op::SliceRows(a, start) => {
                let c = out.cols();
                let n = self.value(*a).numel();
                let ga = accumulate(&mut grads[a.0], n);
                for (x, y) in ga[start * c..start * c + g.len()].iter_mut().zip(g) {
                    *x += y;
                }
            }
            Op::SliceCols(a, start) => {
                let ta = self.value(*a);
                let (rows, c) = (ta.rows(), ta.cols());
                let len = out.cols();
                let ga = accumulate(&mut grads[a.0], rows * c);
                for r in 0..rows {
                    for j in 0..len {
                        ga[r * c + start + j] += g[r * len + j];
                    }
                }
            }
            Op::MeanRows(a) => {
                let ta = self.value(*a);
                let (rows, c) = (ta.rows(), ta.cols());
                let ga = accumulate(&mut grads[a.0], rows * c);
                for r in 0..rows {
                    for j in 0..c {
                        ga[r * c + j] += g[j] / rows as f64;
                    }
                }
            }
            Op::BroadcastRows(a) => {
                let c = out.cols();
                let ga = accumulate(&mut grads[a.0], c);
                for chunk in g.chunks(c.max(1)) {
                    for (x, y) in ga.iter_mut().zip(chunk) {
                        *x += y;
                    }
                }
            }
            Op::PickCols(a, idx) => {
                let n = self.value(*a).numel();
                let ga = accumulate(&mut grads[a.0], n);
                for (k, &i) in idx.iter().enumerate() {
                    ga[i] += g[k];
                }
            }
            Op::ScatterCols(a, idx) => {
                let ga = accumulate(&mut grads[a.0], idx.len());
                for (k, &i) in idx.iter().enumerate() {
                    ga[k] += g[i];
                }
            }
            Op::WeightedSum(a, w) => {
                let ga = accumulate(&mut grads[a.0], w.len());
                for (x, wi) in ga.iter_mut().zip(w) {
                    *x += g[0] * wi;
                }
            }
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                for x in accumulate(&mut grads[a.0], n).iter_mut() {
                    *x += g[0];
                }
            }
            Op::MaskMul(a, mask) => {
                let ga = accumulate(&mut grads[a.0], g.len());
                for i in 0..g.len() {
                    ga[i] += g[i] * mask[i];
                }
            }
            Op::CosineDistance(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                let (dot, na, nb) = cos_parts(ta, tb);
                if na == 0.0 || nb == 0.0 {
                    return;
                }
                // d/da (a·b/(|a||b|)) = b/(|a||b|) - (a·b) a/(|a|^3 |b|)
                let c = dot / (na * nb);
                if needs(a) {
                    let ga = accumulate(&mut grads[a.0], ta.len());
                    for i in 0..ta.len() {
                        ga[i] -= g[0] * (tb[i] / (na * nb) - c * ta[i] / (na * na));
                    }
                }
                if needs(b) {
                    let gb = accumulate(&mut grads[b.0], tb.len());
                    for i in 0..tb.len() {
                        gb[i] -= g[0] * (ta[i] / (na * nb) - c * tb[i] / (nb * nb));
                    }
                }
            }
        }
    }

    /// Gradients of every parameter node touched by this graph.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<(ParamId, Tensor)> = self
            .params
            .iter()
            .map(|(&id, &v)| {
                let g = grads
                    .get(self, v)
                    .unwrap_or_else(|| Tensor::zeros(self.value(v).shape()));
                (id, g)
            })
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}

fn cos_parts(a: &[f64], b: &[f64]) -> (f64, f64, f64) {
    let dot = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (dot, na, nb)
}
