//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation of a forward pass as a node holding its
//! output value. Nodes are appended after their operands, so the node list is
//! already a topological order and [`Graph::backward`] walks it once in reverse.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{matmul_into, Tensor};

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
    Gather {
        param: usize,
        ids: Vec<usize>,
        table_rows: usize,
    },
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Affine(Var, f64),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Softmax { x: Var, axis: usize },
    MaskRows { x: Var, keep: Vec<bool> },
    ScaleElems { x: Var, factors: Vec<f64> },
    RowMax { x: Var, argmax: Vec<usize> },
    Conv1d { x: Var, kernel: Var },
    SelectRows { x: Var, rows: Vec<usize> },
    BroadcastRows { x: Var },
    Reshape(Var),
    Sum(Var),
    Nll { probs: Var, labels: Vec<usize>, clamp: f64 },
    MeanRows { x: Var, keep: Vec<bool> },
    MaxRows { x: Var, argmax: Vec<usize> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Gather { .. } => "gather",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddBias(..) => "add_bias",
            Op::Affine(..) => "affine",
            Op::Relu(_) => "relu",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Concat { .. } => "concat",
            Op::Softmax { .. } => "softmax",
            Op::MaskRows { .. } => "mask_rows",
            Op::ScaleElems { .. } => "scale",
            Op::RowMax { .. } => "row_max",
            Op::Conv1d { .. } => "conv1d",
            Op::SelectRows { .. } => "select_rows",
            Op::BroadcastRows { .. } => "broadcast_rows",
            Op::Reshape(_) => "reshape",
            Op::Sum(_) => "sum",
            Op::Nll { .. } => "nll",
            Op::MeanRows { .. } => "mean_rows",
            Op::MaxRows { .. } => "max_rows",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    param: Option<usize>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// A single forward/backward computation. Not shared across threads.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<usize, Var>,
    tags: Vec<(String, Var)>,
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            param: None,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A leaf that does not receive gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that receives gradients.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Registers trainable parameter `index`; repeated calls return the same node.
    pub fn param(&mut self, index: usize, value: &Tensor) -> Var {
        if let Some(&v) = self.params.get(&index) {
            return v;
        }
        let v = self.push(value.clone(), Op::Leaf, true);
        self.nodes[v.0].param = Some(index);
        self.params.insert(index, v);
        v
    }

    /// Looks up rows `ids` of the parameter table `table` (registered as `index`).
    /// The table itself is not copied onto the graph.
    pub fn gather(&mut self, index: usize, table: &Tensor, ids: &[usize], trainable: bool) -> Result<Var> {
        if table.rank() != 2 || ids.is_empty() {
            return Err(Error::dim("gather", table.shape(), &[ids.len()]));
        }
        let cols = table.cols();
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= table.rows() {
                return Err(Error::dim("gather", table.shape(), &[id]));
            }
            data.extend_from_slice(table.row(id));
        }
        let value = Tensor::new(&[ids.len(), cols], data)?;
        Ok(self.push(
            value,
            Op::Gather {
                param: index,
                ids: ids.to_vec(),
                table_rows: table.rows(),
            },
            trainable,
        ))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Attaches a human-readable label to a node.
    pub fn tag(&mut self, v: Var, label: impl Into<String>) -> Var {
        self.tags.push((label.into(), v));
        v
    }

    pub fn tagged(&self, label: &str) -> Option<Var> {
        self.tags.iter().find(|(l, _)| l == label).map(|&(_, v)| v)
    }

    pub fn tags(&self) -> impl Iterator<Item = &str> {
        self.tags.iter().map(|(l, _)| l.as_str())
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    // ---- forward ops ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Transpose(a), rg))
    }

    fn zip(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim(name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Adds a bias vector to every row of a matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tx.rank() != 2 || tb.len() != tx.cols() {
            return Err(Error::dim("add_bias", tx.shape(), tb.shape()));
        }
        let c = tx.cols();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + tb.data()[i % c])
            .collect();
        let out = Tensor::new(tx.shape(), data)?;
        let rg = self.rg(&[x, bias]);
        Ok(self.push(out, Op::AddBias(x, bias), rg))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let out = self.value(x).map(|v| scale * v + shift);
        let rg = self.rg(&[x]);
        self.push(out, Op::Affine(x, scale), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        let rg = self.rg(&[x]);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::tanh);
        let rg = self.rg(&[x]);
        self.push(out, Op::Tanh(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let rg = self.rg(&[x]);
        self.push(out, Op::Sigmoid(x), rg)
    }

    /// Concatenates vectors (axis 0) or matrices along `axis`.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .value(*parts.first().ok_or_else(|| Error::Config("concat of nothing".into()))?)
            .shape()
            .to_vec();
        let rank = first.len();
        if axis >= rank || rank > 2 {
            return Err(Error::dim("concat", &first, &[axis]));
        }
        for &p in &parts[1..] {
            let s = self.value(p).shape();
            let compatible = s.len() == rank && (0..rank).all(|d| d == axis || s[d] == first[d]);
            if !compatible {
                return Err(Error::dim("concat", &first, s));
            }
        }
        let out = if rank == 1 || axis == 0 {
            let mut data = Vec::new();
            let mut lead = 0;
            for &p in parts {
                data.extend_from_slice(self.value(p).data());
                lead += self.value(p).shape()[0];
            }
            let mut shape = first.clone();
            shape[0] = lead;
            Tensor::new(&shape, data)?
        } else {
            let rows = first[0];
            let total: usize = parts.iter().map(|&p| self.value(p).shape()[1]).sum();
            let mut data = Vec::with_capacity(rows * total);
            for i in 0..rows {
                for &p in parts {
                    data.extend_from_slice(self.value(p).row(i));
                }
            }
            Tensor::new(&[rows, total], data)?
        };
        let rg = self.rg(parts);
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Numerically stable softmax along `axis` (vectors use axis 0).
    ///
    /// `mask`, when given, has one entry per element of a slice; masked entries
    /// get weight exactly zero. A slice with no unmasked entry becomes uniform.
    pub fn softmax(&mut self, x: Var, axis: usize, mask: Option<&[bool]>) -> Result<Var> {
        let tx = self.value(x);
        let geom = SliceGeom::new(tx.shape(), axis)?;
        if let Some(m) = mask {
            if m.len() != geom.len {
                return Err(Error::dim("softmax mask", tx.shape(), &[m.len()]));
            }
        }
        let mut out = vec![0.0; tx.len()];
        for s in 0..geom.count {
            softmax_slice(tx.data(), &mut out, &geom, s, mask);
        }
        let out = Tensor::new(tx.shape(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Softmax { x, axis }, rg))
    }

    /// Zeroes the rows of a matrix where `keep` is false.
    pub fn mask_rows(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 2 || keep.len() != tx.rows() {
            return Err(Error::dim("mask_rows", tx.shape(), &[keep.len()]));
        }
        let mut out = tx.clone();
        for (i, &k) in keep.iter().enumerate() {
            if !k {
                out.row_mut(i).fill(0.0);
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            out,
            Op::MaskRows {
                x,
                keep: keep.to_vec(),
            },
            rg,
        ))
    }

    /// Elementwise product with a constant factor array.
    pub fn scale_elems(&mut self, x: Var, factors: Vec<f64>) -> Result<Var> {
        let tx = self.value(x);
        if factors.len() != tx.len() {
            return Err(Error::dim("scale_elems", tx.shape(), &[factors.len()]));
        }
        let data = tx.data().iter().zip(&factors).map(|(a, b)| a * b).collect();
        let out = Tensor::new(tx.shape(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::ScaleElems { x, factors }, rg))
    }

    /// Inverted dropout: identity when `rate == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if rate <= 0.0 {
            return Ok(x);
        }
        if rate >= 1.0 {
            return Err(Error::Config(format!("dropout rate {rate} outside [0,1)")));
        }
        let keep = 1.0 / (1.0 - rate);
        let factors = (0..self.value(x).len())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        self.scale_elems(x, factors)
    }

    /// Per-row maximum over the columns where `col_mask` is true; output `[rows, 1]`.
    pub fn row_max(&mut self, x: Var, col_mask: Option<&[bool]>) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 2 || col_mask.is_some_and(|m| m.len() != tx.cols()) {
            return Err(Error::dim("row_max", tx.shape(), &[]));
        }
        let (r, c) = (tx.rows(), tx.cols());
        let mut out = vec![0.0; r];
        let mut argmax = vec![0; r];
        for i in 0..r {
            let row = tx.row(i);
            let mut best: Option<usize> = None;
            for j in 0..c {
                if col_mask.is_some_and(|m| !m[j]) {
                    continue;
                }
                if best.is_none_or(|b| row[j] > row[b]) {
                    best = Some(j);
                }
            }
            let b = best.unwrap_or(0);
            argmax[i] = b;
            out[i] = row[b];
        }
        let out = Tensor::new(&[r, 1], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::RowMax { x, argmax }, rg))
    }

    /// Same-length 1-D cross-correlation of `x: [len, d_in]` with `kernel: [w, d_in, d_out]`,
    /// zero padded by `(w - 1) / 2` on both ends. `w` must be odd.
    pub fn conv1d(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let (tx, tk) = (self.value(x), self.value(kernel));
        if tk.rank() != 3 || tx.rank() != 2 || tk.shape()[1] != tx.cols() {
            return Err(Error::dim("conv1d", tx.shape(), tk.shape()));
        }
        let (w, d_in, d_out) = (tk.shape()[0], tk.shape()[1], tk.shape()[2]);
        if w % 2 == 0 {
            return Err(Error::Config(format!("conv1d kernel width {w} must be odd")));
        }
        let len = tx.rows();
        let half = (w / 2) as isize;
        let mut out = vec![0.0; len * d_out];
        for s in 0..w {
            let shift = s as isize - half;
            let k_s = &tk.data()[s * d_in * d_out..(s + 1) * d_in * d_out];
            for t in 0..len {
                let src = t as isize + shift;
                if src < 0 || src >= len as isize {
                    continue;
                }
                let x_row = tx.row(src as usize);
                matmul_into(x_row, k_s, &mut out[t * d_out..(t + 1) * d_out], 1, d_in, d_out);
            }
        }
        let out = Tensor::new(&[len, d_out], out)?;
        let rg = self.rg(&[x, kernel]);
        Ok(self.push(out, Op::Conv1d { x, kernel }, rg))
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 2 || rows.is_empty() || rows.iter().any(|&r| r >= tx.rows()) {
            return Err(Error::dim("select_rows", tx.shape(), rows));
        }
        let data = rows.iter().flat_map(|&r| tx.row(r).iter().copied()).collect();
        let out = Tensor::new(&[rows.len(), tx.cols()], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            out,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Tiles a `[1, d]` row `n` times.
    pub fn broadcast_rows(&mut self, x: Var, n: usize) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 2 || tx.rows() != 1 || n == 0 {
            return Err(Error::dim("broadcast_rows", tx.shape(), &[n]));
        }
        let data = tx.data().repeat(n);
        let out = Tensor::new(&[n, tx.cols()], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::BroadcastRows { x }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.affine(s, 1.0 / n, 0.0)
    }

    /// `-Σ_i ln max(probs[i, labels[i]], clamp)` over the rows of a probability matrix.
    pub fn nll(&mut self, probs: Var, labels: &[usize], clamp: f64) -> Result<Var> {
        let tp = self.value(probs);
        if tp.rank() != 2 || tp.rows() != labels.len() {
            return Err(Error::dim("nll", tp.shape(), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= tp.cols()) {
            return Err(Error::InvalidData(format!(
                "label {bad} out of range for {} classes",
                tp.cols()
            )));
        }
        let loss: f64 = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| {
                let p = tp.at(i, l);
                -(if p < clamp { clamp } else { p }).ln()
            })
            .sum();
        let rg = self.rg(&[probs]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Nll {
                probs,
                labels: labels.to_vec(),
                clamp,
            },
            rg,
        ))
    }

    /// Mean over kept rows; output `[1, d]`.
    pub fn mean_rows(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let tx = self.value(x);
        let count = keep.iter().filter(|&&k| k).count();
        if tx.rank() != 2 || keep.len() != tx.rows() {
            return Err(Error::dim("mean_rows", tx.shape(), &[keep.len()]));
        }
        if count == 0 {
            return Err(Error::EmptySequence);
        }
        let mut out = vec![0.0; tx.cols()];
        for (i, _) in keep.iter().enumerate().filter(|(_, &k)| k) {
            for (o, v) in out.iter_mut().zip(tx.row(i)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= count as f64);
        let out = Tensor::new(&[1, tx.cols()], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            out,
            Op::MeanRows {
                x,
                keep: keep.to_vec(),
            },
            rg,
        ))
    }

    /// Columnwise maximum over kept rows; output `[1, d]`.
    pub fn max_rows(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 2 || keep.len() != tx.rows() {
            return Err(Error::dim("max_rows", tx.shape(), &[keep.len()]));
        }
        let kept: Vec<usize> = (0..tx.rows()).filter(|&i| keep[i]).collect();
        if kept.is_empty() {
            return Err(Error::EmptySequence);
        }
        let c = tx.cols();
        let mut argmax = vec![kept[0]; c];
        for &i in &kept[1..] {
            for j in 0..c {
                if tx.at(i, j) > tx.at(argmax[j], j) {
                    argmax[j] = i;
                }
            }
        }
        let out: Vec<f64> = (0..c).map(|j| tx.at(argmax[j], j)).collect();
        let out = Tensor::new(&[1, c], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::MaxRows { x, argmax }, rg))
    }

    // ---- backward ----

    /// Backpropagates from the scalar `root`. Gradients of earlier calls are cleared.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(Error::dim("backward root", self.value(root).shape(), &[1]));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.nodes[root.0].grad = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(dy) = self.nodes[i].grad.take() else {
                continue;
            };
            self.backprop_node(i, &dy);
            self.nodes[i].grad = Some(dy);
        }
        Ok(())
    }

    fn acc(&mut self, v: Var, f: impl FnOnce(&mut [f64])) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        let len = node.value.len();
        let g = node.grad.get_or_insert_with(|| vec![0.0; len]);
        f(g);
    }

    fn add_into(&mut self, v: Var, src: &[f64], scale: f64) {
        self.acc(v, |g| {
            for (a, b) in g.iter_mut().zip(src) {
                *a += scale * b;
            }
        });
    }

    fn backprop_node(&mut self, i: usize, dy: &[f64]) {
        // Operand values are cloned out only where the borrow checker needs it.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf | Op::Gather { .. } => {}
            &Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(a).clone(), self.value(b).clone());
                let (r, k, c) = (ta.rows(), ta.cols(), tb.cols());
                if self.nodes[a.0].requires_grad {
                    // dA = dY · Bᵀ
                    let bt = tb.transpose().expect("2-D");
                    let mut da = vec![0.0; r * k];
                    matmul_into(dy, bt.data(), &mut da, r, c, k);
                    self.add_into(a, &da, 1.0);
                }
                if self.nodes[b.0].requires_grad {
                    // dB = Aᵀ · dY
                    let at = ta.transpose().expect("2-D");
                    let mut db = vec![0.0; k * c];
                    matmul_into(at.data(), dy, &mut db, k, r, c);
                    self.add_into(b, &db, 1.0);
                }
            }
            &Op::Transpose(a) => {
                let s = self.value(Var(i)).shape().to_vec();
                let dyt = Tensor::new(&s, dy.to_vec()).and_then(|t| t.transpose()).expect("2-D");
                self.add_into(a, dyt.data(), 1.0);
            }
            &Op::Add(a, b) => {
                self.add_into(a, dy, 1.0);
                self.add_into(b, dy, 1.0);
            }
            &Op::Sub(a, b) => {
                self.add_into(a, dy, 1.0);
                self.add_into(b, dy, -1.0);
            }
            &Op::Mul(a, b) => {
                let (ta, tb) = (self.value(a).clone(), self.value(b).clone());
                let da: Vec<f64> = dy.iter().zip(tb.data()).map(|(g, v)| g * v).collect();
                let db: Vec<f64> = dy.iter().zip(ta.data()).map(|(g, v)| g * v).collect();
                self.add_into(a, &da, 1.0);
                self.add_into(b, &db, 1.0);
            }
            &Op::AddBias(x, b) => {
                self.add_into(x, dy, 1.0);
                let c = self.value(b).len();
                self.acc(b, |g| {
                    for (j, v) in dy.iter().enumerate() {
                        g[j % c] += v;
                    }
                });
            }
            &Op::Affine(x, scale) => self.add_into(x, dy, scale),
            &Op::Relu(x) => {
                let dx: Vec<f64> = self
                    .value(x)
                    .data()
                    .iter()
                    .zip(dy)
                    .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                    .collect();
                self.add_into(x, &dx, 1.0);
            }
            &Op::Tanh(x) => {
                let dx: Vec<f64> = self
                    .value(Var(i))
                    .data()
                    .iter()
                    .zip(dy)
                    .map(|(&y, &g)| g * (1.0 - y * y))
                    .collect();
                self.add_into(x, &dx, 1.0);
            }
            &Op::Sigmoid(x) => {
                let dx: Vec<f64> = self
                    .value(Var(i))
                    .data()
                    .iter()
                    .zip(dy)
                    .map(|(&y, &g)| g * y * (1.0 - y))
                    .collect();
                self.add_into(x, &dx, 1.0);
            }
            Op::Concat { parts, axis } => {
                let out_shape = self.value(Var(i)).shape().to_vec();
                if out_shape.len() == 1 || *axis == 0 {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.value(p).len();
                        self.add_into(p, &dy[offset..offset + n], 1.0);
                        offset += n;
                    }
                } else {
                    let (rows, total) = (out_shape[0], out_shape[1]);
                    let mut col = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        self.acc(p, |g| {
                            for r in 0..rows {
                                for j in 0..w {
                                    g[r * w + j] += dy[r * total + col + j];
                                }
                            }
                        });
                        col += w;
                    }
                }
            }
            &Op::Softmax { x, axis } => {
                let y = self.value(Var(i)).clone();
                let geom = SliceGeom::new(y.shape(), axis).expect("validated in forward");
                let mut dx = vec![0.0; y.len()];
                for s in 0..geom.count {
                    let dot: f64 = (0..geom.len)
                        .map(|e| {
                            let k = geom.at(s, e);
                            dy[k] * y.data()[k]
                        })
                        .sum();
                    for e in 0..geom.len {
                        let k = geom.at(s, e);
                        dx[k] = y.data()[k] * (dy[k] - dot);
                    }
                }
                self.add_into(x, &dx, 1.0);
            }
            Op::MaskRows { x, keep } => {
                let c = self.value(*x).cols();
                self.acc(*x, |g| {
                    for (r, &k) in keep.iter().enumerate() {
                        if k {
                            for j in 0..c {
                                g[r * c + j] += dy[r * c + j];
                            }
                        }
                    }
                });
            }
            Op::ScaleElems { x, factors } => {
                let dx: Vec<f64> = dy.iter().zip(factors).map(|(g, f)| g * f).collect();
                self.add_into(*x, &dx, 1.0);
            }
            Op::RowMax { x, argmax } => {
                let c = self.value(*x).cols();
                self.acc(*x, |g| {
                    for (r, &j) in argmax.iter().enumerate() {
                        g[r * c + j] += dy[r];
                    }
                });
            }
            &Op::Conv1d { x, kernel } => {
                let (tx, tk) = (self.value(x).clone(), self.value(kernel).clone());
                let (w, d_in, d_out) = (tk.shape()[0], tk.shape()[1], tk.shape()[2]);
                let len = tx.rows();
                let half = (w / 2) as isize;
                let mut dx = vec![0.0; len * d_in];
                let mut dk = vec![0.0; w * d_in * d_out];
                for s in 0..w {
                    let shift = s as isize - half;
                    let k_s = &tk.data()[s * d_in * d_out..(s + 1) * d_in * d_out];
                    for t in 0..len {
                        let src = t as isize + shift;
                        if src < 0 || src >= len as isize {
                            continue;
                        }
                        let src = src as usize;
                        let g_row = &dy[t * d_out..(t + 1) * d_out];
                        let x_row = tx.row(src);
                        for a in 0..d_in {
                            let k_row = &k_s[a * d_out..(a + 1) * d_out];
                            let mut acc = 0.0;
                            for (kv, gv) in k_row.iter().zip(g_row) {
                                acc += kv * gv;
                            }
                            dx[src * d_in + a] += acc;
                            let xv = x_row[a];
                            if xv != 0.0 {
                                let dk_row = &mut dk[s * d_in * d_out + a * d_out..][..d_out];
                                for (d, gv) in dk_row.iter_mut().zip(g_row) {
                                    *d += xv * gv;
                                }
                            }
                        }
                    }
                }
                self.add_into(x, &dx, 1.0);
                self.add_into(kernel, &dk, 1.0);
            }
            Op::SelectRows { x, rows } => {
                let c = self.value(*x).cols();
                self.acc(*x, |g| {
                    for (k, &r) in rows.iter().enumerate() {
                        for j in 0..c {
                            g[r * c + j] += dy[k * c + j];
                        }
                    }
                });
            }
            &Op::BroadcastRows { x } => {
                let c = self.value(x).cols();
                self.acc(x, |g| {
                    for (k, v) in dy.iter().enumerate() {
                        g[k % c] += v;
                    }
                });
            }
            &Op::Reshape(x) => self.add_into(x, dy, 1.0),
            &Op::Sum(x) => {
                let g0 = dy[0];
                self.acc(x, |g| g.iter_mut().for_each(|v| *v += g0));
            }
            Op::Nll {
                probs,
                labels,
                clamp,
            } => {
                let tp = self.value(*probs).clone();
                let c = tp.cols();
                let g0 = dy[0];
                self.acc(*probs, |g| {
                    for (r, &l) in labels.iter().enumerate() {
                        let p = tp.at(r, l);
                        if !(p <= *clamp) {
                            g[r * c + l] -= g0 / p;
                        }
                    }
                });
            }
            Op::MeanRows { x, keep } => {
                let c = self.value(*x).cols();
                let count = keep.iter().filter(|&&k| k).count() as f64;
                self.acc(*x, |g| {
                    for (r, &k) in keep.iter().enumerate() {
                        if k {
                            for j in 0..c {
                                g[r * c + j] += dy[j] / count;
                            }
                        }
                    }
                });
            }
            Op::MaxRows { x, argmax } => {
                let c = self.value(*x).cols();
                self.acc(*x, |g| {
                    for (j, &r) in argmax.iter().enumerate() {
                        g[r * c + j] += dy[j];
                    }
                });
            }
        }
        self.nodes[i].op = op;
    }

    /// Collects parameter gradients after [`Graph::backward`], keyed by parameter index.
    /// Gathered tables receive dense gradients of shape `table_shape(index)`.
    pub fn param_grads(&self, table_cols: impl Fn(usize) -> usize) -> HashMap<usize, Vec<f64>> {
        let mut out: HashMap<usize, Vec<f64>> = HashMap::new();
        for node in &self.nodes {
            let Some(g) = node.grad.as_ref() else {
                continue;
            };
            if let Some(p) = node.param {
                let entry = out.entry(p).or_insert_with(|| vec![0.0; g.len()]);
                entry.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
            if let Op::Gather {
                param,
                ids,
                table_rows,
            } = &node.op
            {
                let c = table_cols(*param);
                let entry = out.entry(*param).or_insert_with(|| vec![0.0; table_rows * c]);
                for (k, &id) in ids.iter().enumerate() {
                    for j in 0..c {
                        entry[id * c + j] += g[k * c + j];
                    }
                }
            }
        }
        out
    }
}

/// Dropout applied at fixed sites of the model; a no-op in evaluation mode.
pub struct Dropout<'r> {
    rate: f64,
    rng: Option<&'r mut dyn rand::RngCore>,
}

impl<'r> Dropout<'r> {
    pub fn eval() -> Self {
        Self { rate: 0.0, rng: None }
    }

    pub fn train(rate: f64, rng: &'r mut dyn rand::RngCore) -> Self {
        Self { rate, rng: Some(rng) }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    pub fn apply(&mut self, g: &mut Graph, x: Var) -> Result<Var> {
        match self.rng.as_deref_mut() {
            Some(rng) if self.rate > 0.0 => g.dropout(x, self.rate, rng),
            _ => Ok(x),
        }
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Addressing of the 1-D slices a softmax normalises over.
struct SliceGeom {
    count: usize,
    len: usize,
    stride: usize,
    slice_step: usize,
}

impl SliceGeom {
    fn new(shape: &[usize], axis: usize) -> Result<Self> {
        match (shape.len(), axis) {
            (1, 0) => Ok(Self {
                count: 1,
                len: shape[0],
                stride: 1,
                slice_step: 0,
            }),
            (2, 1) => Ok(Self {
                count: shape[0],
                len: shape[1],
                stride: 1,
                slice_step: shape[1],
            }),
            (2, 0) => Ok(Self {
                count: shape[1],
                len: shape[0],
                stride: shape[1],
                slice_step: 1,
            }),
            _ => Err(Error::dim("softmax", shape, &[axis])),
        }
    }

    fn at(&self, slice: usize, elem: usize) -> usize {
        slice * self.slice_step + elem * self.stride
    }
}

fn softmax_slice(x: &[f64], out: &mut [f64], geom: &SliceGeom, s: usize, mask: Option<&[bool]>) {
    let live = |e: usize| mask.is_none_or(|m| m[e]);
    let live_count = (0..geom.len).filter(|&e| live(e)).count();
    if live_count == 0 {
        for e in 0..geom.len {
            out[geom.at(s, e)] = 1.0 / geom.len as f64;
        }
        return;
    }
    let max = (0..geom.len)
        .filter(|&e| live(e))
        .map(|e| x[geom.at(s, e)])
        .fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for e in 0..geom.len {
        let k = geom.at(s, e);
        if live(e) {
            let v = (x[k] - max).exp();
            out[k] = v;
            total += v;
        } else {
            out[k] = 0.0;
        }
    }
    for e in 0..geom.len {
        out[geom.at(s, e)] /= total;
    }
}
