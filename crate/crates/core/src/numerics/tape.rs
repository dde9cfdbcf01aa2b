//! Explicit reverse-mode gradient tape.
//!
//! Every forward pass records onto its own [`Tape`]. Values are addressed by
//! [`Var`] handles, which are only valid on the tape that produced them.
//! Nodes are appended in execution order, so a node's parents always precede
//! it and backward is a single reverse sweep.

use std::sync::atomic::{AtomicU64, Ordering};

use super::tensor::{kernel, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    idx: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.idx
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulBt(usize, usize),
    Add(usize, usize),
    AddBias(usize, usize),
    Scale(usize, f64),
    Mul(usize, usize),
    Softmax(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(usize),
    SliceCols { x: usize, start: usize },
    ConcatCols(Vec<usize>),
    SliceRows { x: usize, start: usize },
    ConcatRows(Vec<usize>),
    GatherRows { table: usize, ids: Vec<usize> },
    Sum(usize),
    Pick { x: usize, index: usize },
    CrossEntropy { logits: usize, target: usize, probs: Vec<f64> },
    Mask { x: usize, mask: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recording of one forward pass.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        debug_assert_eq!(v.tape, self.id);
        &self.nodes[v.idx].value
    }

    /// Gradient of the last backward root with respect to `v`, if `v` was reachable.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.id {
            return None;
        }
        self.grads.get(v.idx).and_then(Option::as_ref)
    }

    /// Clears gradients so that another backward pass may run.
    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(Error::Detached);
        }
        Ok(v.idx)
    }

    fn needs(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    fn matrix(&self, i: usize, op: &'static str) -> Result<(usize, usize)> {
        self.nodes[i].value.as_matrix(op)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.check(a)?, self.check(b)?);
        let out = super::tensor::matmul(&self.nodes[a].value, &self.nodes[b].value)?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), needs))
    }

    /// `a · bᵀ` for `a[m×k]`, `b[n×k]`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.check(a)?, self.check(b)?);
        let (m, k) = self.matrix(a, "matmul_bt")?;
        let (n, k2) = self.matrix(b, "matmul_bt")?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul_bt",
                left: vec![m, k],
                right: vec![n, k2],
            });
        }
        let mut out = vec![0.0; m * n];
        kernel::mm_bt(self.nodes[a].value.data(), self.nodes[b].value.data(), &mut out, m, k, n);
        let needs = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulBt(a, b), needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.check(a)?, self.check(b)?);
        let out = self.nodes[a].value.add(&self.nodes[b].value)?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), needs))
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (x, b) = (self.check(x)?, self.check(bias)?);
        let (m, n) = self.matrix(x, "add_bias")?;
        let bv = &self.nodes[b].value;
        if bv.len() != n {
            return Err(Error::Shape {
                op: "add_bias",
                left: vec![m, n],
                right: bv.shape().to_vec(),
            });
        }
        let mut out = self.nodes[x].value.data().to_vec();
        for row in out.chunks_mut(n) {
            for (o, v) in row.iter_mut().zip(bv.data()) {
                *o += v;
            }
        }
        let needs = self.needs(&[x, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::AddBias(x, b), needs))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let x = self.check(x)?;
        let out = self.nodes[x].value.scale(c);
        let needs = self.needs(&[x]);
        Ok(self.push(out, Op::Scale(x, c), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.check(a)?, self.check(b)?);
        let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
        av.same_shape("mul", bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), needs))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let x = self.check(x)?;
        let out = super::tensor::softmax_rows(&self.nodes[x].value)?;
        let needs = self.needs(&[x]);
        Ok(self.push(out, Op::Softmax(x), needs))
    }

    /// Normalizes each row to zero mean and unit variance, then applies
    /// `gamma ⊙ x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (x, g, b) = (self.check(x)?, self.check(gamma)?, self.check(beta)?);
        let (m, n) = self.matrix(x, "layer_norm")?;
        for p in [g, b] {
            if self.nodes[p].value.len() != n {
                return Err(Error::Shape {
                    op: "layer_norm",
                    left: vec![m, n],
                    right: self.nodes[p].value.shape().to_vec(),
                });
            }
        }
        let xv = self.nodes[x].value.data();
        let (gv, bv) = (self.nodes[g].value.data(), self.nodes[b].value.data());
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let s = 1.0 / (var + eps).sqrt();
            inv_std[i] = s;
            for j in 0..n {
                let h = (row[j] - mean) * s;
                xhat[i * n + j] = h;
                out[i * n + j] = h * gv[j] + bv[j];
            }
        }
        let needs = self.needs(&[x, g, b]);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::LayerNorm {
                x,
                gamma: g,
                beta: b,
                xhat,
                inv_std,
            },
            needs,
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let x = self.check(x)?;
        let xv = &self.nodes[x].value;
        let data = xv
            .data()
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()))
            .collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let needs = self.needs(&[x]);
        Ok(self.push(out, Op::Gelu(x), needs))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let x = self.check(x)?;
        let (m, n) = self.matrix(x, "slice_cols")?;
        if start + width > n || width == 0 {
            return Err(Error::Shape {
                op: "slice_cols",
                left: vec![m, n],
                right: vec![start, width],
            });
        }
        let xv = self.nodes[x].value.data();
        let mut out = Vec::with_capacity(m * width);
        for i in 0..m {
            out.extend_from_slice(&xv[i * n + start..i * n + start + width]);
        }
        let needs = self.needs(&[x]);
        Ok(self.push(Tensor::new(vec![m, width], out)?, Op::SliceCols { x, start }, needs))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let ids = parts.iter().map(|&p| self.check(p)).collect::<Result<Vec<_>>>()?;
        let first = *ids.first().ok_or(Error::Empty("concat_cols input"))?;
        let (m, _) = self.matrix(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(ids.len());
        for &i in &ids {
            let (mi, ni) = self.matrix(i, "concat_cols")?;
            if mi != m {
                return Err(Error::Shape {
                    op: "concat_cols",
                    left: vec![m],
                    right: vec![mi, ni],
                });
            }
            widths.push(ni);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&i, &w) in ids.iter().zip(&widths) {
                out.extend_from_slice(&self.nodes[i].value.data()[r * w..(r + 1) * w]);
            }
        }
        let needs = self.needs(&ids);
        Ok(self.push(Tensor::new(vec![m, total], out)?, Op::ConcatCols(ids), needs))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, count: usize) -> Result<Var> {
        let x = self.check(x)?;
        let (m, n) = self.matrix(x, "slice_rows")?;
        if start + count > m || count == 0 {
            return Err(Error::Shape {
                op: "slice_rows",
                left: vec![m, n],
                right: vec![start, count],
            });
        }
        let out = self.nodes[x].value.data()[start * n..(start + count) * n].to_vec();
        let needs = self.needs(&[x]);
        Ok(self.push(Tensor::new(vec![count, n], out)?, Op::SliceRows { x, start }, needs))
    }

    /// Stacks matrices (or vectors, treated as single rows) with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let ids = parts.iter().map(|&p| self.check(p)).collect::<Result<Vec<_>>>()?;
        let first = *ids.first().ok_or(Error::Empty("concat_rows input"))?;
        let n = self.nodes[first].value.cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for &i in &ids {
            let v = &self.nodes[i].value;
            if v.cols() != n || v.rank() > 2 {
                return Err(Error::Shape {
                    op: "concat_rows",
                    left: self.nodes[first].value.shape().to_vec(),
                    right: v.shape().to_vec(),
                });
            }
            rows += v.rows();
            out.extend_from_slice(v.data());
        }
        let needs = self.needs(&ids);
        Ok(self.push(Tensor::new(vec![rows, n], out)?, Op::ConcatRows(ids), needs))
    }

    /// Row lookup into an embedding table.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.check(table)?;
        let (m, n) = self.matrix(t, "gather_rows")?;
        if ids.is_empty() {
            return Err(Error::Empty("gather_rows ids"));
        }
        let mut out = Vec::with_capacity(ids.len() * n);
        for &id in ids {
            if id >= m {
                return Err(Error::Capacity { len: id + 1, capacity: m });
            }
            out.extend_from_slice(self.nodes[t].value.row(id));
        }
        let needs = self.needs(&[t]);
        Ok(self.push(
            Tensor::new(vec![ids.len(), n], out)?,
            Op::GatherRows {
                table: t,
                ids: ids.to_vec(),
            },
            needs,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let x = self.check(x)?;
        let s = self.nodes[x].value.data().iter().sum();
        let needs = self.needs(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), needs))
    }

    /// Selects one entry (flat index) as a scalar.
    pub fn pick(&mut self, x: Var, index: usize) -> Result<Var> {
        let x = self.check(x)?;
        let v = &self.nodes[x].value;
        if index >= v.len() {
            return Err(Error::Capacity {
                len: index + 1,
                capacity: v.len(),
            });
        }
        let s = v.data()[index];
        let needs = self.needs(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::Pick { x, index }, needs))
    }

    /// `-log softmax(logits)[target]` over the flattened logits.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let l = self.check(logits)?;
        let lv = &self.nodes[l].value;
        if target >= lv.len() {
            return Err(Error::Capacity {
                len: target + 1,
                capacity: lv.len(),
            });
        }
        if !lv.is_finite() {
            return Err(Error::NonFinite { op: "cross_entropy" });
        }
        let mut probs = lv.data().to_vec();
        let n = probs.len();
        kernel::softmax(&mut probs, 1, n);
        let max = lv.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + lv.data().iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let loss = lse - lv.data()[target];
        let needs = self.needs(&[l]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: l,
                target,
                probs,
            },
            needs,
        ))
    }

    /// Elementwise multiplication by a fixed mask (dropout).
    pub fn mask(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        let x = self.check(x)?;
        let xv = &self.nodes[x].value;
        if mask.len() != xv.len() {
            return Err(Error::Shape {
                op: "mask",
                left: xv.shape().to_vec(),
                right: vec![mask.len()],
            });
        }
        let data = xv.data().iter().zip(&mask).map(|(a, b)| a * b).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let needs = self.needs(&[x]);
        Ok(self.push(out, Op::Mask { x, mask }, needs))
    }

    /// Propagates `∂root/∂·` to every node reachable from `root`.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let r = self.check(root)?;
        if self.nodes[r].value.len() != 1 {
            return Err(Error::NonScalarRoot(self.nodes[r].value.shape().to_vec()));
        }
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; r + 1];
        grads[r] = Some(vec![1.0]);
        for idx in (0..=r).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if self.nodes[idx].needs_grad {
                self.propagate(idx, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        self.grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.filter(|_| self.nodes[i].needs_grad)
                    .map(|d| Tensor::new(self.nodes[i].value.shape().to_vec(), d).expect("grad shape"))
            })
            .collect();
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let mut acc = |p: usize, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[p].needs_grad {
                return;
            }
            let buf = grads[p].get_or_insert_with(|| vec![0.0; nodes[p].value.len()]);
            f(buf);
        };
        let val = |p: usize| nodes[p].value.data();
        match &nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[*a].value.shape()[0], nodes[*a].value.shape()[1]);
                let n = nodes[*b].value.shape()[1];
                acc(*a, &mut |buf| kernel::mm_bt(g, val(*b), buf, m, n, k));
                acc(*b, &mut |buf| kernel::mm_at(val(*a), g, buf, m, k, n));
            }
            Op::MatMulBt(a, b) => {
                let (m, k) = (nodes[*a].value.shape()[0], nodes[*a].value.shape()[1]);
                let n = nodes[*b].value.shape()[0];
                acc(*a, &mut |buf| kernel::mm(g, val(*b), buf, m, n, k));
                acc(*b, &mut |buf| kernel::mm_at(g, val(*a), buf, m, n, k));
            }
            Op::Add(a, b) => {
                for p in [*a, *b] {
                    acc(p, &mut |buf| add_into(buf, g));
                }
            }
            Op::AddBias(x, b) => {
                let n = nodes[*b].value.len();
                acc(*x, &mut |buf| add_into(buf, g));
                acc(*b, &mut |buf| {
                    for row in g.chunks(n) {
                        add_into(buf, row);
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &mut |buf| {
                for (o, v) in buf.iter_mut().zip(g) {
                    *o += c * v;
                }
            }),
            Op::Mul(a, b) => {
                acc(*a, &mut |buf| {
                    for ((o, gv), bv) in buf.iter_mut().zip(g).zip(val(*b)) {
                        *o += gv * bv;
                    }
                });
                acc(*b, &mut |buf| {
                    for ((o, gv), av) in buf.iter_mut().zip(g).zip(val(*a)) {
                        *o += gv * av;
                    }
                });
            }
            Op::Softmax(x) => {
                let y = nodes[idx].value.data();
                let n = nodes[idx].value.cols();
                acc(*x, &mut |buf| {
                    for ((brow, grow), yrow) in buf.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            brow[j] += yrow[j] * (grow[j] - dot);
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
                let n = nodes[*gamma].value.len();
                let gam = val(*gamma);
                acc(*beta, &mut |buf| {
                    for row in g.chunks(n) {
                        add_into(buf, row);
                    }
                });
                acc(*gamma, &mut |buf| {
                    for (grow, hrow) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            buf[j] += grow[j] * hrow[j];
                        }
                    }
                });
                acc(*x, &mut |buf| {
                    for (i, ((brow, grow), hrow)) in
                        buf.chunks_mut(n).zip(g.chunks(n)).zip(xhat.chunks(n)).enumerate()
                    {
                        let mut mean_d = 0.0;
                        let mut mean_dh = 0.0;
                        for j in 0..n {
                            let d = grow[j] * gam[j];
                            mean_d += d;
                            mean_dh += d * hrow[j];
                        }
                        mean_d /= n as f64;
                        mean_dh /= n as f64;
                        for j in 0..n {
                            let d = grow[j] * gam[j];
                            brow[j] += inv_std[i] * (d - mean_d - hrow[j] * mean_dh);
                        }
                    }
                });
            }
            Op::Gelu(x) => acc(*x, &mut |buf| {
                for ((o, gv), &v) in buf.iter_mut().zip(g).zip(val(*x)) {
                    let u = GELU_C * (v + GELU_A * v * v * v);
                    let t = u.tanh();
                    let du = GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                    *o += gv * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du);
                }
            }),
            Op::SliceCols { x, start } => {
                let n = nodes[*x].value.cols();
                let w = nodes[idx].value.cols();
                acc(*x, &mut |buf| {
                    for (r, grow) in g.chunks(w).enumerate() {
                        add_into(&mut buf[r * n + start..r * n + start + w], grow);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = nodes[idx].value.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = nodes[p].value.cols();
                    acc(p, &mut |buf| {
                        for (r, brow) in buf.chunks_mut(w).enumerate() {
                            add_into(brow, &g[r * total + offset..r * total + offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::SliceRows { x, start } => {
                let n = nodes[idx].value.cols();
                acc(*x, &mut |buf| add_into(&mut buf[start * n..start * n + g.len()], g));
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = nodes[p].value.len();
                    acc(p, &mut |buf| add_into(buf, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::GatherRows { table, ids } => {
                let n = nodes[*table].value.cols();
                acc(*table, &mut |buf| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut buf[id * n..(id + 1) * n], &g[r * n..(r + 1) * n]);
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |buf| buf.iter_mut().for_each(|o| *o += g[0])),
            Op::Pick { x, index } => acc(*x, &mut |buf| buf[*index] += g[0]),
            Op::CrossEntropy {
                logits,
                target,
                probs,
            } => acc(*logits, &mut |buf| {
                for (j, (o, p)) in buf.iter_mut().zip(probs).enumerate() {
                    let onehot = if j == *target { 1.0 } else { 0.0 };
                    *o += g[0] * (p - onehot);
                }
            }),
            Op::Mask { x, mask } => acc(*x, &mut |buf| {
                for ((o, gv), m) in buf.iter_mut().zip(g).zip(mask) {
                    *o += gv * m;
                }
            }),
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Central-difference check of `f` at every entry of every input.
    fn check_op(inputs: Vec<Tensor>, f: impl Fn(&mut Tape, &[Var]) -> Var) {
        let h = 1e-5;
        let eval = |ins: &[Tensor]| {
            let mut t = Tape::new();
            let vars: Vec<Var> = ins.iter().map(|x| t.leaf(x.clone())).collect();
            let out = f(&mut t, &vars);
            t.value(out).data()[0]
        };
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = f(&mut tape, &vars);
        tape.backward(out).unwrap();
        for (k, x) in inputs.iter().enumerate() {
            let analytic = tape.grad(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
            for i in 0..x.len() {
                let mut plus = inputs.clone();
                plus[k].data_mut()[i] += h;
                let mut minus = inputs.clone();
                minus[k].data_mut()[i] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic.data()[i];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                assert!(rel < 1e-4, "input {k} entry {i}: analytic {a} numeric {numeric}");
            }
        }
    }

    /// Reduces any output to a scalar with fixed random weights so every
    /// output entry contributes a distinct gradient.
    fn weighted_sum(t: &mut Tape, x: Var, seed: u64) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = t.value(x).shape().to_vec();
        let w = t.constant(random(&mut rng, &shape));
        let p = t.mul(x, w).unwrap();
        t.sum(p).unwrap()
    }

    #[test]
    fn sum_gives_ones() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::filled(&[2, 3], 0.7));
        let s = t.sum(x).unwrap();
        t.backward(s).unwrap();
        assert!(t.grad(x).unwrap().data().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn half_square_gives_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let xv = random(&mut rng, &[3, 2]);
        let mut t = Tape::new();
        let x = t.leaf(xv.clone());
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq).unwrap();
        let half = t.scale(s, 0.5).unwrap();
        t.backward(half).unwrap();
        assert_eq!(t.grad(x).unwrap(), &xv);
    }

    #[test]
    fn backward_errors() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::zeros(&[2, 2]));
        assert!(matches!(t.backward(x), Err(Error::NonScalarRoot(_))));
        let s = t.sum(x).unwrap();
        t.backward(s).unwrap();
        assert!(matches!(t.backward(s), Err(Error::BackwardTwice)));
        t.reset_grads();
        t.backward(s).unwrap();

        let mut other = Tape::new();
        let y = other.leaf(Tensor::scalar(1.0));
        assert!(matches!(t.backward(y), Err(Error::Detached)));
    }

    #[test]
    fn constants_get_no_grad() {
        let mut t = Tape::new();
        let c = t.constant(Tensor::filled(&[2], 1.0));
        let x = t.leaf(Tensor::filled(&[2], 2.0));
        let p = t.mul(c, x).unwrap();
        let s = t.sum(p).unwrap();
        t.backward(s).unwrap();
        assert!(t.grad(c).is_none());
        assert_eq!(t.grad(x).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn finite_difference_each_op() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random(&mut rng, &[4, 4]);
        let b = random(&mut rng, &[4, 4]);
        let v = random(&mut rng, &[4]);
        check_op(vec![a.clone(), b.clone()], |t, x| {
            let y = t.matmul(x[0], x[1]).unwrap();
            weighted_sum(t, y, 1)
        });
        check_op(vec![a.clone(), b.clone()], |t, x| {
            let y = t.matmul_bt(x[0], x[1]).unwrap();
            weighted_sum(t, y, 2)
        });
        check_op(vec![a.clone(), b.clone()], |t, x| {
            let y = t.add(x[0], x[1]).unwrap();
            weighted_sum(t, y, 3)
        });
        check_op(vec![a.clone(), v.clone()], |t, x| {
            let y = t.add_bias(x[0], x[1]).unwrap();
            weighted_sum(t, y, 4)
        });
        check_op(vec![a.clone(), b.clone()], |t, x| {
            let y = t.mul(x[0], x[1]).unwrap();
            weighted_sum(t, y, 5)
        });
        check_op(vec![a.scale(3.0)], |t, x| {
            let y = t.softmax_rows(x[0]).unwrap();
            weighted_sum(t, y, 6)
        });
        check_op(vec![a.clone(), v.clone(), random(&mut rng, &[4])], |t, x| {
            let y = t.layer_norm(x[0], x[1], x[2], 1e-9).unwrap();
            weighted_sum(t, y, 7)
        });
        check_op(vec![a.scale(2.0)], |t, x| {
            let y = t.gelu(x[0]).unwrap();
            weighted_sum(t, y, 8)
        });
        check_op(vec![a.clone()], |t, x| {
            let l = t.slice_cols(x[0], 1, 2).unwrap();
            let r = t.slice_cols(x[0], 3, 1).unwrap();
            let y = t.concat_cols(&[r, l]).unwrap();
            weighted_sum(t, y, 9)
        });
        check_op(vec![a.clone(), v.clone()], |t, x| {
            let top = t.slice_rows(x[0], 1, 2).unwrap();
            let y = t.concat_rows(&[x[1], top]).unwrap();
            weighted_sum(t, y, 10)
        });
        check_op(vec![a.clone()], |t, x| {
            let y = t.gather_rows(x[0], &[2, 0, 2]).unwrap();
            weighted_sum(t, y, 11)
        });
        check_op(vec![v.clone()], |t, x| t.cross_entropy(x[0], 2).unwrap());
        check_op(vec![v.clone()], |t, x| t.pick(x[0], 3).unwrap());
        check_op(vec![a.clone()], |t, x| {
            let y = t.mask(x[0], (0..16).map(|i| (i % 3) as f64).collect()).unwrap();
            weighted_sum(t, y, 12)
        });
        check_op(vec![a], |t, x| {
            let y = t.scale(x[0], -1.5).unwrap();
            weighted_sum(t, y, 13)
        });
    }

    #[test]
    fn backward_is_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let mut t = Tape::new();
            let a = t.leaf(random(&mut rng, &[4, 4]));
            let b = t.leaf(random(&mut rng, &[4, 4]));
            let p = t.matmul(a, b).unwrap();
            let s = t.softmax_rows(p).unwrap();
            let y = weighted_sum(&mut t, s, 3);
            t.backward(y).unwrap();
            (t.grad(a).unwrap().clone(), t.grad(b).unwrap().clone())
        };
        let (a1, b1) = run();
        let (a2, b2) = run();
        assert!(a1.data().iter().zip(a2.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(b1.data().iter().zip(b2.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut t = Tape::new();
        let x = t.leaf(random(&mut rng, &[3, 8]).scale(4.0));
        let g = t.leaf(Tensor::filled(&[8], 1.0));
        let b = t.leaf(Tensor::zeros(&[8]));
        let y = t.layer_norm(x, g, b, 1e-9).unwrap();
        let yv = t.value(y);
        for i in 0..3 {
            let row = yv.row(i);
            let mean = row.iter().sum::<f64>() / 8.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }
}
