//! Reverse-mode differentiation over a linear tape.
//!
//! Nodes are appended in evaluation order, so the tape is already a
//! topological order and `backward` just walks it in reverse.

use alloc::collections::BTreeSet;
use alloc::vec;
use alloc::vec::Vec;

use super::tensor::{mm_acc, mm_nt_acc, mm_tn_acc, Tensor};
use crate::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Abs,
    Sign,
    Relu,
    Softplus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Binary(Binary, usize, usize),
    AddRow(usize, usize),
    MulCol(usize, usize),
    Scale(usize, f64),
    Unary(Unary, usize),
    Sum(usize),
    Mean(usize),
    SegmentMean {
        x: usize,
        ids: Vec<usize>,
        counts: Vec<usize>,
    },
    Gather {
        x: usize,
        idx: Vec<usize>,
    },
    WindowMax {
        x: usize,
        argmax: Vec<usize>,
    },
    Reshape(usize),
    SliceCols {
        x: usize,
        start: usize,
    },
    ConcatRows(Vec<usize>),
    CrossEntropy {
        x: usize,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    BinaryCe {
        x: usize,
        targets: Vec<f64>,
    },
    Mse(usize, usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    /// Accumulated gradient, kept only for leaves that require it.
    grad: Option<Vec<f64>>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(v: f64) -> f64 {
    v.max(0.0) + libm::log1p(libm::exp(-v.abs()))
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + libm::exp(-v))
    } else {
        let e = libm::exp(v);
        e / (1.0 + e)
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, n: usize) -> &mut [f64] {
    slot.get_or_insert_with(|| vec![0.0; n])
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let n = &self.nodes[v.0];
        n.grad
            .as_ref()
            .map(|g| Tensor::new(n.value.shape(), g.clone()).expect("grad shape"))
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::dim(op, s, &[0, 0]));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        mm_acc(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a.0, b.0), rg))
    }

    /// Elementwise binary op on equal shapes, or with a one-element operand broadcast.
    pub fn binary(&mut self, op: Binary, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let shape = if va.shape() == vb.shape() || vb.numel() == 1 {
            va.shape().to_vec()
        } else if va.numel() == 1 {
            vb.shape().to_vec()
        } else {
            return Err(Error::dim("elementwise", va.shape(), vb.shape()));
        };
        let n: usize = shape.iter().product();
        let (da, db) = (va.data(), vb.data());
        let pick = |d: &[f64], i: usize| if d.len() == 1 { d[0] } else { d[i] };
        let out: Vec<f64> = (0..n)
            .map(|i| {
                let (x, y) = (pick(da, i), pick(db, i));
                match op {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                }
            })
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Binary(op, a.0, b.0), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    /// `x[N×D] + bias` with a `D`-element bias added to every row.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        let w = vx.row_width();
        if vb.numel() != w {
            return Err(Error::dim("add_row", vx.shape(), vb.shape()));
        }
        let mut out = vx.data().to_vec();
        for row in out.chunks_mut(w) {
            for (o, b) in row.iter_mut().zip(vb.data()) {
                *o += b;
            }
        }
        let shape = vx.shape().to_vec();
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(Tensor::new(&shape, out)?, Op::AddRow(x.0, bias.0), rg))
    }

    /// Scales row `i` of `x` by `s[i]`, `s` holding one value per row.
    pub fn mul_col(&mut self, x: Var, s: Var) -> Result<Var> {
        let (vx, vs) = (self.value(x), self.value(s));
        if vs.numel() != vx.rows() {
            return Err(Error::dim("mul_col", vx.shape(), vs.shape()));
        }
        let w = vx.row_width();
        let mut out = vx.data().to_vec();
        for (row, sv) in out.chunks_mut(w).zip(vs.data()) {
            for o in row {
                *o *= sv;
            }
        }
        let shape = vx.shape().to_vec();
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(Tensor::new(&shape, out)?, Op::MulCol(x.0, s.0), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let vx = self.value(x);
        let out: Vec<f64> = vx.data().iter().map(|v| v * c).collect();
        let t = Tensor::new(vx.shape(), out).expect("same shape");
        let rg = self.rg(x);
        self.push(t, Op::Scale(x.0, c), rg)
    }

    pub fn unary(&mut self, op: Unary, x: Var) -> Var {
        let vx = self.value(x);
        let f: fn(f64) -> f64 = match op {
            Unary::Abs => f64::abs,
            Unary::Sign => sign,
            Unary::Relu => |v: f64| if v > 0.0 { v } else { 0.0 },
            Unary::Softplus => softplus,
        };
        let out: Vec<f64> = vx.data().iter().map(|&v| f(v)).collect();
        let t = Tensor::new(vx.shape(), out).expect("same shape");
        // sign is a constant gate
        let rg = self.rg(x) && op != Unary::Sign;
        self.push(t, Op::Unary(op, x.0), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(Unary::Relu, x)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(Unary::Abs, x)
    }

    pub fn sign(&mut self, x: Var) -> Var {
        self.unary(Unary::Sign, x)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(Unary::Softplus, x)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x.0), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x.0), rg)
    }

    /// Row means grouped by `ids`; returns the result and the ids of empty
    /// segments, whose rows are zero.
    pub fn segment_mean(
        &mut self,
        x: Var,
        ids: &[usize],
        num_segments: usize,
    ) -> Result<(Var, Vec<usize>)> {
        let vx = self.value(x);
        if ids.len() != vx.rows() {
            return Err(Error::dim("segment_mean", vx.shape(), &[ids.len()]));
        }
        if num_segments == 0 {
            return Err(Error::Validation("segment_mean needs at least one segment".into()));
        }
        let w = vx.row_width();
        let mut counts = vec![0usize; num_segments];
        let mut out = vec![0.0; num_segments * w];
        for (r, &s) in ids.iter().enumerate() {
            if s >= num_segments {
                return Err(Error::Index {
                    op: "segment_mean",
                    index: s,
                    len: num_segments,
                });
            }
            counts[s] += 1;
            for (o, v) in out[s * w..(s + 1) * w].iter_mut().zip(vx.row(r)) {
                *o += v;
            }
        }
        let mut empty = Vec::new();
        for (s, &c) in counts.iter().enumerate() {
            if c == 0 {
                empty.push(s);
            } else {
                let inv = 1.0 / c as f64;
                for o in &mut out[s * w..(s + 1) * w] {
                    *o *= inv;
                }
            }
        }
        let mut shape = vx.shape().to_vec();
        shape[0] = num_segments;
        let rg = self.rg(x);
        let t = Tensor::new(&shape, out)?;
        let v = self.push(
            t,
            Op::SegmentMean {
                x: x.0,
                ids: ids.to_vec(),
                counts,
            },
            rg,
        );
        Ok((v, empty))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        if idx.is_empty() {
            return Err(Error::Validation("gather_rows needs at least one index".into()));
        }
        let w = vx.row_width();
        let mut out = Vec::with_capacity(idx.len() * w);
        for &i in idx {
            if i >= vx.rows() {
                return Err(Error::Index {
                    op: "gather_rows",
                    index: i,
                    len: vx.rows(),
                });
            }
            out.extend_from_slice(vx.row(i));
        }
        let mut shape = vx.shape().to_vec();
        shape[0] = idx.len();
        let rg = self.rg(x);
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(
            t,
            Op::Gather {
                x: x.0,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Columnwise max over each window of consecutive rows. Ties route the
    /// gradient to the lowest row index.
    pub fn window_max(&mut self, x: Var, windows: &[core::ops::Range<usize>]) -> Result<Var> {
        let vx = self.value(x);
        let w = vx.row_width();
        let mut out = Vec::with_capacity(windows.len() * w);
        let mut argmax = Vec::with_capacity(windows.len() * w);
        for win in windows {
            if win.is_empty() || win.end > vx.rows() {
                return Err(Error::Index {
                    op: "window_max",
                    index: win.end,
                    len: vx.rows(),
                });
            }
            for c in 0..w {
                let mut best = win.start;
                for r in win.clone() {
                    if vx.at(r, c) > vx.at(best, c) {
                        best = r;
                    }
                }
                out.push(vx.at(best, c));
                argmax.push(best);
            }
        }
        let mut shape = vx.shape().to_vec();
        shape[0] = windows.len();
        let rg = self.rg(x);
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(t, Op::WindowMax { x: x.0, argmax }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x.0), rg))
    }

    /// Columns `start..start + width` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let (m, n) = self.matrix_dims(x, "slice_cols")?;
        if width == 0 || start + width > n {
            return Err(Error::dim("slice_cols", &[m, n], &[start, width]));
        }
        let vx = self.value(x);
        let mut out = Vec::with_capacity(m * width);
        for r in 0..m {
            out.extend_from_slice(&vx.row(r)[start..start + width]);
        }
        let rg = self.rg(x);
        let t = Tensor::matrix(m, width, out)?;
        Ok(self.push(t, Op::SliceCols { x: x.0, start }, rg))
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::Validation("concat_rows needs inputs".into()))?;
        let w = self.value(first).row_width();
        let mut out = Vec::new();
        let mut rows = 0;
        for &v in xs {
            let t = self.value(v);
            if t.row_width() != w {
                return Err(Error::dim("concat_rows", self.shape(first), t.shape()));
            }
            rows += t.rows();
            out.extend_from_slice(t.data());
        }
        let rg = xs.iter().any(|&v| self.rg(v));
        let t = Tensor::matrix(rows, w, out)?;
        Ok(self.push(t, Op::ConcatRows(xs.iter().map(|v| v.0).collect()), rg))
    }

    /// Mean softmax cross-entropy of row scores against class indices.
    pub fn cross_entropy(&mut self, scores: Var, targets: &[usize]) -> Result<Var> {
        let (m, c) = self.matrix_dims(scores, "cross_entropy")?;
        if targets.len() != m {
            return Err(Error::dim("cross_entropy", &[m, c], &[targets.len()]));
        }
        let vs = self.value(scores);
        let mut probs = Vec::with_capacity(m * c);
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            if t >= c {
                return Err(Error::Index {
                    op: "cross_entropy",
                    index: t,
                    len: c,
                });
            }
            let row = vs.row(r);
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| libm::exp(v - mx)).sum();
            let lse = mx + libm::log(z);
            loss += lse - row[t];
            probs.extend(row.iter().map(|v| libm::exp(v - lse)));
        }
        let rg = self.rg(scores);
        Ok(self.push(
            Tensor::scalar(loss / m as f64),
            Op::CrossEntropy {
                x: scores.0,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Mean binary cross-entropy on logits against targets in `[0, 1]`.
    pub fn binary_ce(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let vx = self.value(logits);
        if targets.len() != vx.numel() {
            return Err(Error::dim("binary_ce", vx.shape(), &[targets.len()]));
        }
        let loss: f64 = vx
            .data()
            .iter()
            .zip(targets)
            .map(|(&x, &y)| softplus(x) - y * x)
            .sum::<f64>()
            / targets.len() as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BinaryCe {
                x: logits.0,
                targets: targets.to_vec(),
            },
            rg,
        ))
    }

    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (vp, vt) = (self.value(pred), self.value(target));
        if vp.shape() != vt.shape() {
            return Err(Error::dim("mse", vp.shape(), vt.shape()));
        }
        let loss = vp
            .data()
            .iter()
            .zip(vt.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / vp.numel() as f64;
        let rg = self.rg(pred) || self.rg(target);
        Ok(self.push(Tensor::scalar(loss), Op::Mse(pred.0, target.0), rg))
    }

    /// Accumulates `d root / d leaf` into every gradient-requiring leaf that
    /// precedes `root`. Calling it again adds the same gradients again.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(Error::Usage(alloc::format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0]);
        let mut leaves = BTreeSet::new();
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                leaves.insert(i);
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
        }
        for i in leaves {
            let n = self.nodes[i].value.numel();
            let slot = accumulate(&mut self.nodes[i].grad, n);
            if let Some(g) = &grads[i] {
                for (s, v) in slot.iter_mut().zip(g) {
                    *s += v;
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let rg = |j: usize| nodes[j].requires_grad;
        let val = |j: usize| &nodes[j].value;
        let n_of = |j: usize| nodes[j].value.numel();
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                let n = val(*b).shape()[1];
                if rg(*a) {
                    let ga = accumulate(&mut grads[*a], m * k);
                    mm_nt_acc(g, val(*b).data(), m, n, k, ga);
                }
                if rg(*b) {
                    let gb = accumulate(&mut grads[*b], k * n);
                    mm_tn_acc(val(*a).data(), g, m, k, n, gb);
                }
            }
            Op::Binary(op, a, b) => {
                let (a, b) = (*a, *b);
                let (da, db) = (val(a).data(), val(b).data());
                let pick = |d: &[f64], k: usize| if d.len() == 1 { d[0] } else { d[k] };
                for (first, side, od) in [(true, a, db), (false, b, da)] {
                    if !rg(side) {
                        continue;
                    }
                    let na = n_of(side);
                    let slot = accumulate(&mut grads[side], na);
                    for (k, gv) in g.iter().enumerate() {
                        let d = match op {
                            Binary::Add => *gv,
                            Binary::Sub => {
                                if first {
                                    *gv
                                } else {
                                    -*gv
                                }
                            }
                            Binary::Mul => gv * pick(od, k),
                        };
                        if na == 1 {
                            slot[0] += d;
                        } else {
                            slot[k] += d;
                        }
                    }
                }
            }
            Op::AddRow(x, b) => {
                if rg(*x) {
                    let gx = accumulate(&mut grads[*x], g.len());
                    for (s, v) in gx.iter_mut().zip(g) {
                        *s += v;
                    }
                }
                if rg(*b) {
                    let w = n_of(*b);
                    let gb = accumulate(&mut grads[*b], w);
                    for row in g.chunks(w) {
                        for (s, v) in gb.iter_mut().zip(row) {
                            *s += v;
                        }
                    }
                }
            }
            Op::MulCol(x, s) => {
                let w = val(*x).row_width();
                if rg(*x) {
                    let sv = val(*s).data();
                    let gx = accumulate(&mut grads[*x], g.len());
                    for (r, (grow, orow)) in g.chunks(w).zip(gx.chunks_mut(w)).enumerate() {
                        for (o, v) in orow.iter_mut().zip(grow) {
                            *o += v * sv[r];
                        }
                    }
                }
                if rg(*s) {
                    let xv = val(*x).data();
                    let rows = n_of(*s);
                    let gs = accumulate(&mut grads[*s], rows);
                    for r in 0..rows {
                        let mut acc = 0.0;
                        for c in 0..w {
                            acc += g[r * w + c] * xv[r * w + c];
                        }
                        gs[r] += acc;
                    }
                }
            }
            Op::Scale(x, c) => {
                let gx = accumulate(&mut grads[*x], g.len());
                for (s, v) in gx.iter_mut().zip(g) {
                    *s += v * c;
                }
            }
            Op::Unary(op, x) => {
                let xv = val(*x).data();
                let gx = accumulate(&mut grads[*x], g.len());
                for ((s, v), xi) in gx.iter_mut().zip(g).zip(xv) {
                    *s += match op {
                        Unary::Abs => v * sign(*xi),
                        Unary::Sign => 0.0,
                        Unary::Relu => {
                            if *xi > 0.0 {
                                *v
                            } else {
                                0.0
                            }
                        }
                        Unary::Softplus => v * sigmoid(*xi),
                    };
                }
            }
            Op::Sum(x) => {
                let gx = accumulate(&mut grads[*x], n_of(*x));
                for s in gx.iter_mut() {
                    *s += g[0];
                }
            }
            Op::Mean(x) => {
                let n = n_of(*x);
                let gx = accumulate(&mut grads[*x], n);
                let d = g[0] / n as f64;
                for s in gx.iter_mut() {
                    *s += d;
                }
            }
            Op::SegmentMean { x, ids, counts } => {
                let w = val(*x).row_width();
                let gx = accumulate(&mut grads[*x], n_of(*x));
                for (r, &s) in ids.iter().enumerate() {
                    let inv = 1.0 / counts[s] as f64;
                    for c in 0..w {
                        gx[r * w + c] += g[s * w + c] * inv;
                    }
                }
            }
            Op::Gather { x, idx } => {
                let w = val(*x).row_width();
                let gx = accumulate(&mut grads[*x], n_of(*x));
                for (k, &r) in idx.iter().enumerate() {
                    for c in 0..w {
                        gx[r * w + c] += g[k * w + c];
                    }
                }
            }
            Op::WindowMax { x, argmax } => {
                let w = val(*x).row_width();
                let gx = accumulate(&mut grads[*x], n_of(*x));
                for (k, &r) in argmax.iter().enumerate() {
                    gx[r * w + k % w] += g[k];
                }
            }
            Op::Reshape(x) => {
                let gx = accumulate(&mut grads[*x], g.len());
                for (s, v) in gx.iter_mut().zip(g) {
                    *s += v;
                }
            }
            Op::SliceCols { x, start } => {
                let n = val(*x).shape()[1];
                let width = nodes[i].value.shape()[1];
                let gx = accumulate(&mut grads[*x], n_of(*x));
                for (r, grow) in g.chunks(width).enumerate() {
                    for (c, v) in grow.iter().enumerate() {
                        gx[r * n + start + c] += v;
                    }
                }
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for &x in xs {
                    let n = n_of(x);
                    if rg(x) {
                        let gx = accumulate(&mut grads[x], n);
                        for (s, v) in gx.iter_mut().zip(&g[off..off + n]) {
                            *s += v;
                        }
                    }
                    off += n;
                }
            }
            Op::CrossEntropy { x, targets, probs } => {
                let c = val(*x).shape()[1];
                let m = targets.len();
                let scale = g[0] / m as f64;
                let gx = accumulate(&mut grads[*x], m * c);
                for (r, &t) in targets.iter().enumerate() {
                    for k in 0..c {
                        let onehot = if k == t { 1.0 } else { 0.0 };
                        gx[r * c + k] += scale * (probs[r * c + k] - onehot);
                    }
                }
            }
            Op::BinaryCe { x, targets } => {
                let xv = val(*x).data();
                let scale = g[0] / targets.len() as f64;
                let gx = accumulate(&mut grads[*x], xv.len());
                for ((s, xi), y) in gx.iter_mut().zip(xv).zip(targets) {
                    *s += scale * (sigmoid(*xi) - y);
                }
            }
            Op::Mse(p, t) => {
                let (pv, tv) = (val(*p).data(), val(*t).data());
                let scale = 2.0 * g[0] / pv.len() as f64;
                if rg(*p) {
                    let gp = accumulate(&mut grads[*p], pv.len());
                    for ((s, a), b) in gp.iter_mut().zip(pv).zip(tv) {
                        *s += scale * (a - b);
                    }
                }
                if rg(*t) {
                    let gt = accumulate(&mut grads[*t], tv.len());
                    for ((s, a), b) in gt.iter_mut().zip(pv).zip(tv) {
                        *s -= scale * (a - b);
                    }
                }
            }
        }
    }
}
