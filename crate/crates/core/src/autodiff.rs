//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends one node; node indices are therefore already a
//! topological order and the backward pass is a single reverse sweep.
//! Tracking is opt-in per leaf: a node requires a gradient iff the tape is
//! tracking and one of its inputs does. The forward arithmetic is the same
//! in both modes, so tracked and untracked values agree bitwise.

use crate::error::{Error, Result};
use crate::tensor::{matmul_kernel, Tensor};

/// Handle to a node on a [`Tape`].
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
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `b` matches the trailing dimensions of `a` and is repeated over the rest.
    AddTrailing(Var, Var),
    MulTrailing(Var, Var),
    /// Tensor times a single-element tensor.
    ScaleBy(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Gather {
        src: Var,
        index: Vec<usize>,
    },
    Softmax {
        x: Var,
        cols: usize,
    },
    LayerNorm {
        x: Var,
        cols: usize,
        rstd: Vec<f64>,
    },
    Silu(Var),
    Sigmoid(Var),
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
    Relu(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    Std(Var),
    Norm2(Var),
    SmoothL1 {
        a: Var,
        b: Var,
        beta: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation. Confined to one thread per training step.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    track: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn last_dim(t: &Tensor) -> usize {
    *t.shape().last().expect("tensors have rank >= 1")
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    /// A tape that records gradients for `param` leaves.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            track: true,
        }
    }

    /// A tape that never tracks gradients.
    pub fn untracked() -> Self {
        Self {
            nodes: Vec::new(),
            track: false,
        }
    }

    pub fn is_tracking(&self) -> bool {
        self.track
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

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = self.track && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let requires_grad = requires_grad && self.track;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    fn trailing(&self, op: &'static str, a: Var, b: Var) -> Result<usize> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(shape_err(op, ta, tb));
        }
        Ok(tb.len())
    }

    /// `a + b` where `b` is repeated along the leading dimensions of `a`.
    pub fn add_trailing(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = self.trailing("add_trailing", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + tb.data()[i % n])
            .collect();
        let v = Tensor::from_parts(ta.shape().to_vec(), data);
        Ok(self.push(v, Op::AddTrailing(a, b), &[a, b]))
    }

    /// `a * b` where `b` is repeated along the leading dimensions of `a`.
    pub fn mul_trailing(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = self.trailing("mul_trailing", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * tb.data()[i % n])
            .collect();
        let v = Tensor::from_parts(ta.shape().to_vec(), data);
        Ok(self.push(v, Op::MulTrailing(a, b), &[a, b]))
    }

    /// Multiply every element of `a` by the single value held in `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        if sv.len() != 1 {
            return Err(shape_err("scale_by", self.value(a), sv));
        }
        let k = sv.data()[0];
        let v = self.value(a).map(|x| x * k);
        Ok(self.push(v, Op::ScaleBy(a, s), &[a, s]))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).map(|x| x * k);
        self.push(v, Op::Scale(a, k), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).map(|x| x + k);
        self.push(v, Op::Shift(a), &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = ta.dims2()?;
        let (k2, n) = tb.dims2()?;
        if k != k2 {
            return Err(shape_err("matmul", ta, tb));
        }
        let v = Tensor::from_parts(vec![m, n], matmul_kernel(ta.data(), tb.data(), m, k, n));
        Ok(self.push(v, Op::MatMul { a, b, m, k, n }, &[a, b]))
    }

    /// General index gather: `out.flat[i] = src.flat[index[i]]`, reshaped to
    /// `shape`. Reshape, transpose and slicing are all expressed with it.
    pub fn gather(&mut self, src: Var, index: Vec<usize>, shape: Vec<usize>) -> Result<Var> {
        let ts = self.value(src);
        if index.len() != shape.iter().product::<usize>() {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("gather index has {} entries", index.len()),
            });
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= ts.len()) {
            return Err(Error::InvalidArgument(format!(
                "gather index {bad} out of range for {:?}",
                ts.shape()
            )));
        }
        let data = index.iter().map(|&i| ts.data()[i]).collect();
        let v = Tensor::from_parts(shape, data);
        Ok(self.push(v, Op::Gather { src, index }, &[src]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n = self.value(x).len();
        if shape.iter().product::<usize>() != n {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.value(x).shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        self.gather(x, (0..n).collect(), shape.to_vec())
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        let index = (0..c).flat_map(|j| (0..r).map(move |i| i * c + j)).collect();
        self.gather(x, index, vec![c, r])
    }

    /// Columns `[start, start + len)` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if start + len > c || len == 0 {
            return Err(Error::InvalidArgument(format!(
                "column slice {start}..{} of {c} columns",
                start + len
            )));
        }
        let index = (0..r)
            .flat_map(|i| (start..start + len).map(move |j| i * c + j))
            .collect();
        self.gather(x, index, vec![r, len])
    }

    /// Rows `[start, start + len)` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if start + len > r || len == 0 {
            return Err(Error::InvalidArgument(format!(
                "row slice {start}..{} of {r} rows",
                start + len
            )));
        }
        self.gather(x, (start * c..(start + len) * c).collect(), vec![len, c])
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let cols = last_dim(tx);
        let mut out = tx.data().to_vec();
        for row in out.chunks_mut(cols) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let v = Tensor::from_parts(tx.shape().to_vec(), out);
        self.push(v, Op::Softmax { x, cols }, &[x])
    }

    /// Normalisation along the last axis, without affine parameters.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let tx = self.value(x);
        let cols = last_dim(tx);
        let mut out = tx.data().to_vec();
        let mut rstd = Vec::with_capacity(out.len() / cols);
        for row in out.chunks_mut(cols) {
            let n = cols as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let r = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * r;
            }
            rstd.push(r);
        }
        let v = Tensor::from_parts(tx.shape().to_vec(), out);
        self.push(v, Op::LayerNorm { x, cols, rstd }, &[x])
    }

    /// Group normalisation of a `C × P` matrix: channels are split into
    /// `groups` contiguous blocks, each normalised over its channels and
    /// positions jointly.
    pub fn group_norm(&mut self, x: Var, groups: usize, eps: f64) -> Result<Var> {
        let (c, p) = self.value(x).dims2()?;
        if groups == 0 || c % groups != 0 {
            return Err(Error::InvalidArgument(format!(
                "{c} channels cannot be split into {groups} groups"
            )));
        }
        let g = self.reshape(x, &[groups, c / groups * p])?;
        let n = self.layer_norm(g, eps);
        self.reshape(n, &[c, p])
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let v = self.value(x).map(f);
        self.push(v, op, &[x])
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * sigmoid(v), Op::Silu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    /// Clamp with an identity gradient inside `[lo, hi]` and zero outside.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp { x, lo, hi })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).mean());
        self.push(v, Op::Mean(x), &[x])
    }

    /// Population standard deviation of all elements.
    pub fn std(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).std());
        self.push(v, Op::Std(x), &[x])
    }

    /// Euclidean norm of all elements.
    pub fn norm2(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).l2_norm());
        self.push(v, Op::Norm2(x), &[x])
    }

    /// Elementwise Huber-style loss with transition `beta`, averaged.
    pub fn smooth_l1(&mut self, a: Var, b: Var, beta: f64) -> Result<Var> {
        let d = self.value(a).zip_map(self.value(b), "smooth_l1", |x, y| x - y)?;
        let total: f64 = d
            .data()
            .iter()
            .map(|&e| {
                if e.abs() < beta {
                    0.5 * e * e / beta
                } else {
                    e.abs() - 0.5 * beta
                }
            })
            .sum();
        let v = Tensor::scalar(total / d.len() as f64);
        Ok(self.push(v, Op::SmoothL1 { a, b, beta }, &[a, b]))
    }

    /// Sum of squared differences, `‖a − b‖²`.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let s = self.square(d);
        Ok(self.sum(s))
    }

    /// Mean squared error.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let s = self.square(d);
        Ok(self.mean(s))
    }

    /// `Σ_k masks[k] ⊙ xs[k]` for equally shaped tensors.
    pub fn masked_sum(&mut self, xs: &[Var], masks: &[Var]) -> Result<Var> {
        if xs.is_empty() || xs.len() != masks.len() {
            return Err(Error::InvalidArgument(format!(
                "masked_sum over {} tensors and {} masks",
                xs.len(),
                masks.len()
            )));
        }
        let mut acc = self.mul(xs[0], masks[0])?;
        for (&x, &m) in xs.iter().zip(masks).skip(1) {
            let t = self.mul(x, m)?;
            acc = self.add(acc, t)?;
        }
        Ok(acc)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads: grads
                .into_iter()
                .enumerate()
                .map(|(i, g)| g.map(|d| Tensor::from_parts(self.nodes[i].value.shape().to_vec(), d)))
                .collect(),
        })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s -= g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * vb[i];
                    }
                });
                acc(*b, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * va[i];
                    }
                });
            }
            Op::AddTrailing(a, b) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                acc(*b, &mut |s| {
                    let n = s.len();
                    for (i, gi) in g.iter().enumerate() {
                        s[i % n] += gi;
                    }
                });
            }
            Op::MulTrailing(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let n = vb.len();
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * vb[i % n];
                    }
                });
                acc(*b, &mut |s| {
                    for (i, gi) in g.iter().enumerate() {
                        s[i % n] += gi * va[i];
                    }
                });
            }
            Op::ScaleBy(a, k) => {
                let (va, kv) = (val(*a), val(*k)[0]);
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g * kv));
                acc(*k, &mut |s| s[0] += g.iter().zip(va).map(|(g, a)| g * a).sum::<f64>());
            }
            Op::Scale(a, k) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g * k));
            }
            Op::Shift(a) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
            }
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let (va, vb) = (val(*a), val(*b));
                // dA = G Bᵀ
                acc(*a, &mut |s| {
                    for i in 0..m {
                        let gr = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let br = &vb[p * n..(p + 1) * n];
                            s[i * k + p] += gr.iter().zip(br).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                // dB = Aᵀ G
                acc(*b, &mut |s| {
                    for i in 0..m {
                        let gr = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = va[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            let sr = &mut s[p * n..(p + 1) * n];
                            for (sv, gv) in sr.iter_mut().zip(gr) {
                                *sv += av * gv;
                            }
                        }
                    }
                });
            }
            Op::Gather { src, index } => {
                acc(*src, &mut |s| {
                    for (gi, &ix) in g.iter().zip(index) {
                        s[ix] += gi;
                    }
                });
            }
            Op::Softmax { x, cols } => {
                let y = node.value.data();
                acc(*x, &mut |s| {
                    for ((sr, yr), gr) in s.chunks_mut(*cols).zip(y.chunks(*cols)).zip(g.chunks(*cols)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..sr.len() {
                            sr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, cols, rstd } => {
                let xhat = node.value.data();
                let n = *cols as f64;
                acc(*x, &mut |s| {
                    for (r, ((sr, hr), gr)) in s
                        .chunks_mut(*cols)
                        .zip(xhat.chunks(*cols))
                        .zip(g.chunks(*cols))
                        .enumerate()
                    {
                        let sum_g: f64 = gr.iter().sum();
                        let sum_gh: f64 = gr.iter().zip(hr).map(|(a, b)| a * b).sum();
                        for j in 0..sr.len() {
                            sr[j] += rstd[r] / n * (n * gr[j] - sum_g - hr[j] * sum_gh);
                        }
                    }
                });
            }
            Op::Silu(x) => {
                let vx = val(*x);
                acc(*x, &mut |s| {
                    for i in 0..s.len() {
                        let sg = sigmoid(vx[i]);
                        s[i] += g[i] * sg * (1.0 + vx[i] * (1.0 - sg));
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                acc(*x, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::Clamp { x, lo, hi } => {
                let vx = val(*x);
                acc(*x, &mut |s| {
                    for i in 0..s.len() {
                        if vx[i] >= *lo && vx[i] <= *hi {
                            s[i] += g[i];
                        }
                    }
                });
            }
            Op::Relu(x) => {
                let vx = val(*x);
                acc(*x, &mut |s| {
                    for i in 0..s.len() {
                        if vx[i] > 0.0 {
                            s[i] += g[i];
                        }
                    }
                });
            }
            Op::Square(x) => {
                let vx = val(*x);
                acc(*x, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += 2.0 * vx[i] * g[i];
                    }
                });
            }
            Op::Sum(x) => {
                acc(*x, &mut |s| s.iter_mut().for_each(|s| *s += g[0]));
            }
            Op::Mean(x) => {
                let n = val(*x).len() as f64;
                acc(*x, &mut |s| s.iter_mut().for_each(|s| *s += g[0] / n));
            }
            Op::Std(x) => {
                let vx = val(*x);
                let sd = node.value.data()[0];
                let n = vx.len() as f64;
                let mean = vx.iter().sum::<f64>() / n;
                acc(*x, &mut |s| {
                    if sd > 0.0 {
                        for i in 0..s.len() {
                            s[i] += g[0] * (vx[i] - mean) / (n * sd);
                        }
                    }
                });
            }
            Op::Norm2(x) => {
                let vx = val(*x);
                let nrm = node.value.data()[0];
                acc(*x, &mut |s| {
                    if nrm > 0.0 {
                        for i in 0..s.len() {
                            s[i] += g[0] * vx[i] / nrm;
                        }
                    }
                });
            }
            Op::SmoothL1 { a, b, beta } => {
                let (va, vb) = (val(*a), val(*b));
                let n = va.len() as f64;
                let d: Vec<f64> = va
                    .iter()
                    .zip(vb)
                    .map(|(x, y)| {
                        let e = x - y;
                        let de = if e.abs() < *beta { e / beta } else { e.signum() };
                        g[0] * de / n
                    })
                    .collect();
                acc(*a, &mut |s| s.iter_mut().zip(&d).for_each(|(s, d)| *s += d));
                acc(*b, &mut |s| s.iter_mut().zip(&d).for_each(|(s, d)| *s -= d));
            }
        }
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like its value when it received none.
    pub fn get_or_zeros(&self, tape: &Tape, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
    }
}

/// Evaluate `expr` with every tensor in `params` as a tracked leaf, then
/// differentiate. Returns the loss value and one gradient per parameter.
pub fn forward_backward<F>(params: &[Tensor], expr: F) -> Result<(Tensor, Vec<Tensor>)>
where
    F: FnOnce(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = expr(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let out = vars.iter().map(|&v| grads.get_or_zeros(&tape, v)).collect();
    Ok((tape.value(loss).clone(), out))
}

/// Central-difference gradient estimate of a scalar function.
pub fn finite_difference_grad<F>(f: F, x: &Tensor, eps: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    if eps <= 0.0 {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    let mut probe = x.clone();
    let mut out = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let fp = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let fm = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Numerical(format!(
                "function is not finite near coordinate {i}"
            )));
        }
        out[i] = (fp - fm) / (2.0 * eps);
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}
