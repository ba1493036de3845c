use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{matmul_into, matmul_nt_into, matmul_tn_into};
use super::{Result, Tensor, TensorError};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
///
/// A handle is only valid for the tape (and generation) that produced it;
/// after [`Tape::clear`] every old handle is rejected with
/// [`TensorError::Detached`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    generation: u64,
    index: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Broadcast {
    Same,
    LeftScalar,
    RightScalar,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulNt(usize, usize),
    Add(usize, usize, Broadcast),
    Sub(usize, usize, Broadcast),
    Mul(usize, usize, Broadcast),
    Scale(usize, f64),
    Offset(usize),
    Cos(usize),
    Sin(usize),
    Abs(usize),
    Sign(#[allow(dead_code)] usize),
    PowConst(usize, f64),
    PowVar(usize, usize),
    Silu(usize),
    Sum(usize),
    Mean(usize),
    SumAxis(usize, usize),
    MeanAxis(usize, usize),
    Reshape(usize),
    Concat(Vec<usize>, usize),
    AddRow(usize, usize),
    Roll(usize, usize),
    Select(usize, usize),
    Slice(usize, usize),
    RepeatExpand { input: usize, k: usize },
    ScaleBlocks(usize, usize),
    SoftmaxCe { logits: usize, targets: Vec<usize>, probs: Vec<f64> },
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Append-only computation record.
///
/// Nodes are appended in evaluation order, so the append order is already a
/// topological order and backward simply walks it in reverse.
pub struct Tape {
    id: u64,
    generation: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    tape: u64,
    generation: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`; `None` when `var` does not
    /// require gradients or did not influence the loss.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        if var.tape != self.tape || var.generation != self.generation {
            return None;
        }
        self.grads.get(var.index).and_then(Option::as_ref)
    }

    pub fn is_empty(&self) -> bool {
        self.grads.iter().all(Option::is_none)
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch { op, left: a.shape().to_vec(), right: b.shape().to_vec() }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s: Vec<usize> = shape.iter().enumerate().filter(|&(i, _)| i != axis).map(|(_, &d)| d).collect();
    if s.is_empty() {
        s.push(1);
    }
    s
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn pow_value(x: f64, e: f64) -> f64 {
    if e.fract() == 0.0 && e.abs() < i32::MAX as f64 {
        x.powi(e as i32)
    } else {
        x.powf(e)
    }
}

// d/dx x^e with the subgradient 0 at x = 0 for non-linear exponents.
fn pow_deriv(x: f64, e: f64) -> f64 {
    if e == 1.0 {
        1.0
    } else if x == 0.0 {
        0.0
    } else {
        e * pow_value(x, e - 1.0)
    }
}

fn add_into(acc: &mut Option<Vec<f64>>, contrib: Vec<f64>) {
    match acc {
        Some(existing) => existing.iter_mut().zip(contrib).for_each(|(a, c)| *a += c),
        None => *acc = Some(contrib),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed), generation: 0, nodes: Vec::new() }
    }

    /// Frees every node. Handles created before the call become detached.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.generation += 1;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.generation != self.generation || v.index >= self.nodes.len() {
            return Err(TensorError::Detached);
        }
        Ok(v.index)
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { op, value, requires_grad });
        Var { tape: self.id, generation: self.generation, index: self.nodes.len() - 1 }
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn val(&self, i: usize) -> &Tensor {
        &self.nodes[i].value
    }

    /// Leaf that participates in differentiation.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, false)
    }

    pub fn value(&self, v: Var) -> Result<&Tensor> {
        let i = self.check(v)?;
        Ok(self.val(i))
    }

    pub fn requires_grad(&self, v: Var) -> Result<bool> {
        let i = self.check(v)?;
        Ok(self.rg(i))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (ta, tb) = (self.val(ia), self.val(ib));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(mismatch("matmul", ta, tb));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(ta.data(), tb.data(), &mut out, m, k, n);
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(Op::MatMul(ia, ib), Tensor::matrix(m, n, out)?, rg))
    }

    /// `a · bᵀ`, the shape of a dense layer applied to a batch.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (ta, tb) = (self.val(ia), self.val(ib));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[1] {
            return Err(mismatch("matmul_nt", ta, tb));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[0]);
        let mut out = vec![0.0; m * n];
        matmul_nt_into(ta.data(), tb.data(), &mut out, m, k, n);
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(Op::MatMulNt(ia, ib), Tensor::matrix(m, n, out)?, rg))
    }

    fn broadcast(&self, op: &'static str, ia: usize, ib: usize) -> Result<Broadcast> {
        let (ta, tb) = (self.val(ia), self.val(ib));
        if ta.shape() == tb.shape() {
            Ok(Broadcast::Same)
        } else if ta.numel() == 1 {
            Ok(Broadcast::LeftScalar)
        } else if tb.numel() == 1 {
            Ok(Broadcast::RightScalar)
        } else {
            Err(mismatch(op, ta, tb))
        }
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let bc = self.broadcast(op, ia, ib)?;
        let (ta, tb) = (self.val(ia), self.val(ib));
        let value = match bc {
            Broadcast::Same => ta.zip_map(tb, &f)?,
            Broadcast::LeftScalar => {
                let s = ta.item();
                tb.map(|x| f(s, x))
            }
            Broadcast::RightScalar => {
                let s = tb.item();
                ta.map(|x| f(x, s))
            }
        };
        let rg = self.rg(ia) || self.rg(ib);
        let node = match op {
            "add" => Op::Add(ia, ib, bc),
            "sub" => Op::Sub(ia, ib, bc),
            _ => Op::Mul(ia, ib, bc),
        };
        Ok(self.push(node, value, rg))
    }

    /// Element-wise sum; either side may be a single-element tensor.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: impl FnOnce(usize) -> Op) -> Result<Var> {
        let ia = self.check(a)?;
        let value = self.val(ia).map(f);
        let rg = self.rg(ia);
        Ok(self.push(op(ia), value, rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, |x| x * c, |i| Op::Scale(i, c))
    }

    /// `a + c` for a constant `c`.
    pub fn offset(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, |x| x + c, Op::Offset)
    }

    pub fn cos(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::cos, Op::Cos)
    }

    pub fn sin(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::sin, Op::Sin)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::abs, Op::Abs)
    }

    /// Sign with `sign(0) = 0`. Treated as a constant in backward.
    pub fn sign(&mut self, a: Var) -> Result<Var> {
        self.unary(
            a,
            |x| {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            },
            Op::Sign,
        )
    }

    /// `a^e` for a constant exponent. Integral exponents use exact integer
    /// powers, so negative bases are fine there.
    pub fn pow_by(&mut self, a: Var, e: f64) -> Result<Var> {
        if !e.is_finite() {
            return Err(TensorError::NonFiniteExponent(e));
        }
        self.unary(a, |x| pow_value(x, e), |i| Op::PowConst(i, e))
    }

    /// `base^e` where the exponent is itself a recorded single-element value.
    /// Intended for non-negative bases; at a zero base both partial
    /// derivatives are taken to be 0.
    pub fn pow_var(&mut self, base: Var, exponent: Var) -> Result<Var> {
        let (ib, ie) = (self.check(base)?, self.check(exponent)?);
        if self.val(ie).numel() != 1 {
            return Err(mismatch("pow_var", self.val(ib), self.val(ie)));
        }
        let e = self.val(ie).item();
        if !e.is_finite() {
            return Err(TensorError::NonFiniteExponent(e));
        }
        let value = self.val(ib).map(|x| pow_value(x, e));
        let rg = self.rg(ib) || self.rg(ie);
        Ok(self.push(Op::PowVar(ib, ie), value, rg))
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x * sigmoid(x), Op::Silu)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let s = self.val(ia).data().iter().sum();
        let rg = self.rg(ia);
        Ok(self.push(Op::Sum(ia), Tensor::scalar(s), rg))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let t = self.val(ia);
        let m = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.rg(ia);
        Ok(self.push(Op::Mean(ia), Tensor::scalar(m), rg))
    }

    fn reduce_axis(&mut self, a: Var, axis: usize, mean: bool) -> Result<Var> {
        let ia = self.check(a)?;
        let t = self.val(ia);
        if axis >= t.rank() {
            return Err(TensorError::InvalidAxis { axis, rank: t.rank() });
        }
        let (outer, len, inner) = axis_split(t.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] += t.data()[base + i];
                }
            }
        }
        if mean {
            out.iter_mut().for_each(|x| *x /= len as f64);
        }
        let value = Tensor::new(reduced_shape(t.shape(), axis), out)?;
        let rg = self.rg(ia);
        let op = if mean { Op::MeanAxis(ia, axis) } else { Op::SumAxis(ia, axis) };
        Ok(self.push(op, value, rg))
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, false)
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, true)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ia = self.check(a)?;
        let value = self.val(ia).reshape(shape)?;
        let rg = self.rg(ia);
        Ok(self.push(Op::Reshape(ia), value, rg))
    }

    /// Concatenates 2-D tensors along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if axis > 1 {
            return Err(TensorError::InvalidAxis { axis, rank: 2 });
        }
        let idx: Vec<usize> = parts.iter().map(|&v| self.check(v)).collect::<Result<_>>()?;
        let first = idx.first().ok_or_else(|| TensorError::InvalidArgument("concat of nothing".into()))?;
        let t0 = self.val(*first);
        for &i in &idx {
            let t = self.val(i);
            if t.rank() != 2 || t.shape()[1 - axis] != t0.shape()[1 - axis] {
                return Err(mismatch("concat", t0, t));
            }
        }
        let value = if axis == 0 {
            let rows: usize = idx.iter().map(|&i| self.val(i).rows()).sum();
            let data: Vec<f64> = idx.iter().flat_map(|&i| self.val(i).data().iter().copied()).collect();
            Tensor::matrix(rows, t0.cols(), data)?
        } else {
            let rows = t0.rows();
            let cols: usize = idx.iter().map(|&i| self.val(i).cols()).sum();
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for &i in &idx {
                    data.extend_from_slice(self.val(i).row(r));
                }
            }
            Tensor::matrix(rows, cols, data)?
        };
        let rg = idx.iter().any(|&i| self.rg(i));
        Ok(self.push(Op::Concat(idx, axis), value, rg))
    }

    /// Adds a row vector of length `n` to every row of an `m×n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ia, ir) = (self.check(a)?, self.check(row)?);
        let (ta, tr) = (self.val(ia), self.val(ir));
        let n = ta.cols();
        if ta.rank() != 2 || tr.numel() != n {
            return Err(mismatch("add_row", ta, tr));
        }
        let mut data = ta.data().to_vec();
        for chunk in data.chunks_mut(n) {
            chunk.iter_mut().zip(tr.data()).for_each(|(x, b)| *x += b);
        }
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(ia) || self.rg(ir);
        Ok(self.push(Op::AddRow(ia, ir), value, rg))
    }

    /// Right circular shift of the flattened elements:
    /// `out[j] = a[(j - shift) mod m]`.
    pub fn roll(&mut self, a: Var, shift: usize) -> Result<Var> {
        let ia = self.check(a)?;
        let t = self.val(ia);
        let m = t.numel();
        let s = shift % m;
        let data: Vec<f64> = (0..m).map(|j| t.data()[(j + m - s) % m]).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(ia);
        Ok(self.push(Op::Roll(ia, s), value, rg))
    }

    /// Single flat element as a one-element tensor.
    pub fn select(&mut self, a: Var, index: usize) -> Result<Var> {
        let ia = self.check(a)?;
        let t = self.val(ia);
        if index >= t.numel() {
            return Err(TensorError::InvalidArgument(format!("index {index} out of {}", t.numel())));
        }
        let value = Tensor::scalar(t.data()[index]);
        let rg = self.rg(ia);
        Ok(self.push(Op::Select(ia, index), value, rg))
    }

    /// Contiguous flat segment `[start, start + product(shape))`, reshaped.
    pub fn slice_flat(&mut self, a: Var, start: usize, shape: &[usize]) -> Result<Var> {
        let ia = self.check(a)?;
        let t = self.val(ia);
        let len: usize = shape.iter().product();
        if start + len > t.numel() {
            return Err(TensorError::InvalidArgument(format!(
                "slice [{start}, {}) exceeds {} elements",
                start + len,
                t.numel()
            )));
        }
        let value = Tensor::new(shape.to_vec(), t.data()[start..start + len].to_vec())?;
        let rg = self.rg(ia);
        Ok(self.push(Op::Slice(ia, start), value, rg))
    }

    /// Nearest-neighbour upsampling of a matrix: every entry is repeated
    /// `k` times along both axes, then the result is cut to `rows × cols`.
    pub fn repeat_expand(&mut self, a: Var, k: usize, rows: usize, cols: usize) -> Result<Var> {
        let ia = self.check(a)?;
        let t = self.val(ia);
        if t.rank() != 2 || k == 0 || t.rows() * k < rows || t.cols() * k < cols {
            return Err(TensorError::InvalidArgument(format!("cannot expand {:?} by {k} to {rows}x{cols}", t.shape())));
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(t.at(r / k, c / k));
            }
        }
        let value = Tensor::matrix(rows, cols, data)?;
        let rg = self.rg(ia);
        Ok(self.push(Op::RepeatExpand { input: ia, k }, value, rg))
    }

    /// Multiplies every `s×s` kernel `(o, i)` of `w: C_out×C_in×s×s` by the
    /// scalar `f[o, i]`.
    pub fn scale_blocks(&mut self, w: Var, f: Var) -> Result<Var> {
        let (iw, iff) = (self.check(w)?, self.check(f)?);
        let (tw, tf) = (self.val(iw), self.val(iff));
        if tw.rank() != 4 || tf.rank() != 2 || tw.shape()[..2] != tf.shape()[..] {
            return Err(mismatch("scale_blocks", tw, tf));
        }
        let block = tw.shape()[2] * tw.shape()[3];
        let mut data = tw.data().to_vec();
        for (chunk, &s) in data.chunks_mut(block).zip(tf.data()) {
            chunk.iter_mut().for_each(|x| *x *= s);
        }
        let value = Tensor::new(tw.shape().to_vec(), data)?;
        let rg = self.rg(iw) || self.rg(iff);
        Ok(self.push(Op::ScaleBlocks(iw, iff), value, rg))
    }

    /// Mean softmax cross-entropy of `logits: batch×classes` against integer
    /// targets.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let il = self.check(logits)?;
        let t = self.val(il);
        if t.rank() != 2 || t.rows() != targets.len() {
            return Err(TensorError::InvalidArgument(format!("logits {:?} vs {} targets", t.shape(), targets.len())));
        }
        let c = t.cols();
        if let Some(&bad) = targets.iter().find(|&&y| y >= c) {
            return Err(TensorError::InvalidArgument(format!("target {bad} outside {c} classes")));
        }
        let mut probs = Vec::with_capacity(t.numel());
        let mut loss = 0.0;
        for (r, &y) in targets.iter().enumerate() {
            let row = t.row(r);
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let z: f64 = row.iter().map(|&x| (x - max).exp()).sum();
            loss -= row[y] - max - z.ln();
            probs.extend(row.iter().map(|&x| (x - max).exp() / z));
        }
        let value = Tensor::scalar(loss / targets.len() as f64);
        let rg = self.rg(il);
        Ok(self.push(Op::SoftmaxCe { logits: il, targets: targets.to_vec(), probs }, value, rg))
    }

    /// Reverse pass from a scalar loss. Nodes are visited in strict reverse
    /// append order, which also fixes the accumulation order.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let il = self.check(loss)?;
        let lt = self.val(il);
        if lt.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; il + 1];
        if self.rg(il) {
            grads[il] = Some(vec![1.0]);
        }
        for i in (0..=il).rev() {
            if !self.rg(i) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.and_then(|g| Tensor::new(self.val(i).shape().to_vec(), g).ok()))
            .collect();
        Ok(Gradients { tape: self.id, generation: self.generation, grads })
    }

    fn send(&self, grads: &mut [Option<Vec<f64>>], to: usize, contrib: Vec<f64>) {
        if self.rg(to) {
            add_into(&mut grads[to], contrib);
        }
    }

    fn send_binary(&self, grads: &mut [Option<Vec<f64>>], to: usize, scalar_side: bool, contrib: Vec<f64>) {
        if scalar_side {
            self.send(grads, to, vec![contrib.iter().sum()]);
        } else {
            self.send(grads, to, contrib);
        }
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = self.val(i);
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.rg(*a) {
                    let mut da = vec![0.0; m * k];
                    matmul_nt_into(g, tb.data(), &mut da, m, n, k);
                    self.send(grads, *a, da);
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; k * n];
                    matmul_tn_into(ta.data(), g, &mut db, m, k, n);
                    self.send(grads, *b, db);
                }
            }
            Op::MatMulNt(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[0]);
                if self.rg(*a) {
                    let mut da = vec![0.0; m * k];
                    matmul_into(g, tb.data(), &mut da, m, n, k);
                    self.send(grads, *a, da);
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; n * k];
                    matmul_tn_into(g, ta.data(), &mut db, m, n, k);
                    self.send(grads, *b, db);
                }
            }
            Op::Add(a, b, bc) | Op::Sub(a, b, bc) => {
                let sign = if matches!(self.nodes[i].op, Op::Sub(..)) { -1.0 } else { 1.0 };
                self.send_binary(grads, *a, *bc == Broadcast::LeftScalar, g.to_vec());
                self.send_binary(grads, *b, *bc == Broadcast::RightScalar, g.iter().map(|x| sign * x).collect());
            }
            Op::Mul(a, b, bc) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                let factor = |t: &Tensor, j: usize| if t.numel() == 1 { t.item() } else { t.data()[j] };
                if self.rg(*a) {
                    let da = g.iter().enumerate().map(|(j, gv)| gv * factor(tb, j)).collect();
                    self.send_binary(grads, *a, *bc == Broadcast::LeftScalar, da);
                }
                if self.rg(*b) {
                    let db = g.iter().enumerate().map(|(j, gv)| gv * factor(ta, j)).collect();
                    self.send_binary(grads, *b, *bc == Broadcast::RightScalar, db);
                }
            }
            Op::Scale(a, c) => self.send(grads, *a, g.iter().map(|x| x * c).collect()),
            Op::Offset(a) | Op::Reshape(a) => self.send(grads, *a, g.to_vec()),
            Op::Cos(a) => {
                let x = self.val(*a).data();
                self.send(grads, *a, g.iter().zip(x).map(|(gv, xv)| -gv * xv.sin()).collect());
            }
            Op::Sin(a) => {
                let x = self.val(*a).data();
                self.send(grads, *a, g.iter().zip(x).map(|(gv, xv)| gv * xv.cos()).collect());
            }
            Op::Abs(a) => {
                let x = self.val(*a).data();
                let d = |v: f64| {
                    if v > 0.0 {
                        1.0
                    } else if v < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                };
                self.send(grads, *a, g.iter().zip(x).map(|(gv, &xv)| gv * d(xv)).collect());
            }
            Op::Sign(_) => {}
            Op::PowConst(a, e) => {
                let x = self.val(*a).data();
                self.send(grads, *a, g.iter().zip(x).map(|(gv, &xv)| gv * pow_deriv(xv, *e)).collect());
            }
            Op::PowVar(b, e) => {
                let x = self.val(*b).data();
                let ev = self.val(*e).item();
                if self.rg(*b) {
                    self.send(grads, *b, g.iter().zip(x).map(|(gv, &xv)| gv * pow_deriv(xv, ev)).collect());
                }
                if self.rg(*e) {
                    let de = g
                        .iter()
                        .zip(x)
                        .zip(out.data())
                        .map(|((gv, &xv), &yv)| if xv > 0.0 { gv * yv * xv.ln() } else { 0.0 })
                        .sum();
                    self.send(grads, *e, vec![de]);
                }
            }
            Op::Silu(a) => {
                let x = self.val(*a).data();
                let d = |v: f64| {
                    let s = sigmoid(v);
                    s * (1.0 + v * (1.0 - s))
                };
                self.send(grads, *a, g.iter().zip(x).map(|(gv, &xv)| gv * d(xv)).collect());
            }
            Op::Sum(a) => self.send(grads, *a, vec![g[0]; self.val(*a).numel()]),
            Op::Mean(a) => {
                let n = self.val(*a).numel();
                self.send(grads, *a, vec![g[0] / n as f64; n]);
            }
            Op::SumAxis(a, axis) | Op::MeanAxis(a, axis) => {
                let t = self.val(*a);
                let (outer, len, inner) = axis_split(t.shape(), *axis);
                let scale = if matches!(self.nodes[i].op, Op::MeanAxis(..)) { 1.0 / len as f64 } else { 1.0 };
                let mut d = vec![0.0; t.numel()];
                for o in 0..outer {
                    for l in 0..len {
                        for k in 0..inner {
                            d[(o * len + l) * inner + k] = g[o * inner + k] * scale;
                        }
                    }
                }
                self.send(grads, *a, d);
            }
            Op::Concat(parts, axis) => {
                if *axis == 0 {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.val(p).numel();
                        self.send(grads, p, g[offset..offset + n].to_vec());
                        offset += n;
                    }
                } else {
                    let total = out.cols();
                    let mut col = 0;
                    for &p in parts {
                        let c = self.val(p).cols();
                        if self.rg(p) {
                            let d = (0..out.rows())
                                .flat_map(|r| g[r * total + col..r * total + col + c].iter().copied())
                                .collect();
                            self.send(grads, p, d);
                        }
                        col += c;
                    }
                }
            }
            Op::AddRow(a, r) => {
                self.send(grads, *a, g.to_vec());
                if self.rg(*r) {
                    let n = self.val(*r).numel();
                    let mut d = vec![0.0; n];
                    for chunk in g.chunks(n) {
                        d.iter_mut().zip(chunk).for_each(|(x, y)| *x += y);
                    }
                    self.send(grads, *r, d);
                }
            }
            Op::Roll(a, s) => {
                let m = g.len();
                // out[j] = a[(j - s) mod m]  =>  da[k] = g[(k + s) mod m]
                self.send(grads, *a, (0..m).map(|k| g[(k + s) % m]).collect());
            }
            Op::Select(a, idx) => {
                let mut d = vec![0.0; self.val(*a).numel()];
                d[*idx] = g[0];
                self.send(grads, *a, d);
            }
            Op::Slice(a, start) => {
                let mut d = vec![0.0; self.val(*a).numel()];
                d[*start..*start + g.len()].copy_from_slice(g);
                self.send(grads, *a, d);
            }
            Op::RepeatExpand { input, k } => {
                let t = self.val(*input);
                let (rows, cols) = (out.rows(), out.cols());
                let mut d = vec![0.0; t.numel()];
                for r in 0..rows {
                    for c in 0..cols {
                        d[(r / k) * t.cols() + c / k] += g[r * cols + c];
                    }
                }
                self.send(grads, *input, d);
            }
            Op::ScaleBlocks(w, f) => {
                let (tw, tf) = (self.val(*w), self.val(*f));
                let block = tw.shape()[2] * tw.shape()[3];
                if self.rg(*w) {
                    let d = g.chunks(block).zip(tf.data()).flat_map(|(gc, &s)| gc.iter().map(move |x| x * s)).collect();
                    self.send(grads, *w, d);
                }
                if self.rg(*f) {
                    let d = g
                        .chunks(block)
                        .zip(tw.data().chunks(block))
                        .map(|(gc, wc)| gc.iter().zip(wc).map(|(a, b)| a * b).sum())
                        .collect();
                    self.send(grads, *f, d);
                }
            }
            Op::SoftmaxCe { logits, targets, probs } => {
                let c = self.val(*logits).cols();
                let scale = g[0] / targets.len() as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &y) in targets.iter().enumerate() {
                    d[r * c + y] -= scale;
                }
                self.send(grads, *logits, d);
            }
        }
    }
}
