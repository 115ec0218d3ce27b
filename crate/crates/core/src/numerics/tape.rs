//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! Operations are recorded in execution order, so node ids are already a
//! topological order and `backward` is a single reverse sweep. Only matrix
//! products increment the multiply counter; that counter is what the cost
//! model in `analysis` is checked against.

use std::collections::BTreeMap;

use rand::Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Tanh,
    Relu,
    Scale(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Bmm(Var, Var),
    Transpose(Var),
    Binary {
        op: Elementwise,
        a: Var,
        b: Var,
    },
    Tanh(Var),
    Relu(Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    Reshape(Var),
    Reduce {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
        mean: bool,
    },
    SumAll(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
    TileCols {
        x: Var,
        reps: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    GaussianKl {
        mean: Var,
        log_std: Var,
        teacher_mean: Vec<f64>,
        teacher_log_std: Vec<f64>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Bmm(a, b) | Op::AddRow(a, b) => vec![*a, *b],
            Op::Binary { a, b, .. } => vec![*a, *b],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::GaussianKl { mean, log_std, .. } => vec![*mean, *log_std],
            Op::Transpose(x)
            | Op::Tanh(x)
            | Op::Relu(x)
            | Op::Scale(x, _)
            | Op::Reshape(x)
            | Op::SumAll(x)
            | Op::Softmax(x)
            | Op::Reduce { x, .. }
            | Op::Dropout { x, .. }
            | Op::Clamp { x, .. }
            | Op::TileCols { x, .. }
            | Op::SliceCols { x, .. } => vec![*x],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    finite: bool,
}

/// Gradients of a scalar loss with respect to every `requires_grad` leaf.
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    map: BTreeMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.map.get(&v)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Gradient for `v`, or zeros shaped like `like` when `v` did not
    /// influence the loss.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.map
            .get(&v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    mul_count: u64,
}

// out[m×n] += a[m×k] · b[k×n]
fn gemm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

// out[m×n] += a[m×k] · b[n×k]ᵀ
fn gemm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                s += x * y;
            }
            out[i * n + j] += s;
        }
    }
}

// out[m×n] += a[k×m]ᵀ · b[k×n]
fn gemm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
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

    /// Multiply-accumulate operations executed by matrix products so far.
    pub fn multiply_count(&self) -> u64 {
        self.mul_count
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let inputs = op.inputs();
        let needs_grad = match op {
            Op::Leaf => value.requires_grad(),
            _ => inputs.iter().any(|&i| self.needs(i)),
        };
        let finite = value.is_finite();
        if cfg!(debug_assertions)
            && !finite
            && !matches!(op, Op::Leaf)
            && inputs.iter().all(|i| self.nodes[i.0].finite)
        {
            panic!("operation {op:?} produced non-finite values from finite inputs");
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            finite,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf; it participates in differentiation iff the tensor's
    /// `requires_grad` flag is set.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.set_requires_grad(false);
        self.push(t, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(shape_err("matmul", ta, tb));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm_nn(ta.data(), tb.data(), m, k, n, &mut out);
        self.mul_count += (m * k * n) as u64;
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    /// Batched product of rank-3 tensors; a batch extent of 1 on either
    /// side broadcasts.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 3 || tb.rank() != 3 || ta.shape()[2] != tb.shape()[1] {
            return Err(shape_err("bmm", ta, tb));
        }
        let (ba, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
        let (bb, n) = (tb.shape()[0], tb.shape()[2]);
        if ba != bb && ba != 1 && bb != 1 {
            return Err(shape_err("bmm", ta, tb));
        }
        let batch = ba.max(bb);
        let mut out = vec![0.0; batch * m * n];
        for t in 0..batch {
            let ia = if ba == 1 { 0 } else { t };
            let ib = if bb == 1 { 0 } else { t };
            gemm_nn(
                &ta.data()[ia * m * k..(ia + 1) * m * k],
                &tb.data()[ib * k * n..(ib + 1) * k * n],
                m,
                k,
                n,
                &mut out[t * m * n..(t + 1) * m * n],
            );
        }
        self.mul_count += (batch * m * k * n) as u64;
        let value = Tensor::new(vec![batch, m, n], out)?;
        Ok(self.push(value, Op::Bmm(a, b)))
    }

    /// Swaps the last two axes of a rank-2 or rank-3 tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let value = match t.rank() {
            2 => t.transposed(),
            3 => {
                let (b, r, c) = (t.shape()[0], t.shape()[1], t.shape()[2]);
                let mut out = vec![0.0; b * r * c];
                for s in 0..b {
                    for i in 0..r {
                        for j in 0..c {
                            out[s * r * c + j * r + i] = t.data()[s * r * c + i * c + j];
                        }
                    }
                }
                Tensor::new(vec![b, c, r], out)?
            }
            rank => return Err(Error::Axis { axis: 1, rank }),
        };
        Ok(self.push(value, Op::Transpose(x)))
    }

    pub fn elementwise(&mut self, op: Elementwise, inputs: &[Var]) -> Result<Var> {
        match (op, inputs) {
            (Elementwise::Add | Elementwise::Sub | Elementwise::Mul, &[a, b]) => {
                self.binary(op, a, b)
            }
            (Elementwise::Tanh, &[x]) => Ok(self.tanh(x)),
            (Elementwise::Relu, &[x]) => Ok(self.relu(x)),
            (Elementwise::Scale(s), &[x]) => Ok(self.scale(x, s)),
            _ => Err(Error::Shape {
                op: "elementwise arity",
                lhs: vec![],
                rhs: vec![inputs.len()],
            }),
        }
    }

    fn binary(&mut self, op: Elementwise, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let f = |x: f64, y: f64| match op {
            Elementwise::Add => x + y,
            Elementwise::Sub => x - y,
            _ => x * y,
        };
        let value = if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(ta.shape().to_vec(), data)?
        } else if tb.numel() == 1 {
            let y = tb.item();
            let data = ta.data().iter().map(|&x| f(x, y)).collect();
            Tensor::new(ta.shape().to_vec(), data)?
        } else if ta.numel() == 1 {
            let x = ta.item();
            let data = tb.data().iter().map(|&y| f(x, y)).collect();
            Tensor::new(tb.shape().to_vec(), data)?
        } else {
            return Err(shape_err("elementwise", ta, tb));
        };
        Ok(self.push(value, Op::Binary { op, a, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Elementwise::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Elementwise::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Elementwise::Mul, a, b)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v.tanh()).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| v.max(0.0)).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Relu(x))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v * s).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Scale(x, s))
    }

    /// Adds a bias vector to every row along the last axis.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let n = tx.cols();
        if tb.numel() != n {
            return Err(shape_err("add_row", tx, tb));
        }
        let bd = tb.data();
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(n) {
            for (v, b) in row.iter_mut().zip(bd) {
                *v += b;
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(value, Op::AddRow(x, bias)))
    }

    /// Linear layer `x·w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshaped(shape)?;
        Ok(self.push(value, Op::Reshape(x)))
    }

    fn reduce(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let t = self.value(x);
        let rank = t.rank();
        if axis >= rank {
            return Err(Error::Axis { axis, rank });
        }
        let outer: usize = t.shape()[..axis].iter().product();
        let len = t.shape()[axis];
        let inner: usize = t.shape()[axis + 1..].iter().product();
        let scale = if mean { 1.0 / len as f64 } else { 1.0 };
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &t.data()[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        if mean {
            out.iter_mut().for_each(|v| *v *= scale);
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::Reduce {
                x,
                outer,
                len,
                inner,
                mean,
            },
        ))
    }

    /// Arithmetic mean along `axis`; the axis is removed from the shape.
    pub fn reduce_mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, axis, true)
    }

    pub fn reduce_sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, axis, false)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x))
    }

    /// Softmax along the last axis, stabilized by the row maximum.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = t.cols();
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Softmax(x))
    }

    /// Layer normalization over the last axis followed by `gain ⊙ x̂ + bias`.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        const EPS: f64 = 1e-5;
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let n = tx.cols();
        if tg.numel() != n || tb.numel() != n {
            return Err(shape_err("layernorm", tx, tg));
        }
        let rows = tx.numel() / n.max(1);
        let mut xhat = vec![0.0; tx.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; tx.numel()];
        for r in 0..rows {
            let row = &tx.data()[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + EPS).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[r * n + j] = h;
                out[r * n + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    /// Inverted dropout: survivors are scaled by `1/(1-p)` in training, and
    /// evaluation mode is the identity (the same node is returned).
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        p: f64,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Probability(p));
        }
        if mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let t = self.value(x);
        let mask: Vec<f64> = (0..t.numel())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Dropout { x, mask }))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v.clamp(lo, hi)).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Clamp { x, lo, hi })
    }

    /// Repeats the columns of a matrix `reps` times: `[r, c] -> [r, c·reps]`.
    pub fn tile_cols(&mut self, x: Var, reps: usize) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(r * c * reps);
        for i in 0..r {
            for _ in 0..reps {
                data.extend_from_slice(t.row(i));
            }
        }
        let value = Tensor::new(vec![r, c * reps], data)?;
        Ok(self.push(value, Op::TileCols { x, reps }))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = (t.rows(), t.cols());
        if start > end || end > c {
            return Err(Error::Shape {
                op: "slice_cols",
                lhs: t.shape().to_vec(),
                rhs: vec![start, end],
            });
        }
        let mut data = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            data.extend_from_slice(&t.row(i)[start..end]);
        }
        let value = Tensor::new(vec![r, end - start], data)?;
        Ok(self.push(value, Op::SliceCols { x, start }))
    }

    /// Summed KL(teacher ‖ student) between diagonal Gaussians. The student's
    /// `log_std` may be a single row broadcast over every row of `mean`.
    pub fn gaussian_kl(
        &mut self,
        mean: Var,
        log_std: Var,
        teacher_mean: &[f64],
        teacher_log_std: &[f64],
    ) -> Result<Var> {
        let (tm, tl) = (self.value(mean), self.value(log_std));
        let n = tm.numel();
        let d = tm.cols();
        if teacher_mean.len() != n
            || teacher_log_std.len() != n
            || (tl.numel() != n && tl.numel() != d)
        {
            return Err(shape_err("gaussian_kl", tm, tl));
        }
        let mut kl = 0.0;
        for i in 0..n {
            let ls = tl.data()[i % tl.numel()];
            let inv_var = (-2.0 * ls).exp();
            let diff = teacher_mean[i] - tm.data()[i];
            kl += ls - teacher_log_std[i]
                + ((2.0 * teacher_log_std[i]).exp() + diff * diff) * 0.5 * inv_var
                - 0.5;
        }
        Ok(self.push(
            Tensor::scalar(kl),
            Op::GaussianKl {
                mean,
                log_std,
                teacher_mean: teacher_mean.to_vec(),
                teacher_log_std: teacher_log_std.to_vec(),
            },
        ))
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if !self.needs(loss) {
            return Ok(Gradients::default());
        }
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                    if self.needs(*a) {
                        gemm_nt(&g, tb.data(), m, n, k, slot(&mut grads, *a, m * k));
                    }
                    if self.needs(*b) {
                        gemm_tn(ta.data(), &g, k, m, n, slot(&mut grads, *b, k * n));
                    }
                }
                Op::Bmm(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (ba, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
                    let (bb, n) = (tb.shape()[0], tb.shape()[2]);
                    let batch = ba.max(bb);
                    for t in 0..batch {
                        let ia = if ba == 1 { 0 } else { t };
                        let ib = if bb == 1 { 0 } else { t };
                        let gs = &g[t * m * n..(t + 1) * m * n];
                        if self.needs(*a) {
                            let ga = slot(&mut grads, *a, ba * m * k);
                            gemm_nt(
                                gs,
                                &tb.data()[ib * k * n..(ib + 1) * k * n],
                                m,
                                n,
                                k,
                                &mut ga[ia * m * k..(ia + 1) * m * k],
                            );
                        }
                        if self.needs(*b) {
                            let gb = slot(&mut grads, *b, bb * k * n);
                            gemm_tn(
                                &ta.data()[ia * m * k..(ia + 1) * m * k],
                                gs,
                                k,
                                m,
                                n,
                                &mut gb[ib * k * n..(ib + 1) * k * n],
                            );
                        }
                    }
                }
                Op::Transpose(x) => {
                    let tx = self.value(*x);
                    let s = tx.shape();
                    let (b, r, c) = if s.len() == 2 {
                        (1, s[0], s[1])
                    } else {
                        (s[0], s[1], s[2])
                    };
                    let gx = slot(&mut grads, *x, b * r * c);
                    for t in 0..b {
                        for i in 0..r {
                            for j in 0..c {
                                gx[t * r * c + i * c + j] += g[t * r * c + j * r + i];
                            }
                        }
                    }
                }
                Op::Binary { op, a, b } => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (na, nb) = (ta.numel(), tb.numel());
                    let n = g.len();
                    let av = |i: usize| ta.data()[if na == 1 { 0 } else { i }];
                    let bv = |i: usize| tb.data()[if nb == 1 { 0 } else { i }];
                    if self.needs(*a) {
                        let mut ga = vec![0.0; na];
                        for i in 0..n {
                            let d = match op {
                                Elementwise::Mul => g[i] * bv(i),
                                _ => g[i],
                            };
                            ga[if na == 1 { 0 } else { i }] += d;
                        }
                        let sa = slot(&mut grads, *a, na);
                        sa.iter_mut().zip(&ga).for_each(|(s, d)| *s += d);
                    }
                    if self.needs(*b) {
                        let mut gb = vec![0.0; nb];
                        for i in 0..n {
                            let d = match op {
                                Elementwise::Mul => g[i] * av(i),
                                Elementwise::Sub => -g[i],
                                _ => g[i],
                            };
                            gb[if nb == 1 { 0 } else { i }] += d;
                        }
                        let sb = slot(&mut grads, *b, nb);
                        sb.iter_mut().zip(&gb).for_each(|(s, d)| *s += d);
                    }
                }
                Op::Tanh(x) => {
                    let y = node.value.data();
                    let gx = slot(&mut grads, *x, y.len());
                    for i in 0..y.len() {
                        gx[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                }
                Op::Relu(x) => {
                    let xv = self.value(*x).data();
                    let gx = slot(&mut grads, *x, xv.len());
                    for i in 0..xv.len() {
                        if xv[i] > 0.0 {
                            gx[i] += g[i];
                        }
                    }
                }
                Op::Scale(x, s) => {
                    let gx = slot(&mut grads, *x, g.len());
                    gx.iter_mut().zip(&g).for_each(|(a, b)| *a += b * s);
                }
                Op::AddRow(x, bias) => {
                    let n = self.value(*bias).numel();
                    if self.needs(*x) {
                        let gx = slot(&mut grads, *x, g.len());
                        gx.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                    }
                    if self.needs(*bias) {
                        let gb = slot(&mut grads, *bias, n);
                        for row in g.chunks(n) {
                            gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                        }
                    }
                }
                Op::Reshape(x) => {
                    let gx = slot(&mut grads, *x, g.len());
                    gx.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                }
                Op::Reduce {
                    x,
                    outer,
                    len,
                    inner,
                    mean,
                } => {
                    let (outer, len, inner) = (*outer, *len, *inner);
                    let scale = if *mean { 1.0 / len as f64 } else { 1.0 };
                    let gx = slot(&mut grads, *x, outer * len * inner);
                    for o in 0..outer {
                        for l in 0..len {
                            for i in 0..inner {
                                gx[(o * len + l) * inner + i] += g[o * inner + i] * scale;
                            }
                        }
                    }
                }
                Op::SumAll(x) => {
                    let n = self.value(*x).numel();
                    let gx = slot(&mut grads, *x, n);
                    gx.iter_mut().for_each(|a| *a += g[0]);
                }
                Op::Softmax(x) => {
                    let y = node.value.data();
                    let n = node.value.cols();
                    let gx = slot(&mut grads, *x, y.len());
                    for r in 0..y.len() / n {
                        let ys = &y[r * n..(r + 1) * n];
                        let gs = &g[r * n..(r + 1) * n];
                        let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            gx[r * n + j] += ys[j] * (gs[j] - dot);
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let n = self.value(*gain).numel();
                    let gv = self.value(*gain).data();
                    let rows = inv_std.len();
                    if self.needs(*x) {
                        let gx = slot(&mut grads, *x, rows * n);
                        for r in 0..rows {
                            let xh = &xhat[r * n..(r + 1) * n];
                            let gs = &g[r * n..(r + 1) * n];
                            let dxh: Vec<f64> = (0..n).map(|j| gs[j] * gv[j]).collect();
                            let m1 = dxh.iter().sum::<f64>() / n as f64;
                            let m2 = dxh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                            for j in 0..n {
                                gx[r * n + j] += inv_std[r] * (dxh[j] - m1 - xh[j] * m2);
                            }
                        }
                    }
                    if self.needs(*gain) {
                        let gg = slot(&mut grads, *gain, n);
                        for r in 0..rows {
                            for j in 0..n {
                                gg[j] += g[r * n + j] * xhat[r * n + j];
                            }
                        }
                    }
                    if self.needs(*bias) {
                        let gb = slot(&mut grads, *bias, n);
                        for r in 0..rows {
                            for j in 0..n {
                                gb[j] += g[r * n + j];
                            }
                        }
                    }
                }
                Op::Dropout { x, mask } => {
                    let gx = slot(&mut grads, *x, g.len());
                    for i in 0..g.len() {
                        gx[i] += g[i] * mask[i];
                    }
                }
                Op::Clamp { x, lo, hi } => {
                    let xv = self.value(*x).data();
                    let gx = slot(&mut grads, *x, xv.len());
                    for i in 0..xv.len() {
                        if xv[i] >= *lo && xv[i] <= *hi {
                            gx[i] += g[i];
                        }
                    }
                }
                Op::TileCols { x, reps } => {
                    let tx = self.value(*x);
                    let (r, c) = (tx.rows(), tx.cols());
                    let gx = slot(&mut grads, *x, r * c);
                    for i in 0..r {
                        for k in 0..*reps {
                            for j in 0..c {
                                gx[i * c + j] += g[i * c * reps + k * c + j];
                            }
                        }
                    }
                }
                Op::SliceCols { x, start } => {
                    let tx = self.value(*x);
                    let (r, c) = (tx.rows(), tx.cols());
                    let w = node.value.cols();
                    let gx = slot(&mut grads, *x, r * c);
                    for i in 0..r {
                        for j in 0..w {
                            gx[i * c + start + j] += g[i * w + j];
                        }
                    }
                }
                Op::GaussianKl {
                    mean,
                    log_std,
                    teacher_mean,
                    teacher_log_std,
                } => {
                    let (tm, tl) = (self.value(*mean), self.value(*log_std));
                    let n = tm.numel();
                    let nl = tl.numel();
                    let mut gm = vec![0.0; n];
                    let mut gl = vec![0.0; nl];
                    for i in 0..n {
                        let ls = tl.data()[i % nl];
                        let inv_var = (-2.0 * ls).exp();
                        let diff = teacher_mean[i] - tm.data()[i];
                        gm[i] = -diff * inv_var * g[0];
                        gl[i % nl] +=
                            (1.0 - ((2.0 * teacher_log_std[i]).exp() + diff * diff) * inv_var)
                                * g[0];
                    }
                    if self.needs(*mean) {
                        let s = slot(&mut grads, *mean, n);
                        s.iter_mut().zip(&gm).for_each(|(a, b)| *a += b);
                    }
                    if self.needs(*log_std) {
                        let s = slot(&mut grads, *log_std, nl);
                        s.iter_mut().zip(&gl).for_each(|(a, b)| *a += b);
                    }
                }
            }
        }

        let mut map = BTreeMap::new();
        for (id, g) in grads.into_iter().enumerate() {
            let node = &self.nodes[id];
            if let (Op::Leaf, true, Some(g)) = (&node.op, node.needs_grad, g) {
                map.insert(Var(id), Tensor::new(node.value.shape().to_vec(), g)?);
            }
        }
        Ok(Gradients { map })
    }
}
