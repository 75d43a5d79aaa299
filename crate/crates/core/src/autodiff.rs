//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every forward operation into a linear list of nodes;
//! [`Tape::backward`] walks that list in reverse and accumulates adjoints via
//! the chain rule. The op set is exactly what the prompt/classifier pipeline
//! and its losses need: matmul, bias-style row broadcasts, ReLU, row-wise
//! softmax, guarded log, elementwise arithmetic, reductions, sqrt, reshape,
//! transpose and 1-d concatenation. Everything is f64.
//!
//! Tapes are cheap, single-threaded and meant to be built per optimization
//! step, then dropped. Leaves enter either as constants (no gradient) or as
//! trainable leaves; gradient flows *through* constant leaves to trainable
//! ones but is never accumulated for them, which is how frozen weights stay
//! frozen.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Inputs to `log` are clamped to this floor so entropy-style terms stay
/// finite on zero probabilities.
pub const LOG_FLOOR: f64 = 1e-12;

/// Handle to a value recorded on a [`Tape`].
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    /// `[r, c] + [c]`, the bias pattern.
    AddRows(Var, Var),
    /// `[r, c] ⊙ [c]`, the per-channel scale pattern.
    MulRows(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Relu(Var),
    /// `ln(max(x, LOG_FLOOR))`.
    Log(Var),
    /// Row-wise softmax with max subtraction.
    Softmax(Var),
    Sum(Var),
    Mean(Var),
    Sqrt(Var),
    /// Scalar broadcast to the node's shape.
    Broadcast(Var),
    Scale(Var, f64),
    Offset(Var),
    /// 1-d concatenation; the split point is the first input's length.
    Concat(Var, Var),
    Reshape(Var),
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Ordered record of forward operations with their saved outputs.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if any flowed there.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Like [`Gradients::wrt`] but materializes zeros of the given shape when
    /// no gradient reached `v` (e.g. a constant function of it).
    pub fn wrt_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        match self.wrt(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value recorded for `v`.
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Leaf that never accumulates gradient (data, frozen weights).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    /// Leaf that accumulates gradient.
    pub fn trainable(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    /// Leaf for a [`Parameter`], honoring its `requires_grad` flag.
    pub fn param(&mut self, p: &Parameter) -> Var {
        self.push_leaf(p.value().clone(), p.requires_grad())
    }

    fn push_leaf(&mut self, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool, name: &'static str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn check_finite(&self, v: Var, name: &'static str) -> Result<()> {
        if self.nodes[v.0].value.all_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite { op: name })
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn binary_same_shape(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        self.check_finite(a, name)?;
        self.check_finite(b, name)?;
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::ShapeMismatch {
                op: name,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let data: Vec<f64> = ta
            .data()
            .iter()
            .zip(tb.data().iter())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let value = Tensor::from_vec(ta.shape().to_vec(), data)?;
        let ng = self.needs(a) || self.needs(b);
        self.push(op, value, ng, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn rowwise_shapes(&self, name: &'static str, m: Var, v: Var) -> Result<(usize, usize)> {
        let (tm, tv) = (self.value(m), self.value(v));
        match (tm.shape(), tv.shape()) {
            ([r, c], [n]) if c == n => Ok((*r, *c)),
            _ => Err(Error::ShapeMismatch {
                op: name,
                lhs: tm.shape().to_vec(),
                rhs: tv.shape().to_vec(),
            }),
        }
    }

    /// Bias add: each row of `m` plus the vector `v`.
    pub fn add_rows(&mut self, m: Var, v: Var) -> Result<Var> {
        self.check_finite(m, "add_rows")?;
        self.check_finite(v, "add_rows")?;
        let (r, c) = self.rowwise_shapes("add_rows", m, v)?;
        let mut data = self.value(m).data().to_vec();
        let vec = self.value(v).data();
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] += vec[j];
            }
        }
        let value = Tensor::from_vec(vec![r, c], data)?;
        let ng = self.needs(m) || self.needs(v);
        self.push(Op::AddRows(m, v), value, ng, "add_rows")
    }

    /// Per-channel scale: each row of `m` times the vector `v`.
    pub fn mul_rows(&mut self, m: Var, v: Var) -> Result<Var> {
        self.check_finite(m, "mul_rows")?;
        self.check_finite(v, "mul_rows")?;
        let (r, c) = self.rowwise_shapes("mul_rows", m, v)?;
        let mut data = self.value(m).data().to_vec();
        let vec = self.value(v).data();
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] *= vec[j];
            }
        }
        let value = Tensor::from_vec(vec![r, c], data)?;
        let ng = self.needs(m) || self.needs(v);
        self.push(Op::MulRows(m, v), value, ng, "mul_rows")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_finite(a, "matmul")?;
        self.check_finite(b, "matmul")?;
        let (ta, tb) = (self.value(a), self.value(b));
        let (r, k, k2, c) = match (ta.shape(), tb.shape()) {
            ([r, k], [k2, c]) => (*r, *k, *k2, *c),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "matmul",
                    lhs: ta.shape().to_vec(),
                    rhs: tb.shape().to_vec(),
                })
            }
        };
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let value = matmul_raw(ta, tb, r, k, c);
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::MatMul(a, b), value, ng, "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.check_finite(a, "transpose")?;
        let ta = self.value(a);
        let (r, c) = match ta.shape() {
            [r, c] => (*r, *c),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "transpose",
                    lhs: ta.shape().to_vec(),
                    rhs: vec![],
                })
            }
        };
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = ta.data()[i * c + j];
            }
        }
        let value = Tensor::from_vec(vec![c, r], data)?;
        let ng = self.needs(a);
        self.push(Op::Transpose(a), value, ng, "transpose")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.check_finite(a, "relu")?;
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .map(|&x| if x > 0.0 { x } else { 0.0 })
            .collect();
        let value = Tensor::from_vec(self.value(a).shape().to_vec(), data)?;
        let ng = self.needs(a);
        self.push(Op::Relu(a), value, ng, "relu")
    }

    /// Natural log with inputs clamped to [`LOG_FLOOR`].
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.check_finite(a, "log")?;
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .map(|&x| x.max(LOG_FLOOR).ln())
            .collect();
        let value = Tensor::from_vec(self.value(a).shape().to_vec(), data)?;
        let ng = self.needs(a);
        self.push(Op::Log(a), value, ng, "log")
    }

    /// Row-wise softmax (a vector is one row), max-subtracted for stability.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.check_finite(a, "softmax")?;
        let ta = self.value(a);
        let (rows, cols) = match ta.shape() {
            [n] => (1usize, *n),
            [r, c] => (*r, *c),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "softmax",
                    lhs: ta.shape().to_vec(),
                    rhs: vec![],
                })
            }
        };
        if cols == 0 {
            return Err(Error::contract("softmax over an empty axis"));
        }
        let mut data = vec![0.0; rows * cols];
        for i in 0..rows {
            let row = &ta.data()[i * cols..(i + 1) * cols];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (j, &x) in row.iter().enumerate() {
                let e = (x - m).exp();
                data[i * cols + j] = e;
                sum += e;
            }
            for j in 0..cols {
                data[i * cols + j] /= sum;
            }
        }
        let value = Tensor::from_vec(ta.shape().to_vec(), data)?;
        let ng = self.needs(a);
        self.push(Op::Softmax(a), value, ng, "softmax")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check_finite(a, "sum")?;
        let s: f64 = self.value(a).data().iter().sum();
        let ng = self.needs(a);
        self.push(Op::Sum(a), Tensor::scalar(s), ng, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.check_finite(a, "mean")?;
        let t = self.value(a);
        if t.is_empty() {
            return Err(Error::contract("mean of an empty tensor"));
        }
        let s: f64 = t.data().iter().sum::<f64>() / t.len() as f64;
        let ng = self.needs(a);
        self.push(Op::Mean(a), Tensor::scalar(s), ng, "mean")
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.check_finite(a, "sqrt")?;
        let data: Vec<f64> = self.value(a).data().iter().map(|&x| x.sqrt()).collect();
        let value = Tensor::from_vec(self.value(a).shape().to_vec(), data)?;
        let ng = self.needs(a);
        self.push(Op::Sqrt(a), value, ng, "sqrt")
    }

    /// Broadcast a scalar to `shape`.
    pub fn broadcast(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.check_finite(a, "broadcast")?;
        let ta = self.value(a);
        if !ta.is_scalar() {
            return Err(Error::ShapeMismatch {
                op: "broadcast",
                lhs: ta.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let value = Tensor::filled(shape, ta.data()[0]);
        let ng = self.needs(a);
        self.push(Op::Broadcast(a), value, ng, "broadcast")
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.check_finite(a, "scale")?;
        let data: Vec<f64> = self.value(a).data().iter().map(|&x| x * factor).collect();
        let value = Tensor::from_vec(self.value(a).shape().to_vec(), data)?;
        let ng = self.needs(a);
        self.push(Op::Scale(a, factor), value, ng, "scale")
    }

    pub fn offset(&mut self, a: Var, delta: f64) -> Result<Var> {
        self.check_finite(a, "offset")?;
        let data: Vec<f64> = self.value(a).data().iter().map(|&x| x + delta).collect();
        let value = Tensor::from_vec(self.value(a).shape().to_vec(), data)?;
        let ng = self.needs(a);
        self.push(Op::Offset(a), value, ng, "offset")
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    /// Concatenate two vectors.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_finite(a, "concat")?;
        self.check_finite(b, "concat")?;
        let (ta, tb) = (self.value(a), self.value(b));
        match (ta.shape(), tb.shape()) {
            ([_], [_]) => {}
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: ta.shape().to_vec(),
                    rhs: tb.shape().to_vec(),
                })
            }
        }
        let mut data = ta.data().to_vec();
        data.extend_from_slice(tb.data());
        let value = Tensor::vector(data);
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Concat(a, b), value, ng, "concat")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.check_finite(a, "reshape")?;
        let ta = self.value(a);
        let n: usize = shape.iter().product();
        if n != ta.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: ta.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let value = Tensor::from_vec(shape.to_vec(), ta.data().to_vec())?;
        let ng = self.needs(a);
        self.push(Op::Reshape(a), value, ng, "reshape")
    }

    // ── composed ops ────────────────────────────────────────────────────

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let p = self.mul(a, b)?;
        self.sum(p)
    }

    pub fn l2_norm(&mut self, a: Var) -> Result<Var> {
        let sq = self.square(a)?;
        let s = self.sum(sq)?;
        self.sqrt(s)
    }

    /// Cosine similarity of two vectors.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.dot(a, b)?;
        let na = self.l2_norm(a)?;
        let nb = self.l2_norm(b)?;
        let denom = self.mul(na, nb)?;
        self.div(d, denom)
    }

    /// Population variance (divisor n) over all elements.
    pub fn variance(&mut self, a: Var) -> Result<Var> {
        let shape = self.value(a).shape().to_vec();
        let m = self.mean(a)?;
        let mb = self.broadcast(m, &shape)?;
        let centered = self.sub(a, mb)?;
        let sq = self.square(centered)?;
        self.mean(sq)
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar `loss`, returning one adjoint per
    /// gradient-requiring node it reaches. Frozen leaves pass gradient
    /// through the ops they feed but never accumulate any themselves.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::from_vec(lt.shape().to_vec(), vec![1.0])?);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let adjoint = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(idx, &adjoint, &mut grads);
            grads[idx] = Some(adjoint);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, dy: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        match node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(grads, a, dy.data().iter().cloned());
                self.accum(grads, b, dy.data().iter().cloned());
            }
            Op::Sub(a, b) => {
                self.accum(grads, a, dy.data().iter().cloned());
                self.accum(grads, b, dy.data().iter().map(|g| -g));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(a), self.value(b));
                self.accum(
                    grads,
                    a,
                    dy.data().iter().zip(tb.data()).map(|(g, y)| g * y),
                );
                self.accum(
                    grads,
                    b,
                    dy.data().iter().zip(ta.data()).map(|(g, x)| g * x),
                );
            }
            Op::Div(a, b) => {
                let (ta, tb) = (self.value(a), self.value(b));
                self.accum(
                    grads,
                    a,
                    dy.data().iter().zip(tb.data()).map(|(g, y)| g / y),
                );
                self.accum(
                    grads,
                    b,
                    dy.data()
                        .iter()
                        .zip(ta.data().iter().zip(tb.data()))
                        .map(|(g, (x, y))| -g * x / (y * y)),
                );
            }
            Op::AddRows(m, v) => {
                let cols = self.value(v).len();
                self.accum(grads, m, dy.data().iter().cloned());
                let mut dv = vec![0.0; cols];
                for (i, g) in dy.data().iter().enumerate() {
                    dv[i % cols] += g;
                }
                self.accum(grads, v, dv.into_iter());
            }
            Op::MulRows(m, v) => {
                let tv = self.value(v);
                let tm = self.value(m);
                let cols = tv.len();
                self.accum(
                    grads,
                    m,
                    dy.data()
                        .iter()
                        .enumerate()
                        .map(|(i, g)| g * tv.data()[i % cols]),
                );
                let mut dv = vec![0.0; cols];
                for (i, g) in dy.data().iter().enumerate() {
                    dv[i % cols] += g * tm.data()[i];
                }
                self.accum(grads, v, dv.into_iter());
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(a), self.value(b));
                let (r, k) = (ta.shape()[0], ta.shape()[1]);
                let c = tb.shape()[1];
                if self.nodes[a.0].needs_grad {
                    // dA = dC · Bᵀ
                    let mut da = vec![0.0; r * k];
                    for i in 0..r {
                        for j in 0..c {
                            let g = dy.data()[i * c + j];
                            if g != 0.0 {
                                for l in 0..k {
                                    da[i * k + l] += g * tb.data()[l * c + j];
                                }
                            }
                        }
                    }
                    self.accum(grads, a, da.into_iter());
                }
                if self.nodes[b.0].needs_grad {
                    // dB = Aᵀ · dC
                    let mut db = vec![0.0; k * c];
                    for i in 0..r {
                        for l in 0..k {
                            let x = ta.data()[i * k + l];
                            if x != 0.0 {
                                for j in 0..c {
                                    db[l * c + j] += x * dy.data()[i * c + j];
                                }
                            }
                        }
                    }
                    self.accum(grads, b, db.into_iter());
                }
            }
            Op::Transpose(a) => {
                let (c, r) = (node.value.shape()[0], node.value.shape()[1]);
                let mut da = vec![0.0; r * c];
                for i in 0..c {
                    for j in 0..r {
                        da[j * c + i] = dy.data()[i * r + j];
                    }
                }
                self.accum(grads, a, da.into_iter());
            }
            Op::Relu(a) => {
                let ta = self.value(a);
                self.accum(
                    grads,
                    a,
                    dy.data()
                        .iter()
                        .zip(ta.data())
                        .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }),
                );
            }
            Op::Log(a) => {
                let ta = self.value(a);
                self.accum(
                    grads,
                    a,
                    dy.data()
                        .iter()
                        .zip(ta.data())
                        .map(|(g, x)| if *x >= LOG_FLOOR { g / x } else { 0.0 }),
                );
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let cols = *y.shape().last().unwrap();
                let rows = y.len() / cols;
                let mut da = vec![0.0; y.len()];
                for i in 0..rows {
                    let ys = &y.data()[i * cols..(i + 1) * cols];
                    let gs = &dy.data()[i * cols..(i + 1) * cols];
                    let inner: f64 = ys.iter().zip(gs).map(|(y, g)| y * g).sum();
                    for j in 0..cols {
                        da[i * cols + j] = ys[j] * (gs[j] - inner);
                    }
                }
                self.accum(grads, a, da.into_iter());
            }
            Op::Sum(a) => {
                let g = dy.data()[0];
                let n = self.value(a).len();
                self.accum(grads, a, std::iter::repeat(g).take(n));
            }
            Op::Mean(a) => {
                let n = self.value(a).len();
                let g = dy.data()[0] / n as f64;
                self.accum(grads, a, std::iter::repeat(g).take(n));
            }
            Op::Sqrt(a) => {
                let y = &node.value;
                self.accum(
                    grads,
                    a,
                    dy.data()
                        .iter()
                        .zip(y.data())
                        .map(|(g, s)| 0.5 * g / s.max(1e-150)),
                );
            }
            Op::Broadcast(a) => {
                let total: f64 = dy.data().iter().sum();
                self.accum(grads, a, std::iter::once(total));
            }
            Op::Scale(a, factor) => {
                self.accum(grads, a, dy.data().iter().map(|g| g * factor));
            }
            Op::Offset(a) => {
                self.accum(grads, a, dy.data().iter().cloned());
            }
            Op::Concat(a, b) => {
                let na = self.value(a).len();
                self.accum(grads, a, dy.data()[..na].iter().cloned());
                self.accum(grads, b, dy.data()[na..].iter().cloned());
            }
            Op::Reshape(a) => {
                self.accum(grads, a, dy.data().iter().cloned());
            }
        }
    }

    fn accum(&self, grads: &mut [Option<Tensor>], v: Var, delta: impl Iterator<Item = f64>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let shape = self.nodes[v.0].value.shape().to_vec();
        let slot = &mut grads[v.0];
        match slot {
            Some(t) => {
                for (dst, d) in t.data_mut().iter_mut().zip(delta) {
                    *dst += d;
                }
            }
            None => {
                let data: Vec<f64> = delta.collect();
                debug_assert_eq!(data.len(), shape.iter().product::<usize>());
                *slot = Some(Tensor::from_vec(shape, data).expect("adjoint shape"));
            }
        }
    }
}

fn matmul_raw(a: &Tensor, b: &Tensor, r: usize, k: usize, c: usize) -> Tensor {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for l in 0..k {
            let x = a.data()[i * k + l];
            if x != 0.0 {
                let row = &b.data()[l * c..(l + 1) * c];
                for (j, y) in row.iter().enumerate() {
                    out[i * c + j] += x * y;
                }
            }
        }
    }
    Tensor::from_vec(vec![r, c], out).expect("matmul shape")
}

// ── parameters ─────────────────────────────────────────────────────────

/// A named value with an optional gradient accumulator.
///
/// Frozen parameters (`requires_grad == false`) still participate in forward
/// passes as constants; their accumulator is never written.
#[derive(Clone, Debug)]
pub struct Parameter {
    value: Tensor,
    grad: Tensor,
    requires_grad: bool,
}

impl Parameter {
    pub fn trainable(value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Parameter {
            value,
            grad,
            requires_grad: true,
        }
    }

    pub fn frozen(value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Parameter {
            value,
            grad,
            requires_grad: false,
        }
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn grad(&self) -> &Tensor {
        &self.grad
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn zero_grad(&mut self) {
        for g in self.grad.data_mut() {
            *g = 0.0;
        }
    }

    /// Pull this parameter's gradient out of a backward result. Errors when
    /// called on a frozen parameter; absent gradients count as zero.
    pub fn take_grad(&mut self, grads: &Gradients, v: Var) -> Result<()> {
        if !self.requires_grad {
            return Err(Error::contract(
                "take_grad on a frozen parameter; frozen parameters never receive updates",
            ));
        }
        self.grad = grads.wrt_or_zeros(v, self.value.shape());
        Ok(())
    }

    /// In-place value update used by the optimizer.
    pub fn apply_delta(&mut self, delta: &[f64]) {
        debug_assert_eq!(delta.len(), self.value.len());
        for (v, d) in self.value.data_mut().iter_mut().zip(delta) {
            *v += d;
        }
    }
}

// ── gradient checking ──────────────────────────────────────────────────

/// Compare the tape gradient of a scalar-valued function against central
/// finite differences at `point`.
///
/// Returns the max over coordinates of
/// `|analytic − central difference| / max(1, |analytic|)`; the caller decides
/// what to assert. The probe function is rebuilt on a fresh tape for every
/// evaluation, so it must be deterministic.
pub fn grad_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.trainable(point.clone());
    let loss = f(&mut tape, x)?;
    if !tape.value(loss).is_scalar() {
        return Err(Error::contract("grad_check probe must produce a scalar"));
    }
    let grads = tape.backward(loss)?;
    let analytic = grads.wrt_or_zeros(x, point.shape());

    let eval = |p: &Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let x = t.constant(p.clone());
        let l = f(&mut t, x)?;
        t.value(l).item()
    };

    let mut worst: f64 = 0.0;
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] += step;
        let mut minus = point.clone();
        minus.data_mut()[i] -= step;
        let fd = (eval(&plus)? - eval(&minus)?) / (2.0 * step);
        let a = analytic.data()[i];
        let err = (a - fd).abs() / a.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
