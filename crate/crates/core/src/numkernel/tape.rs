//! Tensor-level reverse-mode gradient tape.
//!
//! Every operation on a [`Var`] appends a node holding its value and the
//! indices of its inputs. [`Tape::backward`] walks the nodes in reverse,
//! accumulating adjoints, and returns one gradient per trainable leaf. The
//! tape is single-threaded (`RefCell`); batch-parallel work uses one tape
//! per batch element.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use super::tensor::{
    conv1d_backward, conv1d_raw, conv_geometry, matmul_raw, matvec_raw, matvec_t_raw, ConvGeom,
};
use super::Tensor;
use crate::error::{shape_err, Error, Result};

/// Operation with a hand-written adjoint, for fused kernels that would be
/// wasteful to express with primitives.
pub trait CustomOp {
    /// Adjoints for each input, given the forward inputs, output and the
    /// output adjoint.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &[f64]) -> Vec<Vec<f64>>;
}

#[derive(Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    AddConst(usize),
    MulConst(usize, f64),
    /// tensor × scalar node
    Scale(usize, usize),
    /// tensor + scalar node
    Shift(usize, usize),
    Exp(usize),
    Log(usize),
    Tanh(usize),
    Sigmoid(usize),
    Sqrt(usize),
    Relu(usize),
    Softplus(usize),
    Square(usize),
    Abs(usize),
    Clamp(usize, f64, f64),
    Sum(usize),
    Mean(usize),
    MatVec(usize, usize),
    MatVecT(usize, usize),
    MatMul(usize, usize),
    Conv1d(usize, usize, ConvGeom),
    ChannelBias(usize, usize),
    Stack(Vec<usize>),
    Row(usize, usize),
    Reshape(usize),
    Custom(Vec<usize>, Rc<dyn CustomOp>),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    trainable: bool,
}

#[derive(Default)]
struct Inner {
    nodes: Vec<Node>,
    first_non_finite: Option<usize>,
}

/// Recording of a computation for reverse-mode differentiation.
#[derive(Default)]
pub struct Tape {
    inner: RefCell<Inner>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

/// Gradients of a scalar loss keyed by leaf node.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    by_leaf: BTreeMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, leaf: Var<'_>) -> Option<&Tensor> {
        self.by_leaf.get(&leaf.id)
    }

    pub fn len(&self) -> usize {
        self.by_leaf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_leaf.is_empty()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, trainable: bool) -> Var<'_> {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        if inner.first_non_finite.is_none() && !value.is_finite() {
            inner.first_non_finite = Some(id);
        }
        inner.nodes.push(Node {
            value: Rc::new(value),
            op,
            trainable,
        });
        Var { tape: self, id }
    }

    fn val(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.inner.borrow().nodes[id].value)
    }

    /// Trainable leaf: receives a gradient from `backward`.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    /// Stacks equal-length vectors into a `k×len` matrix.
    pub fn stack<'t>(&'t self, rows: &[Var<'t>]) -> Result<Var<'t>> {
        let vals: Vec<_> = rows.iter().map(|r| r.value()).collect();
        let len = vals.first().map(|v| v.len()).unwrap_or(0);
        if vals.iter().any(|v| v.shape().len() != 1 || v.len() != len) {
            return shape_err("stack needs equal-length vectors");
        }
        let mut data = Vec::with_capacity(len * vals.len());
        for v in &vals {
            data.extend_from_slice(v.data());
        }
        let t = Tensor::from_raw(vec![vals.len(), len], data);
        Ok(self.push(t, Op::Stack(rows.iter().map(|r| r.id).collect()), false))
    }

    /// Registers the output of a fused operation with a hand-written adjoint.
    pub fn custom<'t>(&'t self, inputs: &[Var<'t>], value: Tensor, op: Rc<dyn CustomOp>) -> Var<'t> {
        self.push(value, Op::Custom(inputs.iter().map(|v| v.id).collect(), op), false)
    }

    /// Error if any recorded value is non-finite.
    pub fn check(&self) -> Result<()> {
        match self.inner.borrow().first_non_finite {
            Some(id) => Err(Error::NonFinite(format!("tape node {id}"))),
            None => Ok(()),
        }
    }

    /// Reverse sweep from a scalar `loss`. Gradients are returned for every
    /// trainable leaf the loss depends on (zeros if unreachable).
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::ForeignNode);
        }
        self.check()?;
        let inner = self.inner.borrow();
        let nodes = &inner.nodes;
        if nodes[loss.id].value.len() != 1 {
            return shape_err(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            ));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        adj[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let Some(g) = adj[id].take() else { continue };
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) {
                adj[id] = Some(g);
                continue;
            }
            let out = &*node.value;
            let v = |i: usize| &*nodes[i].value;
            let mut acc = |i: usize, contrib: Vec<f64>| match &mut adj[i] {
                Some(existing) => {
                    for (e, c) in existing.iter_mut().zip(&contrib) {
                        *e += c;
                    }
                }
                slot @ None => *slot = Some(contrib),
            };
            let zip_map = |a: &Tensor, f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> {
                a.data().iter().zip(&g).map(|(&x, &gv)| f(x, gv)).collect()
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Sub(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g.iter().map(|x| -x).collect());
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (v(*a), v(*b));
                    acc(*a, zip_map(vb, &|y, gv| y * gv));
                    acc(*b, zip_map(va, &|x, gv| x * gv));
                }
                Op::Div(a, b) => {
                    let (va, vb) = (v(*a), v(*b));
                    acc(*a, zip_map(vb, &|y, gv| gv / y));
                    let gb = va
                        .data()
                        .iter()
                        .zip(vb.data())
                        .zip(&g)
                        .map(|((x, y), gv)| -gv * x / (y * y))
                        .collect();
                    acc(*b, gb);
                }
                Op::Neg(a) => acc(*a, g.iter().map(|x| -x).collect()),
                Op::AddConst(a) => acc(*a, g),
                Op::MulConst(a, c) => acc(*a, g.iter().map(|x| x * c).collect()),
                Op::Scale(t, s) => {
                    let (vt, vs) = (v(*t), v(*s).item());
                    let gs: f64 = vt.data().iter().zip(&g).map(|(x, gv)| x * gv).sum();
                    acc(*t, g.iter().map(|gv| gv * vs).collect());
                    acc(*s, vec![gs]);
                }
                Op::Shift(t, s) => {
                    let gs: f64 = g.iter().sum();
                    acc(*t, g);
                    acc(*s, vec![gs]);
                }
                Op::Exp(a) => acc(*a, zip_map(out, &|y, gv| y * gv)),
                Op::Log(a) => acc(*a, zip_map(v(*a), &|x, gv| gv / x)),
                Op::Tanh(a) => acc(*a, zip_map(out, &|y, gv| gv * (1.0 - y * y))),
                Op::Sigmoid(a) => acc(*a, zip_map(out, &|y, gv| gv * y * (1.0 - y))),
                Op::Sqrt(a) => acc(
                    *a,
                    zip_map(out, &|y, gv| if gv == 0.0 { 0.0 } else { gv * 0.5 / y }),
                ),
                Op::Relu(a) => acc(*a, zip_map(v(*a), &|x, gv| if x > 0.0 { gv } else { 0.0 })),
                Op::Softplus(a) => acc(*a, zip_map(v(*a), &|x, gv| gv * sigmoid(x))),
                Op::Square(a) => acc(*a, zip_map(v(*a), &|x, gv| 2.0 * x * gv)),
                Op::Abs(a) => acc(*a, zip_map(v(*a), &|x, gv| gv * sign(x))),
                Op::Clamp(a, lo, hi) => acc(
                    *a,
                    zip_map(v(*a), &|x, gv| if x >= *lo && x <= *hi { gv } else { 0.0 }),
                ),
                Op::Sum(a) => acc(*a, vec![g[0]; v(*a).len()]),
                Op::Mean(a) => {
                    let n = v(*a).len();
                    acc(*a, vec![g[0] / n as f64; n]);
                }
                Op::MatVec(m, x) => {
                    let (vm, vx) = (v(*m), v(*x));
                    let (r, c) = (vm.rows(), vm.cols());
                    let mut gm = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            gm[i * c + j] = g[i] * vx.data()[j];
                        }
                    }
                    acc(*m, gm);
                    acc(*x, matvec_t_raw(vm.data(), r, c, &g));
                }
                Op::MatVecT(m, x) => {
                    let (vm, vx) = (v(*m), v(*x));
                    let (r, c) = (vm.rows(), vm.cols());
                    let mut gm = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            gm[i * c + j] = vx.data()[i] * g[j];
                        }
                    }
                    acc(*m, gm);
                    acc(*x, matvec_raw(vm.data(), r, c, &g));
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (v(*a), v(*b));
                    let (r, k, c) = (va.rows(), va.cols(), vb.cols());
                    let bt = vb.transpose().expect("matrix");
                    let at = va.transpose().expect("matrix");
                    acc(*a, matmul_raw(&g, bt.data(), r, c, k));
                    acc(*b, matmul_raw(at.data(), &g, k, r, c));
                }
                Op::Conv1d(x, w, geom) => {
                    let (gx, gw) = conv1d_backward(v(*x).data(), v(*w).data(), &g, geom);
                    acc(*x, gx);
                    acc(*w, gw);
                }
                Op::ChannelBias(x, b) => {
                    let len = v(*x).cols();
                    let gb = g.chunks(len).map(|row| row.iter().sum()).collect();
                    acc(*x, g);
                    acc(*b, gb);
                }
                Op::Stack(rows) => {
                    let len = out.cols();
                    for (r, chunk) in rows.iter().zip(g.chunks(len)) {
                        acc(*r, chunk.to_vec());
                    }
                }
                Op::Row(a, r) => {
                    let va = v(*a);
                    let c = va.cols();
                    let mut ga = vec![0.0; va.len()];
                    ga[r * c..(r + 1) * c].copy_from_slice(&g);
                    acc(*a, ga);
                }
                Op::Reshape(a) => acc(*a, g),
                Op::Custom(inputs, op) => {
                    let ins: Vec<&Tensor> = inputs.iter().map(|&i| v(i)).collect();
                    let grads = op.backward(&ins, out, &g);
                    for (&i, gi) in inputs.iter().zip(grads) {
                        acc(i, gi);
                    }
                }
            }
        }

        let mut by_leaf = BTreeMap::new();
        for (id, node) in nodes.iter().enumerate().take(loss.id + 1) {
            if node.trainable {
                let grad = adj[id]
                    .take()
                    .map(|g| Tensor::from_raw(node.value.shape().to_vec(), g))
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                by_leaf.insert(id, grad);
            }
        }
        for (id, node) in nodes.iter().enumerate().skip(loss.id + 1) {
            if node.trainable {
                by_leaf.insert(id, Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { by_leaf })
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.val(self.id)
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    fn unary(self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let t = self.value().map(f);
        self.tape.push(t, op, false)
    }

    fn binary(self, other: Var<'t>, op: Op, f: impl Fn(f64, f64) -> f64) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(
            a.shape(),
            b.shape(),
            "elementwise op on mismatched shapes"
        );
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        self.tape
            .push(Tensor::from_raw(a.shape().to_vec(), data), op, false)
    }

    pub fn add(self, o: Var<'t>) -> Var<'t> {
        self.binary(o, Op::Add(self.id, o.id), |x, y| x + y)
    }

    pub fn sub(self, o: Var<'t>) -> Var<'t> {
        self.binary(o, Op::Sub(self.id, o.id), |x, y| x - y)
    }

    pub fn mul(self, o: Var<'t>) -> Var<'t> {
        self.binary(o, Op::Mul(self.id, o.id), |x, y| x * y)
    }

    pub fn div(self, o: Var<'t>) -> Var<'t> {
        self.binary(o, Op::Div(self.id, o.id), |x, y| x / y)
    }

    pub fn neg(self) -> Var<'t> {
        self.unary(Op::Neg(self.id), |x| -x)
    }

    pub fn add_const(self, c: f64) -> Var<'t> {
        self.unary(Op::AddConst(self.id), move |x| x + c)
    }

    pub fn mul_const(self, c: f64) -> Var<'t> {
        self.unary(Op::MulConst(self.id, c), move |x| x * c)
    }

    /// `c - self`
    pub fn rsub_const(self, c: f64) -> Var<'t> {
        self.neg().add_const(c)
    }

    /// Multiplies every entry by the scalar node `s`.
    pub fn scale(self, s: Var<'t>) -> Var<'t> {
        let k = s.item();
        let t = self.value().map(|x| x * k);
        self.tape.push(t, Op::Scale(self.id, s.id), false)
    }

    /// Adds the scalar node `s` to every entry.
    pub fn shift(self, s: Var<'t>) -> Var<'t> {
        let k = s.item();
        let t = self.value().map(|x| x + k);
        self.tape.push(t, Op::Shift(self.id, s.id), false)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(Op::Exp(self.id), f64::exp)
    }

    pub fn log(self) -> Var<'t> {
        self.unary(Op::Log(self.id), f64::ln)
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(Op::Tanh(self.id), f64::tanh)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(Op::Sigmoid(self.id), sigmoid)
    }

    pub fn sqrt(self) -> Var<'t> {
        self.unary(Op::Sqrt(self.id), f64::sqrt)
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(Op::Relu(self.id), |x| x.max(0.0))
    }

    pub fn softplus(self) -> Var<'t> {
        self.unary(Op::Softplus(self.id), softplus)
    }

    pub fn square(self) -> Var<'t> {
        self.unary(Op::Square(self.id), |x| x * x)
    }

    pub fn abs(self) -> Var<'t> {
        self.unary(Op::Abs(self.id), f64::abs)
    }

    /// Clamps into `[lo, hi]`; the adjoint passes through only inside the
    /// interval.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        self.unary(Op::Clamp(self.id, lo, hi), move |x| x.clamp(lo, hi))
    }

    pub fn floor_at(self, lo: f64) -> Var<'t> {
        self.clamp(lo, f64::INFINITY)
    }

    pub fn sum(self) -> Var<'t> {
        let s = self.value().sum();
        self.tape.push(Tensor::scalar(s), Op::Sum(self.id), false)
    }

    pub fn mean(self) -> Var<'t> {
        let v = self.value();
        let s = v.sum() / v.len() as f64;
        self.tape.push(Tensor::scalar(s), Op::Mean(self.id), false)
    }

    /// `self · x` where `self` is a matrix.
    pub fn matvec(self, x: Var<'t>) -> Result<Var<'t>> {
        let (m, v) = (self.value(), x.value());
        if m.shape().len() != 2 || v.shape().len() != 1 || m.cols() != v.len() {
            return shape_err(format!("matvec {:?} · {:?}", m.shape(), v.shape()));
        }
        let out = matvec_raw(m.data(), m.rows(), m.cols(), v.data());
        Ok(self.tape.push(Tensor::vector(out), Op::MatVec(self.id, x.id), false))
    }

    /// `selfᵀ · x` where `self` is a matrix.
    pub fn matvec_t(self, x: Var<'t>) -> Result<Var<'t>> {
        let (m, v) = (self.value(), x.value());
        if m.shape().len() != 2 || v.shape().len() != 1 || m.rows() != v.len() {
            return shape_err(format!("matvec_t {:?}ᵀ · {:?}", m.shape(), v.shape()));
        }
        let out = matvec_t_raw(m.data(), m.rows(), m.cols(), v.data());
        Ok(self.tape.push(Tensor::vector(out), Op::MatVecT(self.id, x.id), false))
    }

    pub fn matmul(self, b: Var<'t>) -> Result<Var<'t>> {
        let (va, vb) = (self.value(), b.value());
        if va.shape().len() != 2 || vb.shape().len() != 2 || va.cols() != vb.rows() {
            return shape_err(format!("matmul {:?} · {:?}", va.shape(), vb.shape()));
        }
        let (r, k, c) = (va.rows(), va.cols(), vb.cols());
        let out = matmul_raw(va.data(), vb.data(), r, k, c);
        Ok(self
            .tape
            .push(Tensor::from_raw(vec![r, c], out), Op::MatMul(self.id, b.id), false))
    }

    /// Cross-correlation of this `channels×len` signal with `kernels`.
    pub fn conv1d(self, kernels: Var<'t>, same_padding: bool) -> Result<Var<'t>> {
        let (x, w) = (self.value(), kernels.value());
        let (geom, c_out) = conv_geometry(&x, &w, same_padding)?;
        let out = conv1d_raw(x.data(), w.data(), &geom);
        Ok(self.tape.push(
            Tensor::from_raw(vec![c_out, geom.out_len], out),
            Op::Conv1d(self.id, kernels.id, geom),
            false,
        ))
    }

    /// Adds `bias[c]` to every entry of row `c`.
    pub fn add_channel_bias(self, bias: Var<'t>) -> Result<Var<'t>> {
        let (x, b) = (self.value(), bias.value());
        if x.shape().len() != 2 || b.len() != x.rows() {
            return shape_err("channel bias length must equal channel count");
        }
        let len = x.cols();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + b.data()[i / len])
            .collect();
        Ok(self.tape.push(
            Tensor::from_raw(x.shape().to_vec(), data),
            Op::ChannelBias(self.id, bias.id),
            false,
        ))
    }

    /// Row `r` of a matrix, as a vector.
    pub fn row(self, r: usize) -> Var<'t> {
        let t = Tensor::vector(self.value().row(r).to_vec());
        self.tape.push(t, Op::Row(self.id, r), false)
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Var<'t>> {
        let t = (*self.value()).clone().reshape(shape)?;
        Ok(self.tape.push(t, Op::Reshape(self.id), false))
    }
}
