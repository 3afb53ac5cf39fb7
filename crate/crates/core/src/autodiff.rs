//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s. Nodes are
//! appended after their inputs, so the node list is already a topological
//! order of the DAG and the backward sweep is a single reverse scan that
//! visits each node once. [`Tape::backward`] consumes the recorded graph:
//! afterwards every `Var` of the old generation is stale.
//!
//! Only first-order gradients are supported.

use alloc::boxed::Box;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::{Cell, RefCell};

use crate::conv::{self, ConvGeom, Padding};
use crate::error::{Error, Result};
use crate::tensor::{numel_of, BinaryOp, Tensor};

/// Sentinel in gather maps meaning "write zero".
pub const ZERO_FILL: usize = usize::MAX;

type BackwardFn = Box<dyn Fn(&Tensor) -> Vec<Tensor>>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Relu,
    Tanh,
    Sigmoid,
    Square,
    /// Derivative at 0 is taken as 0 (subgradient convention).
    Sqrt,
    Neg,
}

impl UnaryOp {
    fn name(self) -> &'static str {
        match self {
            UnaryOp::Relu => "relu",
            UnaryOp::Tanh => "tanh",
            UnaryOp::Sigmoid => "sigmoid",
            UnaryOp::Square => "square",
            UnaryOp::Sqrt => "sqrt",
            UnaryOp::Neg => "neg",
        }
    }

    fn eval(self, x: f64) -> f64 {
        match self {
            UnaryOp::Relu => x.max(0.0),
            UnaryOp::Tanh => libm::tanh(x),
            UnaryOp::Sigmoid => 1.0 / (1.0 + libm::exp(-x)),
            UnaryOp::Square => x * x,
            UnaryOp::Sqrt => libm::sqrt(x),
            UnaryOp::Neg => -x,
        }
    }

    /// d out / d in, from input `x` and output `y`.
    fn deriv(self, x: f64, y: f64) -> f64 {
        match self {
            UnaryOp::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            UnaryOp::Tanh => 1.0 - y * y,
            UnaryOp::Sigmoid => y * (1.0 - y),
            UnaryOp::Square => 2.0 * x,
            UnaryOp::Sqrt => {
                if y > 0.0 {
                    0.5 / y
                } else {
                    0.0
                }
            }
            UnaryOp::Neg => -1.0,
        }
    }
}

enum Op {
    Leaf,
    Binary { kind: BinaryOp, a: usize, b: usize },
    /// Scalar expanded to the output shape.
    Broadcast { src: usize },
    AddScalar { src: usize },
    MulScalar { src: usize, factor: f64 },
    Unary { kind: UnaryOp, src: usize },
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Conv2d { input: usize, kernel: usize, geom: ConvGeom, padding: Padding },
    AddBias { x: usize, bias: usize, outer: usize, mid: usize, inner: usize },
    Gather { src: usize, map: Arc<Vec<usize>> },
    Downsample { src: usize, factor: usize, lead: usize, h: usize, w: usize },
    Reshape { src: usize },
    Sum { src: usize },
    Mean { src: usize },
    NormSq { src: usize },
    Custom { inputs: Vec<usize>, backward: BackwardFn },
}

struct Node {
    value: Arc<Tensor>,
    requires_grad: bool,
    op: Op,
}

/// Recording context for one differentiable computation.
///
/// Single-threaded by construction; independent tapes may live on separate
/// threads.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    generation: Cell<u32>,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

/// Handle to a recorded value.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    index: usize,
    generation: u32,
}

impl core::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("Var")
            .field("index", &self.index)
            .field("shape", &self.value().shape())
            .finish()
    }
}

/// Leaf gradients produced by a backward sweep.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    generation: u32,
}

impl Gradients {
    /// Gradient of the loss with respect to a leaf created with
    /// `requires_grad`; `None` for anything else.
    pub fn get(&self, v: &Var<'_>) -> Option<&Tensor> {
        if v.generation != self.generation {
            return None;
        }
        self.grads.get(v.index).and_then(Option::as_ref)
    }

    /// Like [`get`](Self::get) but returns an owned tensor or an error.
    pub fn wrt(&self, v: &Var<'_>) -> Result<Tensor> {
        self.get(v)
            .cloned()
            .ok_or_else(|| Error::invalid("requested gradient of a leaf without requires_grad"))
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            generation: Cell::new(0),
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, requires_grad: bool, op: Op, name: &'static str) -> Result<Var<'_>> {
        value.ensure_finite(name)?;
        self.push_arc(Arc::new(value), requires_grad, op)
    }

    fn push_arc(&self, value: Arc<Tensor>, requires_grad: bool, op: Op) -> Result<Var<'_>> {
        let mut nodes = self.nodes.borrow_mut();
        let index = nodes.len();
        nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Ok(Var {
            tape: self,
            index,
            generation: self.generation.get(),
        })
    }

    /// Records a leaf. Gradients are kept only for leaves with `requires_grad`.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Result<Var<'_>> {
        self.push(value, requires_grad, Op::Leaf, "leaf")
    }

    /// Differentiable input.
    pub fn var(&self, value: Tensor) -> Result<Var<'_>> {
        self.leaf(value, true)
    }

    /// Non-differentiable input.
    pub fn constant(&self, value: Tensor) -> Result<Var<'_>> {
        self.leaf(value, false)
    }

    /// Shares an existing buffer as a leaf (no copy).
    pub fn leaf_shared(&self, value: Arc<Tensor>, requires_grad: bool) -> Result<Var<'_>> {
        value.ensure_finite("leaf")?;
        self.push_arc(value, requires_grad, Op::Leaf)
    }

    fn check(&self, v: &Var<'_>) -> Result<()> {
        if !core::ptr::eq(v.tape, self) || v.generation != self.generation.get() {
            return Err(Error::StaleVariable);
        }
        Ok(())
    }

    fn info(&self, index: usize) -> (Arc<Tensor>, bool) {
        let nodes = self.nodes.borrow();
        let n = &nodes[index];
        (n.value.clone(), n.requires_grad)
    }

    /// Records an operation with a caller-supplied backward rule.
    ///
    /// `backward` receives the output cotangent and must return one gradient
    /// per input, each shaped like that input.
    pub fn custom<'t>(
        &'t self,
        inputs: &[Var<'t>],
        value: Tensor,
        backward: impl Fn(&Tensor) -> Vec<Tensor> + 'static,
    ) -> Result<Var<'t>> {
        let mut requires = false;
        for v in inputs {
            self.check(v)?;
            requires |= self.info(v.index).1;
        }
        self.push(
            value,
            requires,
            Op::Custom {
                inputs: inputs.iter().map(|v| v.index).collect(),
                backward: Box::new(backward),
            },
            "custom",
        )
    }

    /// Gradients of a scalar `loss` without consuming the tape.
    pub fn gradients(&self, loss: Var<'_>) -> Result<Gradients> {
        self.check(&loss)?;
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.index];
        if root.value.numel() != 1 {
            return Err(Error::NotScalar {
                shape: root.value.shape().to_vec(),
            });
        }
        let n = loss.index + 1;
        let mut acc: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        let mut leaves: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        acc[loss.index] = Some(vec![1.0]);

        for i in (0..n).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = acc[i].take() else {
                if matches!(node.op, Op::Leaf) {
                    leaves[i] = Some(Tensor::zeros_like(&node.value));
                }
                continue;
            };
            propagate(&nodes, i, g, &mut acc, &mut leaves)?;
        }
        Ok(Gradients {
            grads: leaves,
            generation: self.generation.get(),
        })
    }

    /// Gradients of a scalar `loss`; the tape is cleared afterwards.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let grads = self.gradients(loss)?;
        self.clear();
        Ok(grads)
    }

    /// Drops every recorded node and invalidates outstanding `Var`s.
    pub fn clear(&self) {
        self.nodes.borrow_mut().clear();
        self.generation.set(self.generation.get().wrapping_add(1));
    }
}

fn add_into(acc: &mut [Option<Vec<f64>>], index: usize, grad: impl IntoIterator<Item = f64>, len: usize) {
    match &mut acc[index] {
        Some(buf) => {
            for (b, g) in buf.iter_mut().zip(grad) {
                *b += g;
            }
        }
        slot @ None => {
            let mut v: Vec<f64> = grad.into_iter().collect();
            debug_assert_eq!(v.len(), len);
            v.truncate(len);
            *slot = Some(v);
        }
    }
}

fn propagate(
    nodes: &[Node],
    i: usize,
    g: Vec<f64>,
    acc: &mut [Option<Vec<f64>>],
    leaves: &mut [Option<Tensor>],
) -> Result<()> {
    let node = &nodes[i];
    let wants = |j: usize| nodes[j].requires_grad;
    let val = |j: usize| nodes[j].value.data();
    match &node.op {
        Op::Leaf => {
            leaves[i] = Some(Tensor::from_parts(node.value.shape().to_vec(), g));
        }
        Op::Binary { kind, a, b } => {
            let (a, b) = (*a, *b);
            let len = g.len();
            match kind {
                BinaryOp::Add => {
                    if wants(a) {
                        add_into(acc, a, g.iter().copied(), len);
                    }
                    if wants(b) {
                        add_into(acc, b, g.iter().copied(), len);
                    }
                }
                BinaryOp::Sub => {
                    if wants(a) {
                        add_into(acc, a, g.iter().copied(), len);
                    }
                    if wants(b) {
                        add_into(acc, b, g.iter().map(|v| -v), len);
                    }
                }
                BinaryOp::Mul => {
                    if wants(a) {
                        add_into(acc, a, g.iter().zip(val(b)).map(|(g, y)| g * y), len);
                    }
                    if wants(b) {
                        add_into(acc, b, g.iter().zip(val(a)).map(|(g, x)| g * x), len);
                    }
                }
                BinaryOp::Div => {
                    if wants(a) {
                        add_into(acc, a, g.iter().zip(val(b)).map(|(g, y)| g / y), len);
                    }
                    if wants(b) {
                        let it = g
                            .iter()
                            .zip(val(a))
                            .zip(val(b))
                            .map(|((g, x), y)| -g * x / (y * y));
                        add_into(acc, b, it, len);
                    }
                }
            }
        }
        Op::Broadcast { src } => {
            let s: f64 = g.iter().sum();
            add_into(acc, *src, [s], 1);
        }
        Op::AddScalar { src } => {
            let len = g.len();
            add_into(acc, *src, g, len);
        }
        Op::MulScalar { src, factor } => {
            let len = g.len();
            add_into(acc, *src, g.iter().map(|v| v * factor), len);
        }
        Op::Unary { kind, src } => {
            let x = val(*src);
            let y = node.value.data();
            let it = g
                .iter()
                .zip(x)
                .zip(y)
                .map(|((g, &x), &y)| g * kind.deriv(x, y));
            add_into(acc, *src, it, g.len());
        }
        Op::MatMul { a, b, m, k, n } => {
            let (a, b, m, k, n) = (*a, *b, *m, *k, *n);
            if wants(a) {
                // dA = G B^T
                let bv = val(b);
                let mut da = vec![0.0; m * k];
                for r in 0..m {
                    for c in 0..k {
                        let mut s = 0.0;
                        for j in 0..n {
                            s += g[r * n + j] * bv[c * n + j];
                        }
                        da[r * k + c] = s;
                    }
                }
                add_into(acc, a, da, m * k);
            }
            if wants(b) {
                // dB = A^T G
                let av = val(a);
                let mut db = vec![0.0; k * n];
                for r in 0..m {
                    for c in 0..k {
                        let x = av[r * k + c];
                        if x == 0.0 {
                            continue;
                        }
                        let row = &mut db[c * n..][..n];
                        for (d, gv) in row.iter_mut().zip(&g[r * n..][..n]) {
                            *d += x * gv;
                        }
                    }
                }
                add_into(acc, b, db, k * n);
            }
        }
        Op::Conv2d {
            input,
            kernel,
            geom,
            padding,
        } => {
            let (gi, gk) = conv::backward(
                val(*input),
                val(*kernel),
                &g,
                geom,
                *padding,
                wants(*input),
                wants(*kernel),
            );
            if let Some(gi) = gi {
                let len = gi.len();
                add_into(acc, *input, gi, len);
            }
            if let Some(gk) = gk {
                let len = gk.len();
                add_into(acc, *kernel, gk, len);
            }
        }
        Op::AddBias {
            x,
            bias,
            outer,
            mid,
            inner,
        } => {
            if wants(*x) {
                let len = g.len();
                add_into(acc, *x, g.iter().copied(), len);
            }
            if wants(*bias) {
                let mut gb = vec![0.0; *mid];
                for o in 0..*outer {
                    for m in 0..*mid {
                        let base = (o * mid + m) * inner;
                        gb[m] += g[base..base + inner].iter().sum::<f64>();
                    }
                }
                add_into(acc, *bias, gb, *mid);
            }
        }
        Op::Gather { src, map } => {
            let len = nodes[*src].value.numel();
            let mut gs = vec![0.0; len];
            for (o, &s) in map.iter().enumerate() {
                if s != ZERO_FILL {
                    gs[s] += g[o];
                }
            }
            add_into(acc, *src, gs, len);
        }
        Op::Downsample {
            src,
            factor,
            lead,
            h,
            w,
        } => {
            let (f, h, w) = (*factor, *h, *w);
            let (oh, ow) = (h / f, w / f);
            let inv = 1.0 / (f * f) as f64;
            let mut gs = vec![0.0; lead * h * w];
            for l in 0..*lead {
                for y in 0..h {
                    for x in 0..w {
                        gs[(l * h + y) * w + x] = g[(l * oh + y / f) * ow + x / f] * inv;
                    }
                }
            }
            let len = gs.len();
            add_into(acc, *src, gs, len);
        }
        Op::Reshape { src } => {
            let len = g.len();
            add_into(acc, *src, g, len);
        }
        Op::Sum { src } => {
            let len = nodes[*src].value.numel();
            add_into(acc, *src, core::iter::repeat_n(g[0], len), len);
        }
        Op::Mean { src } => {
            let len = nodes[*src].value.numel();
            let v = g[0] / len as f64;
            add_into(acc, *src, core::iter::repeat_n(v, len), len);
        }
        Op::NormSq { src } => {
            let len = nodes[*src].value.numel();
            add_into(acc, *src, val(*src).iter().map(|x| 2.0 * g[0] * x), len);
        }
        Op::Custom { inputs, backward } => {
            let cot = Tensor::from_parts(node.value.shape().to_vec(), g);
            let grads = backward(&cot);
            if grads.len() != inputs.len() {
                return Err(Error::invalid("custom backward returned wrong gradient count"));
            }
            for (&j, gj) in inputs.iter().zip(grads) {
                if !wants(j) {
                    continue;
                }
                if gj.shape() != nodes[j].value.shape() {
                    return Err(Error::shape("custom backward", nodes[j].value.shape(), gj.shape()));
                }
                gj.ensure_finite("custom backward")?;
                let len = gj.numel();
                add_into(acc, j, gj.into_data(), len);
            }
        }
    }
    Ok(())
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Current value (shared, cheap to clone).
    pub fn value(&self) -> Arc<Tensor> {
        assert!(
            self.generation == self.tape.generation.get(),
            "Var used after its tape was consumed"
        );
        self.tape.nodes.borrow()[self.index].value.clone()
    }

    pub fn shape(&self) -> alloc::vec::Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.index].requires_grad
    }

    fn unary_prep(&self) -> Result<(Arc<Tensor>, bool)> {
        self.tape.check(self)?;
        Ok(self.tape.info(self.index))
    }

    fn binary(self, other: Var<'t>, kind: BinaryOp) -> Result<Var<'t>> {
        let (a, ra) = self.unary_prep()?;
        let (b, rb) = other.unary_prep()?;
        if a.shape() == b.shape() {
            let data = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(&x, &y)| kind.apply(x, y))
                .collect();
            let out = Tensor::from_parts(a.shape().to_vec(), data);
            return self.tape.push(
                out,
                ra || rb,
                Op::Binary {
                    kind,
                    a: self.index,
                    b: other.index,
                },
                kind.name(),
            );
        }
        let scalar_like = |t: &Tensor| t.numel() == 1 && t.ndim() <= 1;
        if scalar_like(&b) {
            let wide = other.broadcast_to(a.shape())?;
            self.binary(wide, kind)
        } else if scalar_like(&a) {
            let wide = self.broadcast_to(b.shape())?;
            wide.binary(other, kind)
        } else {
            Err(Error::shape(kind.name(), a.shape(), b.shape()))
        }
    }

    /// Expands a one-element tensor to `shape`.
    pub fn broadcast_to(self, shape: &[usize]) -> Result<Var<'t>> {
        let (v, r) = self.unary_prep()?;
        if v.numel() != 1 {
            return Err(Error::shape("broadcast", &[1], v.shape()));
        }
        let out = Tensor::full(shape, v.data()[0]);
        self.tape
            .push(out, r, Op::Broadcast { src: self.index }, "broadcast")
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryOp::Add)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryOp::Sub)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryOp::Mul)
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryOp::Div)
    }

    pub fn add_scalar(self, s: f64) -> Result<Var<'t>> {
        let (v, r) = self.unary_prep()?;
        self.tape
            .push(v.map(|x| x + s), r, Op::AddScalar { src: self.index }, "add_scalar")
    }

    pub fn mul_scalar(self, s: f64) -> Result<Var<'t>> {
        let (v, r) = self.unary_prep()?;
        self.tape.push(
            v.map(|x| x * s),
            r,
            Op::MulScalar {
                src: self.index,
                factor: s,
            },
            "mul_scalar",
        )
    }

    pub fn unary(self, kind: UnaryOp) -> Result<Var<'t>> {
        let (v, r) = self.unary_prep()?;
        if kind == UnaryOp::Sqrt && v.data().iter().any(|&x| x < 0.0) {
            return Err(Error::NonFinite { op: "sqrt" });
        }
        self.tape.push(
            v.map(|x| kind.eval(x)),
            r,
            Op::Unary {
                kind,
                src: self.index,
            },
            kind.name(),
        )
    }

    pub fn relu(self) -> Result<Var<'t>> {
        self.unary(UnaryOp::Relu)
    }

    pub fn tanh(self) -> Result<Var<'t>> {
        self.unary(UnaryOp::Tanh)
    }

    pub fn sigmoid(self) -> Result<Var<'t>> {
        self.unary(UnaryOp::Sigmoid)
    }

    pub fn square(self) -> Result<Var<'t>> {
        self.unary(UnaryOp::Square)
    }

    pub fn sqrt(self) -> Result<Var<'t>> {
        self.unary(UnaryOp::Sqrt)
    }

    pub fn neg(self) -> Result<Var<'t>> {
        self.unary(UnaryOp::Neg)
    }

    /// `x * sigmoid(x)`.
    pub fn silu(self) -> Result<Var<'t>> {
        self.mul(self.sigmoid()?)
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, ra) = self.unary_prep()?;
        let (b, rb) = other.unary_prep()?;
        let (m, k, n) = match (a.shape(), b.shape()) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            _ => return Err(Error::shape("matmul", a.shape(), b.shape())),
        };
        let (av, bv) = (a.data(), b.data());
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let orow = &mut out[r * n..][..n];
            for c in 0..k {
                let x = av[r * k + c];
                if x == 0.0 {
                    continue;
                }
                for (o, y) in orow.iter_mut().zip(&bv[c * n..][..n]) {
                    *o += x * y;
                }
            }
        }
        self.tape.push(
            Tensor::from_parts(vec![m, n], out),
            ra || rb,
            Op::MatMul {
                a: self.index,
                b: other.index,
                m,
                k,
                n,
            },
            "matmul",
        )
    }

    /// Same-size 2-D cross-correlation; see [`conv::conv2d`] for shapes.
    pub fn conv2d(self, kernel: Var<'t>, padding: Padding) -> Result<Var<'t>> {
        let (x, rx) = self.unary_prep()?;
        let (k, rk) = kernel.unary_prep()?;
        let (geom, shape) = conv::geometry(x.shape(), k.shape())?;
        let out = Tensor::from_parts(shape, conv::forward(x.data(), k.data(), &geom, padding));
        self.tape.push(
            out,
            rx || rk,
            Op::Conv2d {
                input: self.index,
                kernel: kernel.index,
                geom,
                padding,
            },
            "conv2d",
        )
    }

    /// Adds `bias` broadcast over every axis of `self` except
    /// `axis .. axis + bias.ndim()`, whose extents must equal `bias.shape()`.
    pub fn add_bias(self, bias: Var<'t>, axis: usize) -> Result<Var<'t>> {
        let (x, rx) = self.unary_prep()?;
        let (b, rb) = bias.unary_prep()?;
        let xs = x.shape();
        let bs = b.shape();
        if axis + bs.len() > xs.len() || &xs[axis..axis + bs.len()] != bs {
            return Err(Error::shape("add_bias", xs, bs));
        }
        let outer = numel_of(&xs[..axis]);
        let mid = b.numel();
        let inner = numel_of(&xs[axis + bs.len()..]);
        let mut data = x.data().to_vec();
        for o in 0..outer {
            for m in 0..mid {
                let base = (o * mid + m) * inner;
                let bv = b.data()[m];
                for d in &mut data[base..base + inner] {
                    *d += bv;
                }
            }
        }
        self.tape.push(
            Tensor::from_parts(xs.to_vec(), data),
            rx || rb,
            Op::AddBias {
                x: self.index,
                bias: bias.index,
                outer,
                mid,
                inner,
            },
            "add_bias",
        )
    }

    /// `out[i] = self[map[i]]` (or 0 where `map[i] == ZERO_FILL`).
    pub fn gather(self, map: Arc<Vec<usize>>, shape: &[usize]) -> Result<Var<'t>> {
        let (x, r) = self.unary_prep()?;
        if map.len() != numel_of(shape) {
            return Err(Error::shape("gather", shape, &[map.len()]));
        }
        let src = x.data();
        let mut data = Vec::with_capacity(map.len());
        for &s in map.iter() {
            if s == ZERO_FILL {
                data.push(0.0);
            } else if s < src.len() {
                data.push(src[s]);
            } else {
                return Err(Error::invalid("gather index out of range"));
            }
        }
        self.tape.push(
            Tensor::from_parts(shape.to_vec(), data),
            r,
            Op::Gather {
                src: self.index,
                map,
            },
            "gather",
        )
    }

    /// Zero-pads the last two axes by `pad` on every side.
    pub fn pad(self, pad: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        let (lead, h, w) = split_spatial(&shape, "pad")?;
        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
        let mut map = Vec::with_capacity(lead * ph * pw);
        for l in 0..lead {
            for y in 0..ph {
                for x in 0..pw {
                    let inside = y >= pad && y < pad + h && x >= pad && x < pad + w;
                    map.push(if inside {
                        (l * h + y - pad) * w + x - pad
                    } else {
                        ZERO_FILL
                    });
                }
            }
        }
        let mut out = shape[..shape.len() - 2].to_vec();
        out.extend([ph, pw]);
        self.gather(Arc::new(map), &out)
    }

    /// Crops a `height x width` window at (`top`, `left`) from the last two axes.
    pub fn crop(self, top: usize, left: usize, height: usize, width: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        let (lead, h, w) = split_spatial(&shape, "crop")?;
        if top + height > h || left + width > w {
            return Err(Error::invalid("crop window exceeds input"));
        }
        let mut map = Vec::with_capacity(lead * height * width);
        for l in 0..lead {
            for y in 0..height {
                for x in 0..width {
                    map.push((l * h + top + y) * w + left + x);
                }
            }
        }
        let mut out = shape[..shape.len() - 2].to_vec();
        out.extend([height, width]);
        self.gather(Arc::new(map), &out)
    }

    /// Nearest-neighbour upsampling of the last two axes.
    pub fn upsample(self, factor: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        let (lead, h, w) = split_spatial(&shape, "upsample")?;
        if factor == 0 {
            return Err(Error::invalid("upsample factor must be positive"));
        }
        let (oh, ow) = (h * factor, w * factor);
        let mut map = Vec::with_capacity(lead * oh * ow);
        for l in 0..lead {
            for y in 0..oh {
                for x in 0..ow {
                    map.push((l * h + y / factor) * w + x / factor);
                }
            }
        }
        let mut out = shape[..shape.len() - 2].to_vec();
        out.extend([oh, ow]);
        self.gather(Arc::new(map), &out)
    }

    /// Area-average downsampling of the last two axes.
    pub fn downsample(self, factor: usize) -> Result<Var<'t>> {
        let (x, r) = self.unary_prep()?;
        let (lead, h, w) = split_spatial(x.shape(), "downsample")?;
        if factor == 0 || h % factor != 0 || w % factor != 0 {
            return Err(Error::invalid(alloc::format!(
                "downsample factor {factor} does not divide {h}x{w}"
            )));
        }
        let (oh, ow) = (h / factor, w / factor);
        let inv = 1.0 / (factor * factor) as f64;
        let mut data = vec![0.0; lead * oh * ow];
        let src = x.data();
        for l in 0..lead {
            for y in 0..h {
                for xx in 0..w {
                    data[(l * oh + y / factor) * ow + xx / factor] += src[(l * h + y) * w + xx] * inv;
                }
            }
        }
        let mut out = x.shape()[..x.ndim() - 2].to_vec();
        out.extend([oh, ow]);
        self.tape.push(
            Tensor::from_parts(out, data),
            r,
            Op::Downsample {
                src: self.index,
                factor,
                lead,
                h,
                w,
            },
            "downsample",
        )
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let (x, r) = self.unary_prep()?;
        let out = x.reshape(shape)?;
        self.tape
            .push(out, r, Op::Reshape { src: self.index }, "reshape")
    }

    pub fn sum(self) -> Result<Var<'t>> {
        let (x, r) = self.unary_prep()?;
        self.tape
            .push(Tensor::scalar(x.sum()), r, Op::Sum { src: self.index }, "sum")
    }

    pub fn mean(self) -> Result<Var<'t>> {
        let (x, r) = self.unary_prep()?;
        if x.numel() == 0 {
            return Err(Error::invalid("mean of an empty tensor"));
        }
        self.tape
            .push(Tensor::scalar(x.mean()), r, Op::Mean { src: self.index }, "mean")
    }

    /// Squared Euclidean norm, as a scalar.
    pub fn norm_sq(self) -> Result<Var<'t>> {
        let (x, r) = self.unary_prep()?;
        self.tape.push(
            Tensor::scalar(x.norm_sq()),
            r,
            Op::NormSq { src: self.index },
            "norm_sq",
        )
    }

    /// Euclidean norm; gradient at the origin is zero.
    pub fn norm(self) -> Result<Var<'t>> {
        self.norm_sq()?.sqrt()
    }

    /// `<self, other>` as a scalar.
    pub fn dot(self, other: Var<'t>) -> Result<Var<'t>> {
        self.mul(other)?.sum()
    }
}

fn split_spatial(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::shape(op, &[0, 0], shape));
    }
    let n = shape.len();
    Ok((numel_of(&shape[..n - 2]), shape[n - 2], shape[n - 1]))
}

/// Largest relative discrepancy between the tape gradient of `f` at `x` and a
/// central finite difference with step `eps`:
/// `max_i |ad_i - fd_i| / (|fd_i| + 1e-12)`.
pub fn check_gradient<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: for<'t> Fn(Var<'t>) -> Result<Var<'t>>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::invalid("eps must lie in (0, 1e-2]"));
    }
    let tape = Tape::new();
    let xv = tape.var(x.clone())?;
    let loss = f(xv)?;
    let grads = tape.backward(loss)?;
    let ad = grads.wrt(&xv)?;

    let eval = |p: &Tensor| -> Result<f64> {
        let tape = Tape::new();
        let v = tape.constant(p.clone())?;
        f(v)?.value().item()
    };
    let mut worst: f64 = 0.0;
    let base = x.data().to_vec();
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += eps;
        let mut minus = base.clone();
        minus[i] -= eps;
        let fp = eval(&Tensor::from_parts(x.shape().to_vec(), plus))?;
        let fm = eval(&Tensor::from_parts(x.shape().to_vec(), minus))?;
        let fd = (fp - fm) / (2.0 * eps);
        let err = (ad.data()[i] - fd).abs() / (fd.abs() + 1e-12);
        worst = worst.max(err);
    }
    Ok(worst)
}
