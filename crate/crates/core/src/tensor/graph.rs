use std::cell::{Cell, RefCell};
use std::rc::Rc;

use super::fft;
use super::kernels::{self, ConvGeom, ScanDims};
use super::{numel, Real, Tensor};
use crate::error::{Error, Result};

/// Elementwise nonlinearities with registered derivatives.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryKind {
    Exp,
    Log,
    Sigmoid,
    Silu,
    Softplus,
    Gelu,
    Tanh,
    Abs,
    Sqrt,
    Square,
}

impl UnaryKind {
    fn name(self) -> &'static str {
        match self {
            UnaryKind::Exp => "exp",
            UnaryKind::Log => "log",
            UnaryKind::Sigmoid => "sigmoid",
            UnaryKind::Silu => "silu",
            UnaryKind::Softplus => "softplus",
            UnaryKind::Gelu => "gelu",
            UnaryKind::Tanh => "tanh",
            UnaryKind::Abs => "abs",
            UnaryKind::Sqrt => "sqrt",
            UnaryKind::Square => "square",
        }
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

fn unary_fwd<T: Real>(kind: UnaryKind, x: T) -> T {
    match kind {
        UnaryKind::Exp => x.exp(),
        UnaryKind::Log => x.ln(),
        UnaryKind::Sigmoid => sigmoid(x),
        UnaryKind::Silu => x * sigmoid(x),
        UnaryKind::Softplus => x.max(T::zero()) + (-x.abs()).exp().ln_1p(),
        // 0.5 (1 + tanh z) = sigmoid(2z)
        UnaryKind::Gelu => x * sigmoid(T::lit(2.0 * GELU_K) * (x + T::lit(GELU_C) * x * x * x)),
        UnaryKind::Tanh => x.tanh(),
        UnaryKind::Abs => x.abs(),
        UnaryKind::Sqrt => x.sqrt(),
        UnaryKind::Square => x * x,
    }
}

/// Derivative given input `x` and output `y`.
fn unary_deriv<T: Real>(kind: UnaryKind, x: T, y: T) -> T {
    match kind {
        UnaryKind::Exp => y,
        UnaryKind::Log => T::one() / x,
        UnaryKind::Sigmoid => y * (T::one() - y),
        UnaryKind::Silu => {
            let s = sigmoid(x);
            s * (T::one() + x * (T::one() - s))
        }
        UnaryKind::Softplus => sigmoid(x),
        UnaryKind::Gelu => {
            let k = T::lit(GELU_K);
            let c = T::lit(GELU_C);
            let s = sigmoid(T::lit(2.0) * k * (x + c * x * x * x));
            s + T::lit(2.0) * x * s * (T::one() - s) * k * (T::one() + T::lit(3.0) * c * x * x)
        }
        UnaryKind::Tanh => T::one() - y * y,
        UnaryKind::Abs => {
            if x > T::zero() {
                T::one()
            } else if x < T::zero() {
                -T::one()
            } else {
                T::zero()
            }
        }
        UnaryKind::Sqrt => T::lit(0.5) / y,
        UnaryKind::Square => T::lit(2.0) * x,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

/// Name of the op that produced a node, for graph inspection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Constant,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale,
    AddScalar,
    Unary(UnaryKind),
    Clamp,
    MatMul,
    Conv2d,
    Permute,
    Reshape,
    Concat,
    Slice,
    Sum,
    Mean,
    AmaxTrailing,
    LayerNorm,
    GatherTokens,
    ScatterTokens,
    SelectiveScan,
    Rfft2,
    Irfft2,
    Upsample2x,
    PadReplicate,
}

enum Op<T> {
    Leaf,
    Constant,
    Binary(BinKind, usize, usize),
    Neg(usize),
    Scale(usize, T),
    AddScalar(usize),
    Unary(UnaryKind, usize),
    Clamp(usize, T, T),
    MatMul(usize, usize),
    Conv2d {
        x: usize,
        w: usize,
        bias: Option<usize>,
        geom: ConvGeom,
    },
    Permute(usize, Vec<usize>),
    Reshape(usize),
    Concat(Vec<usize>, usize),
    Slice {
        x: usize,
        axis: usize,
        start: usize,
    },
    Sum(usize),
    Mean(usize),
    AmaxTrailing {
        x: usize,
        argmax: Vec<usize>,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Tokens {
        x: usize,
        index: Rc<Vec<Vec<usize>>>,
        scatter: bool,
    },
    Scan {
        inputs: [usize; 6],
        dims: ScanDims,
        h: Vec<T>,
        abar: Vec<T>,
    },
    Rfft2(usize),
    Irfft2(usize),
    Upsample2x(usize),
    PadReplicate(usize, usize),
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Constant => OpKind::Constant,
            Op::Binary(BinKind::Add, ..) => OpKind::Add,
            Op::Binary(BinKind::Sub, ..) => OpKind::Sub,
            Op::Binary(BinKind::Mul, ..) => OpKind::Mul,
            Op::Binary(BinKind::Div, ..) => OpKind::Div,
            Op::Neg(_) => OpKind::Neg,
            Op::Scale(..) => OpKind::Scale,
            Op::AddScalar(_) => OpKind::AddScalar,
            Op::Unary(k, _) => OpKind::Unary(*k),
            Op::Clamp(..) => OpKind::Clamp,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Permute(..) => OpKind::Permute,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Concat(..) => OpKind::Concat,
            Op::Slice { .. } => OpKind::Slice,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
            Op::AmaxTrailing { .. } => OpKind::AmaxTrailing,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Tokens { scatter: false, .. } => OpKind::GatherTokens,
            Op::Tokens { scatter: true, .. } => OpKind::ScatterTokens,
            Op::Scan { .. } => OpKind::SelectiveScan,
            Op::Rfft2(_) => OpKind::Rfft2,
            Op::Irfft2(_) => OpKind::Irfft2,
            Op::Upsample2x(_) => OpKind::Upsample2x,
            Op::PadReplicate(..) => OpKind::PadReplicate,
        }
    }

    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf | Op::Constant => vec![],
            Op::Binary(_, a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Neg(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Unary(_, a)
            | Op::Clamp(a, ..)
            | Op::Permute(a, _)
            | Op::Reshape(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Rfft2(a)
            | Op::Irfft2(a)
            | Op::Upsample2x(a)
            | Op::PadReplicate(a, _) => vec![*a],
            Op::Slice { x, .. } | Op::AmaxTrailing { x, .. } | Op::Tokens { x, .. } => vec![*x],
            Op::Conv2d { x, w, bias, .. } => {
                let mut v = vec![*x, *w];
                v.extend(bias);
                v
            }
            Op::Concat(ids, _) => ids.clone(),
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Scan { inputs, .. } => inputs.to_vec(),
        }
    }
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// One entry of the recorded tape.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OpRecord {
    pub id: usize,
    pub kind: OpKind,
    pub inputs: Vec<usize>,
    pub requires_grad: bool,
}

/// A dynamically recorded computation. Node ids are assigned in creation
/// order, which is a topological order by construction.
pub struct Graph<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
    scans: Cell<usize>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T: Real> {
    graph: &'g Graph<T>,
    id: usize,
}

impl<T: Real> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads.get_mut(v.id).and_then(|g| g.take())
    }
}

/// Real and imaginary half-plane spectra, `[B, C, H, W/2+1]` each.
#[derive(Clone, Copy, Debug)]
pub struct ComplexPair<'g, T: Real> {
    pub re: Var<'g, T>,
    pub im: Var<'g, T>,
}

fn check_finite<T: Real>(t: &Tensor<T>, op: &str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(op.to_string()))
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            scans: Cell::new(0),
        }
    }

    /// Drops all nodes and resets the scan counter.
    pub fn reset(&mut self) {
        self.nodes.get_mut().clear();
        self.scans.set(0);
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of 1-D selective-scan traversals executed on this graph.
    pub fn scan_count(&self) -> usize {
        self.scans.get()
    }

    pub fn records(&self) -> Vec<OpRecord> {
        self.nodes
            .borrow()
            .iter()
            .enumerate()
            .map(|(id, n)| OpRecord {
                id,
                kind: n.op.kind(),
                inputs: n.op.inputs(),
                requires_grad: n.requires_grad,
            })
            .collect()
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, name: &str) -> Result<Var<'_, T>> {
        check_finite(&value, name)?;
        let requires_grad = {
            let nodes = self.nodes.borrow();
            match &op {
                Op::Leaf => true,
                Op::Constant => false,
                _ => op.inputs().iter().any(|&i| nodes[i].requires_grad),
            }
        };
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Ok(Var {
            graph: self,
            id: nodes.len() - 1,
        })
    }

    /// Trainable leaf.
    pub fn leaf(&self, t: Tensor<T>) -> Var<'_, T> {
        self.push(t, Op::Leaf, "leaf").expect("leaf values must be finite")
    }

    /// Non-differentiable input.
    pub fn constant(&self, t: Tensor<T>) -> Var<'_, T> {
        self.push(t, Op::Constant, "constant")
            .expect("constant values must be finite")
    }

    /// Like [`Graph::leaf`] / [`Graph::constant`] but reports non-finite
    /// inputs instead of panicking.
    pub fn input(&self, t: Tensor<T>, requires_grad: bool) -> Result<Var<'_, T>> {
        let op = if requires_grad { Op::Leaf } else { Op::Constant };
        self.push(t, op, "input")
    }

    fn value(&self, id: usize) -> Rc<Tensor<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    pub fn concat(&self, vars: &[Var<'_, T>], axis: usize) -> Result<Var<'_, T>> {
        let first = vars
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let shape0 = first.shape();
        if axis >= shape0.len() {
            return Err(Error::Contract(format!(
                "concat axis {axis} out of range for {shape0:?}"
            )));
        }
        let vals: Vec<Rc<Tensor<T>>> = vars.iter().map(|v| self.value(v.id)).collect();
        let mut out_shape = shape0.clone();
        out_shape[axis] = 0;
        for v in &vals {
            let s = v.shape();
            let ok =
                s.len() == shape0.len() && s.iter().zip(&shape0).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::shape("concat", &shape0, s));
            }
            out_shape[axis] += s[axis];
        }
        let outer = numel(&shape0[..axis]);
        let inner = numel(&shape0[axis + 1..]);
        let mut data = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for v in &vals {
                let blk = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * blk..(o + 1) * blk]);
            }
        }
        let t = Tensor::new(&out_shape, data)?;
        self.push(t, Op::Concat(vars.iter().map(|v| v.id).collect(), axis), "concat")
    }

    /// Selective scan over `[B,L,C]` sequences; see [`crate::ssm`].
    ///
    /// `u, delta: [B,L,C]`, `a: [C,N]`, `b, c: [B,L,N]`, `d: [C]`.
    pub fn selective_scan<'g>(
        &'g self,
        u: Var<'g, T>,
        delta: Var<'g, T>,
        a: Var<'g, T>,
        b: Var<'g, T>,
        c: Var<'g, T>,
        d: Var<'g, T>,
    ) -> Result<Var<'g, T>> {
        let us = u.shape();
        if us.len() != 3 {
            return Err(Error::Input(format!("selective_scan expects [B,L,C], got {us:?}")));
        }
        let (batch, len, chan) = (us[0], us[1], us[2]);
        if len == 0 {
            return Err(Error::Input("selective_scan on an empty sequence".into()));
        }
        let a_s = a.shape();
        if a_s.len() != 2 || a_s[0] != chan {
            return Err(Error::shape("selective_scan(A)", &us, &a_s));
        }
        let state = a_s[1];
        if delta.shape() != us {
            return Err(Error::shape("selective_scan(delta)", &us, &delta.shape()));
        }
        for m in [b, c] {
            if m.shape() != [batch, len, state] {
                return Err(Error::shape("selective_scan(B/C)", &[batch, len, state], &m.shape()));
            }
        }
        if d.shape() != [chan] {
            return Err(Error::shape("selective_scan(D)", &[chan], &d.shape()));
        }
        let dims = ScanDims {
            batch,
            len,
            chan,
            state,
        };
        let (uv, dv, av, bv, cv, ddv) = (
            self.value(u.id),
            self.value(delta.id),
            self.value(a.id),
            self.value(b.id),
            self.value(c.id),
            self.value(d.id),
        );
        let (y, h, abar) =
            kernels::scan_forward(uv.data(), dv.data(), av.data(), bv.data(), cv.data(), ddv.data(), dims);
        self.scans.set(self.scans.get() + 1);
        let t = Tensor::new(&us, y)?;
        self.push(
            t,
            Op::Scan {
                inputs: [u.id, delta.id, a.id, b.id, c.id, d.id],
                dims,
                h,
                abar,
            },
            "selective_scan",
        )
    }

    /// Reverse-mode sweep from a scalar `loss`. Every trainable leaf gets a
    /// gradient (zeros if it does not influence the loss).
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Grads<T>> {
        let nodes = self.nodes.borrow();
        let lv = &nodes[loss.id].value;
        if lv.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::ones(lv.shape()));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        for (id, node) in nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && grads[id].is_none() {
                grads[id] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Grads { grads })
    }
}

fn accumulate<T: Real>(nodes: &[Node<T>], grads: &mut [Option<Tensor<T>>], id: usize, g: Vec<T>) -> Result<()> {
    if !nodes[id].requires_grad {
        return Ok(());
    }
    match &mut grads[id] {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(&g) {
                *a += *b;
            }
        }
        slot @ None => {
            *slot = Some(Tensor::new(nodes[id].value.shape(), g)?);
        }
    }
    Ok(())
}

fn broadcast_apply<T: Real>(a: &Tensor<T>, b: &Tensor<T>, out: &[usize], f: impl Fn(T, T) -> T) -> Vec<T> {
    let (ad, bd) = (a.data(), b.data());
    match (kernels::Bcast::new(out, a.shape()), kernels::Bcast::new(out, b.shape())) {
        (kernels::Bcast::Same, kernels::Bcast::Same) => ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
        (kernels::Bcast::Same, kernels::Bcast::Tail(n)) => ad
            .chunks_exact(n)
            .flat_map(|c| c.iter().zip(bd).map(|(&x, &y)| f(x, y)))
            .collect(),
        (am, bm) => (0..numel(out)).map(|i| f(ad[am.index(i)], bd[bm.index(i)])).collect(),
    }
}

fn backprop<T: Real>(nodes: &[Node<T>], id: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
    let node = &nodes[id];
    let out = &node.value;
    let gd = g.data();
    let val = |i: usize| &nodes[i].value;
    let req = |i: usize| nodes[i].requires_grad;
    match &node.op {
        Op::Leaf | Op::Constant => {}
        Op::Binary(kind, a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let os = out.shape();
            let amap = kernels::Bcast::new(os, av.shape());
            let bmap = kernels::Bcast::new(os, bv.shape());
            let ai = |i: usize| av.data()[amap.index(i)];
            let bi = |i: usize| bv.data()[bmap.index(i)];
            if req(*a) {
                let ga: Vec<T> = match kind {
                    BinKind::Add | BinKind::Sub => gd.to_vec(),
                    BinKind::Mul => (0..gd.len()).map(|i| gd[i] * bi(i)).collect(),
                    BinKind::Div => (0..gd.len()).map(|i| gd[i] / bi(i)).collect(),
                };
                accumulate(nodes, grads, *a, kernels::reduce_to(ga, os, av.shape()))?;
            }
            if req(*b) {
                let gb: Vec<T> = match kind {
                    BinKind::Add => gd.to_vec(),
                    BinKind::Sub => gd.iter().map(|&v| -v).collect(),
                    BinKind::Mul => (0..gd.len()).map(|i| gd[i] * ai(i)).collect(),
                    BinKind::Div => (0..gd.len())
                        .map(|i| {
                            let bb = bi(i);
                            -gd[i] * ai(i) / (bb * bb)
                        })
                        .collect(),
                };
                accumulate(nodes, grads, *b, kernels::reduce_to(gb, os, bv.shape()))?;
            }
        }
        Op::Neg(a) => accumulate(nodes, grads, *a, gd.iter().map(|&v| -v).collect())?,
        Op::Scale(a, s) => accumulate(nodes, grads, *a, gd.iter().map(|&v| v * *s).collect())?,
        Op::AddScalar(a) | Op::Reshape(a) => accumulate(nodes, grads, *a, gd.to_vec())?,
        Op::Unary(kind, a) => {
            let x = val(*a).data();
            let y = out.data();
            let ga = (0..gd.len()).map(|i| gd[i] * unary_deriv(*kind, x[i], y[i])).collect();
            accumulate(nodes, grads, *a, ga)?;
        }
        Op::Clamp(a, lo, hi) => {
            let x = val(*a).data();
            let ga = (0..gd.len())
                .map(|i| if x[i] >= *lo && x[i] <= *hi { gd[i] } else { T::zero() })
                .collect();
            accumulate(nodes, grads, *a, ga)?;
        }
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (k, n) = (bv.shape()[0], bv.shape()[1]);
            let m = av.numel() / k;
            if req(*a) {
                accumulate(nodes, grads, *a, kernels::matmul_nt(gd, bv.data(), m, k, n))?;
            }
            if req(*b) {
                accumulate(nodes, grads, *b, kernels::matmul_tn(av.data(), gd, m, k, n))?;
            }
        }
        Op::Conv2d { x, w, bias, geom } => {
            let (gx, gw, gb) = kernels::conv2d_backward(val(*x).data(), val(*w).data(), gd, geom, req(*x), req(*w));
            if req(*x) {
                accumulate(nodes, grads, *x, gx)?;
            }
            if req(*w) {
                accumulate(nodes, grads, *w, gw)?;
            }
            if let Some(b) = bias {
                accumulate(nodes, grads, *b, gb)?;
            }
        }
        Op::Permute(a, axes) => {
            let ga = kernels::permute(gd, out.shape(), &kernels::inverse_axes(axes));
            accumulate(nodes, grads, *a, ga)?;
        }
        Op::Concat(ids, axis) => {
            let os = out.shape();
            let outer = numel(&os[..*axis]);
            let inner = numel(&os[axis + 1..]);
            let total = os[*axis] * inner;
            let mut off = 0;
            for &i in ids {
                let blk = val(i).shape()[*axis] * inner;
                if req(i) {
                    let mut gi = Vec::with_capacity(outer * blk);
                    for o in 0..outer {
                        gi.extend_from_slice(&gd[o * total + off..o * total + off + blk]);
                    }
                    accumulate(nodes, grads, i, gi)?;
                }
                off += blk;
            }
        }
        Op::Slice { x, axis, start } => {
            let xs = val(*x).shape();
            let outer = numel(&xs[..*axis]);
            let inner = numel(&xs[axis + 1..]);
            let total = xs[*axis] * inner;
            let blk = out.shape()[*axis] * inner;
            let mut gx = vec![T::zero(); numel(xs)];
            for o in 0..outer {
                gx[o * total + start * inner..][..blk].copy_from_slice(&gd[o * blk..(o + 1) * blk]);
            }
            accumulate(nodes, grads, *x, gx)?;
        }
        Op::Sum(a) => accumulate(nodes, grads, *a, vec![gd[0]; val(*a).numel()])?,
        Op::Mean(a) => {
            let n = val(*a).numel();
            accumulate(nodes, grads, *a, vec![gd[0] / T::lit(n as f64); n])?;
        }
        Op::AmaxTrailing { x, argmax } => {
            let mut gx = vec![T::zero(); val(*x).numel()];
            for (o, &src) in argmax.iter().enumerate() {
                gx[src] += gd[o];
            }
            accumulate(nodes, grads, *x, gx)?;
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let gv = val(*gamma);
            let d = gv.numel();
            let (gx, gg, gb) = kernels::layer_norm_backward(gd, gv.data(), xhat, rstd, d);
            accumulate(nodes, grads, *x, gx)?;
            accumulate(nodes, grads, *gamma, gg)?;
            accumulate(nodes, grads, *beta, gb)?;
        }
        Op::Tokens { x, index, scatter } => {
            let gx = permute_tokens(gd, out.shape(), index, !*scatter);
            accumulate(nodes, grads, *x, gx)?;
        }
        Op::Scan { inputs, dims, h, abar } => {
            let [u, delta, a, b, c, d] = *inputs;
            let gs = kernels::scan_backward(
                gd,
                val(u).data(),
                val(delta).data(),
                val(a).data(),
                val(b).data(),
                val(c).data(),
                val(d).data(),
                h,
                abar,
                *dims,
            );
            for (i, gi) in inputs.iter().zip(gs) {
                accumulate(nodes, grads, *i, gi)?;
            }
        }
        Op::Rfft2(a) => {
            let xs = val(*a).shape().to_vec();
            let (bsz, ch, h, w) = (xs[0], xs[1], xs[2], xs[3]);
            let wf = fft::half_width(w);
            let sp = h * wf;
            let mut gx = Vec::with_capacity(numel(&xs));
            for b in 0..bsz {
                for c in 0..ch {
                    let re = &gd[((b * 2 * ch) + c) * sp..][..sp];
                    let im = &gd[((b * 2 * ch) + ch + c) * sp..][..sp];
                    gx.extend(fft::rfft2_adjoint_plane(re, im, h, w));
                }
            }
            accumulate(nodes, grads, *a, gx)?;
        }
        Op::Irfft2(a) => {
            let os = out.shape();
            let (bsz, ch, h, w) = (os[0], os[1], os[2], os[3]);
            let wf = fft::half_width(w);
            let sp = h * wf;
            let mut gs = vec![T::zero(); bsz * 2 * ch * sp];
            for b in 0..bsz {
                for c in 0..ch {
                    let plane = &gd[(b * ch + c) * h * w..][..h * w];
                    let (re, im) = fft::irfft2_adjoint_plane(plane, h, w);
                    gs[((b * 2 * ch) + c) * sp..][..sp].copy_from_slice(&re);
                    gs[((b * 2 * ch) + ch + c) * sp..][..sp].copy_from_slice(&im);
                }
            }
            accumulate(nodes, grads, *a, gs)?;
        }
        Op::Upsample2x(a) => {
            let xs = val(*a).shape().to_vec();
            let (planes, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
            let mut gx = vec![T::zero(); planes * h * w];
            for p in 0..planes {
                for y in 0..2 * h {
                    for x in 0..2 * w {
                        gx[(p * h + y / 2) * w + x / 2] += gd[(p * 2 * h + y) * 2 * w + x];
                    }
                }
            }
            accumulate(nodes, grads, *a, gx)?;
        }
        Op::PadReplicate(a, pad) => {
            let xs = val(*a).shape().to_vec();
            let (planes, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
            let (oh, ow) = (h + 2 * pad, w + 2 * pad);
            let mut gx = vec![T::zero(); planes * h * w];
            for p in 0..planes {
                for y in 0..oh {
                    let sy = y.saturating_sub(*pad).min(h - 1);
                    for x in 0..ow {
                        let sx = x.saturating_sub(*pad).min(w - 1);
                        gx[(p * h + sy) * w + sx] += gd[(p * oh + y) * ow + x];
                    }
                }
            }
            accumulate(nodes, grads, *a, gx)?;
        }
    }
    Ok(())
}

/// Gather (`out[b,i,:] = x[b,idx[i],:]`) or scatter (`out[b,idx[i],:] = x[b,i,:]`)
/// over the middle axis of a `[B,L,C]` buffer. A single index is shared by
/// every batch row.
fn permute_tokens<T: Real>(x: &[T], shape: &[usize], index: &[Vec<usize>], scatter: bool) -> Vec<T> {
    let (bsz, len, ch) = (shape[0], shape[1], shape[2]);
    let mut out = vec![T::zero(); x.len()];
    for b in 0..bsz {
        let idx = if index.len() == 1 { &index[0] } else { &index[b] };
        let base = b * len * ch;
        for (i, &j) in idx.iter().enumerate() {
            let (dst, src) = if scatter { (j, i) } else { (i, j) };
            out[base + dst * ch..base + (dst + 1) * ch].copy_from_slice(&x[base + src * ch..base + (src + 1) * ch]);
        }
    }
    out
}

fn validate_perm(p: &[usize], len: usize) -> Result<()> {
    if p.len() != len {
        return Err(Error::Permutation(format!("length {} for {len} tokens", p.len())));
    }
    let mut seen = vec![false; len];
    for &i in p {
        if i >= len {
            return Err(Error::Permutation(format!("index {i} out of range 0..{len}")));
        }
        if std::mem::replace(&mut seen[i], true) {
            return Err(Error::Permutation(format!("duplicate index {i}")));
        }
    }
    Ok(())
}

impl<'g, T: Real> Var<'g, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires(self.id)
    }

    fn push(&self, t: Tensor<T>, op: Op<T>, name: &str) -> Result<Var<'g, T>> {
        self.graph.push(t, op, name)
    }

    fn binary(&self, other: &Var<'g, T>, kind: BinKind, name: &'static str) -> Result<Var<'g, T>> {
        let (a, b) = (self.value(), other.value());
        let out_shape =
            kernels::broadcast_shape(a.shape(), b.shape()).ok_or_else(|| Error::shape(name, a.shape(), b.shape()))?;
        let data = match kind {
            BinKind::Add => broadcast_apply(&a, &b, &out_shape, |x, y| x + y),
            BinKind::Sub => broadcast_apply(&a, &b, &out_shape, |x, y| x - y),
            BinKind::Mul => broadcast_apply(&a, &b, &out_shape, |x, y| x * y),
            BinKind::Div => broadcast_apply(&a, &b, &out_shape, |x, y| x / y),
        };
        self.push(
            Tensor::new(&out_shape, data)?,
            Op::Binary(kind, self.id, other.id),
            name,
        )
    }

    pub fn add(&self, other: &Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, BinKind::Add, "add")
    }

    pub fn sub(&self, other: &Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, BinKind::Sub, "sub")
    }

    pub fn mul(&self, other: &Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, BinKind::Mul, "mul")
    }

    pub fn div(&self, other: &Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, BinKind::Div, "div")
    }

    pub fn neg(&self) -> Result<Var<'g, T>> {
        self.push(self.value().map(|v| -v), Op::Neg(self.id), "neg")
    }

    pub fn scale(&self, s: f64) -> Result<Var<'g, T>> {
        let s = T::lit(s);
        self.push(self.value().map(|v| v * s), Op::Scale(self.id, s), "scale")
    }

    pub fn add_scalar(&self, s: f64) -> Result<Var<'g, T>> {
        let s = T::lit(s);
        self.push(self.value().map(|v| v + s), Op::AddScalar(self.id), "add_scalar")
    }

    pub fn unary(&self, kind: UnaryKind) -> Result<Var<'g, T>> {
        let x = self.value();
        match kind {
            UnaryKind::Log if x.data().iter().any(|&v| v <= T::zero()) => {
                return Err(Error::Domain {
                    op: "log",
                    msg: "input must be strictly positive".into(),
                })
            }
            UnaryKind::Sqrt if x.data().iter().any(|&v| v < T::zero()) => {
                return Err(Error::Domain {
                    op: "sqrt",
                    msg: "input must be non-negative".into(),
                })
            }
            _ => {}
        }
        self.push(x.map(|v| unary_fwd(kind, v)), Op::Unary(kind, self.id), kind.name())
    }

    pub fn exp(&self) -> Result<Var<'g, T>> {
        self.unary(UnaryKind::Exp)
    }

    pub fn log(&self) -> Result<Var<'g, T>> {
        self.unary(UnaryKind::Log)
    }

    pub fn sigmoid(&self) -> Result<Var<'g, T>> {
        self.unary(UnaryKind::Sigmoid)
    }

    pub fn silu(&self) -> Result<Var<'g, T>> {
        self.unary(UnaryKind::Silu)
    }

    pub fn softplus(&self) -> Result<Var<'g, T>> {
        self.unary(UnaryKind::Softplus)
    }

    pub fn gelu(&self) -> Result<Var<'g, T>> {
        self.unary(UnaryKind::Gelu)
    }

    pub fn tanh(&self) -> Result<Var<'g, T>> {
        self.unary(UnaryKind::Tanh)
    }

    pub fn abs(&self) -> Result<Var<'g, T>> {
        self.unary(UnaryKind::Abs)
    }

    pub fn sqrt(&self) -> Result<Var<'g, T>> {
        self.unary(UnaryKind::Sqrt)
    }

    pub fn square(&self) -> Result<Var<'g, T>> {
        self.unary(UnaryKind::Square)
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Result<Var<'g, T>> {
        let (lo, hi) = (T::lit(lo), T::lit(hi));
        self.push(
            self.value().map(|v| v.max(lo).min(hi)),
            Op::Clamp(self.id, lo, hi),
            "clamp",
        )
    }

    /// `[..., K] × [K, N]`; leading dims of the left operand are batch rows.
    pub fn matmul(&self, other: &Var<'g, T>) -> Result<Var<'g, T>> {
        let (a, b) = (self.value(), other.value());
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() < 2 || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (k, n) = (sb[0], sb[1]);
        let m = a.numel() / k;
        let data = kernels::matmul(a.data(), b.data(), m, k, n);
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = n;
        self.push(Tensor::new(&shape, data)?, Op::MatMul(self.id, other.id), "matmul")
    }

    /// NCHW convolution, weight `[Cout, Cin, kh, kw]`, zero padding.
    pub fn conv2d(&self, w: &Var<'g, T>, bias: Option<&Var<'g, T>>, stride: usize, pad: usize) -> Result<Var<'g, T>> {
        let (x, wv) = (self.value(), w.value());
        let geom = ConvGeom::new(x.shape(), wv.shape(), stride, pad)
            .ok_or_else(|| Error::shape("conv2d", x.shape(), wv.shape()))?;
        let bval = bias.map(|b| b.value());
        if let Some(b) = &bval {
            if b.shape() != [geom.cout] {
                return Err(Error::shape("conv2d(bias)", &[geom.cout], b.shape()));
            }
        }
        let data = kernels::conv2d_forward(x.data(), wv.data(), bval.as_ref().map(|b| b.data()), &geom);
        self.push(
            Tensor::new(&geom.out_shape(), data)?,
            Op::Conv2d {
                x: self.id,
                w: w.id,
                bias: bias.map(|b| b.id),
                geom,
            },
            "conv2d",
        )
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Var<'g, T>> {
        let x = self.value();
        let n = x.ndim();
        let mut seen = vec![false; n];
        if axes.len() != n || axes.iter().any(|&a| a >= n || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::Contract(format!("bad axis permutation {axes:?} for rank {n}")));
        }
        let shape: Vec<usize> = axes.iter().map(|&a| x.shape()[a]).collect();
        let data = kernels::permute(x.data(), x.shape(), axes);
        self.push(
            Tensor::new(&shape, data)?,
            Op::Permute(self.id, axes.to_vec()),
            "permute",
        )
    }

    /// Swaps two axes.
    pub fn transpose(&self, a: usize, b: usize) -> Result<Var<'g, T>> {
        let mut axes: Vec<usize> = (0..self.shape().len()).collect();
        if a >= axes.len() || b >= axes.len() {
            return Err(Error::Contract(format!("transpose axes {a},{b} out of range")));
        }
        axes.swap(a, b);
        self.permute(&axes)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'g, T>> {
        let x = self.value();
        if numel(shape) != x.numel() {
            return Err(Error::shape("reshape", x.shape(), shape));
        }
        let t = Tensor::new(shape, x.data().to_vec())?;
        self.push(t, Op::Reshape(self.id), "reshape")
    }

    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        let xs = x.shape();
        if axis >= xs.len() || start + len > xs[axis] {
            return Err(Error::Contract(format!("slice {start}+{len} on axis {axis} of {xs:?}")));
        }
        let outer = numel(&xs[..axis]);
        let inner = numel(&xs[axis + 1..]);
        let total = xs[axis] * inner;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(&x.data()[o * total + start * inner..][..len * inner]);
        }
        let mut shape = xs.to_vec();
        shape[axis] = len;
        self.push(
            Tensor::new(&shape, data)?,
            Op::Slice {
                x: self.id,
                axis,
                start,
            },
            "slice",
        )
    }

    /// Splits along `axis` into consecutive chunks of the given sizes.
    pub fn split(&self, axis: usize, sizes: &[usize]) -> Result<Vec<Var<'g, T>>> {
        let total: usize = sizes.iter().sum();
        let shape = self.shape();
        if axis >= shape.len() || total != shape[axis] {
            return Err(Error::Contract(format!(
                "split sizes {sizes:?} do not cover axis {axis} of {shape:?}"
            )));
        }
        let mut start = 0;
        sizes
            .iter()
            .map(|&s| {
                let v = self.slice(axis, start, s);
                start += s;
                v
            })
            .collect()
    }

    pub fn sum(&self) -> Result<Var<'g, T>> {
        let s = self.value().data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum(self.id), "sum")
    }

    pub fn mean(&self) -> Result<Var<'g, T>> {
        let x = self.value();
        if x.numel() == 0 {
            return Err(Error::Contract("mean of an empty tensor".into()));
        }
        let s = x.data().iter().copied().sum::<T>() / T::lit(x.numel() as f64);
        self.push(Tensor::scalar(s), Op::Mean(self.id), "mean")
    }

    /// Maximum over the trailing `k` axes, keeping them as size-1 axes.
    pub fn amax_trailing(&self, k: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        let xs = x.shape();
        if k == 0 || k > xs.len() {
            return Err(Error::Contract(format!("amax over {k} trailing axes of {xs:?}")));
        }
        let inner = numel(&xs[xs.len() - k..]);
        let outer = x.numel() / inner.max(1);
        let mut vals = Vec::with_capacity(outer);
        let mut argmax = Vec::with_capacity(outer);
        for o in 0..outer {
            let row = &x.data()[o * inner..(o + 1) * inner];
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            vals.push(row[best]);
            argmax.push(o * inner + best);
        }
        let mut shape = xs[..xs.len() - k].to_vec();
        shape.extend(std::iter::repeat_n(1, k));
        self.push(
            Tensor::new(&shape, vals)?,
            Op::AmaxTrailing { x: self.id, argmax },
            "amax",
        )
    }

    /// Normalizes over the last axis (epsilon 1e-5), then applies `gamma`, `beta`.
    pub fn layer_norm(&self, gamma: &Var<'g, T>, beta: &Var<'g, T>) -> Result<Var<'g, T>> {
        let x = self.value();
        let d = *x
            .shape()
            .last()
            .ok_or_else(|| Error::Contract("layer_norm on a scalar".into()))?;
        let (gv, bv) = (gamma.value(), beta.value());
        if gv.shape() != [d] || bv.shape() != [d] {
            return Err(Error::shape("layer_norm", x.shape(), gv.shape()));
        }
        let (y, xhat, rstd) = kernels::layer_norm_forward(x.data(), gv.data(), bv.data(), d);
        self.push(
            Tensor::new(x.shape(), y)?,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                rstd,
            },
            "layer_norm",
        )
    }

    fn tokens(&self, index: &[Vec<usize>], scatter: bool) -> Result<Var<'g, T>> {
        let x = self.value();
        let xs = x.shape();
        if xs.len() != 3 {
            return Err(Error::Input(format!("token reorder expects [B,L,C], got {xs:?}")));
        }
        if index.len() != 1 && index.len() != xs[0] {
            return Err(Error::Permutation(format!(
                "{} index rows for batch {}",
                index.len(),
                xs[0]
            )));
        }
        for p in index {
            validate_perm(p, xs[1])?;
        }
        let data = permute_tokens(x.data(), xs, index, scatter);
        let name = if scatter { "scatter_tokens" } else { "gather_tokens" };
        self.push(
            Tensor::new(xs, data)?,
            Op::Tokens {
                x: self.id,
                index: Rc::new(index.to_vec()),
                scatter,
            },
            name,
        )
    }

    /// `out[b,i,c] = x[b, perm_b[i], c]`. Pass one permutation to share it
    /// across the batch or one per batch row.
    pub fn gather_tokens(&self, perms: &[Vec<usize>]) -> Result<Var<'g, T>> {
        self.tokens(perms, false)
    }

    /// `out[b, perm_b[i], c] = x[b,i,c]`, the inverse of [`Var::gather_tokens`]
    /// with the same permutation.
    pub fn scatter_tokens(&self, perms: &[Vec<usize>]) -> Result<Var<'g, T>> {
        self.tokens(perms, true)
    }

    /// Real 2-D FFT of `[B,C,H,W]`. Output `[B, 2C, H, W/2+1]` holds the real
    /// planes in channels `0..C` and the imaginary planes in `C..2C`.
    pub fn rfft2(&self) -> Result<Var<'g, T>> {
        let x = self.value();
        let xs = x.shape();
        if xs.len() != 4 {
            return Err(Error::Input(format!("rfft2 expects [B,C,H,W], got {xs:?}")));
        }
        let (bsz, ch, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        fft::check_fft_dims(h, w)?;
        let wf = fft::half_width(w);
        let sp = h * wf;
        let mut data = vec![T::zero(); bsz * 2 * ch * sp];
        for b in 0..bsz {
            for c in 0..ch {
                let (re, im) = fft::rfft2_plane(&x.data()[(b * ch + c) * h * w..][..h * w], h, w);
                data[((b * 2 * ch) + c) * sp..][..sp].copy_from_slice(&re);
                data[((b * 2 * ch) + ch + c) * sp..][..sp].copy_from_slice(&im);
            }
        }
        self.push(Tensor::new(&[bsz, 2 * ch, h, wf], data)?, Op::Rfft2(self.id), "rfft2")
    }

    /// Inverse of [`Var::rfft2`] for output width `w`.
    pub fn irfft2(&self, w: usize) -> Result<Var<'g, T>> {
        let s = self.value();
        let ss = s.shape();
        if ss.len() != 4 || !ss[1].is_multiple_of(2) || ss[3] != fft::half_width(w) {
            return Err(Error::Input(format!("irfft2 of {ss:?} to width {w}")));
        }
        let (bsz, ch, h) = (ss[0], ss[1] / 2, ss[2]);
        fft::check_fft_dims(h, w)?;
        let sp = h * ss[3];
        let mut data = Vec::with_capacity(bsz * ch * h * w);
        for b in 0..bsz {
            for c in 0..ch {
                let re = &s.data()[((b * 2 * ch) + c) * sp..][..sp];
                let im = &s.data()[((b * 2 * ch) + ch + c) * sp..][..sp];
                data.extend(fft::irfft2_plane(re, im, h, w));
            }
        }
        self.push(Tensor::new(&[bsz, ch, h, w], data)?, Op::Irfft2(self.id), "irfft2")
    }

    /// [`Var::rfft2`] split into real and imaginary parts.
    pub fn fft2_real(&self) -> Result<ComplexPair<'g, T>> {
        let ch = self.shape().get(1).copied().unwrap_or(0);
        let s = self.rfft2()?;
        Ok(ComplexPair {
            re: s.slice(1, 0, ch)?,
            im: s.slice(1, ch, ch)?,
        })
    }

    /// Nearest-neighbour 2× upsampling of `[B,C,H,W]`.
    pub fn upsample2x(&self) -> Result<Var<'g, T>> {
        let x = self.value();
        let xs = x.shape();
        if xs.len() != 4 {
            return Err(Error::Input(format!("upsample2x expects [B,C,H,W], got {xs:?}")));
        }
        let (planes, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
        let mut data = Vec::with_capacity(planes * 4 * h * w);
        for p in 0..planes {
            for y in 0..2 * h {
                let row = &x.data()[(p * h + y / 2) * w..][..w];
                for xx in 0..2 * w {
                    data.push(row[xx / 2]);
                }
            }
        }
        self.push(
            Tensor::new(&[xs[0], xs[1], 2 * h, 2 * w], data)?,
            Op::Upsample2x(self.id),
            "upsample2x",
        )
    }

    /// Edge-replicating spatial padding of `[B,C,H,W]`.
    pub fn pad_replicate(&self, pad: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        let xs = x.shape();
        if xs.len() != 4 || xs[2] == 0 || xs[3] == 0 {
            return Err(Error::Input(format!(
                "pad_replicate expects non-empty [B,C,H,W], got {xs:?}"
            )));
        }
        let (planes, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
        let (oh, ow) = (h + 2 * pad, w + 2 * pad);
        let mut data = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            for y in 0..oh {
                let sy = y.saturating_sub(pad).min(h - 1);
                for xx in 0..ow {
                    let sx = xx.saturating_sub(pad).min(w - 1);
                    data.push(x.data()[(p * h + sy) * w + sx]);
                }
            }
        }
        self.push(
            Tensor::new(&[xs[0], xs[1], oh, ow], data)?,
            Op::PadReplicate(self.id, pad),
            "pad_replicate",
        )
    }
}

impl<'g, T: Real> ComplexPair<'g, T> {
    /// Inverse real FFT back to width `w`.
    pub fn ifft2_real(&self, w: usize) -> Result<Var<'g, T>> {
        let g = self.re.graph();
        g.concat(&[self.re, self.im], 1)?.irfft2(w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn add_elementwise() {
        let g = Graph::new();
        let a = g.constant(t(&[2], &[1.0, 2.0]));
        let b = g.constant(t(&[2], &[3.0, 4.0]));
        assert_eq!(a.add(&b).unwrap().value().data(), &[4.0, 6.0]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let g = Graph::new();
        let a = g.constant(Tensor::<f64>::zeros(&[2, 3]));
        let b = g.constant(Tensor::<f64>::zeros(&[4]));
        let err = a.add(&b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4]"), "{err}");
    }

    #[test]
    fn matmul_identity() {
        let g = Graph::new();
        let a = t(&[3, 3], &[1.0, -2.0, 3.5, 0.25, 7.0, -1.0, 2.0, 2.0, 9.0]);
        let i = g.constant(Tensor::eye(3));
        let out = i.matmul(&g.constant(a.clone())).unwrap();
        assert_eq!(*out.value(), a);
    }

    #[test]
    fn sigmoid_silu_at_zero() {
        let g = Graph::new();
        let z = g.constant(Tensor::<f64>::zeros(&[1]));
        assert_eq!(z.sigmoid().unwrap().value().item(), 0.5);
        assert_eq!(z.silu().unwrap().value().item(), 0.0);
    }

    #[test]
    fn log_domain_error() {
        let g = Graph::new();
        let x = g.constant(t(&[2], &[1.0, 0.0]));
        assert!(matches!(x.log(), Err(Error::Domain { .. })));
    }

    #[test]
    fn non_finite_detected() {
        let g = Graph::new();
        let x = g.constant(t(&[1], &[1000.0]));
        assert!(matches!(x.exp(), Err(Error::NonFinite(_))));
    }

    #[test]
    fn sum_and_square_gradients() {
        let g = Graph::new();
        let x = g.leaf(t(&[3], &[1.0, -2.0, 0.5]));
        let s = x.sum().unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let g = Graph::new();
        let x = g.leaf(t(&[3], &[1.0, -2.0, 0.5]));
        let l = x.mul(&x).unwrap().sum().unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let g = Graph::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn unused_leaf_gets_zero_grad() {
        let g = Graph::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]));
        let y = g.leaf(t(&[2], &[1.0, 2.0]));
        let grads = g.backward(x.sum().unwrap()).unwrap();
        assert_eq!(grads.get(y).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn permutation_errors() {
        let g = Graph::new();
        let x = g.constant(Tensor::<f64>::zeros(&[1, 3, 2]));
        assert!(matches!(x.gather_tokens(&[vec![0, 1, 3]]), Err(Error::Permutation(_))));
        assert!(matches!(x.gather_tokens(&[vec![0, 1, 1]]), Err(Error::Permutation(_))));
        assert!(x.gather_tokens(&[vec![2, 0, 1]]).is_ok());
    }

    #[test]
    fn records_are_topological() {
        let g = Graph::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]));
        let y = x.exp().unwrap().sum().unwrap();
        let recs = g.records();
        assert_eq!(recs.len(), 3);
        assert!(recs.iter().all(|r| r.inputs.iter().all(|&i| i < r.id)));
        assert_eq!(recs[y.id()].kind, OpKind::Sum);
    }

    #[test]
    fn reset_clears_scan_counter() {
        let mut g = Graph::<f64>::new();
        {
            let u = g.constant(Tensor::ones(&[1, 2, 1]));
            let a = g.constant(Tensor::zeros(&[1, 1]));
            let bc = g.constant(Tensor::ones(&[1, 2, 1]));
            let d = g.constant(Tensor::zeros(&[1]));
            g.selective_scan(u, u, a, bc, bc, d).unwrap();
        }
        assert_eq!(g.scan_count(), 1);
        g.reset();
        assert_eq!(g.scan_count(), 0);
        assert!(g.is_empty());
    }
}
