//! Wengert tape: append-only op records plus reverse-mode gradient rules.
//!
//! Every recorded node keeps cheap `Arc` clones of its input buffers, so
//! backward never recomputes a forward value it did not explicitly save.
//! Node ids are assigned in execution order, which is already a topological
//! order; backward walks ids in reverse once and accumulates gradients in
//! that fixed order, so gradient bits are reproducible run to run.
//!
//! The tape is rebuilt per forward pass and confined to one logical
//! execution context (the handle is an `Rc`). Gradients accumulate across
//! `backward` calls until [`Tape::zero_grads`].

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::Arc;

use crate::scalar::lit;
use crate::{Error, Result, Scalar};

use super::TensorBase;

/// Saved input: buffer, shape, and (when tape-attached) the producing node.
pub(crate) struct Saved<T: Scalar> {
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Arc<Vec<T>>,
    pub(crate) node: Option<usize>,
}

impl<T: Scalar> Saved<T> {
    pub(crate) fn of(t: &TensorBase<T>) -> Self {
        Saved {
            shape: t.shape().to_vec(),
            data: t.data_arc(),
            node: t.node().map(|n| n.id),
        }
    }
}

pub(crate) enum Op<T: Scalar> {
    Leaf,
    MatMul { a: Saved<T>, b: Saved<T> },
    Add { a: Saved<T>, b: Saved<T> },
    Mul { a: Saved<T>, b: Saved<T> },
    Scale { x: Saved<T>, c: T },
    AddConst { x: Saved<T> },
    MulScalar { x: Saved<T>, s: Saved<T> },
    AddScalar { x: Saved<T>, s: Saved<T> },
    DivScalar { x: Saved<T>, s: Saved<T> },
    Sigmoid { x: Saved<T>, y: Arc<Vec<T>> },
    Gelu { x: Saved<T> },
    Sum { x: Saved<T> },
    GatherRows { x: Saved<T>, ids: Arc<Vec<usize>> },
    GatherElems { x: Saved<T>, ids: Arc<Vec<usize>> },
    ScatterAddRows { base: Saved<T>, rows: Saved<T>, ids: Arc<Vec<usize>> },
    ConcatRows { parts: Vec<Saved<T>> },
    ConcatCols { parts: Vec<Saved<T>> },
    Reshape { x: Saved<T> },
    DepthwiseConv3x3 { x: Saved<T>, k: Saved<T> },
    Conv2d { x: Saved<T>, k: Saved<T>, stride: usize, pad: usize },
    LayerNorm { x: Saved<T>, gamma: Saved<T>, beta: Saved<T>, xhat: Arc<Vec<T>>, rstd: Arc<Vec<T>> },
    AddRowBroadcast { x: Saved<T>, b: Saved<T> },
    MeanRows { x: Saved<T> },
    AvgPoolRect { x: Saved<T>, r0: usize, r1: usize, c0: usize, c1: usize },
    CosineMatrix { a: Saved<T>, b: Saved<T>, eps: T, na: Arc<Vec<T>>, nb: Arc<Vec<T>>, dots: Arc<Vec<T>> },
}

impl<T: Scalar> Op<T> {
    /// Stable lowercase identifier, used by the backward corruption hook.
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::AddConst { .. } => "add_const",
            Op::MulScalar { .. } => "mul_scalar",
            Op::AddScalar { .. } => "add_scalar",
            Op::DivScalar { .. } => "div_scalar",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Gelu { .. } => "gelu",
            Op::Sum { .. } => "sum",
            Op::GatherRows { .. } => "gather_rows",
            Op::GatherElems { .. } => "gather_elems",
            Op::ScatterAddRows { .. } => "scatter_add_rows",
            Op::ConcatRows { .. } => "concat_rows",
            Op::ConcatCols { .. } => "concat_cols",
            Op::Reshape { .. } => "reshape",
            Op::DepthwiseConv3x3 { .. } => "depthwise_conv3x3",
            Op::Conv2d { .. } => "conv2d",
            Op::LayerNorm { .. } => "layer_norm",
            Op::AddRowBroadcast { .. } => "add_row_broadcast",
            Op::MeanRows { .. } => "mean_rows",
            Op::AvgPoolRect { .. } => "avg_pool_rect",
            Op::CosineMatrix { .. } => "cosine_matrix",
        }
    }
}

pub(crate) struct Node<T: Scalar> {
    pub(crate) op: Op<T>,
    pub(crate) shape: Vec<usize>,
}

pub(crate) struct TapeInner<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    corrupt: Option<String>,
}

/// Recording context for reverse-mode differentiation.
pub struct Tape<T: Scalar>(Rc<RefCell<TapeInner<T>>>);

impl<T: Scalar> Clone for Tape<T> {
    fn clone(&self) -> Self {
        Tape(self.0.clone())
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape(Rc::new(RefCell::new(TapeInner {
            nodes: Vec::new(),
            grads: Vec::new(),
            corrupt: None,
        })))
    }

    /// Register `t` as a differentiable leaf and return the attached handle.
    /// Any previous tape link on `t` is ignored; the leaf is a fresh node.
    pub fn watch(&self, t: &TensorBase<T>) -> TensorBase<T> {
        let id = self.push(Op::Leaf, t.shape().to_vec());
        t.with_node(self.clone(), id)
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.0.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Test hook: scale the named op's incoming gradient by 1.5 during
    /// backward, deliberately breaking that rule. `None` restores honesty.
    pub fn corrupt_backward(&self, op: Option<&str>) {
        self.0.borrow_mut().corrupt = op.map(|s| s.to_string());
    }

    /// Drop all accumulated gradients.
    pub fn zero_grads(&self) {
        for g in self.0.borrow_mut().grads.iter_mut() {
            *g = None;
        }
    }

    /// Reverse sweep from a scalar loss. Gradients accumulate into the tape;
    /// read them back through [`TensorBase::grad`]. Calling twice without
    /// [`Tape::zero_grads`] doubles every gradient, by design.
    pub fn backward(&self, loss: &TensorBase<T>) -> Result<()> {
        let loss_node = match loss.node() {
            Some(n) if Rc::ptr_eq(&n.tape.0, &self.0) => n.id,
            Some(_) => return Err(Error::TapeMismatch),
            None => {
                return Err(Error::BackwardOnNonScalar {
                    got: "a tensor with no tape link".into(),
                })
            }
        };
        if loss.numel() != 1 {
            return Err(Error::BackwardOnNonScalar {
                got: format!("{:?}", loss.shape()),
            });
        }

        let mut inner = self.0.borrow_mut();
        let n = inner.nodes.len();
        inner.grads.resize_with(n, || None);

        // Sweep into a scratch buffer so each call contributes exactly one
        // d(loss)/d(node) per node; the persistent accumulator then sums
        // across calls without re-propagating earlier contributions.
        let mut sweep: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        sweep[loss_node] = Some(vec![T::one()]);

        let TapeInner { nodes, grads, corrupt } = &mut *inner;
        for id in (0..=loss_node).rev() {
            let Some(mut out_grad) = sweep[id].take() else {
                continue;
            };
            let node = &nodes[id];
            if corrupt.as_deref() == Some(node.op.name()) {
                let factor = lit::<T>(1.5);
                for g in out_grad.iter_mut() {
                    *g *= factor;
                }
            }
            backward_node(node, &out_grad, &mut sweep);
            sweep[id] = Some(out_grad);
        }
        for (slot, swept) in grads.iter_mut().zip(sweep) {
            let Some(sv) = swept else { continue };
            let acc = slot.get_or_insert_with(|| vec![T::zero(); sv.len()]);
            for (a, s) in acc.iter_mut().zip(sv) {
                *a += s;
            }
        }
        Ok(())
    }

    pub(crate) fn push(&self, op: Op<T>, shape: Vec<usize>) -> usize {
        let mut inner = self.0.borrow_mut();
        inner.nodes.push(Node { op, shape });
        inner.grads.push(None);
        inner.nodes.len() - 1
    }

    pub(crate) fn grad_of(&self, id: usize) -> Option<Vec<T>> {
        self.0.borrow().grads.get(id).and_then(|g| g.clone())
    }

    pub(crate) fn inner_rc(&self) -> &Rc<RefCell<TapeInner<T>>> {
        &self.0
    }
}

/// Add `contribute` into the gradient slot of `input`, allocating zeros on
/// first touch. Inputs without a node are constants; their gradient is
/// dropped.
fn accum<T: Scalar>(
    grads: &mut [Option<Vec<T>>],
    input: &Saved<T>,
    contribute: impl FnOnce(&mut [T]),
) {
    let Some(id) = input.node else { return };
    let slot = grads[id].get_or_insert_with(|| vec![T::zero(); input.data.len()]);
    contribute(slot);
}

#[allow(clippy::too_many_lines)]
fn backward_node<T: Scalar>(node: &Node<T>, og: &[T], grads: &mut [Option<Vec<T>>]) {
    match &node.op {
        Op::Leaf => {}

        Op::MatMul { a, b } => {
            let (m, k) = (a.shape[0], a.shape[1]);
            let n = b.shape[1];
            accum(grads, a, |ga| {
                for i in 0..m {
                    for l in 0..k {
                        let mut acc = T::zero();
                        for j in 0..n {
                            acc += og[i * n + j] * b.data[l * n + j];
                        }
                        ga[i * k + l] += acc;
                    }
                }
            });
            accum(grads, b, |gb| {
                for l in 0..k {
                    for j in 0..n {
                        let mut acc = T::zero();
                        for i in 0..m {
                            acc += a.data[i * k + l] * og[i * n + j];
                        }
                        gb[l * n + j] += acc;
                    }
                }
            });
        }

        Op::Add { a, b } => {
            accum(grads, a, |ga| {
                for (g, &o) in ga.iter_mut().zip(og) {
                    *g += o;
                }
            });
            accum(grads, b, |gb| {
                for (g, &o) in gb.iter_mut().zip(og) {
                    *g += o;
                }
            });
        }

        Op::Mul { a, b } => {
            accum(grads, a, |ga| {
                for i in 0..ga.len() {
                    ga[i] += og[i] * b.data[i];
                }
            });
            accum(grads, b, |gb| {
                for i in 0..gb.len() {
                    gb[i] += og[i] * a.data[i];
                }
            });
        }

        Op::Scale { x, c } => {
            accum(grads, x, |gx| {
                for i in 0..gx.len() {
                    gx[i] += og[i] * *c;
                }
            });
        }

        Op::AddConst { x } => {
            accum(grads, x, |gx| {
                for (g, &o) in gx.iter_mut().zip(og) {
                    *g += o;
                }
            });
        }

        Op::MulScalar { x, s } => {
            let sv = s.data[0];
            accum(grads, x, |gx| {
                for i in 0..gx.len() {
                    gx[i] += og[i] * sv;
                }
            });
            accum(grads, s, |gs| {
                let mut acc = T::zero();
                for (&o, &xv) in og.iter().zip(x.data.iter()) {
                    acc += o * xv;
                }
                gs[0] += acc;
            });
        }

        Op::AddScalar { x, s } => {
            accum(grads, x, |gx| {
                for (g, &o) in gx.iter_mut().zip(og) {
                    *g += o;
                }
            });
            accum(grads, s, |gs| {
                let mut acc = T::zero();
                for &o in og {
                    acc += o;
                }
                gs[0] += acc;
            });
        }

        Op::DivScalar { x, s } => {
            let sv = s.data[0];
            accum(grads, x, |gx| {
                for i in 0..gx.len() {
                    gx[i] += og[i] / sv;
                }
            });
            accum(grads, s, |gs| {
                let mut acc = T::zero();
                for (&o, &xv) in og.iter().zip(x.data.iter()) {
                    acc += o * xv;
                }
                gs[0] -= acc / (sv * sv);
            });
        }

        Op::Sigmoid { x, y } => {
            accum(grads, x, |gx| {
                for i in 0..gx.len() {
                    gx[i] += og[i] * y[i] * (T::one() - y[i]);
                }
            });
        }

        Op::Gelu { x } => {
            accum(grads, x, |gx| {
                for i in 0..gx.len() {
                    gx[i] += og[i] * gelu_prime(x.data[i]);
                }
            });
        }

        Op::Sum { x } => {
            let g = og[0];
            accum(grads, x, |gx| {
                for v in gx.iter_mut() {
                    *v += g;
                }
            });
        }

        Op::GatherRows { x, ids } => {
            let d = x.shape[1];
            accum(grads, x, |gx| {
                for (i, &src) in ids.iter().enumerate() {
                    for c in 0..d {
                        gx[src * d + c] += og[i * d + c];
                    }
                }
            });
        }

        Op::GatherElems { x, ids } => {
            accum(grads, x, |gx| {
                for (i, &src) in ids.iter().enumerate() {
                    gx[src] += og[i];
                }
            });
        }

        Op::ScatterAddRows { base, rows, ids } => {
            accum(grads, base, |gb| {
                for (g, &o) in gb.iter_mut().zip(og) {
                    *g += o;
                }
            });
            let d = rows.shape[1];
            accum(grads, rows, |gr| {
                for (i, &dst) in ids.iter().enumerate() {
                    for c in 0..d {
                        gr[i * d + c] += og[dst * d + c];
                    }
                }
            });
        }

        Op::ConcatRows { parts } => {
            let mut off = 0;
            for p in parts {
                let len = p.data.len();
                accum(grads, p, |gp| {
                    for i in 0..len {
                        gp[i] += og[off + i];
                    }
                });
                off += len;
            }
        }

        Op::ConcatCols { parts } => {
            let rows = node.shape[0];
            let total = node.shape[1];
            let mut off = 0;
            for p in parts {
                let d = p.shape[1];
                accum(grads, p, |gp| {
                    for r in 0..rows {
                        for c in 0..d {
                            gp[r * d + c] += og[r * total + off + c];
                        }
                    }
                });
                off += d;
            }
        }

        Op::Reshape { x } => {
            accum(grads, x, |gx| {
                for (g, &o) in gx.iter_mut().zip(og) {
                    *g += o;
                }
            });
        }

        Op::DepthwiseConv3x3 { x, k } => {
            let (h, w, d) = (x.shape[0], x.shape[1], x.shape[2]);
            let at = |r: usize, c: usize, ch: usize| (r * w + c) * d + ch;
            accum(grads, x, |gx| {
                for r in 0..h {
                    for c in 0..w {
                        for ch in 0..d {
                            let o = og[at(r, c, ch)];
                            for p in 0..3 {
                                for q in 0..3 {
                                    let (rr, cc) = (r + p, c + q);
                                    if rr >= 1 && rr <= h && cc >= 1 && cc <= w {
                                        gx[at(rr - 1, cc - 1, ch)] += o * k.data[(p * 3 + q) * d + ch];
                                    }
                                }
                            }
                        }
                    }
                }
            });
            accum(grads, k, |gk| {
                for p in 0..3 {
                    for q in 0..3 {
                        for ch in 0..d {
                            let mut acc = T::zero();
                            for r in 0..h {
                                for c in 0..w {
                                    let (rr, cc) = (r + p, c + q);
                                    if rr >= 1 && rr <= h && cc >= 1 && cc <= w {
                                        acc += og[at(r, c, ch)] * x.data[at(rr - 1, cc - 1, ch)];
                                    }
                                }
                            }
                            gk[(p * 3 + q) * d + ch] += acc;
                        }
                    }
                }
            });
        }

        Op::Conv2d { x, k, stride, pad } => {
            let (h, w, ci) = (x.shape[0], x.shape[1], x.shape[2]);
            let (kh, kw, co) = (k.shape[0], k.shape[1], k.shape[3]);
            let (oh, ow) = (node.shape[0], node.shape[1]);
            let xat = |r: usize, c: usize, i: usize| (r * w + c) * ci + i;
            let kat = |a: usize, b: usize, i: usize, o: usize| ((a * kw + b) * ci + i) * co + o;
            accum(grads, x, |gx| {
                for r in 0..oh {
                    for c in 0..ow {
                        for a in 0..kh {
                            for b in 0..kw {
                                let rr = r * stride + a;
                                let cc = c * stride + b;
                                if rr < *pad || cc < *pad {
                                    continue;
                                }
                                let (xr, xc) = (rr - pad, cc - pad);
                                if xr >= h || xc >= w {
                                    continue;
                                }
                                for i in 0..ci {
                                    let mut acc = T::zero();
                                    for o in 0..co {
                                        acc += og[(r * ow + c) * co + o] * k.data[kat(a, b, i, o)];
                                    }
                                    gx[xat(xr, xc, i)] += acc;
                                }
                            }
                        }
                    }
                }
            });
            accum(grads, k, |gk| {
                for r in 0..oh {
                    for c in 0..ow {
                        for a in 0..kh {
                            for b in 0..kw {
                                let rr = r * stride + a;
                                let cc = c * stride + b;
                                if rr < *pad || cc < *pad {
                                    continue;
                                }
                                let (xr, xc) = (rr - pad, cc - pad);
                                if xr >= h || xc >= w {
                                    continue;
                                }
                                for i in 0..ci {
                                    let xv = x.data[xat(xr, xc, i)];
                                    for o in 0..co {
                                        gk[kat(a, b, i, o)] += og[(r * ow + c) * co + o] * xv;
                                    }
                                }
                            }
                        }
                    }
                }
            });
        }

        Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
            let (n, d) = (x.shape[0], x.shape[1]);
            accum(grads, beta, |gb| {
                for r in 0..n {
                    for c in 0..d {
                        gb[c] += og[r * d + c];
                    }
                }
            });
            accum(grads, gamma, |gg| {
                for r in 0..n {
                    for c in 0..d {
                        gg[c] += og[r * d + c] * xhat[r * d + c];
                    }
                }
            });
            accum(grads, x, |gx| {
                let inv_d = T::one() / lit::<T>(d as f64);
                for r in 0..n {
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for c in 0..d {
                        let dyh = og[r * d + c] * gamma.data[c];
                        m1 += dyh;
                        m2 += dyh * xhat[r * d + c];
                    }
                    m1 *= inv_d;
                    m2 *= inv_d;
                    for c in 0..d {
                        let dyh = og[r * d + c] * gamma.data[c];
                        gx[r * d + c] += rstd[r] * (dyh - m1 - xhat[r * d + c] * m2);
                    }
                }
            });
        }

        Op::AddRowBroadcast { x, b } => {
            accum(grads, x, |gx| {
                for (g, &o) in gx.iter_mut().zip(og) {
                    *g += o;
                }
            });
            let (n, d) = (x.shape[0], x.shape[1]);
            accum(grads, b, |gb| {
                for r in 0..n {
                    for c in 0..d {
                        gb[c] += og[r * d + c];
                    }
                }
            });
        }

        Op::MeanRows { x } => {
            let (n, d) = (x.shape[0], x.shape[1]);
            let inv_n = T::one() / lit::<T>(n as f64);
            accum(grads, x, |gx| {
                for r in 0..n {
                    for c in 0..d {
                        gx[r * d + c] += og[c] * inv_n;
                    }
                }
            });
        }

        Op::AvgPoolRect { x, r0, r1, c0, c1 } => {
            let (w, d) = (x.shape[1], x.shape[2]);
            let count = lit::<T>(((r1 - r0) * (c1 - c0)) as f64);
            accum(grads, x, |gx| {
                for r in *r0..*r1 {
                    for c in *c0..*c1 {
                        for ch in 0..d {
                            gx[(r * w + c) * d + ch] += og[ch] / count;
                        }
                    }
                }
            });
        }

        Op::CosineMatrix { a, b, eps, na, nb, dots } => {
            let (m, d) = (a.shape[0], a.shape[1]);
            let n = b.shape[0];
            let clamp = |v: T| if v > *eps { v } else { *eps };
            accum(grads, a, |ga| {
                for i in 0..m {
                    let nai = clamp(na[i]);
                    let live = na[i] > *eps;
                    for j in 0..n {
                        let o = og[i * n + j];
                        if o == T::zero() {
                            continue;
                        }
                        let nbj = clamp(nb[j]);
                        let denom = nai * nbj;
                        let dot = dots[i * n + j];
                        for t in 0..d {
                            let mut g = b.data[j * d + t] / denom;
                            if live {
                                g -= dot * a.data[i * d + t] / (nai * nai * denom);
                            }
                            ga[i * d + t] += o * g;
                        }
                    }
                }
            });
            accum(grads, b, |gb| {
                for j in 0..n {
                    let nbj = clamp(nb[j]);
                    let live = nb[j] > *eps;
                    for i in 0..m {
                        let o = og[i * n + j];
                        if o == T::zero() {
                            continue;
                        }
                        let nai = clamp(na[i]);
                        let denom = nai * nbj;
                        let dot = dots[i * n + j];
                        for t in 0..d {
                            let mut g = a.data[i * d + t] / denom;
                            if live {
                                g -= dot * b.data[j * d + t] / (nbj * nbj * denom);
                            }
                            gb[j * d + t] += o * g;
                        }
                    }
                }
            });
        }
    }
}

pub(crate) const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
pub(crate) const GELU_A: f64 = 0.044_715;

/// Tanh-form GELU, shared by the forward kernel and its derivative.
pub(crate) fn gelu_value<T: Scalar>(x: T) -> T {
    let c = lit::<T>(GELU_C);
    let a = lit::<T>(GELU_A);
    let half = lit::<T>(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (T::one() + u.tanh())
}

fn gelu_prime<T: Scalar>(x: T) -> T {
    let c = lit::<T>(GELU_C);
    let a = lit::<T>(GELU_A);
    let half = lit::<T>(0.5);
    let three = lit::<T>(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = T::one() - t * t;
    half * (T::one() + t) + half * x * sech2 * c * (T::one() + three * a * x * x)
}
