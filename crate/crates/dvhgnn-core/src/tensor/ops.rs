//! Forward kernels. Each public op validates shapes, computes into a fresh
//! buffer, rejects non-finite results, and records itself on the tape when
//! any input is attached to one.
//!
//! Heavy kernels (matmul, convolutions, cosine) split work across output
//! rows through [`crate::runtime::for_each_row`]; every per-element
//! reduction runs in ascending index order on one thread, so results do not
//! depend on the worker count.

use std::sync::Arc;

use crate::runtime;
use crate::scalar::lit;
use crate::{Error, Result, Scalar};

use super::tape::{gelu_value, Op, Saved};
use super::{same_tape, TensorBase};

fn shape_err<T>(op: &'static str, expected: String, got: String) -> Result<T> {
    Err(Error::ShapeMismatch { op, expected, got })
}

fn ensure_finite<T: Scalar>(op: &'static str, data: &[T]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

/// Validate, wrap, and (when an input is tape-attached) record the op.
fn finish<T: Scalar>(
    name: &'static str,
    inputs: &[&TensorBase<T>],
    shape: Vec<usize>,
    data: Vec<T>,
    make_op: impl FnOnce() -> Op<T>,
) -> Result<TensorBase<T>> {
    ensure_finite(name, &data)?;
    let out = TensorBase::from_parts(shape, data);
    match same_tape(inputs)? {
        None => Ok(out),
        Some(tape) => {
            let id = tape.push(make_op(), out.shape().to_vec());
            Ok(out.with_node(tape, id))
        }
    }
}

fn rank2<'t, T: Scalar>(op: &'static str, t: &'t TensorBase<T>) -> Result<(&'t [T], usize, usize)> {
    match t.shape() {
        [r, c] => Ok((t.data(), *r, *c)),
        other => shape_err(op, "rank-2 tensor".into(), format!("{other:?}")),
    }
}

// ── Linear algebra ─────────────────────────────────────────────────────────

/// Matrix product of `[m,k]` and `[k,n]`.
pub fn matmul<T: Scalar>(a: &TensorBase<T>, b: &TensorBase<T>) -> Result<TensorBase<T>> {
    let (ad, m, k) = rank2("matmul", a)?;
    let (bd, bk, n) = rank2("matmul", b)?;
    if k != bk {
        return shape_err("matmul", format!("[{m},{k}] x [{k},_]"), format!("[{bk},{n}]"));
    }
    let mut out = vec![T::zero(); m * n];
    runtime::for_each_row(&mut out, n.max(1), |r, row| {
        if n == 0 {
            return;
        }
        for l in 0..k {
            let av = ad[r * k + l];
            let brow = &bd[l * n..(l + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    });
    finish("matmul", &[a, b], vec![m, n], out, || Op::MatMul {
        a: Saved::of(a),
        b: Saved::of(b),
    })
}

// ── Elementwise ────────────────────────────────────────────────────────────

fn same_shape<T: Scalar>(op: &'static str, a: &TensorBase<T>, b: &TensorBase<T>) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        shape_err(op, format!("{:?}", a.shape()), format!("{:?}", b.shape()))
    }
}

/// Elementwise sum of two same-shape tensors.
pub fn add<T: Scalar>(a: &TensorBase<T>, b: &TensorBase<T>) -> Result<TensorBase<T>> {
    same_shape("add", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    finish("add", &[a, b], a.shape().to_vec(), data, || Op::Add {
        a: Saved::of(a),
        b: Saved::of(b),
    })
}

/// Elementwise product of two same-shape tensors.
pub fn mul<T: Scalar>(a: &TensorBase<T>, b: &TensorBase<T>) -> Result<TensorBase<T>> {
    same_shape("mul", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
    finish("mul", &[a, b], a.shape().to_vec(), data, || Op::Mul {
        a: Saved::of(a),
        b: Saved::of(b),
    })
}

/// Multiply every element by a plain constant.
pub fn scale<T: Scalar>(x: &TensorBase<T>, c: T) -> Result<TensorBase<T>> {
    let data = x.data().iter().map(|&v| v * c).collect();
    finish("scale", &[x], x.shape().to_vec(), data, || Op::Scale {
        x: Saved::of(x),
        c,
    })
}

/// Add a plain constant to every element.
pub fn add_const<T: Scalar>(x: &TensorBase<T>, c: T) -> Result<TensorBase<T>> {
    let data = x.data().iter().map(|&v| v + c).collect();
    finish("add_const", &[x], x.shape().to_vec(), data, || Op::AddConst {
        x: Saved::of(x),
    })
}

fn expect_scalar<T: Scalar>(op: &'static str, s: &TensorBase<T>) -> Result<T> {
    if s.numel() == 1 {
        Ok(s.data()[0])
    } else {
        shape_err(op, "[1]".into(), format!("{:?}", s.shape()))
    }
}

/// Broadcast-multiply by a `[1]`-shaped (typically learnable) tensor.
pub fn mul_scalar<T: Scalar>(x: &TensorBase<T>, s: &TensorBase<T>) -> Result<TensorBase<T>> {
    let sv = expect_scalar("mul_scalar", s)?;
    let data = x.data().iter().map(|&v| v * sv).collect();
    finish("mul_scalar", &[x, s], x.shape().to_vec(), data, || Op::MulScalar {
        x: Saved::of(x),
        s: Saved::of(s),
    })
}

/// Broadcast-add a `[1]`-shaped tensor.
pub fn add_scalar<T: Scalar>(x: &TensorBase<T>, s: &TensorBase<T>) -> Result<TensorBase<T>> {
    let sv = expect_scalar("add_scalar", s)?;
    let data = x.data().iter().map(|&v| v + sv).collect();
    finish("add_scalar", &[x, s], x.shape().to_vec(), data, || Op::AddScalar {
        x: Saved::of(x),
        s: Saved::of(s),
    })
}

/// Broadcast-divide by a `[1]`-shaped tensor. A zero divisor surfaces as the
/// usual non-finite error.
pub fn div_scalar<T: Scalar>(x: &TensorBase<T>, s: &TensorBase<T>) -> Result<TensorBase<T>> {
    let sv = expect_scalar("div_scalar", s)?;
    let data = x.data().iter().map(|&v| v / sv).collect();
    finish("div_scalar", &[x, s], x.shape().to_vec(), data, || Op::DivScalar {
        x: Saved::of(x),
        s: Saved::of(s),
    })
}

// ── Activations and reductions ─────────────────────────────────────────────

/// Logistic sigmoid, elementwise.
pub fn sigmoid<T: Scalar>(x: &TensorBase<T>) -> Result<TensorBase<T>> {
    let data: Vec<T> = x
        .data()
        .iter()
        .map(|&v| T::one() / (T::one() + (-v).exp()))
        .collect();
    let y = Arc::new(data.clone());
    finish("sigmoid", &[x], x.shape().to_vec(), data, || Op::Sigmoid {
        x: Saved::of(x),
        y,
    })
}

/// GELU (tanh form), elementwise.
pub fn gelu<T: Scalar>(x: &TensorBase<T>) -> Result<TensorBase<T>> {
    let data = x.data().iter().map(|&v| gelu_value(v)).collect();
    finish("gelu", &[x], x.shape().to_vec(), data, || Op::Gelu {
        x: Saved::of(x),
    })
}

/// Sum of all elements, as a `[1]` tensor. Ascending flat order.
pub fn sum<T: Scalar>(x: &TensorBase<T>) -> Result<TensorBase<T>> {
    let mut acc = T::zero();
    for &v in x.data() {
        acc += v;
    }
    finish("sum", &[x], vec![1], vec![acc], || Op::Sum { x: Saved::of(x) })
}

// ── Gather / scatter / layout ──────────────────────────────────────────────

/// Select rows of a `[n,d]` tensor by index (duplicates allowed).
pub fn gather_rows<T: Scalar>(x: &TensorBase<T>, ids: &[usize]) -> Result<TensorBase<T>> {
    let (xd, n, d) = rank2("gather_rows", x)?;
    if let Some(&bad) = ids.iter().find(|&&i| i >= n) {
        return shape_err("gather_rows", format!("row ids < {n}"), format!("{bad}"));
    }
    let mut out = Vec::with_capacity(ids.len() * d);
    for &i in ids {
        out.extend_from_slice(&xd[i * d..(i + 1) * d]);
    }
    let ids_arc = Arc::new(ids.to_vec());
    finish("gather_rows", &[x], vec![ids.len(), d], out, || Op::GatherRows {
        x: Saved::of(x),
        ids: ids_arc,
    })
}

/// Select elements by flat index (duplicates allowed), yielding `[len]`.
pub fn gather_elems<T: Scalar>(x: &TensorBase<T>, ids: &[usize]) -> Result<TensorBase<T>> {
    let n = x.numel();
    if let Some(&bad) = ids.iter().find(|&&i| i >= n) {
        return shape_err("gather_elems", format!("flat ids < {n}"), format!("{bad}"));
    }
    let out: Vec<T> = ids.iter().map(|&i| x.data()[i]).collect();
    let ids_arc = Arc::new(ids.to_vec());
    finish("gather_elems", &[x], vec![ids.len()], out, || Op::GatherElems {
        x: Saved::of(x),
        ids: ids_arc,
    })
}

/// `base` plus `rows` scattered into it: `out[ids[i]] += rows[i]`.
/// Duplicate destinations accumulate in ascending `i` order.
pub fn scatter_add_rows<T: Scalar>(
    base: &TensorBase<T>,
    ids: &[usize],
    rows: &TensorBase<T>,
) -> Result<TensorBase<T>> {
    let (bd, n, d) = rank2("scatter_add_rows", base)?;
    let (rd, rn, rdim) = rank2("scatter_add_rows", rows)?;
    if rdim != d || rn != ids.len() {
        return shape_err(
            "scatter_add_rows",
            format!("[{},{d}] rows for {} ids", ids.len(), ids.len()),
            format!("[{rn},{rdim}]"),
        );
    }
    if let Some(&bad) = ids.iter().find(|&&i| i >= n) {
        return shape_err("scatter_add_rows", format!("row ids < {n}"), format!("{bad}"));
    }
    let mut out = bd.to_vec();
    for (i, &dst) in ids.iter().enumerate() {
        for c in 0..d {
            out[dst * d + c] += rd[i * d + c];
        }
    }
    let ids_arc = Arc::new(ids.to_vec());
    finish("scatter_add_rows", &[base, rows], vec![n, d], out, || {
        Op::ScatterAddRows {
            base: Saved::of(base),
            rows: Saved::of(rows),
            ids: ids_arc,
        }
    })
}

/// Stack rank-2 tensors with equal column counts on top of each other.
pub fn concat_rows<T: Scalar>(parts: &[&TensorBase<T>]) -> Result<TensorBase<T>> {
    if parts.is_empty() {
        return Err(Error::EmptyRegion { op: "concat_rows" });
    }
    let (_, _, d) = rank2("concat_rows", parts[0])?;
    let mut rows = 0;
    let mut data = Vec::new();
    for p in parts {
        let (pd, pr, pc) = rank2("concat_rows", p)?;
        if pc != d {
            return shape_err("concat_rows", format!("[_,{d}]"), format!("[{pr},{pc}]"));
        }
        rows += pr;
        data.extend_from_slice(pd);
    }
    let saved: Vec<Saved<T>> = parts.iter().map(|p| Saved::of(p)).collect();
    finish("concat_rows", parts, vec![rows, d], data, || Op::ConcatRows {
        parts: saved,
    })
}

/// Stack rank-2 tensors with equal row counts side by side.
pub fn concat_cols<T: Scalar>(parts: &[&TensorBase<T>]) -> Result<TensorBase<T>> {
    if parts.is_empty() {
        return Err(Error::EmptyRegion { op: "concat_cols" });
    }
    let (_, n, _) = rank2("concat_cols", parts[0])?;
    let mut widths = Vec::with_capacity(parts.len());
    let mut total = 0;
    for p in parts {
        let (_, pr, pc) = rank2("concat_cols", p)?;
        if pr != n {
            return shape_err("concat_cols", format!("[{n},_]"), format!("[{pr},{pc}]"));
        }
        widths.push(pc);
        total += pc;
    }
    let mut data = vec![T::zero(); n * total];
    let mut off = 0;
    for (p, &w) in parts.iter().zip(&widths) {
        let pd = p.data();
        for r in 0..n {
            data[r * total + off..r * total + off + w].copy_from_slice(&pd[r * w..(r + 1) * w]);
        }
        off += w;
    }
    let saved: Vec<Saved<T>> = parts.iter().map(|p| Saved::of(p)).collect();
    finish("concat_cols", parts, vec![n, total], data, || Op::ConcatCols {
        parts: saved,
    })
}

/// Same buffer, new shape (element counts must agree).
pub fn reshape<T: Scalar>(x: &TensorBase<T>, shape: Vec<usize>) -> Result<TensorBase<T>> {
    let numel: usize = shape.iter().product();
    if numel != x.numel() {
        return shape_err("reshape", format!("{} elements", x.numel()), format!("{shape:?}"));
    }
    finish("reshape", &[x], shape, x.data().to_vec(), || Op::Reshape {
        x: Saved::of(x),
    })
}

// ── Spatial ops ────────────────────────────────────────────────────────────

fn rank3<'t, T: Scalar>(
    op: &'static str,
    t: &'t TensorBase<T>,
) -> Result<(&'t [T], usize, usize, usize)> {
    match t.shape() {
        [h, w, d] => Ok((t.data(), *h, *w, *d)),
        other => shape_err(op, "rank-3 field [h,w,d]".into(), format!("{other:?}")),
    }
}

/// Per-channel 3x3 convolution over an `[h,w,d]` field, stride 1, zero pad 1.
pub fn depthwise_conv3x3<T: Scalar>(x: &TensorBase<T>, k: &TensorBase<T>) -> Result<TensorBase<T>> {
    let (xd, h, w, d) = rank3("depthwise_conv3x3", x)?;
    let ok = matches!(k.shape(), [3, 3, kd] if *kd == d);
    if !ok {
        return shape_err("depthwise_conv3x3", format!("[3,3,{d}]"), format!("{:?}", k.shape()));
    }
    let kd = k.data();
    let mut out = vec![T::zero(); h * w * d];
    runtime::for_each_row(&mut out, w * d, |r, row| {
        for c in 0..w {
            for ch in 0..d {
                let mut acc = T::zero();
                for p in 0..3 {
                    for q in 0..3 {
                        let (rr, cc) = (r + p, c + q);
                        if rr >= 1 && rr <= h && cc >= 1 && cc <= w {
                            acc += xd[((rr - 1) * w + (cc - 1)) * d + ch] * kd[(p * 3 + q) * d + ch];
                        }
                    }
                }
                row[c * d + ch] = acc;
            }
        }
    });
    finish("depthwise_conv3x3", &[x, k], vec![h, w, d], out, || {
        Op::DepthwiseConv3x3 {
            x: Saved::of(x),
            k: Saved::of(k),
        }
    })
}

/// Dense 2-D convolution: `[h,w,ci]` field, `[kh,kw,ci,co]` kernel,
/// symmetric zero padding.
pub fn conv2d<T: Scalar>(
    x: &TensorBase<T>,
    k: &TensorBase<T>,
    stride: usize,
    pad: usize,
) -> Result<TensorBase<T>> {
    let (xd, h, w, ci) = rank3("conv2d", x)?;
    let (kh, kw, kci, co) = match k.shape() {
        [a, b, c, d] => (*a, *b, *c, *d),
        other => return shape_err("conv2d", "rank-4 kernel".into(), format!("{other:?}")),
    };
    if kci != ci {
        return shape_err("conv2d", format!("[_,_,{ci},_]"), format!("{:?}", k.shape()));
    }
    if stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
        return shape_err(
            "conv2d",
            format!("kernel [{kh},{kw}] to fit padded [{},{}]", h + 2 * pad, w + 2 * pad),
            format!("stride {stride}"),
        );
    }
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let kd = k.data();
    let mut out = vec![T::zero(); oh * ow * co];
    runtime::for_each_row(&mut out, ow * co, |r, row| {
        for c in 0..ow {
            for a in 0..kh {
                for b in 0..kw {
                    let rr = r * stride + a;
                    let cc = c * stride + b;
                    if rr < pad || cc < pad {
                        continue;
                    }
                    let (xr, xc) = (rr - pad, cc - pad);
                    if xr >= h || xc >= w {
                        continue;
                    }
                    for i in 0..ci {
                        let xv = xd[(xr * w + xc) * ci + i];
                        let krow = &kd[((a * kw + b) * ci + i) * co..((a * kw + b) * ci + i + 1) * co];
                        for (o, &kv) in row[c * co..(c + 1) * co].iter_mut().zip(krow) {
                            *o += xv * kv;
                        }
                    }
                }
            }
        }
    });
    finish("conv2d", &[x, k], vec![oh, ow, co], out, || Op::Conv2d {
        x: Saved::of(x),
        k: Saved::of(k),
        stride,
        pad,
    })
}

/// Mean feature over a half-open rectangle of an `[h,w,d]` field.
pub fn avg_pool_rect<T: Scalar>(
    x: &TensorBase<T>,
    r0: usize,
    r1: usize,
    c0: usize,
    c1: usize,
) -> Result<TensorBase<T>> {
    let (xd, h, w, d) = rank3("avg_pool_rect", x)?;
    if r0 >= r1 || c0 >= c1 {
        return Err(Error::EmptyRegion { op: "avg_pool_rect" });
    }
    if r1 > h || c1 > w {
        return shape_err(
            "avg_pool_rect",
            format!("rect within [{h},{w}]"),
            format!("rows {r0}..{r1}, cols {c0}..{c1}"),
        );
    }
    let count = lit::<T>(((r1 - r0) * (c1 - c0)) as f64);
    let mut out = vec![T::zero(); d];
    for r in r0..r1 {
        for c in c0..c1 {
            for ch in 0..d {
                out[ch] += xd[(r * w + c) * d + ch];
            }
        }
    }
    for v in out.iter_mut() {
        *v /= count;
    }
    finish("avg_pool_rect", &[x], vec![1, d], out, || Op::AvgPoolRect {
        x: Saved::of(x),
        r0,
        r1,
        c0,
        c1,
    })
}

/// Per-row layer normalization with learnable scale and shift.
pub fn layer_norm<T: Scalar>(
    x: &TensorBase<T>,
    gamma: &TensorBase<T>,
    beta: &TensorBase<T>,
    eps: T,
) -> Result<TensorBase<T>> {
    let (xd, n, d) = rank2("layer_norm", x)?;
    if gamma.shape() != [d] || beta.shape() != [d] {
        return shape_err(
            "layer_norm",
            format!("gamma/beta [{d}]"),
            format!("{:?}/{:?}", gamma.shape(), beta.shape()),
        );
    }
    let inv_d = T::one() / lit::<T>(d as f64);
    let mut out = vec![T::zero(); n * d];
    let mut xhat = vec![T::zero(); n * d];
    let mut rstd = vec![T::zero(); n];
    let (gd, bd) = (gamma.data(), beta.data());
    for r in 0..n {
        let row = &xd[r * d..(r + 1) * d];
        let mut mean = T::zero();
        for &v in row {
            mean += v;
        }
        mean *= inv_d;
        let mut var = T::zero();
        for &v in row {
            let dv = v - mean;
            var += dv * dv;
        }
        var *= inv_d;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for c in 0..d {
            let xh = (row[c] - mean) * rs;
            xhat[r * d + c] = xh;
            out[r * d + c] = gd[c] * xh + bd[c];
        }
    }
    let (xhat, rstd) = (Arc::new(xhat), Arc::new(rstd));
    finish("layer_norm", &[x, gamma, beta], vec![n, d], out, || Op::LayerNorm {
        x: Saved::of(x),
        gamma: Saved::of(gamma),
        beta: Saved::of(beta),
        xhat,
        rstd,
    })
}

/// Add a `[d]` bias to every row of a `[n,d]` tensor.
pub fn add_row_broadcast<T: Scalar>(x: &TensorBase<T>, b: &TensorBase<T>) -> Result<TensorBase<T>> {
    let (xd, n, d) = rank2("add_row_broadcast", x)?;
    if b.shape() != [d] {
        return shape_err("add_row_broadcast", format!("[{d}]"), format!("{:?}", b.shape()));
    }
    let bd = b.data();
    let mut out = vec![T::zero(); n * d];
    for r in 0..n {
        for c in 0..d {
            out[r * d + c] = xd[r * d + c] + bd[c];
        }
    }
    finish("add_row_broadcast", &[x, b], vec![n, d], out, || Op::AddRowBroadcast {
        x: Saved::of(x),
        b: Saved::of(b),
    })
}

/// Column means of a `[n,d]` tensor, as `[1,d]`.
pub fn mean_rows<T: Scalar>(x: &TensorBase<T>) -> Result<TensorBase<T>> {
    let (xd, n, d) = rank2("mean_rows", x)?;
    if n == 0 {
        return Err(Error::EmptyRegion { op: "mean_rows" });
    }
    let inv_n = T::one() / lit::<T>(n as f64);
    let mut out = vec![T::zero(); d];
    for r in 0..n {
        for c in 0..d {
            out[c] += xd[r * d + c];
        }
    }
    for v in out.iter_mut() {
        *v *= inv_n;
    }
    finish("mean_rows", &[x], vec![1, d], out, || Op::MeanRows {
        x: Saved::of(x),
    })
}

// ── Cosine similarity ──────────────────────────────────────────────────────

/// Row-by-row cosine similarity between `[m,d]` and `[n,d]`, as `[m,n]`.
///
/// Norms below `eps` are clamped to `eps`, which makes the similarity of a
/// zero vector exactly 0; results are clipped to `[-1, 1]` to absorb
/// rounding. Every call records `m*n` similarity evaluations with
/// [`crate::runtime::add_sim_evals`].
pub fn cosine_matrix<T: Scalar>(
    a: &TensorBase<T>,
    b: &TensorBase<T>,
    eps: T,
) -> Result<TensorBase<T>> {
    let (ad, m, d) = rank2("cosine_matrix", a)?;
    let (bd, n, bdim) = rank2("cosine_matrix", b)?;
    if bdim != d {
        return shape_err("cosine_matrix", format!("[_,{d}]"), format!("[{n},{bdim}]"));
    }
    let norm = |row: &[T]| {
        let mut acc = T::zero();
        for &v in row {
            acc += v * v;
        }
        acc.sqrt()
    };
    let na: Vec<T> = (0..m).map(|i| norm(&ad[i * d..(i + 1) * d])).collect();
    let nb: Vec<T> = (0..n).map(|j| norm(&bd[j * d..(j + 1) * d])).collect();
    let mut dots = vec![T::zero(); m * n];
    runtime::for_each_row(&mut dots, n.max(1), |i, row| {
        if n == 0 {
            return;
        }
        let arow = &ad[i * d..(i + 1) * d];
        for (j, slot) in row.iter_mut().enumerate() {
            let brow = &bd[j * d..(j + 1) * d];
            let mut acc = T::zero();
            for t in 0..d {
                acc += arow[t] * brow[t];
            }
            *slot = acc;
        }
    });
    runtime::add_sim_evals((m * n) as u64);
    let clamp = |v: T| if v > eps { v } else { eps };
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            let s = dots[i * n + j] / (clamp(na[i]) * clamp(nb[j]));
            out[i * n + j] = s.min(T::one()).max(-T::one());
        }
    }
    let (na, nb, dots) = (Arc::new(na), Arc::new(nb), Arc::new(dots));
    finish("cosine_matrix", &[a, b], vec![m, n], out, || Op::CosineMatrix {
        a: Saved::of(a),
        b: Saved::of(b),
        eps,
        na,
        nb,
        dots,
    })
}

/// Cosine similarity of two equal-length vectors, as a `[1]` tensor.
pub fn cosine_similarity<T: Scalar>(
    a: &TensorBase<T>,
    b: &TensorBase<T>,
    eps: T,
) -> Result<TensorBase<T>> {
    let d = a.numel();
    if b.numel() != d {
        return shape_err("cosine_similarity", format!("{d} elements"), format!("{}", b.numel()));
    }
    let am = reshape(a, vec![1, d])?;
    let bm = reshape(b, vec![1, d])?;
    let s = cosine_matrix(&am, &bm, eps)?;
    reshape(&s, vec![1])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_grad, Tape};
    use rand_core::SeedableRng;

    type T64 = TensorBase<f64>;

    fn rng(seed: u64) -> rand_chacha::ChaCha8Rng {
        rand_chacha::ChaCha8Rng::seed_from_u64(seed)
    }

    fn rand_t(shape: &[usize], seed: u64) -> T64 {
        T64::rand_uniform(shape.to_vec(), -1.0, 1.0, &mut rng(seed))
    }

    // ── Forward behavior ───────────────────────────────────────────────

    #[test]
    fn matmul_identity_and_small_case() {
        let a = T64::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let i = T64::eye(2);
        let ai = matmul(&a, &i).unwrap();
        assert_eq!(ai.data(), a.data());

        let ones = T64::from_vec(vec![2, 1], vec![1.0, 1.0]).unwrap();
        let s = matmul(&a, &ones).unwrap();
        assert_eq!(s.data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        for trial in 0..100 {
            let a = rand_t(&[5, 7], 1000 + trial);
            let b = rand_t(&[7, 3], 2000 + trial);
            let got = matmul(&a, &b).unwrap();
            for i in 0..5 {
                for j in 0..3 {
                    let mut acc = 0.0;
                    for l in 0..7 {
                        acc += a.get2(i, l) * b.get2(l, j);
                    }
                    assert!((got.get2(i, j) - acc).abs() <= 1e-12, "trial {trial}");
                }
            }
        }
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let a = rand_t(&[2, 3], 1);
        let b = rand_t(&[4, 2], 2);
        assert!(matches!(matmul(&a, &b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn elementwise_ops_and_shape_guards() {
        let a = T64::from_vec(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let b = T64::from_vec(vec![3], vec![4.0, 5.0, 6.0]).unwrap();
        assert_eq!(add(&a, &b).unwrap().data(), &[5.0, 7.0, 9.0]);
        assert_eq!(mul(&a, &b).unwrap().data(), &[4.0, 10.0, 18.0]);
        assert_eq!(scale(&a, -2.0).unwrap().data(), &[-2.0, -4.0, -6.0]);
        assert_eq!(add_const(&a, 1.5).unwrap().data(), &[2.5, 3.5, 4.5]);
        let c = T64::zeros(vec![2]);
        assert!(add(&a, &c).is_err());
        assert!(mul(&a, &c).is_err());
    }

    #[test]
    fn scalar_broadcast_ops() {
        let x = T64::from_vec(vec![2], vec![2.0, -4.0]).unwrap();
        let s = T64::scalar(2.0).unwrap();
        assert_eq!(mul_scalar(&x, &s).unwrap().data(), &[4.0, -8.0]);
        assert_eq!(add_scalar(&x, &s).unwrap().data(), &[4.0, -2.0]);
        assert_eq!(div_scalar(&x, &s).unwrap().data(), &[1.0, -2.0]);
        let zero = T64::scalar(0.0).unwrap();
        assert!(matches!(div_scalar(&x, &zero), Err(Error::NonFinite { .. })));
        let wide = T64::zeros(vec![2]);
        assert!(mul_scalar(&x, &wide).is_err());
    }

    #[test]
    fn sigmoid_midpoint_and_symmetry() {
        let x = T64::from_vec(vec![5], vec![0.0, 1.3, -2.7, 0.4, -0.4]).unwrap();
        let s = sigmoid(&x).unwrap();
        assert_eq!(s.data()[0], 0.5);
        let neg = scale(&x, -1.0).unwrap();
        let sn = sigmoid(&neg).unwrap();
        for (a, b) in s.data().iter().zip(sn.data()) {
            assert!((a + b - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn gelu_reference_points() {
        let x = T64::from_vec(vec![3], vec![0.0, 1.0, 6.0]).unwrap();
        let g = gelu(&x).unwrap();
        assert_eq!(g.data()[0], 0.0);
        assert!((g.data()[1] - 0.841192).abs() < 1e-5);
        // far in the positive tail the unit passes its input through
        assert!((g.data()[2] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn sum_is_sequential_total() {
        let x = T64::from_vec(vec![2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        assert!((sum(&x).unwrap().scalar_value().unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn gather_and_scatter_roundtrip() {
        let x = T64::from_vec(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let g = gather_rows(&x, &[2, 0, 2]).unwrap();
        assert_eq!(g.shape(), &[3, 2]);
        assert_eq!(g.data(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        assert!(gather_rows(&x, &[3]).is_err());

        let e = gather_elems(&x, &[5, 0, 0]).unwrap();
        assert_eq!(e.data(), &[6.0, 1.0, 1.0]);

        let base = T64::zeros(vec![3, 2]);
        let rows = T64::from_vec(vec![3, 2], vec![1.0, 1.0, 2.0, 2.0, 4.0, 4.0]).unwrap();
        let s = scatter_add_rows(&base, &[1, 1, 0], &rows).unwrap();
        assert_eq!(s.data(), &[4.0, 4.0, 3.0, 3.0, 0.0, 0.0]);
        assert!(scatter_add_rows(&base, &[9, 0, 0], &rows).is_err());
    }

    #[test]
    fn concat_layouts() {
        let a = T64::from_vec(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let b = T64::from_vec(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        let r = concat_rows(&[&a, &b]).unwrap();
        assert_eq!(r.shape(), &[3, 2]);
        assert_eq!(r.data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);

        let c = T64::from_vec(vec![2, 1], vec![7.0, 8.0]).unwrap();
        let d = T64::from_vec(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        let cc = concat_cols(&[&c, &d]).unwrap();
        assert_eq!(cc.shape(), &[2, 3]);
        assert_eq!(cc.data(), &[7.0, 3.0, 4.0, 8.0, 5.0, 6.0]);

        assert!(concat_rows(&[&a, &c]).is_err());
    }

    #[test]
    fn depthwise_delta_kernel_is_identity() {
        let x = rand_t(&[4, 5, 2], 31);
        let center_tap = 3 + 1;
        let mut k = vec![0.0; 9 * 2];
        k[center_tap * 2] = 1.0;
        k[center_tap * 2 + 1] = 1.0;
        let k = T64::from_vec(vec![3, 3, 2], k).unwrap();
        let y = depthwise_conv3x3(&x, &k).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn depthwise_ones_kernel_sums_neighborhood() {
        let x = T64::full(vec![5, 5, 1], 2.0);
        let k = T64::full(vec![3, 3, 1], 1.0);
        let y = depthwise_conv3x3(&x, &k).unwrap();
        // interior cells see the whole 3x3 patch, corners only 2x2
        assert_eq!(y.data()[2 * 5 + 2], 18.0);
        assert_eq!(y.data()[0], 8.0);
    }

    #[test]
    fn depthwise_matches_sliding_window_oracle() {
        let x = rand_t(&[6, 6, 2], 77);
        let k = rand_t(&[3, 3, 2], 78);
        let y = depthwise_conv3x3(&x, &k).unwrap();
        for r in 0..6usize {
            for c in 0..6usize {
                for ch in 0..2usize {
                    let mut acc = 0.0;
                    for p in 0..3usize {
                        for q in 0..3usize {
                            let rr = r as isize + p as isize - 1;
                            let cc = c as isize + q as isize - 1;
                            if (0..6).contains(&rr) && (0..6).contains(&cc) {
                                acc += x.data()[((rr as usize * 6) + cc as usize) * 2 + ch]
                                    * k.data()[(p * 3 + q) * 2 + ch];
                            }
                        }
                    }
                    let got = y.data()[(r * 6 + c) * 2 + ch];
                    assert!((got - acc).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn conv2d_matches_hand_case_and_oracle() {
        // 2x2 input, single channel, 2x2 kernel, no padding
        let x = T64::from_vec(vec![2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let k = T64::from_vec(vec![2, 2, 1, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let y = conv2d(&x, &k, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.data(), &[5.0]);

        let x = rand_t(&[5, 6, 2], 91);
        let k = rand_t(&[3, 3, 2, 3], 92);
        let y = conv2d(&x, &k, 2, 1).unwrap();
        assert_eq!(y.shape(), &[3, 3, 3]);
        for r in 0..3usize {
            for c in 0..3usize {
                for o in 0..3usize {
                    let mut acc = 0.0;
                    for a in 0..3usize {
                        for b in 0..3usize {
                            let rr = (r * 2 + a) as isize - 1;
                            let cc = (c * 2 + b) as isize - 1;
                            if (0..5).contains(&rr) && (0..6).contains(&cc) {
                                for i in 0..2usize {
                                    acc += x.data()[((rr as usize * 6) + cc as usize) * 2 + i]
                                        * k.data()[((a * 3 + b) * 2 + i) * 3 + o];
                                }
                            }
                        }
                    }
                    let got = y.data()[(r * 3 + c) * 3 + o];
                    assert!((got - acc).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn avg_pool_rect_cases() {
        let x = T64::from_vec(
            vec![2, 2, 1],
            vec![1.0, 2.0, 3.0, 4.0],
        )
        .unwrap();
        let whole = avg_pool_rect(&x, 0, 2, 0, 2).unwrap();
        assert_eq!(whole.data(), &[2.5]);
        let cell = avg_pool_rect(&x, 1, 2, 0, 1).unwrap();
        assert_eq!(cell.data(), &[3.0]);
        let c = T64::full(vec![4, 4, 2], 7.0);
        let p = avg_pool_rect(&c, 0, 3, 1, 4).unwrap();
        assert_eq!(p.data(), &[7.0, 7.0]);
        assert!(matches!(
            avg_pool_rect(&x, 1, 1, 0, 2),
            Err(Error::EmptyRegion { .. })
        ));
        assert!(avg_pool_rect(&x, 0, 3, 0, 1).is_err());
    }

    #[test]
    fn layer_norm_normalizes_rows() {
        let x = rand_t(&[4, 8], 55);
        let g = T64::full(vec![8], 1.0);
        let b = T64::zeros(vec![8]);
        let y = layer_norm(&x, &g, &b, 1e-6).unwrap();
        for r in 0..4 {
            let row = &y.data()[r * 8..(r + 1) * 8];
            let mean: f64 = row.iter().sum::<f64>() / 8.0;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn mean_rows_and_row_broadcast() {
        let x = T64::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(mean_rows(&x).unwrap().data(), &[2.0, 3.0]);
        let b = T64::from_vec(vec![2], vec![10.0, 20.0]).unwrap();
        assert_eq!(
            add_row_broadcast(&x, &b).unwrap().data(),
            &[11.0, 22.0, 13.0, 24.0]
        );
    }

    #[test]
    fn cosine_reference_pairs() {
        let eps = 1e-12;
        let ex = T64::from_vec(vec![2], vec![1.0, 0.0]).unwrap();
        let ey = T64::from_vec(vec![2], vec![0.0, 1.0]).unwrap();
        let diag = T64::from_vec(vec![2], vec![1.0, 1.0]).unwrap();
        let zero = T64::zeros(vec![2]);
        let s = |a: &T64, b: &T64| cosine_similarity(a, b, eps).unwrap().data()[0];
        assert_eq!(s(&ex, &ex), 1.0);
        assert_eq!(s(&ex, &ey), 0.0);
        assert!((s(&diag, &ex) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert_eq!(s(&zero, &ex), 0.0);
        assert_eq!(s(&zero, &zero), 0.0);
    }

    #[test]
    fn cosine_matrix_stays_in_unit_interval() {
        let a = rand_t(&[6, 3], 8);
        let mut b_data = rand_t(&[5, 3], 9).data().to_vec();
        // plant a near-zero row to stress the eps clamp
        for v in &mut b_data[0..3] {
            *v *= 1e-14;
        }
        let b = T64::from_vec(vec![5, 3], b_data).unwrap();
        let s = cosine_matrix(&a, &b, 1e-12).unwrap();
        for &v in s.data() {
            assert!((-1.0..=1.0).contains(&v), "similarity {v} out of range");
        }
    }

    #[test]
    fn sim_eval_counter_tracks_matrix_size() {
        crate::runtime::reset_sim_evals();
        let a = rand_t(&[4, 3], 10);
        let b = rand_t(&[6, 3], 11);
        cosine_matrix(&a, &b, 1e-12).unwrap();
        assert_eq!(crate::runtime::sim_evals(), 24);
        crate::runtime::reset_sim_evals();
    }

    #[test]
    fn results_do_not_depend_on_worker_count() {
        let a = rand_t(&[17, 23], 100);
        let b = rand_t(&[23, 11], 101);
        let x = rand_t(&[9, 10, 4], 102);
        let k = rand_t(&[3, 3, 4, 5], 103);
        crate::runtime::set_threads(1);
        let m_seq = matmul(&a, &b).unwrap();
        let c_seq = conv2d(&x, &k, 2, 1).unwrap();
        crate::runtime::set_threads(8);
        let m_par = matmul(&a, &b).unwrap();
        let c_par = conv2d(&x, &k, 2, 1).unwrap();
        crate::runtime::set_threads(1);
        assert_eq!(m_seq.data(), m_par.data());
        assert_eq!(c_seq.data(), c_par.data());
    }

    // ── Backward rules vs finite differences ──────────────────────────

    /// Weighted-sum loss so gradients are not uniform across elements;
    /// weights are regenerated identically on every call.
    fn weighted_loss(out: &T64) -> T64 {
        let w = T64::rand_uniform(out.shape().to_vec(), -1.0, 1.0, &mut rng(424242));
        sum(&mul(out, &w).unwrap()).unwrap()
    }

    /// Check d(loss)/d(inputs[i]) against central differences for every
    /// input, where `build` maps inputs to the op output.
    fn check_against_fd(build: &dyn Fn(&[T64]) -> T64, inputs: &[T64]) {
        let tol = 1e-4;
        for i in 0..inputs.len() {
            let tape: Tape<f64> = Tape::new();
            let watched: Vec<T64> = inputs.iter().map(|t| tape.watch(t)).collect();
            let loss = weighted_loss(&build(&watched));
            tape.backward(&loss).unwrap();
            let ad = watched[i].grad().expect("gradient populated");

            let f = |xi: &T64| {
                let mut ins: Vec<T64> = inputs.to_vec();
                ins[i] = xi.clone();
                Ok(weighted_loss(&build(&ins)))
            };
            let fd = finite_diff_grad(f, &inputs[i], 1e-5).unwrap();
            for (j, (&a, &n)) in ad.data().iter().zip(fd.data()).enumerate() {
                let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
                assert!(rel < tol, "input {i} coord {j}: ad {a} fd {n} rel {rel}");
            }
        }
    }

    #[test]
    fn grad_matmul() {
        check_against_fd(&|t| matmul(&t[0], &t[1]).unwrap(), &[rand_t(&[3, 4], 1), rand_t(&[4, 2], 2)]);
    }

    #[test]
    fn grad_elementwise() {
        check_against_fd(&|t| add(&t[0], &t[1]).unwrap(), &[rand_t(&[2, 3], 3), rand_t(&[2, 3], 4)]);
        check_against_fd(&|t| mul(&t[0], &t[1]).unwrap(), &[rand_t(&[2, 3], 5), rand_t(&[2, 3], 6)]);
        check_against_fd(&|t| scale(&t[0], 1.7).unwrap(), &[rand_t(&[5], 7)]);
        check_against_fd(&|t| add_const(&t[0], 0.9).unwrap(), &[rand_t(&[5], 8)]);
    }

    #[test]
    fn grad_scalar_broadcast() {
        let s = T64::rand_uniform(vec![1], 0.8, 1.6, &mut rng(9));
        check_against_fd(&|t| mul_scalar(&t[0], &t[1]).unwrap(), &[rand_t(&[2, 3], 10), s.clone()]);
        check_against_fd(&|t| add_scalar(&t[0], &t[1]).unwrap(), &[rand_t(&[2, 3], 11), s.clone()]);
        check_against_fd(&|t| div_scalar(&t[0], &t[1]).unwrap(), &[rand_t(&[2, 3], 12), s]);
    }

    #[test]
    fn grad_activations() {
        check_against_fd(&|t| sigmoid(&t[0]).unwrap(), &[rand_t(&[9], 13)]);
        check_against_fd(&|t| gelu(&t[0]).unwrap(), &[rand_t(&[9], 14)]);
    }

    #[test]
    fn grad_reductions_and_layout() {
        check_against_fd(&|t| sum(&t[0]).unwrap(), &[rand_t(&[7], 15)]);
        check_against_fd(&|t| mean_rows(&t[0]).unwrap(), &[rand_t(&[3, 4], 16)]);
        check_against_fd(&|t| reshape(&t[0], vec![3, 4]).unwrap(), &[rand_t(&[2, 6], 17)]);
        check_against_fd(
            &|t| concat_rows(&[&t[0], &t[1]]).unwrap(),
            &[rand_t(&[2, 3], 18), rand_t(&[1, 3], 19)],
        );
        check_against_fd(
            &|t| concat_cols(&[&t[0], &t[1]]).unwrap(),
            &[rand_t(&[2, 2], 20), rand_t(&[2, 3], 21)],
        );
    }

    #[test]
    fn grad_gather_scatter() {
        check_against_fd(
            &|t| gather_rows(&t[0], &[4, 0, 2, 2]).unwrap(),
            &[rand_t(&[5, 3], 22)],
        );
        check_against_fd(
            &|t| gather_elems(&t[0], &[5, 1, 1, 3]).unwrap(),
            &[rand_t(&[2, 3], 23)],
        );
        check_against_fd(
            &|t| scatter_add_rows(&t[0], &[1, 3, 1], &t[1]).unwrap(),
            &[rand_t(&[4, 3], 24), rand_t(&[3, 3], 25)],
        );
    }

    #[test]
    fn grad_spatial() {
        check_against_fd(
            &|t| depthwise_conv3x3(&t[0], &t[1]).unwrap(),
            &[rand_t(&[4, 5, 2], 26), rand_t(&[3, 3, 2], 27)],
        );
        check_against_fd(
            &|t| conv2d(&t[0], &t[1], 2, 1).unwrap(),
            &[rand_t(&[5, 6, 2], 28), rand_t(&[3, 3, 2, 3], 29)],
        );
        check_against_fd(
            &|t| avg_pool_rect(&t[0], 1, 3, 0, 2).unwrap(),
            &[rand_t(&[4, 4, 3], 30)],
        );
    }

    #[test]
    fn grad_layer_norm_and_bias() {
        check_against_fd(
            &|t| layer_norm(&t[0], &t[1], &t[2], 1e-5).unwrap(),
            &[rand_t(&[3, 4], 31), rand_t(&[4], 32), rand_t(&[4], 33)],
        );
        check_against_fd(
            &|t| add_row_broadcast(&t[0], &t[1]).unwrap(),
            &[rand_t(&[3, 4], 34), rand_t(&[4], 35)],
        );
    }

    #[test]
    fn grad_cosine_matrix() {
        check_against_fd(
            &|t| cosine_matrix(&t[0], &t[1], 1e-12).unwrap(),
            &[rand_t(&[3, 4], 36), rand_t(&[5, 4], 37)],
        );
    }
}
