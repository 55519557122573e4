//! Forward operations and their recording rules.
//!
//! The primitive set is closed under differentiation: every backward rule in
//! [`super::grad`] is written with the functions in this module, which is what
//! makes second-order tapes work without any per-op special cases. Anything
//! not listed as a primitive (activations, losses, norms of vectors, ...) is a
//! composite built from primitives.

use super::tape::{Arg, Op, Tape};
use super::{numel, strides, Buffer, Tensor};
use crate::error::{Error, Result};
use std::sync::Arc;

// ── Recording plumbing ──────────────────────────────────────────────────────

fn arg_of(t: &Tensor) -> Arg {
    match t.node_id() {
        Some(id) => Arg::Node(id),
        None => Arg::Const(t.buffer().clone()),
    }
}

fn join_tape(a: &Tensor, b: Option<&Tensor>) -> Result<Option<Tape>> {
    match (a.tape(), b.and_then(|t| t.tape())) {
        (Some(ta), Some(tb)) => {
            if ta.same_tape(tb) {
                Ok(Some(ta.clone()))
            } else {
                Err(Error::TapeMismatch)
            }
        }
        (Some(t), None) | (None, Some(t)) => Ok(Some(t.clone())),
        (None, None) => Ok(None),
    }
}

fn record(tape: Option<Tape>, out: Buffer, build: impl FnOnce() -> Op) -> Tensor {
    match tape {
        Some(t) if t.is_recording() => {
            let id = t.push(build(), out.clone());
            Tensor::tracked(out, t, id)
        }
        _ => Tensor::constant(out),
    }
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::ShapeMismatch {
        op,
        detail,
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

// ── Elementwise primitives ──────────────────────────────────────────────────

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Buffer {
    let out: Vec<f64> = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Buffer {
        data: Arc::new(out),
        shape: a.shape().to_vec(),
    }
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("add", a, b)?;
    let tape = join_tape(a, Some(b))?;
    let out = zip(a, b, |x, y| x + y);
    Ok(record(tape, out, || Op::Add {
        a: arg_of(a),
        b: arg_of(b),
    }))
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("sub", a, b)?;
    let tape = join_tape(a, Some(b))?;
    let out = zip(a, b, |x, y| x - y);
    Ok(record(tape, out, || Op::Sub {
        a: arg_of(a),
        b: arg_of(b),
    }))
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("mul", a, b)?;
    let tape = join_tape(a, Some(b))?;
    let out = zip(a, b, |x, y| x * y);
    Ok(record(tape, out, || Op::Mul {
        a: arg_of(a),
        b: arg_of(b),
    }))
}

pub fn div(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("div", a, b)?;
    let tape = join_tape(a, Some(b))?;
    let out = zip(a, b, |x, y| x / y);
    Ok(record(tape, out, || Op::Div {
        a: arg_of(a),
        b: arg_of(b),
    }))
}

pub fn neg(a: &Tensor) -> Result<Tensor> {
    let tape = join_tape(a, None)?;
    let out = a.buffer().map(|x| -x);
    Ok(record(tape, out, || Op::Neg { a: arg_of(a) }))
}

pub fn scale(a: &Tensor, c: f64) -> Result<Tensor> {
    let tape = join_tape(a, None)?;
    let out = a.buffer().map(|x| x * c);
    Ok(record(tape, out, || Op::Scale { a: arg_of(a), c }))
}

pub fn add_scalar(a: &Tensor, c: f64) -> Result<Tensor> {
    let tape = join_tape(a, None)?;
    let out = a.buffer().map(|x| x + c);
    Ok(record(tape, out, || Op::AddScalar { a: arg_of(a) }))
}

pub fn exp(a: &Tensor) -> Result<Tensor> {
    let tape = join_tape(a, None)?;
    let out = a.buffer().map(f64::exp);
    Ok(record(tape, out, || Op::Exp { a: arg_of(a) }))
}

pub fn log(a: &Tensor) -> Result<Tensor> {
    let tape = join_tape(a, None)?;
    let out = a.buffer().map(f64::ln);
    Ok(record(tape, out, || Op::Log { a: arg_of(a) }))
}

pub fn sqrt(a: &Tensor) -> Result<Tensor> {
    let tape = join_tape(a, None)?;
    let out = a.buffer().map(f64::sqrt);
    Ok(record(tape, out, || Op::Sqrt { a: arg_of(a) }))
}

// ── Linear algebra ──────────────────────────────────────────────────────────

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (as_, bs) = (a.shape(), b.shape());
    if as_.len() != 2 || bs.len() != 2 || as_[1] != bs[0] {
        return Err(shape_err("matmul", format!("{:?} x {:?}", as_, bs)));
    }
    let (m, k, n) = (as_[0], as_[1], bs[1]);
    let tape = join_tape(a, Some(b))?;
    let mut out = vec![0.0; m * n];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..m {
        for p in 0..k {
            let av = ad[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    let buf = Buffer {
        data: Arc::new(out),
        shape: vec![m, n],
    };
    Ok(record(tape, buf, || Op::Matmul {
        a: arg_of(a),
        b: arg_of(b),
    }))
}

pub fn transpose2(a: &Tensor) -> Result<Tensor> {
    let s = a.shape();
    if s.len() != 2 {
        return Err(shape_err("transpose2", format!("{:?}", s)));
    }
    let (r, c) = (s[0], s[1]);
    let ad = a.data();
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = ad[i * c + j];
        }
    }
    let tape = join_tape(a, None)?;
    let buf = Buffer {
        data: Arc::new(out),
        shape: vec![c, r],
    };
    Ok(record(tape, buf, || Op::Transpose2 { a: arg_of(a) }))
}

// ── Convolution family ──────────────────────────────────────────────────────

pub(crate) fn conv_out_dim(input: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = input + 2 * pad;
    if padded < k || stride == 0 {
        return Err(shape_err(
            "conv2d",
            format!("kernel {} does not fit input {} with pad {}", k, input, pad),
        ));
    }
    Ok((padded - k) / stride + 1)
}

fn conv_shapes(x: &[usize], w: &[usize]) -> Result<(usize, usize, usize, usize, usize, usize, usize)> {
    if x.len() != 4 || w.len() != 4 {
        return Err(shape_err("conv2d", format!("x {:?}, w {:?}", x, w)));
    }
    if x[1] != w[1] {
        return Err(shape_err(
            "conv2d",
            format!("input channels {} vs kernel channels {}", x[1], w[1]),
        ));
    }
    Ok((x[0], x[1], x[2], x[3], w[0], w[2], w[3]))
}

pub fn conv2d(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let (n, ci, h, wi, co, kh, kw) = conv_shapes(x.shape(), w.shape())?;
    let oh = conv_out_dim(h, kh, stride, pad)?;
    let ow = conv_out_dim(wi, kw, stride, pad)?;
    let tape = join_tape(x, Some(w))?;
    let (xd, wd) = (x.data(), w.data());
    let mut out = vec![0.0; n * co * oh * ow];
    for in_ in 0..n {
        for c_out in 0..co {
            for r in 0..oh {
                for q in 0..ow {
                    let mut acc = 0.0;
                    for c_in in 0..ci {
                        for u in 0..kh {
                            let hh = (r * stride + u) as isize - pad as isize;
                            if hh < 0 || hh >= h as isize {
                                continue;
                            }
                            for v in 0..kw {
                                let ww = (q * stride + v) as isize - pad as isize;
                                if ww < 0 || ww >= wi as isize {
                                    continue;
                                }
                                acc += xd[((in_ * ci + c_in) * h + hh as usize) * wi + ww as usize]
                                    * wd[((c_out * ci + c_in) * kh + u) * kw + v];
                            }
                        }
                    }
                    out[((in_ * co + c_out) * oh + r) * ow + q] = acc;
                }
            }
        }
    }
    let buf = Buffer {
        data: Arc::new(out),
        shape: vec![n, co, oh, ow],
    };
    Ok(record(tape, buf, || Op::Conv2d {
        x: arg_of(x),
        w: arg_of(w),
        stride,
        pad,
    }))
}

/// Adjoint of `conv2d` in its input: maps output-shaped `g` back to an
/// input-shaped tensor, using kernel `w`.
pub fn conv2d_dx(
    g: &Tensor,
    w: &Tensor,
    stride: usize,
    pad: usize,
    in_h: usize,
    in_w: usize,
) -> Result<Tensor> {
    let gs = g.shape();
    let ws = w.shape();
    if gs.len() != 4 || ws.len() != 4 || gs[1] != ws[0] {
        return Err(shape_err("conv2d_dx", format!("g {:?}, w {:?}", gs, ws)));
    }
    let (n, co, oh, ow) = (gs[0], gs[1], gs[2], gs[3]);
    let (ci, kh, kw) = (ws[1], ws[2], ws[3]);
    if conv_out_dim(in_h, kh, stride, pad)? != oh || conv_out_dim(in_w, kw, stride, pad)? != ow {
        return Err(shape_err(
            "conv2d_dx",
            format!("g spatial {:?} inconsistent with input {}x{}", &gs[2..], in_h, in_w),
        ));
    }
    let tape = join_tape(g, Some(w))?;
    let (gd, wd) = (g.data(), w.data());
    let mut out = vec![0.0; n * ci * in_h * in_w];
    for in_ in 0..n {
        for c_out in 0..co {
            for r in 0..oh {
                for q in 0..ow {
                    let gv = gd[((in_ * co + c_out) * oh + r) * ow + q];
                    if gv == 0.0 {
                        continue;
                    }
                    for c_in in 0..ci {
                        for u in 0..kh {
                            let hh = (r * stride + u) as isize - pad as isize;
                            if hh < 0 || hh >= in_h as isize {
                                continue;
                            }
                            for v in 0..kw {
                                let ww = (q * stride + v) as isize - pad as isize;
                                if ww < 0 || ww >= in_w as isize {
                                    continue;
                                }
                                out[((in_ * ci + c_in) * in_h + hh as usize) * in_w + ww as usize] +=
                                    gv * wd[((c_out * ci + c_in) * kh + u) * kw + v];
                            }
                        }
                    }
                }
            }
        }
    }
    let buf = Buffer {
        data: Arc::new(out),
        shape: vec![n, ci, in_h, in_w],
    };
    Ok(record(tape, buf, || Op::ConvDx {
        g: arg_of(g),
        w: arg_of(w),
        stride,
        pad,
    }))
}

/// Adjoint of `conv2d` in its kernel: correlates input `x` with
/// output-shaped `g`, producing a kernel-shaped tensor.
pub fn conv2d_dw(
    x: &Tensor,
    g: &Tensor,
    stride: usize,
    pad: usize,
    kh: usize,
    kw: usize,
) -> Result<Tensor> {
    let xs = x.shape();
    let gs = g.shape();
    if xs.len() != 4 || gs.len() != 4 || xs[0] != gs[0] {
        return Err(shape_err("conv2d_dw", format!("x {:?}, g {:?}", xs, gs)));
    }
    let (n, ci, h, wi) = (xs[0], xs[1], xs[2], xs[3]);
    let (co, oh, ow) = (gs[1], gs[2], gs[3]);
    if conv_out_dim(h, kh, stride, pad)? != oh || conv_out_dim(wi, kw, stride, pad)? != ow {
        return Err(shape_err(
            "conv2d_dw",
            format!("g spatial {:?} inconsistent with kernel {}x{}", &gs[2..], kh, kw),
        ));
    }
    let tape = join_tape(x, Some(g))?;
    let (xd, gd) = (x.data(), g.data());
    let mut out = vec![0.0; co * ci * kh * kw];
    for in_ in 0..n {
        for c_out in 0..co {
            for r in 0..oh {
                for q in 0..ow {
                    let gv = gd[((in_ * co + c_out) * oh + r) * ow + q];
                    if gv == 0.0 {
                        continue;
                    }
                    for c_in in 0..ci {
                        for u in 0..kh {
                            let hh = (r * stride + u) as isize - pad as isize;
                            if hh < 0 || hh >= h as isize {
                                continue;
                            }
                            for v in 0..kw {
                                let ww = (q * stride + v) as isize - pad as isize;
                                if ww < 0 || ww >= wi as isize {
                                    continue;
                                }
                                out[((c_out * ci + c_in) * kh + u) * kw + v] +=
                                    gv * xd[((in_ * ci + c_in) * h + hh as usize) * wi + ww as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    let buf = Buffer {
        data: Arc::new(out),
        shape: vec![co, ci, kh, kw],
    };
    Ok(record(tape, buf, || Op::ConvDw {
        x: arg_of(x),
        g: arg_of(g),
        stride,
        pad,
    }))
}

pub fn avg_pool(x: &Tensor, k: usize, stride: usize) -> Result<Tensor> {
    let xs = x.shape();
    if xs.len() != 4 {
        return Err(shape_err("avg_pool", format!("{:?}", xs)));
    }
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    if k == 0 || stride == 0 || h < k || w < k {
        return Err(shape_err(
            "avg_pool",
            format!("window {} stride {} on {}x{}", k, stride, h, w),
        ));
    }
    let (oh, ow) = ((h - k) / stride + 1, (w - k) / stride + 1);
    let tape = join_tape(x, None)?;
    let xd = x.data();
    let inv = 1.0 / (k * k) as f64;
    let mut out = vec![0.0; n * c * oh * ow];
    for in_ in 0..n {
        for ch in 0..c {
            for r in 0..oh {
                for q in 0..ow {
                    let mut acc = 0.0;
                    for u in 0..k {
                        for v in 0..k {
                            acc += xd[((in_ * c + ch) * h + r * stride + u) * w + q * stride + v];
                        }
                    }
                    out[((in_ * c + ch) * oh + r) * ow + q] = acc * inv;
                }
            }
        }
    }
    let buf = Buffer {
        data: Arc::new(out),
        shape: vec![n, c, oh, ow],
    };
    Ok(record(tape, buf, || Op::AvgPool {
        x: arg_of(x),
        k,
        stride,
    }))
}

/// Adjoint of `avg_pool`: spreads each pooled cell back over its window.
pub fn avg_unpool(
    g: &Tensor,
    k: usize,
    stride: usize,
    in_h: usize,
    in_w: usize,
) -> Result<Tensor> {
    let gs = g.shape();
    if gs.len() != 4 {
        return Err(shape_err("avg_unpool", format!("{:?}", gs)));
    }
    let (n, c, oh, ow) = (gs[0], gs[1], gs[2], gs[3]);
    if k == 0 || stride == 0 || in_h < k || in_w < k || (in_h - k) / stride + 1 != oh
        || (in_w - k) / stride + 1 != ow
    {
        return Err(shape_err(
            "avg_unpool",
            format!("g {:?} inconsistent with input {}x{}", gs, in_h, in_w),
        ));
    }
    let tape = join_tape(g, None)?;
    let gd = g.data();
    let inv = 1.0 / (k * k) as f64;
    let mut out = vec![0.0; n * c * in_h * in_w];
    for in_ in 0..n {
        for ch in 0..c {
            for r in 0..oh {
                for q in 0..ow {
                    let gv = gd[((in_ * c + ch) * oh + r) * ow + q] * inv;
                    for u in 0..k {
                        for v in 0..k {
                            out[((in_ * c + ch) * in_h + r * stride + u) * in_w + q * stride + v] +=
                                gv;
                        }
                    }
                }
            }
        }
    }
    let buf = Buffer {
        data: Arc::new(out),
        shape: vec![n, c, in_h, in_w],
    };
    Ok(record(tape, buf, || Op::AvgUnpool {
        g: arg_of(g),
        k,
        stride,
    }))
}

// ── Shape movement and reductions ───────────────────────────────────────────

pub fn reshape(a: &Tensor, shape: &[usize]) -> Result<Tensor> {
    let out = a.buffer().reshaped(shape.to_vec())?;
    let tape = join_tape(a, None)?;
    Ok(record(tape, out, || Op::Reshape { a: arg_of(a) }))
}

/// `[N, ...] -> [N, rest]`.
pub fn flatten_batch(a: &Tensor) -> Result<Tensor> {
    let s = a.shape();
    if s.is_empty() {
        return Err(shape_err("flatten_batch", "scalar has no batch axis".into()));
    }
    let n = s[0];
    let rest = numel(s) / n.max(1);
    reshape(a, &[n, rest])
}

/// Sum over `axes`, keeping the reduced axes with extent 1.
pub fn sum_axes(a: &Tensor, axes: &[usize]) -> Result<Tensor> {
    let in_shape = a.shape().to_vec();
    let rank = in_shape.len();
    let mut mask = vec![false; rank];
    for &ax in axes {
        if ax >= rank {
            return Err(shape_err(
                "sum_axes",
                format!("axis {} out of range for {:?}", ax, in_shape),
            ));
        }
        mask[ax] = true;
    }
    let out_shape: Vec<usize> = in_shape
        .iter()
        .enumerate()
        .map(|(i, &d)| if mask[i] { 1 } else { d })
        .collect();
    let in_str = strides(&in_shape);
    let out_str = strides(&out_shape);
    let mut out = vec![0.0; numel(&out_shape)];
    let ad = a.data();
    for (lin, &v) in ad.iter().enumerate() {
        let mut out_idx = 0;
        for d in 0..rank {
            if !mask[d] {
                let coord = (lin / in_str[d]) % in_shape[d];
                out_idx += coord * out_str[d];
            }
        }
        out[out_idx] += v;
    }
    let tape = join_tape(a, None)?;
    let buf = Buffer {
        data: Arc::new(out),
        shape: out_shape,
    };
    Ok(record(tape, buf, || Op::SumAxes { a: arg_of(a) }))
}

/// Broadcast along axes of extent 1. Ranks must match; use `reshape` first.
pub fn broadcast_to(a: &Tensor, shape: &[usize]) -> Result<Tensor> {
    let in_shape = a.shape();
    if in_shape.len() != shape.len() {
        return Err(shape_err(
            "broadcast_to",
            format!("rank {:?} vs {:?}", in_shape, shape),
        ));
    }
    for (d, (&i, &o)) in in_shape.iter().zip(shape.iter()).enumerate() {
        if i != o && i != 1 {
            return Err(shape_err(
                "broadcast_to",
                format!("axis {}: {} -> {}", d, i, o),
            ));
        }
    }
    let rank = shape.len();
    let in_str = strides(in_shape);
    let out_str = strides(shape);
    let mut out = vec![0.0; numel(shape)];
    let ad = a.data();
    for (lin, slot) in out.iter_mut().enumerate() {
        let mut in_idx = 0;
        for d in 0..rank {
            if in_shape[d] != 1 {
                let coord = (lin / out_str[d]) % shape[d];
                in_idx += coord * in_str[d];
            }
        }
        *slot = ad[in_idx];
    }
    let tape = join_tape(a, None)?;
    let buf = Buffer {
        data: Arc::new(out),
        shape: shape.to_vec(),
    };
    Ok(record(tape, buf, || Op::BroadcastTo { a: arg_of(a) }))
}

/// `[N, C] -> [N]`, picking `a[n, idx[n]]`.
pub fn gather_rows(a: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let s = a.shape();
    if s.len() != 2 || s[0] != idx.len() {
        return Err(shape_err(
            "gather_rows",
            format!("{:?} with {} indices", s, idx.len()),
        ));
    }
    let c = s[1];
    let ad = a.data();
    let mut out = Vec::with_capacity(idx.len());
    for (nrow, &j) in idx.iter().enumerate() {
        if j >= c {
            return Err(shape_err(
                "gather_rows",
                format!("index {} out of range for {} columns", j, c),
            ));
        }
        out.push(ad[nrow * c + j]);
    }
    let tape = join_tape(a, None)?;
    let buf = Buffer {
        data: Arc::new(out),
        shape: vec![idx.len()],
    };
    let idx = Arc::new(idx.to_vec());
    Ok(record(tape, buf, || Op::GatherRows { a: arg_of(a), idx }))
}

/// `[N] -> [N, cols]`, placing `a[n]` at column `idx[n]`, zero elsewhere.
pub fn scatter_rows(a: &Tensor, idx: &[usize], cols: usize) -> Result<Tensor> {
    let s = a.shape();
    if s.len() != 1 || s[0] != idx.len() {
        return Err(shape_err(
            "scatter_rows",
            format!("{:?} with {} indices", s, idx.len()),
        ));
    }
    let ad = a.data();
    let mut out = vec![0.0; idx.len() * cols];
    for (nrow, &j) in idx.iter().enumerate() {
        if j >= cols {
            return Err(shape_err(
                "scatter_rows",
                format!("index {} out of range for {} columns", j, cols),
            ));
        }
        out[nrow * cols + j] = ad[nrow];
    }
    let tape = join_tape(a, None)?;
    let buf = Buffer {
        data: Arc::new(out),
        shape: vec![idx.len(), cols],
    };
    let idx = Arc::new(idx.to_vec());
    Ok(record(tape, buf, || Op::ScatterRows {
        a: arg_of(a),
        idx,
    }))
}

// ── Composite reductions ────────────────────────────────────────────────────

pub fn sum_all(a: &Tensor) -> Result<Tensor> {
    let n = a.numel();
    let flat = reshape(a, &[n])?;
    let s = sum_axes(&flat, &[0])?;
    reshape(&s, &[])
}

pub fn mean_all(a: &Tensor) -> Result<Tensor> {
    let n = a.numel().max(1);
    let s = sum_all(a)?;
    scale(&s, 1.0 / n as f64)
}

pub fn mean_axes(a: &Tensor, axes: &[usize]) -> Result<Tensor> {
    let count: usize = axes.iter().map(|&ax| a.shape()[ax]).product();
    let s = sum_axes(a, axes)?;
    scale(&s, 1.0 / count.max(1) as f64)
}

/// Biased variance over `axes`, keeping reduced axes.
pub fn var_axes(a: &Tensor, axes: &[usize]) -> Result<Tensor> {
    let m = mean_axes(a, axes)?;
    let mb = broadcast_to(&m, a.shape())?;
    let centered = sub(a, &mb)?;
    let sq = mul(&centered, &centered)?;
    mean_axes(&sq, axes)
}

// ── Activations ─────────────────────────────────────────────────────────────

fn mask_const(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::constant(a.buffer().map(f))
}

/// max(x, 0). The kink at zero carries a zero second derivative: backward
/// multiplies by a constant step mask captured at record time.
pub fn relu(a: &Tensor) -> Result<Tensor> {
    let mask = mask_const(a, |x| if x > 0.0 { 1.0 } else { 0.0 });
    mul(a, &mask)
}

pub fn leaky_relu(a: &Tensor, slope: f64) -> Result<Tensor> {
    let mask = mask_const(a, |x| if x > 0.0 { 1.0 } else { slope });
    mul(a, &mask)
}

pub const SELU_SCALE: f64 = 1.0507009873554804934193349852946;
pub const SELU_ALPHA: f64 = 1.6732632423543772848170429916717;

/// scale * (x for x > 0, alpha * (exp(x) - 1) otherwise), built from
/// primitives so the exponential branch keeps its curvature.
pub fn selu(a: &Tensor) -> Result<Tensor> {
    let pos = mask_const(a, |x| if x > 0.0 { 1.0 } else { 0.0 });
    let neg = mask_const(a, |x| if x > 0.0 { 0.0 } else { 1.0 });
    let pos_part = mul(a, &pos)?;
    // exp acts on the negative branch only; the positive branch is zeroed
    // before exp so its contribution is exp(0) - 1 = 0.
    let neg_in = mul(a, &neg)?;
    let e = exp(&neg_in)?;
    let em1 = add_scalar(&e, -1.0)?;
    let neg_part = scale(&mul(&em1, &neg)?, SELU_ALPHA)?;
    scale(&add(&pos_part, &neg_part)?, SELU_SCALE)
}

/// Elementwise max(x, c) with the tie resolved toward the constant.
pub fn maximum_with_scalar(a: &Tensor, c: f64) -> Result<Tensor> {
    let mask = mask_const(a, |x| if x > c { 1.0 } else { 0.0 });
    let floor = Tensor::constant(a.buffer().map(|x| if x > c { 0.0 } else { c }));
    add(&mul(a, &mask)?, &floor)
}

/// |x| via a sign mask; gradient at exactly zero is zero.
pub fn abs(a: &Tensor) -> Result<Tensor> {
    let sign = mask_const(a, |x| {
        if x > 0.0 {
            1.0
        } else if x < 0.0 {
            -1.0
        } else {
            0.0
        }
    });
    mul(a, &sign)
}

// ── Losses and similarities ─────────────────────────────────────────────────

pub struct CrossEntropyOut {
    /// Per-sample negative log-likelihood, shape `[N]`.
    pub per_sample: Tensor,
    /// Mean over the batch, scalar.
    pub mean: Tensor,
}

/// Softmax cross-entropy from raw logits `[N, C]`, computed via the
/// max-shifted log-sum-exp so large logits stay finite.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<CrossEntropyOut> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(shape_err(
            "softmax_cross_entropy",
            format!("logits {:?} with {} labels", s, labels.len()),
        ));
    }
    let (n, c) = (s[0], s[1]);
    let ld = logits.data();
    let mut max_idx = Vec::with_capacity(n);
    for row in 0..n {
        let mut best = 0usize;
        for j in 1..c {
            if ld[row * c + j] > ld[row * c + best] {
                best = j;
            }
        }
        max_idx.push(best);
    }
    let m = gather_rows(logits, &max_idx)?;
    let m_col = reshape(&m, &[n, 1])?;
    let m_full = broadcast_to(&m_col, &[n, c])?;
    let shifted = sub(logits, &m_full)?;
    let e = exp(&shifted)?;
    let sums = sum_axes(&e, &[1])?;
    let lse = add(&log(&sums)?, &m_col)?;
    let zy = gather_rows(logits, labels)?;
    let per_sample = sub(&reshape(&lse, &[n])?, &zy)?;
    let mean = mean_all(&per_sample)?;
    Ok(CrossEntropyOut { per_sample, mean })
}

/// Softmax probabilities of detached logits; evaluation only.
pub fn softmax_probs(logits: &Buffer) -> Result<Buffer> {
    let s = logits.shape();
    if s.len() != 2 {
        return Err(shape_err("softmax_probs", format!("{:?}", s)));
    }
    let (n, c) = (s[0], s[1]);
    let ld = logits.data();
    let mut out = vec![0.0; n * c];
    for row in 0..n {
        let r = &ld[row * c..(row + 1) * c];
        let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for j in 0..c {
            let e = (r[j] - m).exp();
            out[row * c + j] = e;
            z += e;
        }
        for j in 0..c {
            out[row * c + j] /= z;
        }
    }
    Buffer::new(out, vec![n, c])
}

/// Row-wise argmax of detached scores; ties pick the lowest index.
pub fn argmax_rows(scores: &Buffer) -> Result<Vec<usize>> {
    let s = scores.shape();
    if s.len() != 2 {
        return Err(shape_err("argmax_rows", format!("{:?}", s)));
    }
    let (n, c) = (s[0], s[1]);
    if c == 0 {
        return Err(shape_err("argmax_rows", "no columns".into()));
    }
    let d = scores.data();
    let mut out = Vec::with_capacity(n);
    for row in 0..n {
        let mut best = 0usize;
        for j in 1..c {
            if d[row * c + j] > d[row * c + best] {
                best = j;
            }
        }
        out.push(best);
    }
    Ok(out)
}

/// Margin of the strongest wrong class over the true class,
/// floored at -kappa: max(max_{i != y} z_i - z_y, -kappa), shape `[N]`.
pub fn cw_margin(logits: &Tensor, labels: &[usize], kappa: f64) -> Result<Tensor> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(shape_err(
            "cw_margin",
            format!("logits {:?} with {} labels", s, labels.len()),
        ));
    }
    let (n, c) = (s[0], s[1]);
    if c < 2 {
        return Err(shape_err("cw_margin", "needs at least two classes".into()));
    }
    let ld = logits.data();
    let mut rival = Vec::with_capacity(n);
    for row in 0..n {
        let y = labels[row];
        let mut best = usize::MAX;
        for j in 0..c {
            if j == y {
                continue;
            }
            if best == usize::MAX || ld[row * c + j] > ld[row * c + best] {
                best = j;
            }
        }
        rival.push(best);
    }
    let zr = gather_rows(logits, &rival)?;
    let zy = gather_rows(logits, labels)?;
    let margin = sub(&zr, &zy)?;
    maximum_with_scalar(&margin, -kappa)
}

/// Per-sample l2 norm over all non-batch axes, shape `[N]`.
pub fn l2_norm_per_sample(a: &Tensor) -> Result<Tensor> {
    let flat = flatten_batch(a)?;
    let sq = mul(&flat, &flat)?;
    let s = sum_axes(&sq, &[1])?;
    let n = a.shape()[0];
    reshape(&sqrt(&s)?, &[n])
}

/// l2 norm of the whole tensor, scalar.
pub fn l2_norm_all(a: &Tensor) -> Result<Tensor> {
    let sq = mul(a, a)?;
    sqrt(&sum_all(&sq)?)
}

/// Per-sample cosine similarity between two batch tensors of equal shape,
/// shape `[N]`. `denom_eps` guards the zero-norm case; pass 0.0 for the
/// exact quotient.
pub fn cosine_per_sample(a: &Tensor, b: &Tensor, denom_eps: f64) -> Result<Tensor> {
    same_shape("cosine_per_sample", a, b)?;
    let n = a.shape()[0];
    let fa = flatten_batch(a)?;
    let fb = flatten_batch(b)?;
    let dot = reshape(&sum_axes(&mul(&fa, &fb)?, &[1])?, &[n])?;
    let na = l2_norm_per_sample(a)?;
    let nb = l2_norm_per_sample(b)?;
    let denom = add_scalar(&mul(&na, &nb)?, denom_eps)?;
    div(&dot, &denom)
}

/// Cosine similarity between two tensors flattened end to end, scalar.
pub fn cosine_flat(a: &Tensor, b: &Tensor, denom_eps: f64) -> Result<Tensor> {
    same_shape("cosine_flat", a, b)?;
    let dot = sum_all(&mul(a, b)?)?;
    let na = l2_norm_all(a)?;
    let nb = l2_norm_all(b)?;
    let denom = add_scalar(&mul(&na, &nb)?, denom_eps)?;
    div(&dot, &denom)
}
