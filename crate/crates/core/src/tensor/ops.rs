//! Primitive catalog: forward evaluation and vector-Jacobian products.

use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};

/// Denominator guard inside the signed square root.
pub const SIGNED_SQRT_EPS: f64 = 1e-12;

/// A primitive together with its attributes.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Add,
    Sub,
    Mul,
    Div,
    ScalarMul(f64),
    AddScalar(f64),
    /// `[m,k] × [k,n]`.
    MatMul,
    /// `[B,m,k] × [B,k,n]`, or `[B,m,k] × [B,n,k]ᵀ` when `trans_b`.
    BatchMatMul { trans_b: bool },
    /// Input `[B,Cin,H,W]`, kernel `[Cout,Cin,kh,kw]`.
    Conv2d { stride: usize, padding: usize },
    Relu,
    Sigmoid,
    Softplus,
    Exp,
    Ln,
    Square,
    Sqrt,
    /// `sign(x)·sqrt(|x| + 1e-12)`.
    SignedSqrt,
    /// Mean over `axes`, reduced axes kept with extent 1.
    Mean { axes: Vec<usize> },
    Sum { axes: Vec<usize> },
    /// Sum of every element into a rank-0 tensor.
    SumAll,
    Max { axes: Vec<usize> },
    Min { axes: Vec<usize> },
    /// Softmax over the last axis.
    Softmax,
    LogSoftmax,
    /// Inputs `x, gamma, beta` in train mode, plus `running_mean, running_var`
    /// in eval mode.
    BatchNorm2d { train: bool, eps: f64 },
    /// `[B,C,H,W] → [B,C]`.
    GlobalAvgPool,
    BilinearResize { out_h: usize, out_w: usize },
    Concat { axis: usize },
    Reshape { shape: Vec<usize> },
    Narrow { axis: usize, start: usize, len: usize },
    Clamp { lo: f64, hi: f64 },
}

/// Loosely-typed attributes for building an [`Op`] from its name.
#[derive(Clone, Debug, Default)]
pub struct OpAttrs {
    pub scalar: Option<f64>,
    pub axes: Option<Vec<usize>>,
    pub axis: Option<usize>,
    pub stride: Option<usize>,
    pub padding: Option<usize>,
    pub shape: Option<Vec<usize>>,
    pub out_size: Option<(usize, usize)>,
    pub start: Option<usize>,
    pub len: Option<usize>,
    pub lo: Option<f64>,
    pub hi: Option<f64>,
    pub train: Option<bool>,
    pub trans_b: Option<bool>,
}

fn need<T: Clone>(name: &str, field: &str, v: &Option<T>) -> Result<T> {
    v.clone()
        .ok_or_else(|| Error::invalid(name, format!("missing attribute `{field}`")))
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::ScalarMul(_) => "scalar-mul",
            Op::AddScalar(_) => "add-scalar",
            Op::MatMul => "matmul",
            Op::BatchMatMul { .. } => "batch-matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu => "relu",
            Op::Sigmoid => "sigmoid",
            Op::Softplus => "softplus",
            Op::Exp => "exp",
            Op::Ln => "ln",
            Op::Square => "square",
            Op::Sqrt => "sqrt",
            Op::SignedSqrt => "signed-sqrt",
            Op::Mean { .. } => "mean",
            Op::Sum { .. } => "sum",
            Op::SumAll => "sum-all",
            Op::Max { .. } => "max",
            Op::Min { .. } => "min",
            Op::Softmax => "softmax",
            Op::LogSoftmax => "log-softmax",
            Op::BatchNorm2d { .. } => "batchnorm2d",
            Op::GlobalAvgPool => "global-average-pool",
            Op::BilinearResize { .. } => "bilinear-resize",
            Op::Concat { .. } => "concat",
            Op::Reshape { .. } => "reshape",
            Op::Narrow { .. } => "narrow",
            Op::Clamp { .. } => "clamp",
        }
    }

    pub fn from_name(name: &str, attrs: &OpAttrs) -> Result<Op> {
        let axes = || need(name, "axes", &attrs.axes);
        Ok(match name {
            "add" => Op::Add,
            "sub" => Op::Sub,
            "mul" => Op::Mul,
            "div" => Op::Div,
            "scalar-mul" => Op::ScalarMul(need(name, "scalar", &attrs.scalar)?),
            "add-scalar" => Op::AddScalar(need(name, "scalar", &attrs.scalar)?),
            "matmul" => Op::MatMul,
            "batch-matmul" => Op::BatchMatMul {
                trans_b: attrs.trans_b.unwrap_or(false),
            },
            "conv2d" => Op::Conv2d {
                stride: attrs.stride.unwrap_or(1),
                padding: attrs.padding.unwrap_or(0),
            },
            "relu" => Op::Relu,
            "sigmoid" => Op::Sigmoid,
            "softplus" => Op::Softplus,
            "exp" => Op::Exp,
            "ln" => Op::Ln,
            "square" => Op::Square,
            "sqrt" => Op::Sqrt,
            "signed-sqrt" => Op::SignedSqrt,
            "mean" => Op::Mean { axes: axes()? },
            "sum" => match &attrs.axes {
                Some(a) => Op::Sum { axes: a.clone() },
                None => Op::SumAll,
            },
            "sum-all" => Op::SumAll,
            "max" => Op::Max { axes: axes()? },
            "min" => Op::Min { axes: axes()? },
            "softmax" => Op::Softmax,
            "log-softmax" => Op::LogSoftmax,
            "batchnorm2d" => Op::BatchNorm2d {
                train: attrs.train.unwrap_or(true),
                eps: 1e-5,
            },
            "global-average-pool" => Op::GlobalAvgPool,
            "bilinear-resize" => {
                let (out_h, out_w) = need(name, "out_size", &attrs.out_size)?;
                Op::BilinearResize { out_h, out_w }
            }
            "concat" => Op::Concat {
                axis: need(name, "axis", &attrs.axis)?,
            },
            "reshape" => Op::Reshape {
                shape: need(name, "shape", &attrs.shape)?,
            },
            "narrow" => Op::Narrow {
                axis: need(name, "axis", &attrs.axis)?,
                start: need(name, "start", &attrs.start)?,
                len: need(name, "len", &attrs.len)?,
            },
            "clamp" => Op::Clamp {
                lo: need(name, "lo", &attrs.lo)?,
                hi: need(name, "hi", &attrs.hi)?,
            },
            other => return Err(Error::UnknownOp(other.to_string())),
        })
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Op::Add | Op::Sub | Op::Mul | Op::Div | Op::MatMul | Op::BatchMatMul { .. } => Some(2),
            Op::Conv2d { .. } => Some(2),
            Op::BatchNorm2d { train: true, .. } => Some(3),
            Op::BatchNorm2d { train: false, .. } => Some(5),
            Op::Concat { .. } => None,
            _ => Some(1),
        }
    }
}

/// Activations kept for the backward pass.
#[derive(Clone, Debug)]
pub(crate) enum Saved {
    None,
    Cols(Vec<f64>),
    ArgIdx(Vec<usize>),
    BatchNorm {
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        mean: Vec<f64>,
        var: Vec<f64>,
    },
}

fn check_axes(op: &Op, shape: &[usize], axes: &[usize]) -> Result<Vec<usize>> {
    if axes.iter().any(|&a| a >= shape.len()) {
        return Err(Error::invalid(
            op.name(),
            format!("axes {axes:?} out of range for shape {shape:?}"),
        ));
    }
    let mut out = shape.to_vec();
    for &a in axes {
        out[a] = 1;
    }
    Ok(out)
}

fn unary(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())
}

fn rows_last_axis(t: &Tensor) -> (usize, usize) {
    let n = *t.shape().last().unwrap_or(&1);
    (t.numel() / n, n)
}

/// Evaluates `op`. `want_saved` is false when no input needs a gradient.
pub(crate) fn forward(op: &Op, inputs: &[&Tensor], want_saved: bool) -> Result<(Tensor, Saved)> {
    if let Some(n) = op.arity() {
        if inputs.len() != n {
            return Err(Error::invalid(
                op.name(),
                format!("expected {n} inputs, got {}", inputs.len()),
            ));
        }
    } else if inputs.is_empty() {
        return Err(Error::invalid(op.name(), "expected at least one input"));
    }
    let shapes: Vec<&[usize]> = inputs.iter().map(|t| t.shape()).collect();
    let mismatch = || Error::shape(op.name(), &shapes);
    let x = inputs[0];

    let out = match op {
        Op::Add | Op::Sub | Op::Mul | Op::Div => {
            let (a, b) = (inputs[0], inputs[1]);
            let f: fn(f64, f64) -> f64 = match op {
                Op::Add => |p, q| p + q,
                Op::Sub => |p, q| p - q,
                Op::Mul => |p, q| p * q,
                _ => |p, q| p / q,
            };
            if a.shape() == b.shape() {
                let data = a.data().iter().zip(b.data()).map(|(&p, &q)| f(p, q)).collect();
                Tensor::from_parts(a.shape().to_vec(), data)
            } else {
                let shape = kernels::broadcast_shape(a.shape(), b.shape()).ok_or_else(mismatch)?;
                let oa = kernels::broadcast_offsets(&shape, a.shape());
                let ob = kernels::broadcast_offsets(&shape, b.shape());
                let data = oa
                    .iter()
                    .zip(&ob)
                    .map(|(&i, &j)| f(a.data()[i], b.data()[j]))
                    .collect();
                Tensor::from_parts(shape, data)
            }
        }
        Op::ScalarMul(s) => unary(x, |v| v * s),
        Op::AddScalar(s) => unary(x, |v| v + s),
        Op::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(mismatch());
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let mut out = vec![0.0; m * n];
            kernels::gemm(m, k, n, a.data(), false, b.data(), false, 0.0, &mut out);
            Tensor::from_parts(vec![m, n], out)
        }
        Op::BatchMatMul { trans_b } => {
            let (a, b) = (inputs[0], inputs[1]);
            if a.rank() != 3 || b.rank() != 3 || a.shape()[0] != b.shape()[0] {
                return Err(mismatch());
            }
            let (bs, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
            let (bk, n) = if *trans_b {
                (b.shape()[2], b.shape()[1])
            } else {
                (b.shape()[1], b.shape()[2])
            };
            if bk != k {
                return Err(mismatch());
            }
            let mut out = vec![0.0; bs * m * n];
            for i in 0..bs {
                kernels::gemm(
                    m,
                    k,
                    n,
                    &a.data()[i * m * k..],
                    false,
                    &b.data()[i * k * n..],
                    *trans_b,
                    0.0,
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
            Tensor::from_parts(vec![bs, m, n], out)
        }
        Op::Conv2d { stride, padding } => {
            let (img, w) = (inputs[0], inputs[1]);
            if img.rank() != 4 || w.rank() != 4 || img.shape()[1] != w.shape()[1] {
                return Err(mismatch());
            }
            let geom = conv_geom(img.shape(), w.shape(), *stride, *padding).ok_or_else(mismatch)?;
            let (bs, cout) = (img.shape()[0], w.shape()[0]);
            let kdim = geom.cin * geom.kh * geom.kw;
            let hw_out = geom.ho * geom.wo;
            let in_plane = geom.cin * geom.h * geom.w;
            let mut out = vec![0.0; bs * cout * hw_out];
            let mut cols = vec![0.0; bs * kdim * hw_out];
            for b in 0..bs {
                let col_b = &mut cols[b * kdim * hw_out..(b + 1) * kdim * hw_out];
                kernels::im2col(&geom, &img.data()[b * in_plane..(b + 1) * in_plane], col_b);
                kernels::gemm(
                    cout,
                    kdim,
                    hw_out,
                    w.data(),
                    false,
                    col_b,
                    false,
                    0.0,
                    &mut out[b * cout * hw_out..(b + 1) * cout * hw_out],
                );
            }
            let saved = if want_saved { Saved::Cols(cols) } else { Saved::None };
            return Ok((
                Tensor::from_parts(vec![bs, cout, geom.ho, geom.wo], out),
                saved,
            ));
        }
        Op::Relu => unary(x, |v| v.max(0.0)),
        Op::Sigmoid => unary(x, sigmoid),
        Op::Softplus => unary(x, softplus),
        Op::Exp => unary(x, f64::exp),
        Op::Ln => {
            if x.data().iter().any(|&v| v <= 0.0) {
                return Err(Error::invalid("ln", "input must be strictly positive"));
            }
            unary(x, f64::ln)
        }
        Op::Square => unary(x, |v| v * v),
        Op::Sqrt => {
            if x.data().iter().any(|&v| v < 0.0) {
                return Err(Error::invalid("sqrt", "input must be nonnegative"));
            }
            unary(x, f64::sqrt)
        }
        Op::SignedSqrt => unary(x, signed_sqrt),
        Op::Mean { axes } | Op::Sum { axes } => {
            let shape = check_axes(op, x.shape(), axes)?;
            let count = x.numel() / shape.iter().product::<usize>();
            let scale = if matches!(op, Op::Mean { .. }) {
                1.0 / count as f64
            } else {
                1.0
            };
            let offs = kernels::broadcast_offsets(x.shape(), &shape);
            let mut out = vec![0.0; shape.iter().product()];
            for (&o, &v) in offs.iter().zip(x.data()) {
                out[o] += v;
            }
            out.iter_mut().for_each(|v| *v *= scale);
            Tensor::from_parts(shape, out)
        }
        Op::SumAll => Tensor::scalar(x.data().iter().sum()),
        Op::Max { axes } | Op::Min { axes } => {
            let shape = check_axes(op, x.shape(), axes)?;
            let is_max = matches!(op, Op::Max { .. });
            let offs = kernels::broadcast_offsets(x.shape(), &shape);
            let n_out: usize = shape.iter().product();
            let mut best = vec![usize::MAX; n_out];
            for (i, &o) in offs.iter().enumerate() {
                let cur = best[o];
                if cur == usize::MAX
                    || (is_max && x.data()[i] > x.data()[cur])
                    || (!is_max && x.data()[i] < x.data()[cur])
                {
                    best[o] = i;
                }
            }
            let out = best.iter().map(|&i| x.data()[i]).collect();
            return Ok((Tensor::from_parts(shape, out), Saved::ArgIdx(best)));
        }
        Op::Softmax | Op::LogSoftmax => {
            let (rows, n) = rows_last_axis(x);
            let mut out = vec![0.0; x.numel()];
            for r in 0..rows {
                let row = &x.data()[r * n..(r + 1) * n];
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = row.iter().map(|&v| (v - m).exp()).sum();
                let dst = &mut out[r * n..(r + 1) * n];
                if matches!(op, Op::Softmax) {
                    for (d, &v) in dst.iter_mut().zip(row) {
                        *d = (v - m).exp() / z;
                    }
                } else {
                    let lz = m + z.ln();
                    for (d, &v) in dst.iter_mut().zip(row) {
                        *d = v - lz;
                    }
                }
            }
            Tensor::from_parts(x.shape().to_vec(), out)
        }
        Op::BatchNorm2d { train, eps } => return batchnorm_forward(inputs, *train, *eps),
        Op::GlobalAvgPool => {
            if x.rank() != 4 {
                return Err(mismatch());
            }
            let (b, c) = (x.shape()[0], x.shape()[1]);
            let hw = x.shape()[2] * x.shape()[3];
            let out = x
                .data()
                .chunks(hw)
                .map(|p| p.iter().sum::<f64>() / hw as f64)
                .collect();
            Tensor::from_parts(vec![b, c], out)
        }
        Op::BilinearResize { out_h, out_w } => {
            if x.rank() != 4 || *out_h == 0 || *out_w == 0 {
                return Err(mismatch());
            }
            let (h, w) = (x.shape()[2], x.shape()[3]);
            let rows = kernels::bilinear_taps(0, h, h, *out_h);
            let cols = kernels::bilinear_taps(0, w, w, *out_w);
            let planes = x.shape()[0] * x.shape()[1];
            let mut out = vec![0.0; planes * out_h * out_w];
            for p in 0..planes {
                kernels::resample_plane(
                    &x.data()[p * h * w..(p + 1) * h * w],
                    w,
                    &rows,
                    &cols,
                    &mut out[p * out_h * out_w..(p + 1) * out_h * out_w],
                );
            }
            Tensor::from_parts(vec![x.shape()[0], x.shape()[1], *out_h, *out_w], out)
        }
        Op::Concat { axis } => {
            let rank = x.rank();
            if *axis >= rank {
                return Err(mismatch());
            }
            for t in inputs {
                if t.rank() != rank
                    || (0..rank).any(|d| d != *axis && t.shape()[d] != x.shape()[d])
                {
                    return Err(mismatch());
                }
            }
            let outer: usize = x.shape()[..*axis].iter().product();
            let inner: usize = x.shape()[axis + 1..].iter().product();
            let total_axis: usize = inputs.iter().map(|t| t.shape()[*axis]).sum();
            let mut out = Vec::with_capacity(outer * total_axis * inner);
            for o in 0..outer {
                for t in inputs {
                    let chunk = t.shape()[*axis] * inner;
                    out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
                }
            }
            let mut shape = x.shape().to_vec();
            shape[*axis] = total_axis;
            Tensor::from_parts(shape, out)
        }
        Op::Reshape { shape } => {
            if shape.iter().product::<usize>() != x.numel() || shape.contains(&0) {
                return Err(Error::shape(op.name(), &[x.shape(), shape]));
            }
            Tensor::from_parts(shape.clone(), x.data().to_vec())
        }
        Op::Narrow { axis, start, len } => {
            if *axis >= x.rank() || *len == 0 || start + len > x.shape()[*axis] {
                return Err(Error::invalid(
                    op.name(),
                    format!("range {start}+{len} on axis {axis} of {:?}", x.shape()),
                ));
            }
            let outer: usize = x.shape()[..*axis].iter().product();
            let inner: usize = x.shape()[axis + 1..].iter().product();
            let ext = x.shape()[*axis];
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * ext + start) * inner;
                out.extend_from_slice(&x.data()[base..base + len * inner]);
            }
            let mut shape = x.shape().to_vec();
            shape[*axis] = *len;
            Tensor::from_parts(shape, out)
        }
        Op::Clamp { lo, hi } => {
            if lo > hi {
                return Err(Error::invalid(op.name(), format!("lo {lo} > hi {hi}")));
            }
            unary(x, |v| v.clamp(*lo, *hi))
        }
    };
    Ok((out, Saved::None))
}

pub(crate) fn conv_geom(x: &[usize], w: &[usize], stride: usize, padding: usize) -> Option<ConvGeom> {
    let (h, wd) = (x[2], x[3]);
    let (kh, kw) = (w[2], w[3]);
    Some(ConvGeom {
        cin: x[1],
        h,
        w: wd,
        kh,
        kw,
        stride,
        padding,
        ho: kernels::conv_out(h, kh, stride, padding)?,
        wo: kernels::conv_out(wd, kw, stride, padding)?,
    })
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn signed_sqrt(v: f64) -> f64 {
    if v == 0.0 {
        0.0
    } else {
        v.signum() * (v.abs() + SIGNED_SQRT_EPS).sqrt()
    }
}

pub(crate) fn softplus(v: f64) -> f64 {
    v.max(0.0) + (-v.abs()).exp().ln_1p()
}

fn batchnorm_forward(inputs: &[&Tensor], train: bool, eps: f64) -> Result<(Tensor, Saved)> {
    let (x, gamma, beta) = (inputs[0], inputs[1], inputs[2]);
    let shapes: Vec<&[usize]> = inputs.iter().map(|t| t.shape()).collect();
    if x.rank() != 4 {
        return Err(Error::shape("batchnorm2d", &shapes));
    }
    let (b, c) = (x.shape()[0], x.shape()[1]);
    let hw = x.shape()[2] * x.shape()[3];
    if inputs[1..].iter().any(|t| t.numel() != c) {
        return Err(Error::shape("batchnorm2d", &shapes));
    }
    let n = (b * hw) as f64;
    let (mean, var) = if train {
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for bi in 0..b {
            for (ci, m) in mean.iter_mut().enumerate() {
                *m += x.data()[(bi * c + ci) * hw..(bi * c + ci + 1) * hw].iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        for bi in 0..b {
            for ci in 0..c {
                let plane = &x.data()[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
                var[ci] += plane.iter().map(|v| (v - mean[ci]).powi(2)).sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= n);
        (mean, var)
    } else {
        (inputs[3].data().to_vec(), inputs[4].data().to_vec())
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = vec![0.0; x.numel()];
    let mut out = vec![0.0; x.numel()];
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * hw;
            for i in base..base + hw {
                let xh = (x.data()[i] - mean[ci]) * inv_std[ci];
                xhat[i] = xh;
                out[i] = gamma.data()[ci] * xh + beta.data()[ci];
            }
        }
    }
    let saved = Saved::BatchNorm {
        xhat,
        inv_std,
        mean,
        var,
    };
    Ok((Tensor::from_parts(x.shape().to_vec(), out), saved))
}

/// Gradient w.r.t. `part` given the gradient w.r.t. its broadcast result.
fn unbroadcast(grad: &[f64], full: &[usize], part: &[usize], scale: impl Fn(usize) -> f64) -> Vec<f64> {
    let n: usize = part.iter().product();
    let mut out = vec![0.0; n];
    if full == part {
        for (i, (o, &g)) in out.iter_mut().zip(grad).enumerate() {
            *o = g * scale(i);
        }
    } else {
        let offs = kernels::broadcast_offsets(full, part);
        for (i, (&o, &g)) in offs.iter().zip(grad).enumerate() {
            out[o] += g * scale(i);
        }
    }
    out
}

/// Vector-Jacobian product. Returns one entry per input; `None` where the
/// input does not need a gradient.
pub(crate) fn backward(
    op: &Op,
    inputs: &[&Tensor],
    out: &Tensor,
    saved: &Saved,
    grad: &[f64],
    needs: &[bool],
) -> Vec<Option<Vec<f64>>> {
    let mut res: Vec<Option<Vec<f64>>> = vec![None; inputs.len()];
    let x = inputs[0];
    let map1 = |f: &dyn Fn(usize) -> f64| -> Vec<f64> { grad.iter().enumerate().map(|(i, &g)| g * f(i)).collect() };

    match op {
        Op::Add | Op::Sub | Op::Mul | Op::Div => {
            let (a, b) = (inputs[0], inputs[1]);
            let full = out.shape();
            let (oa, ob) = if a.shape() == b.shape() {
                (None, None)
            } else {
                (
                    Some(kernels::broadcast_offsets(full, a.shape())),
                    Some(kernels::broadcast_offsets(full, b.shape())),
                )
            };
            let ai = |i: usize| oa.as_ref().map_or(i, |o| o[i]);
            let bi = |i: usize| ob.as_ref().map_or(i, |o| o[i]);
            let (ad, bd) = (a.data(), b.data());
            if needs[0] {
                res[0] = Some(match op {
                    Op::Add | Op::Sub => unbroadcast(grad, full, a.shape(), |_| 1.0),
                    Op::Mul => unbroadcast(grad, full, a.shape(), |i| bd[bi(i)]),
                    _ => unbroadcast(grad, full, a.shape(), |i| 1.0 / bd[bi(i)]),
                });
            }
            if needs[1] {
                res[1] = Some(match op {
                    Op::Add => unbroadcast(grad, full, b.shape(), |_| 1.0),
                    Op::Sub => unbroadcast(grad, full, b.shape(), |_| -1.0),
                    Op::Mul => unbroadcast(grad, full, b.shape(), |i| ad[ai(i)]),
                    _ => unbroadcast(grad, full, b.shape(), |i| {
                        let q = bd[bi(i)];
                        -ad[ai(i)] / (q * q)
                    }),
                });
            }
        }
        Op::ScalarMul(s) => res[0] = Some(map1(&|_| *s)),
        Op::AddScalar(_) | Op::Reshape { .. } => res[0] = Some(grad.to_vec()),
        Op::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            if needs[0] {
                let mut ga = vec![0.0; m * k];
                kernels::gemm(m, n, k, grad, false, b.data(), true, 0.0, &mut ga);
                res[0] = Some(ga);
            }
            if needs[1] {
                let mut gb = vec![0.0; k * n];
                kernels::gemm(k, m, n, a.data(), true, grad, false, 0.0, &mut gb);
                res[1] = Some(gb);
            }
        }
        Op::BatchMatMul { trans_b } => {
            let (a, b) = (inputs[0], inputs[1]);
            let (bs, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
            let n = out.shape()[2];
            let mut ga = needs[0].then(|| vec![0.0; bs * m * k]);
            let mut gb = needs[1].then(|| vec![0.0; bs * k * n]);
            for i in 0..bs {
                let g = &grad[i * m * n..(i + 1) * m * n];
                let bb = &b.data()[i * k * n..(i + 1) * k * n];
                let aa = &a.data()[i * m * k..(i + 1) * m * k];
                if let Some(ga) = ga.as_mut() {
                    // b stored [k,n] → need g·bᵀ; stored [n,k] → g·b
                    kernels::gemm(m, n, k, g, false, bb, !trans_b, 0.0, &mut ga[i * m * k..(i + 1) * m * k]);
                }
                if let Some(gb) = gb.as_mut() {
                    let dst = &mut gb[i * k * n..(i + 1) * k * n];
                    if *trans_b {
                        kernels::gemm(n, m, k, g, true, aa, false, 0.0, dst);
                    } else {
                        kernels::gemm(k, m, n, aa, true, g, false, 0.0, dst);
                    }
                }
            }
            res[0] = ga;
            res[1] = gb;
        }
        Op::Conv2d { stride, padding } => {
            let (img, w) = (inputs[0], inputs[1]);
            let geom = conv_geom(img.shape(), w.shape(), *stride, *padding).expect("validated in forward");
            let (bs, cout) = (img.shape()[0], w.shape()[0]);
            let kdim = geom.cin * geom.kh * geom.kw;
            let hw_out = geom.ho * geom.wo;
            let in_plane = geom.cin * geom.h * geom.w;
            if needs[1] {
                let Saved::Cols(cols) = saved else {
                    unreachable!("conv2d records columns when its kernel needs a gradient")
                };
                let mut gw = vec![0.0; cout * kdim];
                for b in 0..bs {
                    kernels::gemm(
                        cout,
                        hw_out,
                        kdim,
                        &grad[b * cout * hw_out..(b + 1) * cout * hw_out],
                        false,
                        &cols[b * kdim * hw_out..(b + 1) * kdim * hw_out],
                        true,
                        1.0,
                        &mut gw,
                    );
                }
                res[1] = Some(gw);
            }
            if needs[0] {
                let mut gx = vec![0.0; img.numel()];
                let mut dcols = vec![0.0; kdim * hw_out];
                for b in 0..bs {
                    kernels::gemm(
                        kdim,
                        cout,
                        hw_out,
                        w.data(),
                        true,
                        &grad[b * cout * hw_out..(b + 1) * cout * hw_out],
                        false,
                        0.0,
                        &mut dcols,
                    );
                    kernels::col2im(&geom, &dcols, &mut gx[b * in_plane..(b + 1) * in_plane]);
                }
                res[0] = Some(gx);
            }
        }
        Op::Relu => res[0] = Some(map1(&|i| (x.data()[i] > 0.0) as u8 as f64)),
        Op::Sigmoid => res[0] = Some(map1(&|i| out.data()[i] * (1.0 - out.data()[i]))),
        Op::Softplus => res[0] = Some(map1(&|i| sigmoid(x.data()[i]))),
        Op::Exp => res[0] = Some(map1(&|i| out.data()[i])),
        Op::Ln => res[0] = Some(map1(&|i| 1.0 / x.data()[i])),
        Op::Square => res[0] = Some(map1(&|i| 2.0 * x.data()[i])),
        Op::Sqrt => res[0] = Some(map1(&|i| 0.5 / out.data()[i])),
        Op::SignedSqrt => {
            res[0] = Some(map1(&|i| 0.5 / (x.data()[i].abs() + SIGNED_SQRT_EPS).sqrt()))
        }
        Op::Mean { .. } | Op::Sum { .. } => {
            let scale = if matches!(op, Op::Mean { .. }) {
                out.numel() as f64 / x.numel() as f64
            } else {
                1.0
            };
            let offs = kernels::broadcast_offsets(x.shape(), out.shape());
            res[0] = Some(offs.iter().map(|&o| grad[o] * scale).collect());
        }
        Op::SumAll => res[0] = Some(vec![grad[0]; x.numel()]),
        Op::Max { .. } | Op::Min { .. } => {
            let Saved::ArgIdx(idx) = saved else {
                unreachable!("reductions always record their arg indices")
            };
            let mut gx = vec![0.0; x.numel()];
            for (&i, &g) in idx.iter().zip(grad) {
                gx[i] += g;
            }
            res[0] = Some(gx);
        }
        Op::Softmax => {
            let (rows, n) = rows_last_axis(out);
            let mut gx = vec![0.0; x.numel()];
            for r in 0..rows {
                let y = &out.data()[r * n..(r + 1) * n];
                let g = &grad[r * n..(r + 1) * n];
                let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
                for j in 0..n {
                    gx[r * n + j] = y[j] * (g[j] - dot);
                }
            }
            res[0] = Some(gx);
        }
        Op::LogSoftmax => {
            let (rows, n) = rows_last_axis(out);
            let mut gx = vec![0.0; x.numel()];
            for r in 0..rows {
                let y = &out.data()[r * n..(r + 1) * n];
                let g = &grad[r * n..(r + 1) * n];
                let total: f64 = g.iter().sum();
                for j in 0..n {
                    gx[r * n + j] = g[j] - y[j].exp() * total;
                }
            }
            res[0] = Some(gx);
        }
        Op::BatchNorm2d { train, .. } => {
            let Saved::BatchNorm { xhat, inv_std, .. } = saved else {
                unreachable!("batchnorm always records its normalised input")
            };
            let gamma = inputs[1].data();
            let (b, c) = (x.shape()[0], x.shape()[1]);
            let hw = x.shape()[2] * x.shape()[3];
            let n = (b * hw) as f64;
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            for bi in 0..b {
                for ci in 0..c {
                    let base = (bi * c + ci) * hw;
                    for i in base..base + hw {
                        dgamma[ci] += grad[i] * xhat[i];
                        dbeta[ci] += grad[i];
                    }
                }
            }
            if needs[0] {
                let mut gx = vec![0.0; x.numel()];
                for bi in 0..b {
                    for ci in 0..c {
                        let base = (bi * c + ci) * hw;
                        let k = gamma[ci] * inv_std[ci];
                        for i in base..base + hw {
                            gx[i] = if *train {
                                k * (grad[i] - dbeta[ci] / n - xhat[i] * dgamma[ci] / n)
                            } else {
                                k * grad[i]
                            };
                        }
                    }
                }
                res[0] = Some(gx);
            }
            if needs[1] {
                res[1] = Some(dgamma);
            }
            if needs[2] {
                res[2] = Some(dbeta);
            }
        }
        Op::GlobalAvgPool => {
            let hw = x.shape()[2] * x.shape()[3];
            let inv = 1.0 / hw as f64;
            res[0] = Some((0..x.numel()).map(|i| grad[i / hw] * inv).collect());
        }
        Op::BilinearResize { out_h, out_w } => {
            let (h, w) = (x.shape()[2], x.shape()[3]);
            let rows = kernels::bilinear_taps(0, h, h, *out_h);
            let cols = kernels::bilinear_taps(0, w, w, *out_w);
            let planes = x.shape()[0] * x.shape()[1];
            let mut gx = vec![0.0; x.numel()];
            for p in 0..planes {
                kernels::resample_plane_adjoint(
                    &grad[p * out_h * out_w..(p + 1) * out_h * out_w],
                    w,
                    &rows,
                    &cols,
                    &mut gx[p * h * w..(p + 1) * h * w],
                );
            }
            res[0] = Some(gx);
        }
        Op::Concat { axis } => {
            let outer: usize = x.shape()[..*axis].iter().product();
            let inner: usize = x.shape()[axis + 1..].iter().product();
            let total_axis = out.shape()[*axis];
            let mut offset = 0;
            for (t_i, t) in inputs.iter().enumerate() {
                let chunk = t.shape()[*axis] * inner;
                if needs[t_i] {
                    let mut gt = Vec::with_capacity(t.numel());
                    for o in 0..outer {
                        let base = o * total_axis * inner + offset;
                        gt.extend_from_slice(&grad[base..base + chunk]);
                    }
                    res[t_i] = Some(gt);
                }
                offset += chunk;
            }
        }
        Op::Narrow { axis, start, len } => {
            let outer: usize = x.shape()[..*axis].iter().product();
            let inner: usize = x.shape()[axis + 1..].iter().product();
            let ext = x.shape()[*axis];
            let mut gx = vec![0.0; x.numel()];
            for o in 0..outer {
                let base = (o * ext + start) * inner;
                gx[base..base + len * inner].copy_from_slice(&grad[o * len * inner..(o + 1) * len * inner]);
            }
            res[0] = Some(gx);
        }
        Op::Clamp { lo, hi } => {
            res[0] = Some(map1(&|i| {
                let v = x.data()[i];
                (v >= *lo && v <= *hi) as u8 as f64
            }))
        }
    }
    for (r, &n) in res.iter_mut().zip(needs) {
        if !n {
            *r = None;
        }
    }
    res
}
