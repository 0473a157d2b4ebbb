//! Built-in primitives: forward evaluation and closed-form vector-Jacobian products.

use std::sync::Arc;

use super::conv::{conv3d_backward, conv3d_forward, conv3d_output_extent};
use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Debug, Clone)]
pub enum Primitive<T> {
    Add,
    Sub,
    Mul,
    Scale(T),
    AddScalar(T),
    AddBroadcast { axis: usize },
    MulBroadcast { axis: usize },
    /// `[m, k] @ [k, n]`
    MatMul,
    /// Causal depthwise convolution over the sequence: `x [B, L, E]`, `w [E, K]`.
    Conv1dDepthwise,
    /// `x [C_in, H, W, D]`, `w [C_out, C_in, k, k, k]`, zero padding.
    Conv3d { stride: usize, pad: usize },
    /// `[C, H, W, D] -> [C, fH, fW, fD]`
    UpsampleNearest { factor: usize },
    Silu,
    Sigmoid,
    Softplus,
    Exp,
    Log,
    Square,
    /// Over the last axis: `x [..., C]`, `gamma [C]`, `beta [C]`.
    LayerNorm { eps: T },
    Sum,
    Mean,
    Concat { axis: usize },
    Slice { axis: usize, start: usize, len: usize },
    Reshape(Vec<usize>),
    Permute(Vec<usize>),
    /// Over the last axis.
    Softmax,
    /// `x / sqrt(|x|^2 + eps)` over the last axis.
    L2Normalize { eps: T },
    IndexSelect { axis: usize, indices: Arc<[usize]> },
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Real>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn same_shape<T: Real>(op: &str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn arity<T>(op: &str, inputs: &[&Tensor<T>], n: usize) -> Result<()> {
    if inputs.len() != n {
        return Err(Error::shape(op, format!("expected {n} inputs, got {}", inputs.len())));
    }
    Ok(())
}

/// `(outer, extent, inner)` split of `shape` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn unary<T: Real>(x: &Tensor<T>, f: impl Fn(T) -> T) -> Tensor<T> {
    x.map(f)
}

fn matmul_dims<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<(usize, usize, usize)> {
    if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::shape("matmul", format!("{:?} @ {:?}", a.shape(), b.shape())));
    }
    Ok((a.shape()[0], a.shape()[1], b.shape()[1]))
}

impl<T: Real> Primitive<T> {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Scale(_) => "scale",
            Primitive::AddScalar(_) => "add_scalar",
            Primitive::AddBroadcast { .. } => "add_broadcast",
            Primitive::MulBroadcast { .. } => "mul_broadcast",
            Primitive::MatMul => "matmul",
            Primitive::Conv1dDepthwise => "conv1d_depthwise",
            Primitive::Conv3d { .. } => "conv3d",
            Primitive::UpsampleNearest { .. } => "upsample_nearest",
            Primitive::Silu => "silu",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Softplus => "softplus",
            Primitive::Exp => "exp",
            Primitive::Log => "log",
            Primitive::Square => "square",
            Primitive::LayerNorm { .. } => "layer_norm",
            Primitive::Sum => "sum",
            Primitive::Mean => "mean",
            Primitive::Concat { .. } => "concat",
            Primitive::Slice { .. } => "slice",
            Primitive::Reshape(_) => "reshape",
            Primitive::Permute(_) => "permute",
            Primitive::Softmax => "softmax",
            Primitive::L2Normalize { .. } => "l2_normalize",
            Primitive::IndexSelect { .. } => "index_select",
        }
    }

    pub fn eval(&self, inputs: &[&Tensor<T>]) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        let name = self.name();
        let out = match self {
            Primitive::Add | Primitive::Sub | Primitive::Mul => {
                arity(name, inputs, 2)?;
                same_shape(name, inputs[0], inputs[1])?;
                let f = match self {
                    Primitive::Add => |a: T, b: T| a + b,
                    Primitive::Sub => |a: T, b: T| a - b,
                    _ => |a: T, b: T| a * b,
                };
                inputs[0].zip_map(inputs[1], f)?
            }
            Primitive::Scale(s) => {
                arity(name, inputs, 1)?;
                inputs[0].scale(*s)
            }
            Primitive::AddScalar(s) => {
                arity(name, inputs, 1)?;
                inputs[0].map(|x| x + *s)
            }
            Primitive::AddBroadcast { axis } | Primitive::MulBroadcast { axis } => {
                arity(name, inputs, 2)?;
                let (x, b) = (inputs[0], inputs[1]);
                if *axis >= x.ndim() || b.numel() != x.shape()[*axis] {
                    return Err(Error::shape(
                        name,
                        format!("{:?} along axis {axis} of {:?}", b.shape(), x.shape()),
                    ));
                }
                let (outer, n, inner) = split_axis(x.shape(), *axis);
                let add = matches!(self, Primitive::AddBroadcast { .. });
                let mut out = x.clone();
                let bd = b.data();
                for (chunk_i, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
                    let bv = bd[chunk_i % n];
                    for v in chunk {
                        if add {
                            *v += bv;
                        } else {
                            *v *= bv;
                        }
                    }
                }
                debug_assert_eq!(outer * n * inner, x.numel());
                out
            }
            Primitive::MatMul => {
                arity(name, inputs, 2)?;
                let (m, k, n) = matmul_dims(inputs[0], inputs[1])?;
                let mut out = vec![T::zero(); m * n];
                T::gemm(m, k, n, T::one(), inputs[0].data(), k as isize, 1, inputs[1].data(), n as isize, 1, T::zero(), &mut out, n as isize, 1);
                Tensor::new(vec![m, n], out)?
            }
            Primitive::Conv1dDepthwise => {
                arity(name, inputs, 2)?;
                let (x, w) = (inputs[0], inputs[1]);
                if x.ndim() != 3 || w.ndim() != 2 || w.shape()[0] != x.shape()[2] {
                    return Err(Error::shape(name, format!("x {:?}, w {:?}", x.shape(), w.shape())));
                }
                let (bsz, l, e) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let k = w.shape()[1];
                let (xd, wd) = (x.data(), w.data());
                let mut out = vec![T::zero(); x.numel()];
                for b in 0..bsz {
                    for t in 0..l {
                        let o = &mut out[(b * l + t) * e..(b * l + t + 1) * e];
                        for j in 0..k {
                            // tap j reads position t - (k - 1) + j
                            let Some(s) = (t + j).checked_sub(k - 1) else { continue };
                            let xs = &xd[(b * l + s) * e..(b * l + s + 1) * e];
                            for c in 0..e {
                                o[c] += wd[c * k + j] * xs[c];
                            }
                        }
                    }
                }
                Tensor::new(x.shape().to_vec(), out)?
            }
            Primitive::Conv3d { stride, pad } => {
                arity(name, inputs, 2)?;
                let (x, w) = (inputs[0], inputs[1]);
                let ws = w.shape();
                let ok = x.ndim() == 4
                    && ws.len() == 5
                    && ws[1] == x.shape()[0]
                    && ws[2] == ws[3]
                    && ws[3] == ws[4]
                    && x.shape()[1..]
                        .iter()
                        .all(|&n| conv3d_output_extent(n, ws[2], *stride, *pad).is_some());
                if !ok {
                    return Err(Error::shape(name, format!("x {:?}, w {:?}", x.shape(), ws)));
                }
                let (data, o) = conv3d_forward(x.data(), x.shape(), w.data(), ws[0], ws[2], *stride, *pad);
                Tensor::new(vec![ws[0], o[0], o[1], o[2]], data)?
            }
            Primitive::UpsampleNearest { factor } => {
                arity(name, inputs, 1)?;
                let x = inputs[0];
                if x.ndim() != 4 || *factor == 0 {
                    return Err(Error::shape(name, format!("{:?}", x.shape())));
                }
                let f = *factor;
                let [c, h, w, d] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
                let (oh, ow, od) = (h * f, w * f, d * f);
                let xd = x.data();
                let mut out = Vec::with_capacity(c * oh * ow * od);
                for ci in 0..c {
                    for i in 0..oh {
                        for j in 0..ow {
                            let row = ((ci * h + i / f) * w + j / f) * d;
                            for k in 0..od {
                                out.push(xd[row + k / f]);
                            }
                        }
                    }
                }
                Tensor::new(vec![c, oh, ow, od], out)?
            }
            Primitive::Silu => unary(inputs[0], |x| x * sigmoid(x)),
            Primitive::Sigmoid => unary(inputs[0], sigmoid),
            Primitive::Softplus => unary(inputs[0], softplus),
            Primitive::Exp => unary(inputs[0], T::exp),
            Primitive::Log => unary(inputs[0], T::ln),
            Primitive::Square => unary(inputs[0], |x| x * x),
            Primitive::LayerNorm { eps } => {
                arity(name, inputs, 3)?;
                let (x, gamma, beta) = (inputs[0], inputs[1], inputs[2]);
                let c = *x.shape().last().unwrap();
                if gamma.numel() != c || beta.numel() != c {
                    return Err(Error::shape(name, format!("x {:?}, gamma {:?}", x.shape(), gamma.shape())));
                }
                let rows = x.numel() / c;
                let cn = T::from_usize(c).unwrap();
                let mut out = vec![T::zero(); x.numel()];
                let mut stats = vec![T::zero(); 2 * rows];
                for r in 0..rows {
                    let xr = &x.data()[r * c..(r + 1) * c];
                    let mean = xr.iter().copied().sum::<T>() / cn;
                    let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cn;
                    let rstd = T::one() / (var + *eps).sqrt();
                    for i in 0..c {
                        out[r * c + i] = (xr[i] - mean) * rstd * gamma.data()[i] + beta.data()[i];
                    }
                    stats[2 * r] = mean;
                    stats[2 * r + 1] = rstd;
                }
                return Ok((
                    Tensor::new(x.shape().to_vec(), out)?,
                    vec![Tensor::new(vec![rows, 2], stats)?],
                ));
            }
            Primitive::Sum => Tensor::scalar(inputs[0].sum()),
            Primitive::Mean => Tensor::scalar(inputs[0].sum() / T::from_usize(inputs[0].numel()).unwrap()),
            Primitive::Concat { axis } => {
                if inputs.is_empty() {
                    return Err(Error::shape(name, "no inputs"));
                }
                let first = inputs[0].shape();
                if *axis >= first.len() {
                    return Err(Error::shape(name, format!("axis {axis} of {first:?}")));
                }
                for t in inputs {
                    let s = t.shape();
                    let ok = s.len() == first.len()
                        && s.iter().zip(first).enumerate().all(|(i, (a, b))| i == *axis || a == b);
                    if !ok {
                        return Err(Error::shape(name, format!("{first:?} vs {s:?} along axis {axis}")));
                    }
                }
                let (outer, _, inner) = split_axis(first, *axis);
                let total: usize = inputs.iter().map(|t| t.shape()[*axis]).sum();
                let mut out = Vec::with_capacity(outer * total * inner);
                for o in 0..outer {
                    for t in inputs {
                        let n = t.shape()[*axis] * inner;
                        out.extend_from_slice(&t.data()[o * n..(o + 1) * n]);
                    }
                }
                let mut shape = first.to_vec();
                shape[*axis] = total;
                Tensor::new(shape, out)?
            }
            Primitive::Slice { axis, start, len } => {
                let x = inputs[0];
                if *axis >= x.ndim() || *len == 0 || start + len > x.shape()[*axis] {
                    return Err(Error::shape(name, format!("[{start}, +{len}) on axis {axis} of {:?}", x.shape())));
                }
                let (outer, n, inner) = split_axis(x.shape(), *axis);
                let mut out = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    let base = (o * n + start) * inner;
                    out.extend_from_slice(&x.data()[base..base + len * inner]);
                }
                let mut shape = x.shape().to_vec();
                shape[*axis] = *len;
                Tensor::new(shape, out)?
            }
            Primitive::Reshape(shape) => inputs[0].reshape(shape.clone())?,
            Primitive::Permute(axes) => inputs[0].permute(axes)?,
            Primitive::Softmax => {
                let x = inputs[0];
                let c = *x.shape().last().unwrap();
                let mut out = x.clone();
                for row in out.data_mut().chunks_mut(c) {
                    let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
                    let mut z = T::zero();
                    for v in row.iter_mut() {
                        *v = (*v - m).exp();
                        z += *v;
                    }
                    for v in row.iter_mut() {
                        *v /= z;
                    }
                }
                out
            }
            Primitive::L2Normalize { eps } => {
                let x = inputs[0];
                let c = *x.shape().last().unwrap();
                let mut out = x.clone();
                for row in out.data_mut().chunks_mut(c) {
                    let n = (row.iter().map(|&v| v * v).sum::<T>() + *eps).sqrt();
                    for v in row.iter_mut() {
                        *v /= n;
                    }
                }
                out
            }
            Primitive::IndexSelect { axis, indices } => {
                let x = inputs[0];
                if *axis >= x.ndim() || indices.is_empty() || indices.iter().any(|&i| i >= x.shape()[*axis]) {
                    return Err(Error::shape(name, format!("indices out of range for axis {axis} of {:?}", x.shape())));
                }
                let (outer, n, inner) = split_axis(x.shape(), *axis);
                let mut out = Vec::with_capacity(outer * indices.len() * inner);
                for o in 0..outer {
                    for &i in indices.iter() {
                        let base = (o * n + i) * inner;
                        out.extend_from_slice(&x.data()[base..base + inner]);
                    }
                }
                let mut shape = x.shape().to_vec();
                shape[*axis] = indices.len();
                Tensor::new(shape, out)?
            }
        };
        Ok((out, Vec::new()))
    }

    pub fn vjp(
        &self,
        inputs: &[&Tensor<T>],
        out: &Tensor<T>,
        saved: &[Tensor<T>],
        g: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let want = |i: usize| needs.get(i).copied().unwrap_or(false);
        let grads = match self {
            Primitive::Add => vec![Some(g.clone()), Some(g.clone())],
            Primitive::Sub => vec![Some(g.clone()), want(1).then(|| g.scale(-T::one()))],
            Primitive::Mul => vec![
                want(0).then(|| g.zip_map(inputs[1], |a, b| a * b)).transpose()?,
                want(1).then(|| g.zip_map(inputs[0], |a, b| a * b)).transpose()?,
            ],
            Primitive::Scale(s) => vec![Some(g.scale(*s))],
            Primitive::AddScalar(_) => vec![Some(g.clone())],
            Primitive::AddBroadcast { axis } | Primitive::MulBroadcast { axis } => {
                let (x, b) = (inputs[0], inputs[1]);
                let (_, n, inner) = split_axis(x.shape(), *axis);
                let add = matches!(self, Primitive::AddBroadcast { .. });
                let mut gb = vec![T::zero(); n];
                let mut gx = g.clone();
                for (ci, (gchunk, xchunk)) in gx
                    .data_mut()
                    .chunks_mut(inner)
                    .zip(x.data().chunks(inner))
                    .enumerate()
                {
                    let k = ci % n;
                    if add {
                        gb[k] += gchunk.iter().copied().sum::<T>();
                    } else {
                        let bv = b.data()[k];
                        for (gv, &xv) in gchunk.iter_mut().zip(xchunk) {
                            gb[k] += *gv * xv;
                            *gv *= bv;
                        }
                    }
                }
                vec![Some(gx), Some(Tensor::new(b.shape().to_vec(), gb)?)]
            }
            Primitive::MatMul => {
                let (a, b) = (inputs[0], inputs[1]);
                let (m, k, n) = matmul_dims(a, b)?;
                let ga = want(0).then(|| {
                    let mut ga = vec![T::zero(); m * k];
                    // g[m, n] @ b^T[n, k]
                    T::gemm(m, n, k, T::one(), g.data(), n as isize, 1, b.data(), 1, n as isize, T::zero(), &mut ga, k as isize, 1);
                    Tensor::new(vec![m, k], ga)
                });
                let gb = want(1).then(|| {
                    let mut gb = vec![T::zero(); k * n];
                    // a^T[k, m] @ g[m, n]
                    T::gemm(k, m, n, T::one(), a.data(), 1, k as isize, g.data(), n as isize, 1, T::zero(), &mut gb, n as isize, 1);
                    Tensor::new(vec![k, n], gb)
                });
                vec![ga.transpose()?, gb.transpose()?]
            }
            Primitive::Conv1dDepthwise => {
                let (x, w) = (inputs[0], inputs[1]);
                let (bsz, l, e) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let k = w.shape()[1];
                let (xd, wd, gd) = (x.data(), w.data(), g.data());
                let mut gx = vec![T::zero(); x.numel()];
                let mut gw = vec![T::zero(); w.numel()];
                for b in 0..bsz {
                    for t in 0..l {
                        let go = &gd[(b * l + t) * e..(b * l + t + 1) * e];
                        for j in 0..k {
                            let Some(s) = (t + j).checked_sub(k - 1) else { continue };
                            let base = (b * l + s) * e;
                            for c in 0..e {
                                gx[base + c] += wd[c * k + j] * go[c];
                                gw[c * k + j] += go[c] * xd[base + c];
                            }
                        }
                    }
                }
                vec![
                    Some(Tensor::new(x.shape().to_vec(), gx)?),
                    Some(Tensor::new(w.shape().to_vec(), gw)?),
                ]
            }
            Primitive::Conv3d { stride, pad } => {
                let (x, w) = (inputs[0], inputs[1]);
                let ws = w.shape();
                let (gx, gw) = conv3d_backward(
                    x.data(),
                    x.shape(),
                    w.data(),
                    ws[0],
                    ws[2],
                    *stride,
                    *pad,
                    g.data(),
                    want(0),
                    want(1),
                );
                vec![
                    gx.map(|d| Tensor::new(x.shape().to_vec(), d)).transpose()?,
                    gw.map(|d| Tensor::new(ws.to_vec(), d)).transpose()?,
                ]
            }
            Primitive::UpsampleNearest { factor } => {
                let x = inputs[0];
                let f = *factor;
                let [c, h, w, d] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
                let (oh, ow, od) = (h * f, w * f, d * f);
                let mut gx = vec![T::zero(); x.numel()];
                let gd = g.data();
                let mut idx = 0;
                for ci in 0..c {
                    for i in 0..oh {
                        for j in 0..ow {
                            let row = ((ci * h + i / f) * w + j / f) * d;
                            for k in 0..od {
                                gx[row + k / f] += gd[idx];
                                idx += 1;
                            }
                        }
                    }
                }
                vec![Some(Tensor::new(x.shape().to_vec(), gx)?)]
            }
            Primitive::Silu => vec![Some(g.zip_map(inputs[0], |gv, x| {
                let s = sigmoid(x);
                gv * s * (T::one() + x * (T::one() - s))
            })?)],
            Primitive::Sigmoid => vec![Some(g.zip_map(out, |gv, y| gv * y * (T::one() - y))?)],
            Primitive::Softplus => vec![Some(g.zip_map(inputs[0], |gv, x| gv * sigmoid(x))?)],
            Primitive::Exp => vec![Some(g.zip_map(out, |gv, y| gv * y)?)],
            Primitive::Log => vec![Some(g.zip_map(inputs[0], |gv, x| gv / x)?)],
            Primitive::Square => vec![Some(g.zip_map(inputs[0], |gv, x| gv * (x + x))?)],
            Primitive::LayerNorm { .. } => {
                let (x, gamma) = (inputs[0], inputs[1]);
                let c = gamma.numel();
                let rows = x.numel() / c;
                let cn = T::from_usize(c).unwrap();
                let stats = saved[0].data();
                let mut gx = vec![T::zero(); x.numel()];
                let mut gg = vec![T::zero(); c];
                let mut gbeta = vec![T::zero(); c];
                let mut xhat = vec![T::zero(); c];
                let mut gxhat = vec![T::zero(); c];
                for r in 0..rows {
                    let (mean, rstd) = (stats[2 * r], stats[2 * r + 1]);
                    let xr = &x.data()[r * c..(r + 1) * c];
                    let gr = &g.data()[r * c..(r + 1) * c];
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for i in 0..c {
                        xhat[i] = (xr[i] - mean) * rstd;
                        gxhat[i] = gr[i] * gamma.data()[i];
                        gg[i] += gr[i] * xhat[i];
                        gbeta[i] += gr[i];
                        m1 += gxhat[i];
                        m2 += gxhat[i] * xhat[i];
                    }
                    m1 /= cn;
                    m2 /= cn;
                    for i in 0..c {
                        gx[r * c + i] = rstd * (gxhat[i] - m1 - xhat[i] * m2);
                    }
                }
                vec![
                    Some(Tensor::new(x.shape().to_vec(), gx)?),
                    Some(Tensor::new(gamma.shape().to_vec(), gg)?),
                    Some(Tensor::new(inputs[2].shape().to_vec(), gbeta)?),
                ]
            }
            Primitive::Sum => vec![Some(Tensor::full(inputs[0].shape().to_vec(), g.item()))],
            Primitive::Mean => {
                let n = T::from_usize(inputs[0].numel()).unwrap();
                vec![Some(Tensor::full(inputs[0].shape().to_vec(), g.item() / n))]
            }
            Primitive::Concat { axis } => {
                let (outer, _, inner) = split_axis(out.shape(), *axis);
                let total = out.shape()[*axis];
                let mut offset = 0;
                let mut grads = Vec::with_capacity(inputs.len());
                for (i, t) in inputs.iter().enumerate() {
                    let n = t.shape()[*axis];
                    if want(i) {
                        let mut d = Vec::with_capacity(t.numel());
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            d.extend_from_slice(&g.data()[base..base + n * inner]);
                        }
                        grads.push(Some(Tensor::new(t.shape().to_vec(), d)?));
                    } else {
                        grads.push(None);
                    }
                    offset += n;
                }
                grads
            }
            Primitive::Slice { axis, start, len } => {
                let x = inputs[0];
                let (outer, n, inner) = split_axis(x.shape(), *axis);
                let mut gx = vec![T::zero(); x.numel()];
                for o in 0..outer {
                    let base = (o * n + start) * inner;
                    gx[base..base + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(Tensor::new(x.shape().to_vec(), gx)?)]
            }
            Primitive::Reshape(_) => vec![Some(g.reshape(inputs[0].shape().to_vec())?)],
            Primitive::Permute(axes) => {
                let mut inv = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inv[a] = i;
                }
                vec![Some(g.permute(&inv)?)]
            }
            Primitive::Softmax => {
                let c = *out.shape().last().unwrap();
                let mut gx = g.clone();
                for (grow, yrow) in gx.data_mut().chunks_mut(c).zip(out.data().chunks(c)) {
                    let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                    for (gv, &y) in grow.iter_mut().zip(yrow) {
                        *gv = y * (*gv - dot);
                    }
                }
                vec![Some(gx)]
            }
            Primitive::L2Normalize { eps } => {
                let x = inputs[0];
                let c = *x.shape().last().unwrap();
                let mut gx = g.clone();
                for ((grow, yrow), xrow) in gx
                    .data_mut()
                    .chunks_mut(c)
                    .zip(out.data().chunks(c))
                    .zip(x.data().chunks(c))
                {
                    let n = (xrow.iter().map(|&v| v * v).sum::<T>() + *eps).sqrt();
                    let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                    for (gv, &y) in grow.iter_mut().zip(yrow) {
                        *gv = (*gv - y * dot) / n;
                    }
                }
                vec![Some(gx)]
            }
            Primitive::IndexSelect { axis, indices } => {
                let x = inputs[0];
                let (outer, n, inner) = split_axis(x.shape(), *axis);
                let mut gx = vec![T::zero(); x.numel()];
                let gd = g.data();
                let mut src = 0;
                for o in 0..outer {
                    for &i in indices.iter() {
                        let base = (o * n + i) * inner;
                        for (dst, &v) in gx[base..base + inner].iter_mut().zip(&gd[src..src + inner]) {
                            *dst += v;
                        }
                        src += inner;
                    }
                }
                vec![Some(Tensor::new(x.shape().to_vec(), gx)?)]
            }
        };
        Ok(grads)
    }
}
