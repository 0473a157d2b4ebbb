//! Trilinear resampling through a displacement field (the spatial transformer).
//!
//! `out[c, p] = x[c](p + u(p))`, with sample coordinates clamped to the grid
//! (edge replication). Where a coordinate is clamped its derivative is zero.

use std::sync::Arc;

use super::volume::{DisplacementField, LabelVolume, Volume};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::{Function, Graph, NodeId, Tensor};

/// Interpolation stencil along one axis.
#[derive(Clone, Copy)]
struct Axis<T> {
    i0: usize,
    i1: usize,
    frac: T,
    active: bool,
}

#[inline]
fn axis_stencil<T: Real>(coord: T, n: usize) -> Axis<T> {
    let hi = T::from_usize(n - 1).unwrap();
    if n == 1 {
        return Axis { i0: 0, i1: 0, frac: T::zero(), active: false };
    }
    let (c, active) = if coord < T::zero() {
        (T::zero(), false)
    } else if coord > hi {
        (hi, false)
    } else {
        (coord, true)
    };
    let i0 = c.floor().to_usize().unwrap().min(n - 2);
    Axis {
        i0,
        i1: i0 + 1,
        frac: c - T::from_usize(i0).unwrap(),
        active,
    }
}

fn check_shapes<T: Real>(x: &Tensor<T>, u: &Tensor<T>) -> Result<()> {
    let ok = x.ndim() == 4 && u.ndim() == 4 && u.shape()[0] == 3 && x.shape()[1..] == u.shape()[1..];
    if !ok {
        return Err(Error::shape("warp", format!("x {:?}, u {:?}", x.shape(), u.shape())));
    }
    Ok(())
}

struct Stencil<T> {
    idx: [usize; 8],
    w: [T; 8],
    /// d(weight)/d(coord) per axis
    dw: [[T; 8]; 3],
    active: [bool; 3],
}

#[inline]
fn stencil<T: Real>(dims: [usize; 3], p: [usize; 3], disp: [T; 3]) -> Stencil<T> {
    let ax: [Axis<T>; 3] = std::array::from_fn(|a| axis_stencil(T::from_usize(p[a]).unwrap() + disp[a], dims[a]));
    let one = T::one();
    let mut idx = [0; 8];
    let mut w = [T::zero(); 8];
    let mut dw = [[T::zero(); 8]; 3];
    for corner in 0..8 {
        let bits = [(corner >> 2) & 1, (corner >> 1) & 1, corner & 1];
        let mut f = [T::zero(); 3];
        let mut df = [T::zero(); 3];
        let mut ii = [0; 3];
        for a in 0..3 {
            if bits[a] == 1 {
                ii[a] = ax[a].i1;
                f[a] = ax[a].frac;
                df[a] = one;
            } else {
                ii[a] = ax[a].i0;
                f[a] = one - ax[a].frac;
                df[a] = -one;
            }
        }
        idx[corner] = (ii[0] * dims[1] + ii[1]) * dims[2] + ii[2];
        w[corner] = f[0] * f[1] * f[2];
        dw[0][corner] = df[0] * f[1] * f[2];
        dw[1][corner] = f[0] * df[1] * f[2];
        dw[2][corner] = f[0] * f[1] * df[2];
    }
    Stencil {
        idx,
        w,
        dw,
        active: [ax[0].active, ax[1].active, ax[2].active],
    }
}

/// Resample every channel of `x [C, H, W, D]` through `u [3, H, W, D]`.
pub fn warp_tensor<T: Real>(x: &Tensor<T>, u: &Tensor<T>) -> Result<Tensor<T>> {
    check_shapes(x, u)?;
    let c = x.shape()[0];
    let dims = [x.shape()[1], x.shape()[2], x.shape()[3]];
    let n: usize = dims.iter().product();
    let (xd, ud) = (x.data(), u.data());
    let mut out = vec![T::zero(); c * n];
    let mut v = 0;
    for i in 0..dims[0] {
        for j in 0..dims[1] {
            for k in 0..dims[2] {
                let s = stencil(dims, [i, j, k], [ud[v], ud[n + v], ud[2 * n + v]]);
                for ch in 0..c {
                    let xc = &xd[ch * n..(ch + 1) * n];
                    let mut acc = T::zero();
                    for q in 0..8 {
                        acc += s.w[q] * xc[s.idx[q]];
                    }
                    out[ch * n + v] = acc;
                }
                v += 1;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

fn warp_backward<T: Real>(x: &Tensor<T>, u: &Tensor<T>, g: &Tensor<T>, want_x: bool, want_u: bool) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let c = x.shape()[0];
    let dims = [x.shape()[1], x.shape()[2], x.shape()[3]];
    let n: usize = dims.iter().product();
    let (xd, ud, gd) = (x.data(), u.data(), g.data());
    let mut gx = want_x.then(|| vec![T::zero(); x.numel()]);
    let mut gu = want_u.then(|| vec![T::zero(); u.numel()]);
    let mut v = 0;
    for i in 0..dims[0] {
        for j in 0..dims[1] {
            for k in 0..dims[2] {
                let s = stencil(dims, [i, j, k], [ud[v], ud[n + v], ud[2 * n + v]]);
                for ch in 0..c {
                    let gv = gd[ch * n + v];
                    if let Some(gx) = gx.as_mut() {
                        for q in 0..8 {
                            gx[ch * n + s.idx[q]] += s.w[q] * gv;
                        }
                    }
                    if let Some(gu) = gu.as_mut() {
                        let xc = &xd[ch * n..(ch + 1) * n];
                        for a in 0..3 {
                            if !s.active[a] {
                                continue;
                            }
                            let mut dval = T::zero();
                            for q in 0..8 {
                                dval += s.dw[a][q] * xc[s.idx[q]];
                            }
                            gu[a * n + v] += dval * gv;
                        }
                    }
                }
                v += 1;
            }
        }
    }
    (
        gx.map(|d| Tensor::new(x.shape().to_vec(), d).unwrap()),
        gu.map(|d| Tensor::new(u.shape().to_vec(), d).unwrap()),
    )
}

/// Graph operation for [`warp_tensor`]; inputs `x`, `u`.
#[derive(Clone, Copy, Debug, Default)]
pub struct WarpOp;

impl<T: Real> Function<T> for WarpOp {
    fn name(&self) -> &str {
        "warp"
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        if inputs.len() != 2 {
            return Err(Error::shape("warp", "expected inputs (x, u)"));
        }
        Ok((warp_tensor(inputs[0], inputs[1])?, Vec::new()))
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        _saved: &[Tensor<T>],
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (gx, gu) = warp_backward(inputs[0], inputs[1], grad, needs[0], needs[1]);
        Ok(vec![gx, gu])
    }
}

/// Differentiable warp inside a graph.
pub fn warp_node<T: Real>(g: &mut Graph<T>, x: NodeId, u: NodeId) -> Result<NodeId> {
    g.custom(Arc::new(WarpOp), &[x, u])
}

pub fn warp_volume<T: Real>(x: &Volume<T>, phi: &DisplacementField<T>) -> Result<Volume<T>> {
    if x.dims() != phi.dims() {
        return Err(Error::shape("warp", format!("volume {:?} vs field {:?}", x.dims(), phi.dims())));
    }
    let [h, w, d] = x.dims();
    let out = warp_tensor(&x.as_channels(), phi.tensor())?;
    Volume::new(out.into_reshape(vec![h, w, d])?, x.spacing())
}

/// Warp one-hot channels; returns the hard (argmax) labels and the soft channels.
pub fn warp_labels<T: Real>(labels: &LabelVolume, phi: &DisplacementField<T>) -> Result<(LabelVolume, Tensor<T>)> {
    if labels.dims() != phi.dims() {
        return Err(Error::shape("warp", format!("labels {:?} vs field {:?}", labels.dims(), phi.dims())));
    }
    let soft = warp_tensor(&labels.one_hot::<T>(), phi.tensor())?;
    let hard = LabelVolume::from_soft(&soft, labels.spacing())?;
    Ok((hard, soft))
}
