//! Selective scan: per batch item and channel `e`,
//!
//! ```text
//! h_t = exp(Δ_t[e] A[e]) ⊙ h_{t-1} + Δ_t[e] B_t u_t[e],   h_0 = 0
//! y_t[e] = <C_t, h_t> + D[e] u_t[e]
//! ```
//!
//! Shapes: `u, Δ: [B, L, E]`, `A: [E, N]` (realized, negative), `B_t, C_t: [B, L, N]`, `D: [E]`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::{Function, Tensor};

/// Borrowed, shape-checked operands of one scan.
#[derive(Clone, Copy, Debug)]
pub struct ScanInputs<'a, T> {
    pub u: &'a Tensor<T>,
    pub delta: &'a Tensor<T>,
    pub a: &'a Tensor<T>,
    pub b: &'a Tensor<T>,
    pub c: &'a Tensor<T>,
    pub d: &'a Tensor<T>,
}

#[derive(Clone, Copy, Debug)]
struct Dims {
    batch: usize,
    len: usize,
    chans: usize,
    state: usize,
}

impl<'a, T: Real> ScanInputs<'a, T> {
    fn dims(&self) -> Result<Dims> {
        let us = self.u.shape();
        let bad = |what: &str| Error::shape("selective_scan", what.to_string());
        if us.len() != 3 {
            return Err(bad(&format!("u must be [B, L, E], got {us:?}")));
        }
        let (batch, len, chans) = (us[0], us[1], us[2]);
        if self.delta.shape() != us {
            return Err(bad(&format!("delta {:?} vs u {us:?}", self.delta.shape())));
        }
        let a = self.a.shape();
        if a.len() != 2 || a[0] != chans {
            return Err(bad(&format!("A must be [E, N], got {a:?}")));
        }
        let state = a[1];
        for (name, t) in [("B", self.b), ("C", self.c)] {
            if t.shape() != [batch, len, state] {
                return Err(bad(&format!("{name} must be [{batch}, {len}, {state}], got {:?}", t.shape())));
            }
        }
        if self.d.numel() != chans {
            return Err(bad(&format!("D must have {chans} entries, got {:?}", self.d.shape())));
        }
        if let Some(i) = self.delta.data().iter().position(|&v| !(v > T::zero())) {
            return Err(Error::InvalidArgument(format!(
                "selective_scan requires delta > 0 (timestep {} has {})",
                (i / chans) % len,
                self.delta.data()[i]
            )));
        }
        Ok(Dims {
            batch,
            len,
            chans,
            state,
        })
    }
}

/// Advance `h` by one timestep and return nothing; writes `y_t`.
#[inline]
#[allow(clippy::too_many_arguments)]
fn step<T: Real>(
    h: &mut [T],
    u: &[T],
    delta: &[T],
    a: &[T],
    b: &[T],
    c: &[T],
    d: &[T],
    y: &mut [T],
    n: usize,
) {
    for e in 0..u.len() {
        let (ue, de) = (u[e], delta[e]);
        let du = de * ue;
        let he = &mut h[e * n..(e + 1) * n];
        let ae = &a[e * n..(e + 1) * n];
        let mut acc = d[e] * ue;
        for k in 0..n {
            he[k] = (de * ae[k]).exp() * he[k] + du * b[k];
            acc += c[k] * he[k];
        }
        y[e] = acc;
    }
}

fn check_finite<T: Real>(y: &[T], chans: usize, len: usize) -> Result<()> {
    if let Some(i) = y.iter().position(|v| !v.is_finite()) {
        return Err(Error::ScanNonFinite {
            timestep: (i / chans) % len,
        });
    }
    Ok(())
}

/// Reference sequential recurrence.
pub fn selective_scan<T: Real>(x: ScanInputs<'_, T>) -> Result<Tensor<T>> {
    let dm = x.dims()?;
    let Dims {
        batch,
        len,
        chans,
        state,
    } = dm;
    let mut y = vec![T::zero(); batch * len * chans];
    let mut h = vec![T::zero(); chans * state];
    for bi in 0..batch {
        h.fill(T::zero());
        for t in 0..len {
            let r = (bi * len + t) * chans;
            let s = (bi * len + t) * state;
            step(
                &mut h,
                &x.u.data()[r..r + chans],
                &x.delta.data()[r..r + chans],
                x.a.data(),
                &x.b.data()[s..s + state],
                &x.c.data()[s..s + state],
                x.d.data(),
                &mut y[r..r + chans],
                state,
            );
        }
    }
    check_finite(&y, chans, len)?;
    Tensor::new(x.u.shape().to_vec(), y)
}

/// Sequential recurrence that also returns every hidden state, `[B, L, E, N]`.
pub fn selective_scan_with_states<T: Real>(x: ScanInputs<'_, T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let Dims {
        batch,
        len,
        chans,
        state,
    } = x.dims()?;
    let en = chans * state;
    let mut y = vec![T::zero(); batch * len * chans];
    let mut hs = vec![T::zero(); batch * len * en];
    let mut h = vec![T::zero(); en];
    for bi in 0..batch {
        h.fill(T::zero());
        for t in 0..len {
            let r = (bi * len + t) * chans;
            let s = (bi * len + t) * state;
            step(
                &mut h,
                &x.u.data()[r..r + chans],
                &x.delta.data()[r..r + chans],
                x.a.data(),
                &x.b.data()[s..s + state],
                &x.c.data()[s..s + state],
                x.d.data(),
                &mut y[r..r + chans],
                state,
            );
            hs[(bi * len + t) * en..(bi * len + t + 1) * en].copy_from_slice(&h);
        }
    }
    check_finite(&y, chans, len)?;
    Ok((
        Tensor::new(x.u.shape().to_vec(), y)?,
        Tensor::new(vec![batch, len, chans, state], hs)?,
    ))
}

/// Chunked two-pass evaluation of the same recurrence.
///
/// Each chunk is first reduced to its aggregate transition `(a, b)` with
/// `h_end = a ⊙ h_start + b`; aggregates compose left to right as
/// `(a2 a1, a2 b1 + b2)` to give every chunk's incoming state, and the chunks
/// are then replayed independently. The composition order is fixed, so the
/// result is deterministic for a given `chunk` length.
pub fn selective_scan_parallel<T: Real>(x: ScanInputs<'_, T>, chunk: usize) -> Result<Tensor<T>> {
    if chunk == 0 {
        return Err(Error::InvalidArgument("chunk length must be >= 1".into()));
    }
    let Dims {
        batch,
        len,
        chans,
        state,
    } = x.dims()?;
    let en = chans * state;
    let n_chunks = len.div_ceil(chunk);
    let (ud, dd, ad, bd, cd) = (x.u.data(), x.delta.data(), x.a.data(), x.b.data(), x.c.data());
    let mut y = vec![T::zero(); batch * len * chans];
    for bi in 0..batch {
        // pass 1: per-chunk aggregates from a zero state
        let aggregates: Vec<(Vec<T>, Vec<T>)> = (0..n_chunks)
            .into_par_iter()
            .map(|ci| {
                let mut acc_a = vec![T::one(); en];
                let mut acc_b = vec![T::zero(); en];
                for t in ci * chunk..((ci + 1) * chunk).min(len) {
                    let r = (bi * len + t) * chans;
                    let s = (bi * len + t) * state;
                    for e in 0..chans {
                        let de = dd[r + e];
                        let du = de * ud[r + e];
                        for k in 0..state {
                            let at = (de * ad[e * state + k]).exp();
                            let i = e * state + k;
                            acc_a[i] = at * acc_a[i];
                            acc_b[i] = at * acc_b[i] + du * bd[s + k];
                        }
                    }
                }
                (acc_a, acc_b)
            })
            .collect();
        // pass 2: carry states across chunks
        let mut carries = Vec::with_capacity(n_chunks);
        let mut carry = vec![T::zero(); en];
        for (agg_a, agg_b) in &aggregates {
            carries.push(carry.clone());
            for i in 0..en {
                carry[i] = agg_a[i] * carry[i] + agg_b[i];
            }
        }
        // pass 3: replay each chunk from its incoming state
        let yb = &mut y[bi * len * chans..(bi + 1) * len * chans];
        yb.par_chunks_mut(chunk * chans)
            .zip(carries.into_par_iter())
            .enumerate()
            .for_each(|(ci, (ychunk, mut h))| {
                for (j, yt) in ychunk.chunks_mut(chans).enumerate() {
                    let t = ci * chunk + j;
                    let r = (bi * len + t) * chans;
                    let s = (bi * len + t) * state;
                    step(
                        &mut h,
                        &ud[r..r + chans],
                        &dd[r..r + chans],
                        ad,
                        &bd[s..s + state],
                        &cd[s..s + state],
                        x.d.data(),
                        yt,
                        state,
                    );
                }
            });
    }
    check_finite(&y, chans, len)?;
    Tensor::new(x.u.shape().to_vec(), y)
}

/// Graph operation wrapping the sequential scan with its closed-form adjoint.
///
/// Inputs, in order: `u, delta, A, B, C, D`.
#[derive(Clone, Copy, Debug, Default)]
pub struct SelectiveScanOp;

impl<T: Real> Function<T> for SelectiveScanOp {
    fn name(&self) -> &str {
        "selective_scan"
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        if inputs.len() != 6 {
            return Err(Error::shape("selective_scan", format!("expected 6 inputs, got {}", inputs.len())));
        }
        let (y, hs) = selective_scan_with_states(ScanInputs {
            u: inputs[0],
            delta: inputs[1],
            a: inputs[2],
            b: inputs[3],
            c: inputs[4],
            d: inputs[5],
        })?;
        Ok((y, vec![hs]))
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        saved: &[Tensor<T>],
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (u, delta, a, b, c, d) = (inputs[0], inputs[1], inputs[2], inputs[3], inputs[4], inputs[5]);
        let (batch, len, chans) = (u.shape()[0], u.shape()[1], u.shape()[2]);
        let state = a.shape()[1];
        let en = chans * state;
        let hs = saved[0].data();
        let (ud, dd, ad, bd, cd, dsk, gy) = (u.data(), delta.data(), a.data(), b.data(), c.data(), d.data(), grad.data());
        let mut gu = vec![T::zero(); u.numel()];
        let mut gdelta = vec![T::zero(); delta.numel()];
        let mut ga_total = vec![T::zero(); a.numel()];
        let mut gb = vec![T::zero(); b.numel()];
        let mut gc = vec![T::zero(); c.numel()];
        let mut gd = vec![T::zero(); d.numel()];
        // carry = a_{t+1} ⊙ dL/dh_{t+1}
        let mut carry = vec![T::zero(); en];
        let zeros = vec![T::zero(); en];
        for bi in 0..batch {
            carry.fill(T::zero());
            for t in (0..len).rev() {
                let r = (bi * len + t) * chans;
                let s = (bi * len + t) * state;
                let h_t = &hs[(bi * len + t) * en..(bi * len + t + 1) * en];
                let h_prev = if t == 0 {
                    &zeros[..]
                } else {
                    &hs[(bi * len + t - 1) * en..(bi * len + t) * en]
                };
                for e in 0..chans {
                    let (ue, de, gye) = (ud[r + e], dd[r + e], gy[r + e]);
                    gd[e] += gye * ue;
                    let mut gue = gye * dsk[e];
                    let mut gde = T::zero();
                    for k in 0..state {
                        let i = e * state + k;
                        let gh = carry[i] + cd[s + k] * gye;
                        gc[s + k] += gye * h_t[i];
                        let at = (de * ad[i]).exp();
                        let gat = gh * h_prev[i] * at;
                        gde += gat * ad[i] + gh * bd[s + k] * ue;
                        ga_total[i] += gat * de;
                        gb[s + k] += gh * de * ue;
                        gue += gh * de * bd[s + k];
                        carry[i] = at * gh;
                    }
                    gu[r + e] += gue;
                    gdelta[r + e] += gde;
                }
            }
        }
        Ok(vec![
            Some(Tensor::new(u.shape().to_vec(), gu)?),
            Some(Tensor::new(delta.shape().to_vec(), gdelta)?),
            Some(Tensor::new(a.shape().to_vec(), ga_total)?),
            Some(Tensor::new(b.shape().to_vec(), gb)?),
            Some(Tensor::new(c.shape().to_vec(), gc)?),
            Some(Tensor::new(d.shape().to_vec(), gd)?),
        ])
    }
}
