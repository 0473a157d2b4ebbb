//! Training objectives: segmentation Dice, displacement smoothness,
//! supervised contrastive loss on sampled voxel features, and the
//! projection that resolves conflicting gradients.

use std::sync::Arc;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::regnet::{warp_node, LabelVolume};
use crate::scalar::{lit, Real};
use crate::tensor::{Function, Graph, NodeId, Tensor};

pub const DICE_EPS: f64 = 1e-5;
const NORMALIZE_EPS: f64 = 1e-12;

/// How contrastive samples from the two volumes are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastivePooling {
    /// One loss over samples pooled from both volumes (cross-volume positives).
    #[default]
    Joint,
    /// Separate loss per volume, averaged.
    PerVolume,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_c: f64,
    pub lambda_s: f64,
    pub temperature: f64,
    /// Voxels sampled per volume for the contrastive term.
    pub samples: usize,
    pub pooling: ContrastivePooling,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_c: 0.001,
            lambda_s: 0.1,
            temperature: 0.07,
            samples: 256,
            pooling: ContrastivePooling::Joint,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: &str| Err(Error::Config { field: field.into(), message: message.into() });
        if !(self.lambda_c >= 0.0) {
            return bad("lambda_c", "must be >= 0");
        }
        if !(self.lambda_s >= 0.0) {
            return bad("lambda_s", "must be >= 0");
        }
        if !(self.temperature > 0.0) {
            return bad("temperature", "must be > 0");
        }
        if self.samples < 2 {
            return bad("samples", "must be >= 2");
        }
        Ok(())
    }
}

fn dice_terms<T: Real>(p: &Tensor<T>, q: &Tensor<T>) -> Result<(Vec<T>, Vec<T>)> {
    if p.shape() != q.shape() || p.ndim() < 2 {
        return Err(Error::shape("dice_loss", format!("{:?} vs {:?}", p.shape(), q.shape())));
    }
    let k = p.shape()[0];
    if k < 2 {
        return Err(Error::shape("dice_loss", "need at least one foreground class"));
    }
    let n = p.numel() / k;
    let mut inter = vec![T::zero(); k];
    let mut total = vec![T::zero(); k];
    for c in 1..k {
        let (pc, qc) = (&p.data()[c * n..(c + 1) * n], &q.data()[c * n..(c + 1) * n]);
        for (&a, &b) in pc.iter().zip(qc) {
            inter[c] += a * b;
            total[c] += a + b;
        }
    }
    Ok((inter, total))
}

/// `1 − mean_{k≥1} (2Σpq + ε)/(Σp + Σq + ε)` over `[K, ...]` channel maps.
pub fn dice_loss_value<T: Real>(p: &Tensor<T>, q: &Tensor<T>) -> Result<T> {
    let (inter, total) = dice_terms(p, q)?;
    let eps = lit::<T>(DICE_EPS);
    let two = lit::<T>(2.0);
    let k = inter.len();
    let mean = (1..k).map(|c| (two * inter[c] + eps) / (total[c] + eps)).sum::<T>() / T::from_usize(k - 1).unwrap();
    Ok(T::one() - mean)
}

#[derive(Clone, Copy, Debug, Default)]
pub struct DiceLossOp;

impl<T: Real> Function<T> for DiceLossOp {
    fn name(&self) -> &str {
        "dice_loss"
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        Ok((Tensor::scalar(dice_loss_value(inputs[0], inputs[1])?), Vec::new()))
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        _saved: &[Tensor<T>],
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (p, q) = (inputs[0], inputs[1]);
        let (inter, total) = dice_terms(p, q)?;
        let k = p.shape()[0];
        let n = p.numel() / k;
        let eps = lit::<T>(DICE_EPS);
        let two = lit::<T>(2.0);
        let scale = -grad.item() / T::from_usize(k - 1).unwrap();
        let side = |other: &Tensor<T>| {
            let mut out = Tensor::zeros(p.shape().to_vec());
            for c in 1..k {
                let den = total[c] + eps;
                let num = two * inter[c] + eps;
                let shift = num / (den * den);
                let o = &other.data()[c * n..(c + 1) * n];
                for (g, &b) in out.data_mut()[c * n..(c + 1) * n].iter_mut().zip(o) {
                    *g = scale * (two * b / den - shift);
                }
            }
            out
        };
        Ok(vec![needs[0].then(|| side(q)), needs[1].then(|| side(p))])
    }
}

pub fn dice_loss<T: Real>(g: &mut Graph<T>, warped: NodeId, fixed: NodeId) -> Result<NodeId> {
    g.custom(Arc::new(DiceLossOp), &[warped, fixed])
}

fn check_field<T: Real>(u: &Tensor<T>) -> Result<[usize; 3]> {
    if u.ndim() != 4 || u.shape()[0] != 3 {
        return Err(Error::shape("smooth_loss", format!("expected [3, H, W, D], got {:?}", u.shape())));
    }
    Ok([u.shape()[1], u.shape()[2], u.shape()[3]])
}

/// Visit every forward difference along `axis`: `f(lo_index, hi_index, weight)`
/// where `weight` is the normalisation of that axis's mean.
fn for_each_difference<T: Real>(dims: [usize; 3], mut f: impl FnMut(usize, usize, T)) {
    let [h, w, d] = dims;
    let n = h * w * d;
    let active: Vec<usize> = (0..3).filter(|&a| dims[a] > 1).collect();
    if active.is_empty() {
        return;
    }
    let strides = [w * d, d, 1];
    for &a in &active {
        let count = 3 * n / dims[a] * (dims[a] - 1);
        let weight = T::one() / T::from_usize(count * active.len()).unwrap();
        for c in 0..3 {
            for i in 0..h {
                for j in 0..w {
                    for k in 0..d {
                        if [i, j, k][a] + 1 >= dims[a] {
                            continue;
                        }
                        let lo = c * n + i * strides[0] + j * strides[1] + k;
                        f(lo, lo + strides[a], weight);
                    }
                }
            }
        }
    }
}

/// Mean over axes of the mean squared forward difference (all components).
pub fn smooth_loss_value<T: Real>(u: &Tensor<T>) -> Result<T> {
    let dims = check_field(u)?;
    let x = u.data();
    let mut acc = T::zero();
    for_each_difference::<T>(dims, |lo, hi, w| {
        let diff = x[hi] - x[lo];
        acc += w * diff * diff;
    });
    Ok(acc)
}

#[derive(Clone, Copy, Debug, Default)]
pub struct SmoothLossOp;

impl<T: Real> Function<T> for SmoothLossOp {
    fn name(&self) -> &str {
        "smooth_loss"
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        Ok((Tensor::scalar(smooth_loss_value(inputs[0])?), Vec::new()))
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        _saved: &[Tensor<T>],
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        if !needs[0] {
            return Ok(vec![None]);
        }
        let u = inputs[0];
        let dims = check_field(u)?;
        let x = u.data();
        let two = lit::<T>(2.0) * grad.item();
        let mut gu = Tensor::zeros(u.shape().to_vec());
        let gd = gu.data_mut();
        for_each_difference::<T>(dims, |lo, hi, w| {
            let t = two * w * (x[hi] - x[lo]);
            gd[hi] += t;
            gd[lo] -= t;
        });
        Ok(vec![Some(gu)])
    }
}

pub fn smooth_loss<T: Real>(g: &mut Graph<T>, u: NodeId) -> Result<NodeId> {
    g.custom(Arc::new(SmoothLossOp), &[u])
}

/// Softmax statistics of each anchor row: `(valid, positives, logsumexp)`.
fn supcon_rows<T: Real>(z: &Tensor<T>, labels: &[u16], tau: T) -> Result<(Vec<T>, Vec<bool>, Vec<usize>, Vec<T>)> {
    if z.ndim() != 2 || z.shape()[0] != labels.len() {
        return Err(Error::shape("supcon_loss", format!("features {:?}, {} labels", z.shape(), labels.len())));
    }
    let (m, f) = (z.shape()[0], z.shape()[1]);
    if m < 2 {
        return Err(Error::InvalidArgument("supcon_loss needs at least 2 samples".into()));
    }
    let zd = z.data();
    let mut sim = vec![T::zero(); m * m];
    T::gemm(m, f, m, T::one() / tau, zd, f as isize, 1, zd, 1, f as isize, T::zero(), &mut sim, m as isize, 1);
    let mut valid = vec![false; m];
    let mut npos = vec![0; m];
    let mut lse = vec![T::zero(); m];
    for i in 0..m {
        npos[i] = (0..m).filter(|&j| j != i && labels[j] == labels[i]).count();
        valid[i] = npos[i] > 0;
        let row = &sim[i * m..(i + 1) * m];
        let mx = (0..m).filter(|&j| j != i).map(|j| row[j]).fold(T::neg_infinity(), T::max);
        let s: T = (0..m).filter(|&j| j != i).map(|j| (row[j] - mx).exp()).sum();
        lse[i] = mx + s.ln();
    }
    if !valid.iter().any(|&v| v) {
        return Err(Error::InvalidArgument("supcon_loss: no anchor has a positive".into()));
    }
    Ok((sim, valid, npos, lse))
}

/// Supervised contrastive loss over `[M, F]` unit features.
pub fn supcon_loss_value<T: Real>(z: &Tensor<T>, labels: &[u16], tau: T) -> Result<T> {
    let (sim, valid, npos, lse) = supcon_rows(z, labels, tau)?;
    let m = labels.len();
    let mut total = T::zero();
    let mut anchors = 0;
    for i in (0..m).filter(|&i| valid[i]) {
        let pos: T = (0..m)
            .filter(|&j| j != i && labels[j] == labels[i])
            .map(|j| sim[i * m + j] - lse[i])
            .sum();
        total -= pos / T::from_usize(npos[i]).unwrap();
        anchors += 1;
    }
    Ok(total / T::from_usize(anchors).unwrap())
}

#[derive(Clone, Debug)]
pub struct SupConOp<T> {
    pub labels: Arc<[u16]>,
    pub temperature: T,
}

impl<T: Real> Function<T> for SupConOp<T> {
    fn name(&self) -> &str {
        "supcon_loss"
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        Ok((Tensor::scalar(supcon_loss_value(inputs[0], &self.labels, self.temperature)?), Vec::new()))
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        _saved: &[Tensor<T>],
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        if !needs[0] {
            return Ok(vec![None]);
        }
        let z = inputs[0];
        let labels = &self.labels;
        let (sim, valid, npos, lse) = supcon_rows(z, labels, self.temperature)?;
        let (m, f) = (z.shape()[0], z.shape()[1]);
        let anchors = valid.iter().filter(|&&v| v).count();
        let scale = grad.item() / T::from_usize(anchors).unwrap();
        // dL/dsim
        let mut gs = vec![T::zero(); m * m];
        for i in (0..m).filter(|&i| valid[i]) {
            let inv_pos = T::one() / T::from_usize(npos[i]).unwrap();
            for j in (0..m).filter(|&j| j != i) {
                let soft = (sim[i * m + j] - lse[i]).exp();
                let target = if labels[j] == labels[i] { inv_pos } else { T::zero() };
                gs[i * m + j] = scale * (soft - target);
            }
        }
        // sim = Z Zᵀ/τ  ⇒  dZ = (G + Gᵀ) Z / τ
        let mut sym = vec![T::zero(); m * m];
        for i in 0..m {
            for j in 0..m {
                sym[i * m + j] = gs[i * m + j] + gs[j * m + i];
            }
        }
        let mut gz = vec![T::zero(); m * f];
        let zd = z.data();
        T::gemm(
            m,
            m,
            f,
            T::one() / self.temperature,
            &sym,
            m as isize,
            1,
            zd,
            f as isize,
            1,
            T::zero(),
            &mut gz,
            f as isize,
            1,
        );
        Ok(vec![Some(Tensor::new(z.shape().to_vec(), gz)?)])
    }
}

pub fn supcon_loss<T: Real>(g: &mut Graph<T>, z: NodeId, labels: &[u16], temperature: T) -> Result<NodeId> {
    g.custom(
        Arc::new(SupConOp {
            labels: labels.into(),
            temperature,
        }),
        &[z],
    )
}

/// Class-stratified voxel sample without replacement: equal quotas per present
/// class, remainder and any shortfall given to the largest classes.
/// Returns flat voxel indices and their labels.
pub fn sample_voxel_indices(labels: &LabelVolume, m: usize, seed: u64) -> Result<(Vec<usize>, Vec<u16>)> {
    let n = labels.num_voxels();
    if m > n {
        return Err(Error::InvalidArgument(format!("cannot sample {m} of {n} voxels")));
    }
    let counts = labels.class_counts();
    if counts.iter().skip(1).all(|&c| c == 0) {
        return Err(Error::Data("segmentation has no foreground voxels".into()));
    }
    let mut present: Vec<usize> = (0..counts.len()).filter(|&c| counts[c] > 0).collect();
    // largest first; ties by class id for determinism
    present.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    let mut quota = vec![0usize; counts.len()];
    let mut left = m;
    while left > 0 {
        let open: Vec<usize> = present.iter().copied().filter(|&c| quota[c] < counts[c]).collect();
        let share = left / open.len();
        let mut given = 0;
        for (r, &c) in open.iter().enumerate() {
            let want = share + usize::from(r < left % open.len());
            let take = want.min(counts[c] - quota[c]);
            quota[c] += take;
            given += take;
        }
        left -= given;
    }
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); counts.len()];
    for (i, &l) in labels.labels().iter().enumerate() {
        members[l as usize].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = Vec::with_capacity(m);
    let mut lab = Vec::with_capacity(m);
    for c in 0..counts.len() {
        if quota[c] == 0 {
            continue;
        }
        for k in sample(&mut rng, members[c].len(), quota[c]) {
            idx.push(members[c][k]);
            lab.push(c as u16);
        }
    }
    Ok((idx, lab))
}

/// Gather the sampled voxels of a `[C, H, W, D]` feature map as `[M, C]`
/// L2-normalized rows.
pub fn gather_features<T: Real>(g: &mut Graph<T>, features: NodeId, indices: &[usize]) -> Result<NodeId> {
    let s = g.shape(features).to_vec();
    if s.len() != 4 {
        return Err(Error::shape("sample_features", format!("expected [C, H, W, D], got {s:?}")));
    }
    let flat = g.reshape(features, &[s[0], s[1] * s[2] * s[3]])?;
    let picked = g.index_select(flat, 1, indices.to_vec())?;
    let rows = g.permute(picked, &[1, 0])?;
    g.l2_normalize(rows, lit(NORMALIZE_EPS))
}

/// Sample and normalize voxel features; returns the `[M, C]` node and labels.
pub fn sample_labeled_voxels<T: Real>(
    g: &mut Graph<T>,
    features: NodeId,
    labels: &LabelVolume,
    m: usize,
    seed: u64,
) -> Result<(NodeId, Vec<u16>)> {
    let s = g.shape(features);
    if s.len() != 4 || s[1..] != labels.dims() {
        return Err(Error::shape("sample_features", format!("features {s:?} vs labels {:?}", labels.dims())));
    }
    let (idx, lab) = sample_voxel_indices(labels, m, seed)?;
    Ok((gather_features(g, features, &idx)?, lab))
}

/// Project the contrastive gradient off the registration gradient when they
/// conflict. Returns the combined gradient and whether a conflict occurred.
pub fn gradient_surgery<T: Real>(g_reg: &[T], g_cl: &[T]) -> Result<(Vec<T>, bool)> {
    if g_reg.len() != g_cl.len() {
        return Err(Error::shape("gradient_surgery", format!("{} vs {}", g_reg.len(), g_cl.len())));
    }
    let dot: T = g_reg.iter().zip(g_cl).map(|(&a, &b)| a * b).sum();
    let norm2: T = g_reg.iter().map(|&a| a * a).sum();
    let conflict = dot < T::zero();
    let coef = if conflict && norm2 > T::zero() { dot / norm2 } else { T::zero() };
    Ok((g_reg.iter().zip(g_cl).map(|(&r, &c)| r + c - coef * r).collect(), conflict))
}

/// [`gradient_surgery`] over per-parameter gradient lists.
pub fn gradient_surgery_tensors<T: Real>(g_reg: &[Tensor<T>], g_cl: &[Tensor<T>]) -> Result<(Vec<Tensor<T>>, bool)> {
    if g_reg.len() != g_cl.len() || g_reg.iter().zip(g_cl).any(|(a, b)| a.shape() != b.shape()) {
        return Err(Error::shape("gradient_surgery", "gradient lists do not match"));
    }
    let flat = |gs: &[Tensor<T>]| gs.iter().flat_map(|t| t.data().iter().copied()).collect::<Vec<T>>();
    let (combined, conflict) = gradient_surgery(&flat(g_reg), &flat(g_cl))?;
    let mut out = Vec::with_capacity(g_reg.len());
    let mut off = 0;
    for t in g_reg {
        let n = t.numel();
        out.push(Tensor::new(t.shape().to_vec(), combined[off..off + n].to_vec())?);
        off += n;
    }
    Ok((out, conflict))
}

/// Inputs to [`total_loss`]; graph nodes plus label volumes.
pub struct LossInputs<'a> {
    pub moving_labels: &'a LabelVolume,
    pub fixed_labels: &'a LabelVolume,
    /// `[3, H, W, D]` displacement node.
    pub displacement: NodeId,
    pub moving_features: Option<NodeId>,
    pub fixed_features: Option<NodeId>,
    pub sample_seed: u64,
}

/// Nodes of each term. `registration = dice + λ_s·smooth`,
/// `contrastive = λ_c·supcon`, `total = registration + contrastive`.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub dice: NodeId,
    pub smooth: NodeId,
    pub supcon: Option<NodeId>,
    pub registration: NodeId,
    pub contrastive: Option<NodeId>,
    pub total: NodeId,
}

/// Unweighted terms and the weighted total of one evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub dice: f64,
    pub supcon: Option<f64>,
    pub smooth: f64,
    pub total: f64,
}

impl LossNodes {
    pub fn report<T: Real>(&self, g: &Graph<T>) -> LossReport {
        let v = |n: NodeId| g.value(n).item().to_f64().unwrap();
        LossReport {
            dice: v(self.dice),
            supcon: self.supcon.map(v),
            smooth: v(self.smooth),
            total: v(self.total),
        }
    }
}

/// `dice(warp(onehot(s_m), u), onehot(s_f)) + λ_c·supcon + λ_s·smooth(u)`.
/// The contrastive term is built only when `λ_c > 0` and features are given.
pub fn total_loss<T: Real>(g: &mut Graph<T>, inputs: &LossInputs<'_>, weights: &LossWeights) -> Result<LossNodes> {
    weights.validate()?;
    let (sm, sf) = (inputs.moving_labels, inputs.fixed_labels);
    if sm.num_classes() != sf.num_classes() || sm.dims() != sf.dims() {
        return Err(Error::shape(
            "total_loss",
            format!(
                "moving labels {:?}/K={} vs fixed {:?}/K={}",
                sm.dims(),
                sm.num_classes(),
                sf.dims(),
                sf.num_classes()
            ),
        ));
    }
    let onehot_m = g.constant(sm.one_hot());
    let onehot_f = g.constant(sf.one_hot());
    let warped = warp_node(g, onehot_m, inputs.displacement)?;
    let dice = dice_loss(g, warped, onehot_f)?;
    let smooth = smooth_loss(g, inputs.displacement)?;
    let weighted_smooth = g.scale(smooth, lit(weights.lambda_s))?;
    let registration = g.add(dice, weighted_smooth)?;

    let supcon = match (inputs.moving_features, inputs.fixed_features) {
        (Some(fm), Some(ff)) if weights.lambda_c > 0.0 => Some(contrastive_term(g, fm, ff, sm, sf, weights, inputs.sample_seed)?),
        _ => None,
    };
    let (contrastive, total) = match supcon {
        Some(s) => {
            let c = g.scale(s, lit(weights.lambda_c))?;
            (Some(c), g.add(registration, c)?)
        }
        None => (None, registration),
    };
    Ok(LossNodes {
        dice,
        smooth,
        supcon,
        registration,
        contrastive,
        total,
    })
}

fn contrastive_term<T: Real>(
    g: &mut Graph<T>,
    fm: NodeId,
    ff: NodeId,
    sm: &LabelVolume,
    sf: &LabelVolume,
    w: &LossWeights,
    seed: u64,
) -> Result<NodeId> {
    let tau = lit::<T>(w.temperature);
    let (zm, lm) = sample_labeled_voxels(g, fm, sm, w.samples, seed)?;
    let (zf, lf) = sample_labeled_voxels(g, ff, sf, w.samples, seed.wrapping_add(0x9e37_79b9))?;
    match w.pooling {
        ContrastivePooling::Joint => {
            let z = g.concat(&[zm, zf], 0)?;
            let labels: Vec<u16> = lm.into_iter().chain(lf).collect();
            supcon_loss(g, z, &labels, tau)
        }
        ContrastivePooling::PerVolume => {
            let a = supcon_loss(g, zm, &lm, tau)?;
            let b = supcon_loss(g, zf, &lf, tau)?;
            let s = g.add(a, b)?;
            g.scale(s, lit(0.5))
        }
    }
}
