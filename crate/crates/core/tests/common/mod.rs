//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use rand::Rng;
use ssmreg::regnet::LabelVolume;
use ssmreg::Tensor;

pub fn idx(dims: [usize; 3], i: usize, j: usize, k: usize) -> usize {
    (i * dims[1] + j) * dims[2] + k
}

/// Dice per foreground class by set counting; `None` when absent from both.
pub fn dice_oracle(a: &LabelVolume, b: &LabelVolume) -> (Vec<Option<f64>>, f64) {
    let per: Vec<Option<f64>> = (0..a.num_classes())
        .map(|c| {
            if c == 0 {
                return None;
            }
            let sa: Vec<usize> = (0..a.num_voxels()).filter(|&i| a.labels()[i] as usize == c).collect();
            let sb: Vec<usize> = (0..b.num_voxels()).filter(|&i| b.labels()[i] as usize == c).collect();
            if sa.is_empty() && sb.is_empty() {
                return None;
            }
            let both = sa.iter().filter(|i| sb.contains(i)).count();
            Some(100.0 * 2.0 * both as f64 / (sa.len() + sb.len()) as f64)
        })
        .collect();
    let present: Vec<f64> = per.iter().flatten().copied().collect();
    let mean = present.iter().sum::<f64>() / present.len() as f64;
    (per, mean)
}

/// Boundary voxel coordinates: foreground with a background face neighbour or on the border.
pub fn boundary_points(mask: &[bool], dims: [usize; 3]) -> Vec<[usize; 3]> {
    let mut out = Vec::new();
    for i in 0..dims[0] {
        for j in 0..dims[1] {
            for k in 0..dims[2] {
                if !mask[idx(dims, i, j, k)] {
                    continue;
                }
                let p = [i as isize, j as isize, k as isize];
                let mut edge = false;
                for a in 0..3 {
                    for s in [-1isize, 1] {
                        let mut q = p;
                        q[a] += s;
                        let inside = (0..3).all(|b| q[b] >= 0 && q[b] < dims[b] as isize);
                        if !inside || !mask[idx(dims, q[0] as usize, q[1] as usize, q[2] as usize)] {
                            edge = true;
                        }
                    }
                }
                if edge {
                    out.push([i, j, k]);
                }
            }
        }
    }
    out
}

pub fn percentile_oracle(mut v: Vec<f64>, q: f64) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let h = (v.len() - 1) as f64 * q / 100.0;
    let lo = h.floor();
    let w = h - lo;
    let lo = lo as usize;
    let hi = (lo + 1).min(v.len() - 1);
    v[lo] * (1.0 - w) + v[hi] * w
}

/// All pairwise boundary distances, two directed 95th percentiles, max.
pub fn hd95_oracle(a: &[bool], b: &[bool], dims: [usize; 3], spacing: [f64; 3]) -> f64 {
    let (pa, pb) = (boundary_points(a, dims), boundary_points(b, dims));
    let dist = |p: &[usize; 3], q: &[usize; 3]| -> f64 {
        (0..3)
            .map(|x| ((p[x] as f64 - q[x] as f64) * spacing[x]).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let directed = |from: &[[usize; 3]], to: &[[usize; 3]]| {
        let d: Vec<f64> = from
            .iter()
            .map(|p| to.iter().map(|q| dist(p, q)).fold(f64::INFINITY, f64::min))
            .collect();
        percentile_oracle(d, 95.0)
    };
    directed(&pa, &pb).max(directed(&pb, &pa))
}

/// Determinant by the Leibniz permutation sum.
pub fn det_leibniz(m: &[[f64; 3]; 3]) -> f64 {
    const PERMS: [([usize; 3], f64); 6] = [
        ([0, 1, 2], 1.0),
        ([1, 2, 0], 1.0),
        ([2, 0, 1], 1.0),
        ([0, 2, 1], -1.0),
        ([2, 1, 0], -1.0),
        ([1, 0, 2], -1.0),
    ];
    PERMS
        .iter()
        .map(|(p, s)| s * m[0][p[0]] * m[1][p[1]] * m[2][p[2]])
        .sum()
}

/// Percentage of interior voxels with non-positive Jacobian determinant of x + u.
pub fn neg_jac_oracle(u: &Tensor<f64>) -> f64 {
    let dims = [u.shape()[1], u.shape()[2], u.shape()[3]];
    let at = |c: usize, p: [usize; 3]| u.at(&[c, p[0], p[1], p[2]]);
    let mut bad = 0;
    let mut total = 0;
    for i in 1..dims[0] - 1 {
        for j in 1..dims[1] - 1 {
            for k in 1..dims[2] - 1 {
                let p = [i, j, k];
                let mut m = [[0.0; 3]; 3];
                for c in 0..3 {
                    for a in 0..3 {
                        let (mut hi, mut lo) = (p, p);
                        hi[a] += 1;
                        lo[a] -= 1;
                        m[c][a] = (at(c, hi) - at(c, lo)) / 2.0 + f64::from(u8::from(a == c));
                    }
                }
                total += 1;
                if det_leibniz(&m) <= 0.0 {
                    bad += 1;
                }
            }
        }
    }
    100.0 * bad as f64 / total as f64
}

/// Trilinear sample of channel `c` at a real coordinate, clamped to the grid.
pub fn sample_clamped(x: &Tensor<f64>, c: usize, p: [f64; 3]) -> f64 {
    let dims = [x.shape()[1], x.shape()[2], x.shape()[3]];
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    let mut f = [0.0; 3];
    for a in 0..3 {
        let q = p[a].clamp(0.0, (dims[a] - 1) as f64);
        lo[a] = (q.floor() as usize).min(dims[a].saturating_sub(2));
        hi[a] = (lo[a] + 1).min(dims[a] - 1);
        f[a] = q - lo[a] as f64;
    }
    let mut v = 0.0;
    for corner in 0..8 {
        let pick = [(corner >> 2) & 1, (corner >> 1) & 1, corner & 1];
        let mut w = 1.0;
        let mut q = [0; 3];
        for a in 0..3 {
            if pick[a] == 1 {
                w *= f[a];
                q[a] = hi[a];
            } else {
                w *= 1.0 - f[a];
                q[a] = lo[a];
            }
        }
        v += w * x.at(&[c, q[0], q[1], q[2]]);
    }
    v
}

/// Integrate the flow of a stationary field from every grid point with `steps` Euler steps.
pub fn euler_flow(v: &Tensor<f64>, steps: usize) -> Tensor<f64> {
    let dims = [v.shape()[1], v.shape()[2], v.shape()[3]];
    let mut out = Tensor::zeros(vec![3, dims[0], dims[1], dims[2]]);
    let h = 1.0 / steps as f64;
    for i in 0..dims[0] {
        for j in 0..dims[1] {
            for k in 0..dims[2] {
                let start = [i as f64, j as f64, k as f64];
                let mut p = start;
                for _ in 0..steps {
                    let d: [f64; 3] = std::array::from_fn(|c| sample_clamped(v, c, p));
                    for a in 0..3 {
                        p[a] += h * d[a];
                    }
                }
                for c in 0..3 {
                    let n = dims[0] * dims[1] * dims[2];
                    out.data_mut()[c * n + idx(dims, i, j, k)] = p[c] - start[c];
                }
            }
        }
    }
    out
}

/// Smooth random field: a few low-frequency cosines per component, scaled to max vector norm `peak`.
pub fn smooth_field<R: Rng>(dims: [usize; 3], peak: f64, rng: &mut R) -> Tensor<f64> {
    let n = dims[0] * dims[1] * dims[2];
    let mut data = vec![0.0; 3 * n];
    for c in 0..3 {
        for _ in 0..3 {
            let f: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let w = rng.random_range(-1.0..1.0);
            for i in 0..dims[0] {
                for j in 0..dims[1] {
                    for k in 0..dims[2] {
                        let arg = std::f64::consts::TAU
                            * (f[0] * i as f64 / dims[0] as f64 + f[1] * j as f64 / dims[1] as f64 + f[2] * k as f64 / dims[2] as f64);
                        data[c * n + idx(dims, i, j, k)] += w * (arg + phase).cos();
                    }
                }
            }
        }
    }
    let norm = (0..n)
        .map(|i| (data[i].powi(2) + data[n + i].powi(2) + data[2 * n + i].powi(2)).sqrt())
        .fold(0.0, f64::max);
    let s = peak / norm;
    data.iter_mut().for_each(|x| *x *= s);
    Tensor::new(vec![3, dims[0], dims[1], dims[2]], data).unwrap()
}

/// Sequential scan written directly from the recurrence.
pub fn scan_oracle(u: &Tensor<f64>, delta: &Tensor<f64>, a: &Tensor<f64>, b: &Tensor<f64>, c: &Tensor<f64>, d: &Tensor<f64>) -> Tensor<f64> {
    let (bs, len, e) = (u.shape()[0], u.shape()[1], u.shape()[2]);
    let n = a.shape()[1];
    let mut y = Tensor::zeros(vec![bs, len, e]);
    for bi in 0..bs {
        for ch in 0..e {
            let mut h = vec![0.0; n];
            for t in 0..len {
                let dt = delta.at(&[bi, t, ch]);
                let ut = u.at(&[bi, t, ch]);
                let mut acc = d.data()[ch] * ut;
                for s in 0..n {
                    h[s] = (dt * a.at(&[ch, s])).exp() * h[s] + dt * b.at(&[bi, t, s]) * ut;
                    acc += c.at(&[bi, t, s]) * h[s];
                }
                y.data_mut()[(bi * len + t) * e + ch] = acc;
            }
        }
    }
    y
}

/// Random labels in `0..k` with spatial coherence (random boxes painted over background).
pub fn random_labels<R: Rng>(dims: [usize; 3], k: usize, rng: &mut R) -> LabelVolume {
    let mut labels = vec![0u16; dims.iter().product()];
    for _ in 0..6 {
        let c = rng.random_range(1..k) as u16;
        let lo: [usize; 3] = std::array::from_fn(|a| rng.random_range(0..dims[a]));
        let hi: [usize; 3] = std::array::from_fn(|a| rng.random_range(lo[a]..dims[a]) + 1);
        for i in lo[0]..hi[0] {
            for j in lo[1]..hi[1] {
                for kk in lo[2]..hi[2] {
                    labels[idx(dims, i, j, kk)] = c;
                }
            }
        }
    }
    LabelVolume::new(dims, labels, k, [1.0; 3]).unwrap()
}
