//! Evaluation metrics: foreground Dice, HD95, folding percentage, parameter count.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::regnet::{DisplacementField, LabelVolume};
use crate::scalar::Real;
use crate::tensor::ParamStore;

fn check_pair(a: &LabelVolume, b: &LabelVolume) -> Result<()> {
    if a.dims() != b.dims() || a.num_classes() != b.num_classes() {
        return Err(Error::shape(
            "metrics",
            format!("{:?}/K={} vs {:?}/K={}", a.dims(), a.num_classes(), b.dims(), b.num_classes()),
        ));
    }
    Ok(())
}

/// Per-class Dice in percent (`None` for background and classes absent from both).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiceScore {
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

pub fn dice_score(a: &LabelVolume, b: &LabelVolume) -> Result<DiceScore> {
    check_pair(a, b)?;
    let k = a.num_classes();
    let mut inter = vec![0usize; k];
    let mut ca = vec![0usize; k];
    let mut cb = vec![0usize; k];
    for (&x, &y) in a.labels().iter().zip(b.labels()) {
        ca[x as usize] += 1;
        cb[y as usize] += 1;
        if x == y {
            inter[x as usize] += 1;
        }
    }
    let per_class: Vec<Option<f64>> = (0..k)
        .map(|c| {
            (c > 0 && ca[c] + cb[c] > 0).then(|| 100.0 * 2.0 * inter[c] as f64 / (ca[c] + cb[c]) as f64)
        })
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::Data("no foreground class in either volume".into()));
    }
    let mean = present.iter().sum::<f64>() / present.len() as f64;
    Ok(DiceScore { per_class, mean })
}

/// Foreground voxels with a background face neighbour or on the volume border.
pub fn boundary_mask(mask: &[bool], dims: [usize; 3]) -> Vec<bool> {
    let [h, w, d] = dims;
    let at = |i: usize, j: usize, k: usize| mask[(i * w + j) * d + k];
    let mut out = vec![false; mask.len()];
    for i in 0..h {
        for j in 0..w {
            for k in 0..d {
                if !at(i, j, k) {
                    continue;
                }
                let border = i == 0 || j == 0 || k == 0 || i + 1 == h || j + 1 == w || k + 1 == d;
                out[(i * w + j) * d + k] = border
                    || !at(i - 1, j, k)
                    || !at(i + 1, j, k)
                    || !at(i, j - 1, k)
                    || !at(i, j + 1, k)
                    || !at(i, j, k - 1)
                    || !at(i, j, k + 1);
            }
        }
    }
    out
}

/// Exact 1D squared distance transform (lower envelope of parabolas) at sample spacing `s`.
fn edt_1d(f: &mut [f64], s: f64, v: &mut Vec<usize>, z: &mut Vec<f64>, out: &mut Vec<f64>) {
    let n = f.len();
    v.clear();
    z.clear();
    let pos = |i: usize| i as f64 * s;
    for q in 0..n {
        if f[q].is_infinite() {
            continue;
        }
        let pq = pos(q);
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&r) => {
                    let pr = pos(r);
                    let x = ((f[q] + pq * pq) - (f[r] + pr * pr)) / (2.0 * (pq - pr));
                    if x <= *z.last().unwrap() {
                        v.pop();
                        z.pop();
                    } else {
                        v.push(q);
                        z.push(x);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        return;
    }
    out.clear();
    let mut k = 0;
    for q in 0..n {
        let pq = pos(q);
        while k + 1 < v.len() && z[k + 1] < pq {
            k += 1;
        }
        let dv = pq - pos(v[k]);
        out.push(dv * dv + f[v[k]]);
    }
    f.copy_from_slice(out);
}

/// Euclidean distance (mm) from every voxel to the nearest `true` voxel.
pub fn distance_transform(seeds: &[bool], dims: [usize; 3], spacing: [f64; 3]) -> Vec<f64> {
    let mut f: Vec<f64> = seeds.iter().map(|&s| if s { 0.0 } else { f64::INFINITY }).collect();
    let strides = [dims[1] * dims[2], dims[2], 1];
    let (mut v, mut z, mut out) = (Vec::new(), Vec::new(), Vec::new());
    let mut line = Vec::new();
    for axis in 0..3 {
        let n = dims[axis];
        let others: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
        for a in 0..dims[others[0]] {
            for b in 0..dims[others[1]] {
                let base = a * strides[others[0]] + b * strides[others[1]];
                line.clear();
                line.extend((0..n).map(|i| f[base + i * strides[axis]]));
                edt_1d(&mut line, spacing[axis], &mut v, &mut z, &mut out);
                for (i, &x) in line.iter().enumerate() {
                    f[base + i * strides[axis]] = x;
                }
            }
        }
    }
    f.into_iter().map(f64::sqrt).collect()
}

/// Linear-interpolated percentile, `q ∈ [0, 100]`.
pub fn percentile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    values[lo] + (values[hi] - values[lo]) * (pos - lo as f64)
}

/// Max of the two directed 95th percentiles of boundary-to-boundary distances (mm).
pub fn hd95(a: &[bool], b: &[bool], dims: [usize; 3], spacing: [f64; 3]) -> Result<f64> {
    let n: usize = dims.iter().product();
    if a.len() != n || b.len() != n {
        return Err(Error::shape("hd95", format!("masks of {} and {} voxels on {dims:?}", a.len(), b.len())));
    }
    if !a.iter().any(|&x| x) || !b.iter().any(|&x| x) {
        return Err(Error::Data("hd95 of an empty mask".into()));
    }
    let (ba, bb) = (boundary_mask(a, dims), boundary_mask(b, dims));
    let directed = |from: &[bool], to: &[bool]| {
        let dt = distance_transform(to, dims, spacing);
        let mut d: Vec<f64> = from.iter().zip(&dt).filter(|(&f, _)| f).map(|(_, &x)| x).collect();
        percentile(&mut d, 95.0)
    };
    Ok(directed(&ba, &bb).max(directed(&bb, &ba)))
}

/// HD95 per class (`None` for background or when either mask is empty).
pub fn hd95_per_class(a: &LabelVolume, b: &LabelVolume) -> Result<Vec<Option<f64>>> {
    check_pair(a, b)?;
    (0..a.num_classes())
        .map(|c| {
            if c == 0 {
                return Ok(None);
            }
            let (ma, mb) = (a.mask(c as u16), b.mask(c as u16));
            if !ma.iter().any(|&x| x) || !mb.iter().any(|&x| x) {
                return Ok(None);
            }
            hd95(&ma, &mb, a.dims(), a.spacing()).map(Some)
        })
        .collect()
}

/// Percentage of interior voxels where `det ∇(x + u) ≤ 0` (central differences).
pub fn neg_jacobian_fraction<T: Real>(u: &DisplacementField<T>) -> Result<f64> {
    let [h, w, d] = u.dims();
    if h < 3 || w < 3 || d < 3 {
        return Err(Error::shape("neg_jacobian", format!("extents {:?} must be >= 3", u.dims())));
    }
    let n = h * w * d;
    let x = u.tensor().data();
    let strides = [w * d, d, 1];
    let mut bad = 0usize;
    for i in 1..h - 1 {
        for j in 1..w - 1 {
            for k in 1..d - 1 {
                let v = i * strides[0] + j * strides[1] + k;
                let mut jac = [[0.0f64; 3]; 3];
                for (c, row) in jac.iter_mut().enumerate() {
                    for (a, e) in row.iter_mut().enumerate() {
                        let hi = x[c * n + v + strides[a]].to_f64().unwrap();
                        let lo = x[c * n + v - strides[a]].to_f64().unwrap();
                        *e = 0.5 * (hi - lo) + if a == c { 1.0 } else { 0.0 };
                    }
                }
                if det3(&jac) <= 0.0 {
                    bad += 1;
                }
            }
        }
    }
    Ok(100.0 * bad as f64 / ((h - 2) * (w - 2) * (d - 2)) as f64)
}

pub fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

pub fn count_params<T: Real>(params: &ParamStore<T>) -> usize {
    params.num_elements()
}

/// Metrics of one registered pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub pair: String,
    pub dice_mean_pct: f64,
    pub dice_per_class: Vec<Option<f64>>,
    /// Mean over classes present in both volumes; `None` if there are none.
    pub hd95_mm: Option<f64>,
    pub hd95_per_class: Vec<Option<f64>>,
    pub neg_jac_pct: f64,
    pub param_count: usize,
    pub wall_time_s: f64,
}

impl MetricReport {
    pub fn compute<T: Real>(
        pair: impl Into<String>,
        warped: &LabelVolume,
        fixed: &LabelVolume,
        field: &DisplacementField<T>,
        param_count: usize,
        wall_time_s: f64,
    ) -> Result<Self> {
        let dice = dice_score(warped, fixed)?;
        let hd = hd95_per_class(warped, fixed)?;
        let present: Vec<f64> = hd.iter().flatten().copied().collect();
        Ok(Self {
            pair: pair.into(),
            dice_mean_pct: dice.mean,
            dice_per_class: dice.per_class,
            hd95_mm: (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64),
            hd95_per_class: hd,
            neg_jac_pct: neg_jacobian_fraction(field)?,
            param_count,
            wall_time_s,
        })
    }
}

/// Mean and population standard deviation; `None` for an empty slice.
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

/// Summary over pairs in table-column order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub pairs: usize,
    pub dice_mean: f64,
    pub dice_std: f64,
    pub hd95_mean: Option<f64>,
    pub hd95_std: Option<f64>,
    pub neg_jac_mean: f64,
    pub neg_jac_std: f64,
    pub param_count: usize,
    pub wall_time_mean_s: f64,
}

pub fn summarize(reports: &[MetricReport]) -> Option<MetricSummary> {
    let col = |f: fn(&MetricReport) -> f64| mean_std(&reports.iter().map(f).collect::<Vec<_>>());
    let (dice_mean, dice_std) = col(|r| r.dice_mean_pct)?;
    let (neg_jac_mean, neg_jac_std) = col(|r| r.neg_jac_pct)?;
    let (wall_time_mean_s, _) = col(|r| r.wall_time_s)?;
    let hd = mean_std(&reports.iter().filter_map(|r| r.hd95_mm).collect::<Vec<_>>());
    Some(MetricSummary {
        pairs: reports.len(),
        dice_mean,
        dice_std,
        hd95_mean: hd.map(|x| x.0),
        hd95_std: hd.map(|x| x.1),
        neg_jac_mean,
        neg_jac_std,
        param_count: reports[0].param_count,
        wall_time_mean_s,
    })
}

/// Human-readable table: one row per pair, then `mean±std`.
pub fn format_table(reports: &[MetricReport]) -> String {
    let mut s = format!(
        "{:<24} {:>14} {:>14} {:>12} {:>10} {:>9}\n",
        "pair", "Dice (%)", "HD95 (mm)", "|J|<=0 (%)", "Param.", "time (s)"
    );
    let hd = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.3}"));
    for r in reports {
        s += &format!(
            "{:<24} {:>14.2} {:>14} {:>12.4} {:>10} {:>9.3}\n",
            r.pair,
            r.dice_mean_pct,
            hd(r.hd95_mm),
            r.neg_jac_pct,
            r.param_count,
            r.wall_time_s
        );
    }
    if let Some(m) = summarize(reports) {
        let hd_cell = match (m.hd95_mean, m.hd95_std) {
            (Some(a), Some(b)) => format!("{a:.3}±{b:.3}"),
            _ => "-".into(),
        };
        s += &format!(
            "{:<24} {:>14} {:>14} {:>12} {:>10} {:>9.3}\n",
            "mean±std",
            format!("{:.2}±{:.2}", m.dice_mean, m.dice_std),
            hd_cell,
            format!("{:.4}±{:.4}", m.neg_jac_mean, m.neg_jac_std),
            m.param_count,
            m.wall_time_mean_s
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cube(dims: [usize; 3], lo: [usize; 3], side: usize) -> Vec<bool> {
        let mut m = vec![false; dims.iter().product()];
        for i in lo[0]..lo[0] + side {
            for j in lo[1]..lo[1] + side {
                for k in lo[2]..lo[2] + side {
                    m[(i * dims[1] + j) * dims[2] + k] = true;
                }
            }
        }
        m
    }

    #[test]
    fn shifted_cube() {
        let dims = [12, 12, 12];
        let a = cube(dims, [3, 3, 3], 4);
        let b = cube(dims, [5, 3, 3], 4);
        assert_eq!(hd95(&a, &b, dims, [1.0; 3]).unwrap(), 2.0);
        assert_eq!(hd95(&a, &b, dims, [2.0; 3]).unwrap(), 4.0);
        assert_eq!(hd95(&a, &a, dims, [1.0; 3]).unwrap(), 0.0);
    }

    #[test]
    fn dice_half_overlap_percent() {
        let mut a = vec![0u16; 27];
        let mut b = vec![0u16; 27];
        a[..4].fill(1);
        b[2..6].fill(1);
        let a = LabelVolume::new([3, 3, 3], a, 2, [1.0; 3]).unwrap();
        let b = LabelVolume::new([3, 3, 3], b, 2, [1.0; 3]).unwrap();
        assert_eq!(dice_score(&a, &b).unwrap().mean, 50.0);
    }

    #[test]
    fn mirrored_map_folds_everywhere() {
        let u = crate::tensor::Tensor::from_fn(vec![3, 5, 5, 5], |i| if i[0] == 0 { -2.0 * i[1] as f64 } else { 0.0 });
        assert_eq!(neg_jacobian_fraction(&DisplacementField::new(u).unwrap()).unwrap(), 100.0);
        assert_eq!(neg_jacobian_fraction(&DisplacementField::<f64>::zeros([4, 4, 4])).unwrap(), 0.0);
    }

    #[test]
    fn percentile_interpolates() {
        let mut v = vec![4.0, 1.0, 3.0, 2.0];
        assert!((percentile(&mut v, 95.0) - 3.85).abs() < 1e-12);
    }

    #[test]
    fn mean_std_three_pairs() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(m, 2.0);
        assert!((s - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }
}
