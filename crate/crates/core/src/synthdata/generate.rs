use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::neg_jacobian_fraction;
use crate::regnet::{integrate_svf, warp_labels, warp_volume, LabelVolume, VelocityField, Volume, DEFAULT_INTEGRATION_STEPS};
use crate::scalar::{lit, Real};
use crate::tensor::Tensor;

pub const MAX_ANATOMY_RETRIES: usize = 8;
pub const MAX_SVF_RETRIES: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnatomyConfig {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    /// Classes including background.
    pub num_classes: usize,
    pub background_fraction: f64,
    /// Cosine components perturbing the nested shells.
    pub components: usize,
    /// Highest spatial frequency, in cycles per volume.
    pub max_frequency: f64,
    /// Perturbation strength relative to the shell radius.
    pub shape_noise: f64,
    pub min_class_fraction: f64,
}

impl Default for AnatomyConfig {
    fn default() -> Self {
        Self {
            dims: [32, 32, 32],
            spacing: [1.0; 3],
            num_classes: 4,
            background_fraction: 0.45,
            components: 6,
            max_frequency: 2.0,
            shape_noise: 0.25,
            min_class_fraction: 0.03,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModalityConfig {
    /// Base intensity per class for the moving modality; evenly spaced ramp if empty.
    pub transfer_a: Vec<f64>,
    /// Base intensity per class for the fixed modality; reversed foreground ramp if empty.
    pub transfer_b: Vec<f64>,
    pub noise_sigma: f64,
    pub bias_amplitude: f64,
}

impl Default for ModalityConfig {
    fn default() -> Self {
        Self {
            transfer_a: Vec::new(),
            transfer_b: Vec::new(),
            noise_sigma: 0.02,
            bias_amplitude: 0.1,
        }
    }
}

impl ModalityConfig {
    pub fn transfers(&self, k: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        let ramp: Vec<f64> = (0..k).map(|c| c as f64 / (k - 1) as f64).collect();
        let reversed: Vec<f64> = (0..k).map(|c| if c == 0 { 0.0 } else { ramp[k - c] }).collect();
        let pick = |given: &Vec<f64>, fallback: Vec<f64>, field: &str| {
            if given.is_empty() {
                Ok(fallback)
            } else if given.len() != k {
                Err(Error::Config {
                    field: field.into(),
                    message: format!("needs {k} entries, got {}", given.len()),
                })
            } else {
                Ok(given.clone())
            }
        };
        Ok((pick(&self.transfer_a, ramp, "transfer_a")?, pick(&self.transfer_b, reversed, "transfer_b")?))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeformConfig {
    /// Target maximum displacement in voxels.
    pub amplitude: f64,
    pub components: usize,
    pub max_frequency: f64,
    pub integration_steps: usize,
}

impl Default for DeformConfig {
    fn default() -> Self {
        Self {
            amplitude: 4.0,
            components: 4,
            max_frequency: 0.5,
            integration_steps: DEFAULT_INTEGRATION_STEPS,
        }
    }
}

/// Random low-frequency cosine mixture on `dims`, scaled to max |value| = 1.
fn cosine_mixture<R: Rng + ?Sized>(dims: [usize; 3], components: usize, max_frequency: f64, rng: &mut R) -> Vec<f64> {
    let n: usize = dims.iter().product();
    let mut out = vec![0.0; n];
    if components == 0 {
        return out;
    }
    let tau = std::f64::consts::TAU;
    for _ in 0..components {
        let freq: [f64; 3] = std::array::from_fn(|_| rng.random_range(-max_frequency..=max_frequency));
        let phase = rng.random_range(0.0..tau);
        let weight: f64 = StandardNormal.sample(rng);
        let mut v = 0;
        for i in 0..dims[0] {
            for j in 0..dims[1] {
                for k in 0..dims[2] {
                    let arg = tau * (freq[0] * i as f64 / dims[0] as f64 + freq[1] * j as f64 / dims[1] as f64 + freq[2] * k as f64 / dims[2] as f64);
                    out[v] += weight * (arg + phase).cos();
                    v += 1;
                }
            }
        }
    }
    let peak = out.iter().fold(0.0f64, |m, &x| m.max(x.abs()));
    if peak > 0.0 {
        out.iter_mut().for_each(|x| *x /= peak);
    }
    out
}

fn anatomy_attempt(cfg: &AnatomyConfig, rng: &mut ChaCha8Rng) -> Result<LabelVolume> {
    let dims = cfg.dims;
    let n: usize = dims.iter().product();
    let center: [f64; 3] = std::array::from_fn(|a| dims[a] as f64 * (0.5 + rng.random_range(-0.05..0.05)));
    let radius: [f64; 3] = std::array::from_fn(|a| dims[a] as f64 * rng.random_range(0.3..0.42));
    let noise = cosine_mixture(dims, cfg.components, cfg.max_frequency, rng);
    let mut r = Vec::with_capacity(n);
    for i in 0..dims[0] {
        for j in 0..dims[1] {
            for k in 0..dims[2] {
                let p = [i, j, k];
                let d2: f64 = (0..3).map(|a| ((p[a] as f64 + 0.5 - center[a]) / radius[a]).powi(2)).sum();
                r.push(d2.sqrt());
            }
        }
    }
    for (x, e) in r.iter_mut().zip(&noise) {
        *x *= 1.0 + cfg.shape_noise * e;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| r[a].total_cmp(&r[b]).then(a.cmp(&b)));
    // innermost voxels get the highest class, the outermost become background
    let k = cfg.num_classes;
    let fg = ((1.0 - cfg.background_fraction) * n as f64).round() as usize;
    let mut labels = vec![0u16; n];
    for (rank, &v) in order.iter().enumerate().take(fg) {
        let shell = rank * (k - 1) / fg.max(1);
        labels[v] = (k - 1 - shell) as u16;
    }
    LabelVolume::new(dims, labels, k, cfg.spacing)
}

/// Nested, perturbed shells: `K - 1` foreground classes around a background.
pub fn synth_anatomy(cfg: &AnatomyConfig, seed: u64) -> Result<LabelVolume> {
    if cfg.num_classes < 2 {
        return Err(Error::Config { field: "num_classes".into(), message: "must be >= 2".into() });
    }
    if !(0.0..1.0).contains(&cfg.background_fraction) {
        return Err(Error::Config { field: "background_fraction".into(), message: "must lie in [0, 1)".into() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_ANATOMY_RETRIES {
        let lv = anatomy_attempt(cfg, &mut rng)?;
        let n = lv.num_voxels() as f64;
        if lv.class_counts().iter().all(|&c| c as f64 / n >= cfg.min_class_fraction) {
            return Ok(lv);
        }
    }
    Err(Error::Data(format!(
        "no anatomy with every class above {} of the volume after {MAX_ANATOMY_RETRIES} attempts",
        cfg.min_class_fraction
    )))
}

/// Base intensity per class, smooth multiplicative bias, Gaussian noise, then min-max.
pub fn render_modality<T: Real>(labels: &LabelVolume, transfer: &[f64], cfg: &ModalityConfig, seed: u64) -> Result<Volume<T>> {
    if transfer.len() != labels.num_classes() {
        return Err(Error::InvalidArgument(format!(
            "transfer has {} entries for {} classes",
            transfer.len(),
            labels.num_classes()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = labels.dims();
    let bias = if cfg.bias_amplitude > 0.0 {
        cosine_mixture(dims, 3, 1.0, &mut rng)
    } else {
        vec![0.0; labels.num_voxels()]
    };
    let data: Vec<T> = labels
        .labels()
        .iter()
        .zip(&bias)
        .map(|(&l, &b)| {
            let mut x = transfer[l as usize] * (1.0 + cfg.bias_amplitude * b);
            if cfg.noise_sigma > 0.0 {
                let e: f64 = StandardNormal.sample(&mut rng);
                x += cfg.noise_sigma * e;
            }
            lit(x)
        })
        .collect();
    let mut v = Volume::new(Tensor::new(dims.to_vec(), data)?, labels.spacing())?;
    v.min_max_normalize()?;
    Ok(v)
}

/// Smooth random velocity whose integrated displacement is fold-free and
/// bounded by `1.1 · amplitude`; rescaled and retried otherwise.
pub fn random_svf<T: Real>(dims: [usize; 3], cfg: &DeformConfig, seed: u64) -> Result<VelocityField<T>> {
    if !(cfg.amplitude >= 0.0) {
        return Err(Error::Config { field: "amplitude".into(), message: "must be >= 0".into() });
    }
    if cfg.amplitude == 0.0 {
        return Ok(VelocityField::zeros(dims));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(3 * dims.iter().product::<usize>());
    for _ in 0..3 {
        data.extend(cosine_mixture(dims, cfg.components, cfg.max_frequency, &mut rng));
    }
    let base = VelocityField::new(Tensor::<f64>::new(vec![3, dims[0], dims[1], dims[2]], data)?)?;
    let peak = base.max_norm();
    if peak == 0.0 {
        return Ok(VelocityField::zeros(dims));
    }
    let mut scale = cfg.amplitude / peak;
    for _ in 0..MAX_SVF_RETRIES {
        let v = VelocityField::new(base.tensor().scale(scale))?;
        let u = integrate_svf(&v, cfg.integration_steps)?;
        let reach = u.max_norm();
        let folds = dims.iter().all(|&n| n >= 3) && neg_jacobian_fraction(&u)? > 0.0;
        if !folds && reach <= 1.1 * cfg.amplitude {
            return Ok(VelocityField::new(v.tensor().cast())?);
        }
        scale *= if reach > 1.1 * cfg.amplitude { cfg.amplitude / reach } else { 0.8 };
    }
    Err(Error::Data(format!("no fold-free deformation after {MAX_SVF_RETRIES} rescales")))
}

/// One subject: shared anatomy rendered in two modalities, plus the deformation
/// that displaces modality `a`.
#[derive(Clone, Debug)]
pub struct SubjectSample<T> {
    pub anatomy: LabelVolume,
    pub modality_a: Volume<T>,
    pub modality_b: Volume<T>,
    pub velocity: Option<VelocityField<T>>,
}

/// A registration pair: deformed modality `a` (moving) onto modality `b` (fixed).
#[derive(Clone, Debug)]
pub struct RegistrationPair<T> {
    pub moving: Volume<T>,
    pub moving_labels: LabelVolume,
    pub fixed: Volume<T>,
    pub fixed_labels: LabelVolume,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub anatomy: AnatomyConfig,
    pub modality: ModalityConfig,
    pub deformation: DeformConfig,
}

/// Independent per-purpose seeds derived from one subject seed.
fn sub_seed(seed: u64, purpose: u64) -> u64 {
    let mut z = seed ^ purpose.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn synth_subject<T: Real>(cfg: &SynthConfig, seed: u64) -> Result<SubjectSample<T>> {
    let anatomy = synth_anatomy(&cfg.anatomy, sub_seed(seed, 1))?;
    let (ta, tb) = cfg.modality.transfers(cfg.anatomy.num_classes)?;
    let modality_a = render_modality(&anatomy, &ta, &cfg.modality, sub_seed(seed, 2))?;
    let modality_b = render_modality(&anatomy, &tb, &cfg.modality, sub_seed(seed, 3))?;
    let velocity = (cfg.deformation.amplitude > 0.0)
        .then(|| random_svf(anatomy.dims(), &cfg.deformation, sub_seed(seed, 4)))
        .transpose()?;
    Ok(SubjectSample {
        anatomy,
        modality_a,
        modality_b,
        velocity,
    })
}

impl<T: Real> SubjectSample<T> {
    pub fn into_pair(self, integration_steps: usize) -> Result<RegistrationPair<T>> {
        let (moving, moving_labels) = match &self.velocity {
            Some(v) => {
                let u = integrate_svf(v, integration_steps)?;
                let mut m = warp_volume(&self.modality_a, &u)?;
                // restore exact [0, 1] bounds
                m.min_max_normalize()?;
                (m, warp_labels(&self.anatomy, &u)?.0)
            }
            None => (self.modality_a.clone(), self.anatomy.clone()),
        };
        Ok(RegistrationPair {
            moving,
            moving_labels,
            fixed: self.modality_b,
            fixed_labels: self.anatomy,
        })
    }
}
