use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::generate::{synth_subject, AnatomyConfig, DeformConfig, ModalityConfig, RegistrationPair, SynthConfig};
use super::io::{read_labels, read_volume, write_labels, write_volume};
use crate::error::{Error, Result};
use crate::scalar::Real;

pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub seed: u64,
    pub subjects: usize,
    /// Train/val/test proportions.
    pub split: [f64; 3],
    pub anatomy: AnatomyConfig,
    pub modality: ModalityConfig,
    pub deformation: DeformConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            subjects: 25,
            split: [20.0, 2.0, 3.0],
            anatomy: AnatomyConfig::default(),
            modality: ModalityConfig::default(),
            deformation: DeformConfig::default(),
        }
    }
}

impl DatasetConfig {
    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            anatomy: self.anatomy.clone(),
            modality: self.modality.clone(),
            deformation: self.deformation.clone(),
        }
    }
}

/// One line of the manifest; paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub subject: String,
    pub split: Split,
    pub moving: PathBuf,
    pub fixed: PathBuf,
    pub moving_labels: PathBuf,
    pub fixed_labels: PathBuf,
    pub num_classes: usize,
}

/// Largest-remainder rounding of `n · ratio`; every split must be non-empty.
pub fn split_sizes(n: usize, ratios: [f64; 3]) -> Result<[usize; 3]> {
    let total: f64 = ratios.iter().sum();
    if n < 3 || ratios.iter().any(|r| !(*r > 0.0)) {
        return Err(Error::Config {
            field: "split".into(),
            message: format!("need >= 3 subjects and positive ratios, got {n} and {ratios:?}"),
        });
    }
    let exact = ratios.map(|r| n as f64 * r / total);
    let mut sizes = exact.map(|x| x.floor() as usize);
    let mut order = [0, 1, 2];
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())));
    let mut left = n - sizes.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        sizes[i] += 1;
        left -= 1;
    }
    if sizes.contains(&0) {
        return Err(Error::Config {
            field: "split".into(),
            message: format!("{n} subjects at {ratios:?} leave an empty split ({sizes:?})"),
        });
    }
    Ok(sizes)
}

fn subject_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x2545_f491_4f6c_dd1d).wrapping_add((index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(1))
}

/// Generate every subject under `out`, write the manifest, and return its records.
pub fn make_dataset(cfg: &DatasetConfig, out: &Path) -> Result<Vec<ManifestRecord>> {
    let sizes = split_sizes(cfg.subjects, cfg.split)?;
    let mut order: Vec<usize> = (0..cfg.subjects).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let mut split_of = vec![Split::Train; cfg.subjects];
    for (rank, &s) in order.iter().enumerate() {
        split_of[s] = if rank < sizes[0] {
            Split::Train
        } else if rank < sizes[0] + sizes[1] {
            Split::Val
        } else {
            Split::Test
        };
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let synth = cfg.synth();
    let steps = cfg.deformation.integration_steps;
    let records = (0..cfg.subjects)
        .into_par_iter()
        .map(|i| {
            let subject = format!("subject_{i:03}");
            let pair = synth_subject::<f32>(&synth, subject_seed(cfg.seed, i))?.into_pair(steps)?;
            let dir = PathBuf::from(&subject);
            let rec = ManifestRecord {
                subject,
                split: split_of[i],
                moving: dir.join("moving.srvol"),
                fixed: dir.join("fixed.srvol"),
                moving_labels: dir.join("moving_labels.srvol"),
                fixed_labels: dir.join("fixed_labels.srvol"),
                num_classes: cfg.anatomy.num_classes,
            };
            write_volume(&out.join(&rec.moving), &pair.moving)?;
            write_volume(&out.join(&rec.fixed), &pair.fixed)?;
            write_labels(&out.join(&rec.moving_labels), &pair.moving_labels)?;
            write_labels(&out.join(&rec.fixed_labels), &pair.fixed_labels)?;
            Ok(rec)
        })
        .collect::<Result<Vec<_>>>()?;
    let path = out.join(MANIFEST_FILE);
    let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    for r in &records {
        let line = serde_json::to_string(r).expect("manifest record serializes");
        writeln!(f, "{line}").map_err(|e| Error::io(&path, e))?;
    }
    Ok(records)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::format(path, format!("line {}: {e}", n + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

/// Load a manifest entry; `base` is the manifest's directory.
pub fn load_pair<T: Real>(base: &Path, rec: &ManifestRecord) -> Result<RegistrationPair<T>> {
    let moving = read_volume(&base.join(&rec.moving))?.with_id(&rec.subject);
    let fixed = read_volume(&base.join(&rec.fixed))?.with_id(&rec.subject);
    let moving_labels = read_labels(&base.join(&rec.moving_labels), Some(rec.num_classes))?;
    let fixed_labels = read_labels(&base.join(&rec.fixed_labels), Some(rec.num_classes))?;
    if moving.dims() != fixed.dims() || moving_labels.dims() != moving.dims() || fixed_labels.dims() != fixed.dims() {
        return Err(Error::Data(format!("subject {}: volume extents disagree", rec.subject)));
    }
    Ok(RegistrationPair {
        moving,
        moving_labels,
        fixed,
        fixed_labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_rounding() {
        assert_eq!(split_sizes(18, [15.0, 1.0, 2.0]).unwrap(), [15, 1, 2]);
        assert_eq!(split_sizes(180, [150.0, 10.0, 20.0]).unwrap(), [150, 10, 20]);
        assert_eq!(split_sizes(25, [20.0, 2.0, 3.0]).unwrap(), [20, 2, 3]);
        assert!(split_sizes(4, [15.0, 1.0, 2.0]).is_err());
    }
}
