use std::collections::HashSet;

use ssmreg::metrics::neg_jacobian_fraction;
use ssmreg::regnet::integrate_svf;
use ssmreg::synthdata::{
    make_dataset, random_svf, read_manifest, render_modality, split_sizes, synth_anatomy, synth_subject,
    AnatomyConfig, DatasetConfig, DeformConfig, ModalityConfig, Split, SynthConfig, MANIFEST_FILE,
};

fn small_anatomy() -> AnatomyConfig {
    AnatomyConfig { dims: [16, 16, 16], ..AnatomyConfig::default() }
}

#[test]
fn anatomy_is_reproducible() {
    let cfg = AnatomyConfig::default();
    assert_eq!(synth_anatomy(&cfg, 9).unwrap(), synth_anatomy(&cfg, 9).unwrap());
    assert_ne!(synth_anatomy(&cfg, 9).unwrap(), synth_anatomy(&cfg, 10).unwrap());
}

#[test]
fn two_classes_give_one_blob_on_background() {
    let lv = synth_anatomy(&AnatomyConfig { num_classes: 2, ..small_anatomy() }, 1).unwrap();
    let counts = lv.class_counts();
    assert_eq!(counts.len(), 2);
    assert!(counts[0] > 0 && counts[1] > 0);
    assert_eq!(lv.labels()[0], 0);
}

#[test]
fn class_fractions_stay_within_bounds() {
    let cfg = AnatomyConfig::default();
    for seed in 0..20 {
        let lv = synth_anatomy(&cfg, seed).unwrap();
        let n = lv.num_voxels() as f64;
        let fractions: Vec<f64> = lv.class_counts().iter().map(|&c| c as f64 / n).collect();
        assert!((fractions[0] - cfg.background_fraction).abs() <= 1.0 / n);
        assert!(fractions.iter().all(|&f| f >= cfg.min_class_fraction), "seed {seed}: {fractions:?}");
    }
}

#[test]
fn noiseless_render_spans_unit_interval_at_transfer_levels() {
    let lv = synth_anatomy(&small_anatomy(), 2).unwrap();
    let cfg = ModalityConfig { noise_sigma: 0.0, bias_amplitude: 0.0, ..ModalityConfig::default() };
    let (ta, _) = cfg.transfers(lv.num_classes()).unwrap();
    let v = render_modality::<f64>(&lv, &ta, &cfg, 0).unwrap();
    let data = v.tensor().data();
    assert_eq!(data.iter().cloned().fold(f64::INFINITY, f64::min), 0.0);
    assert_eq!(data.iter().cloned().fold(f64::NEG_INFINITY, f64::max), 1.0);
    let (lo, hi) = ta.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &t| (a.min(t), b.max(t)));
    for (&x, &l) in data.iter().zip(lv.labels()) {
        assert!((x - (ta[l as usize] - lo) / (hi - lo)).abs() < 1e-12);
    }
}

#[test]
fn modalities_are_anti_correlated_over_foreground() {
    let s = synth_subject::<f64>(&SynthConfig::default(), 3).unwrap();
    let fg: Vec<usize> = (0..s.anatomy.num_voxels()).filter(|&i| s.anatomy.labels()[i] > 0).collect();
    let (a, b) = (s.modality_a.tensor().data(), s.modality_b.tensor().data());
    let mean = |x: &[f64]| fg.iter().map(|&i| x[i]).sum::<f64>() / fg.len() as f64;
    let (ma, mb) = (mean(a), mean(b));
    let cov: f64 = fg.iter().map(|&i| (a[i] - ma) * (b[i] - mb)).sum();
    let va: f64 = fg.iter().map(|&i| (a[i] - ma).powi(2)).sum();
    let vb: f64 = fg.iter().map(|&i| (b[i] - mb).powi(2)).sum();
    assert!(cov / (va * vb).sqrt() < 0.0);
}

#[test]
fn both_modalities_share_the_anatomy() {
    let s = synth_subject::<f32>(&SynthConfig::default(), 4).unwrap();
    let pair = s.clone().into_pair(7).unwrap();
    assert_eq!(pair.fixed_labels, s.anatomy);
    assert_eq!(pair.fixed.tensor(), s.modality_b.tensor());
}

#[test]
fn deformation_reach_stays_near_amplitude() {
    let cfg = DeformConfig::default();
    for seed in 0..20 {
        let v = random_svf::<f64>([24, 24, 24], &cfg, seed).unwrap();
        assert_eq!(v, random_svf::<f64>([24, 24, 24], &cfg, seed).unwrap());
        let u = integrate_svf(&v, cfg.integration_steps).unwrap();
        assert!(u.max_norm() <= 1.1 * cfg.amplitude);
    }
}

#[test]
fn default_deformations_are_fold_free() {
    let cfg = DeformConfig::default();
    for seed in 0..50 {
        let v = random_svf::<f64>([32, 32, 32], &cfg, 1000 + seed).unwrap();
        let u = integrate_svf(&v, cfg.integration_steps).unwrap();
        assert_eq!(neg_jacobian_fraction(&u).unwrap(), 0.0, "seed {seed}");
    }
}

#[test]
fn split_sizes_follow_ratios() {
    assert_eq!(split_sizes(18, [15.0, 1.0, 2.0]).unwrap(), [15, 1, 2]);
}

fn small_dataset(seed: u64) -> DatasetConfig {
    DatasetConfig {
        seed,
        subjects: 6,
        split: [4.0, 1.0, 1.0],
        anatomy: small_anatomy(),
        ..DatasetConfig::default()
    }
}

#[test]
fn dataset_is_a_pure_function_of_config() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = small_dataset(5);
    let ra = make_dataset(&cfg, a.path()).unwrap();
    let rb = make_dataset(&cfg, b.path()).unwrap();
    assert_eq!(ra, rb);
    assert_eq!(read_manifest(&a.path().join(MANIFEST_FILE)).unwrap(), ra);
    for rec in &ra {
        for f in [&rec.moving, &rec.fixed, &rec.moving_labels, &rec.fixed_labels] {
            assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap());
        }
    }
}

#[test]
fn splits_partition_the_subjects() {
    let dir = tempfile::tempdir().unwrap();
    let recs = make_dataset(&small_dataset(6), dir.path()).unwrap();
    let subjects: HashSet<&str> = recs.iter().map(|r| r.subject.as_str()).collect();
    assert_eq!(subjects.len(), recs.len());
    let count = |s: Split| recs.iter().filter(|r| r.split == s).count();
    assert_eq!([count(Split::Train), count(Split::Val), count(Split::Test)], [4, 1, 1]);
}
