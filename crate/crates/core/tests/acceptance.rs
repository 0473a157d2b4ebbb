//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any failure.

mod common;

use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ssmreg::metrics::{dice_score, hd95, neg_jacobian_fraction, summarize};
use ssmreg::objectives::{
    dice_loss, smooth_loss, smooth_loss_value, supcon_loss, total_loss, LossInputs, LossWeights,
};
use ssmreg::pipeline::{
    bench_scan, evaluate_pairs, scaling_exponent, train, BenchConfig, ScanOperands, TrainConfig, EQUIVALENCE_TOL,
};
use ssmreg::regnet::{
    gather_cells, integrate_svf, patch_token_count, warp_node, DisplacementField, PatchEmbed,
    PatchMerge, RegNet, RegNetConfig, VelocityField,
};
use ssmreg::ssm::{selective_scan, selective_scan_parallel, SelectiveScanOp};
use ssmreg::synthdata::{load_pair, make_dataset, DatasetConfig, ManifestRecord, RegistrationPair, Split};
use ssmreg::tensor::{finite_difference_check, finite_difference_check_sampled, Primitive};
use ssmreg::{Graph64, NodeId, ParamStore, Tensor};

type Outcome = Result<String, String>;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randn(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape.to_vec(), 1.0, r)
}

/// `sum(op ⊙ r)` for a fixed random `r`, so every output entry contributes.
fn project(g: &mut Graph64, out: NodeId, r: &mut ChaCha8Rng) -> NodeId {
    let w = randn(g.shape(out), r);
    let w = g.constant(w);
    let prod = g.mul(out, w).unwrap();
    g.sum(prod).unwrap()
}

type Case = (&'static str, Box<dyn Fn(&mut Graph64, &mut ChaCha8Rng) -> (Vec<NodeId>, NodeId)>);

fn prim(g: &mut Graph64, p: Primitive<f64>, xs: &[NodeId]) -> NodeId {
    g.apply(p, xs).unwrap()
}

fn leaves(g: &mut Graph64, r: &mut ChaCha8Rng, shapes: &[&[usize]]) -> Vec<NodeId> {
    shapes.iter().map(|s| g.leaf(randn(s, r))).collect()
}

fn unary(p: Primitive<f64>) -> impl Fn(&mut Graph64, &mut ChaCha8Rng) -> (Vec<NodeId>, NodeId) {
    move |g, r| {
        let x = leaves(g, r, &[&[3, 4]]);
        let y = prim(g, p.clone(), &x);
        (x, y)
    }
}

fn binary(p: Primitive<f64>, a: &'static [usize], b: &'static [usize]) -> impl Fn(&mut Graph64, &mut ChaCha8Rng) -> (Vec<NodeId>, NodeId) {
    move |g, r| {
        let x = leaves(g, r, &[a, b]);
        let y = prim(g, p.clone(), &x);
        (x, y)
    }
}

/// Warp displacement whose sample points stay inside the grid and away from integer coordinates,
/// where trilinear interpolation is not differentiable.
fn interior_displacement(dims: [usize; 3], r: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(vec![3, dims[0], dims[1], dims[2]], |i| {
        let pos = i[i[0] + 1] as f64;
        let n = dims[i[0]] as f64;
        let target = r.random_range(0.0..n - 1.0).floor() + r.random_range(0.1..0.9);
        let target = target.min(n - 1.1);
        target.max(0.1) - pos
    })
}

fn primitive_cases() -> Vec<Case> {
    vec![
        ("add", Box::new(binary(Primitive::Add, &[3, 4], &[3, 4]))),
        ("sub", Box::new(binary(Primitive::Sub, &[3, 4], &[3, 4]))),
        ("mul", Box::new(binary(Primitive::Mul, &[3, 4], &[3, 4]))),
        ("scale", Box::new(unary(Primitive::Scale(1.7)))),
        ("add_scalar", Box::new(unary(Primitive::AddScalar(-0.3)))),
        ("add_broadcast", Box::new(binary(Primitive::AddBroadcast { axis: 1 }, &[2, 3, 4], &[3]))),
        ("mul_broadcast", Box::new(binary(Primitive::MulBroadcast { axis: 2 }, &[2, 3, 4], &[4]))),
        ("matmul", Box::new(binary(Primitive::MatMul, &[3, 4], &[4, 5]))),
        ("conv1d_depthwise", Box::new(binary(Primitive::Conv1dDepthwise, &[2, 6, 3], &[3, 4]))),
        ("conv3d", Box::new(binary(Primitive::Conv3d { stride: 1, pad: 1 }, &[2, 4, 4, 4], &[3, 2, 3, 3, 3]))),
        ("conv3d_strided", Box::new(binary(Primitive::Conv3d { stride: 2, pad: 1 }, &[2, 5, 4, 4], &[2, 2, 3, 3, 3]))),
        ("upsample_nearest", Box::new(|g: &mut Graph64, r: &mut ChaCha8Rng| {
            let x = leaves(g, r, &[&[2, 2, 3, 2]]);
            let y = g.upsample_nearest(x[0], 2).unwrap();
            (x, y)
        })),
        ("silu", Box::new(unary(Primitive::Silu))),
        ("sigmoid", Box::new(unary(Primitive::Sigmoid))),
        ("softplus", Box::new(unary(Primitive::Softplus))),
        ("exp", Box::new(unary(Primitive::Exp))),
        ("log", Box::new(|g: &mut Graph64, r: &mut ChaCha8Rng| {
            let x = g.leaf(Tensor::rand_uniform(vec![3, 4], 0.5, 2.0, r));
            let y = g.log(x).unwrap();
            (vec![x], y)
        })),
        ("square", Box::new(unary(Primitive::Square))),
        ("layer_norm", Box::new(|g: &mut Graph64, r: &mut ChaCha8Rng| {
            let x = leaves(g, r, &[&[3, 5], &[5], &[5]]);
            let y = g.layer_norm(x[0], x[1], x[2], 1e-5).unwrap();
            (x, y)
        })),
        ("sum", Box::new(unary(Primitive::Sum))),
        ("mean", Box::new(unary(Primitive::Mean))),
        ("concat", Box::new(|g: &mut Graph64, r: &mut ChaCha8Rng| {
            let x = leaves(g, r, &[&[2, 3], &[2, 2]]);
            let y = g.concat(&x, 1).unwrap();
            (x, y)
        })),
        ("slice", Box::new(unary(Primitive::Slice { axis: 1, start: 1, len: 2 }))),
        ("reshape", Box::new(unary(Primitive::Reshape(vec![2, 6])))),
        ("permute", Box::new(|g: &mut Graph64, r: &mut ChaCha8Rng| {
            let x = leaves(g, r, &[&[2, 3, 4]]);
            let y = g.permute(x[0], &[2, 0, 1]).unwrap();
            (x, y)
        })),
        ("softmax", Box::new(unary(Primitive::Softmax))),
        ("l2_normalize", Box::new(unary(Primitive::L2Normalize { eps: 1e-8 }))),
        ("index_select", Box::new(unary(Primitive::IndexSelect { axis: 0, indices: Arc::from(vec![2, 0, 2]) }))),
    ]
}

fn custom_cases() -> Vec<Case> {
    vec![
        ("warp", Box::new(|g: &mut Graph64, r: &mut ChaCha8Rng| {
            let dims = [4, 5, 4];
            let x = g.leaf(randn(&[2, 4, 5, 4], r));
            let u = g.leaf(interior_displacement(dims, r));
            let y = warp_node(g, x, u).unwrap();
            (vec![x, u], y)
        })),
        ("selective_scan", Box::new(|g: &mut Graph64, r: &mut ChaCha8Rng| {
            let ops = ScanOperands::<f64>::random(2, 7, 3, 4, r);
            let x: Vec<NodeId> = [ops.u, ops.delta, ops.a, ops.b, ops.c, ops.d].into_iter().map(|t| g.leaf(t)).collect();
            let y = g.custom(Arc::new(SelectiveScanOp), &x).unwrap();
            (x, y)
        })),
        ("dice_loss", Box::new(|g: &mut Graph64, r: &mut ChaCha8Rng| {
            let p = g.leaf(Tensor::rand_uniform(vec![3, 3, 4, 2], 0.0, 1.0, r));
            let q = g.leaf(Tensor::rand_uniform(vec![3, 3, 4, 2], 0.0, 1.0, r));
            let y = dice_loss(g, p, q).unwrap();
            (vec![p, q], y)
        })),
        ("smooth_loss", Box::new(|g: &mut Graph64, r: &mut ChaCha8Rng| {
            let u = leaves(g, r, &[&[3, 3, 4, 5]]);
            let y = smooth_loss(g, u[0]).unwrap();
            (u, y)
        })),
        ("supcon_loss", Box::new(|g: &mut Graph64, r: &mut ChaCha8Rng| {
            let z = leaves(g, r, &[&[10, 4]]);
            let unit = g.l2_normalize(z[0], 1e-12).unwrap();
            let labels: Vec<u16> = (0..10).map(|i| (i % 3) as u16).collect();
            let y = supcon_loss(g, unit, &labels, 0.07).unwrap();
            (z, y)
        })),
    ]
}

/// Worst relative error over 20 random cases of each op.
fn worst_case(cases: &[Case]) -> Result<(f64, &'static str), String> {
    let mut worst = (0.0f64, "");
    for (name, build) in cases {
        for case in 0..20u64 {
            let mut r = rng(1000 * case + name.len() as u64);
            let mut g = Graph64::new();
            let (xs, y) = build(&mut g, &mut r);
            let out = if g.value(y).numel() == 1 { y } else { project(&mut g, y, &mut r) };
            for &x in &xs {
                let err = finite_difference_check(&mut g, out, x, 1e-5).map_err(|e| format!("{name}: {e}"))?;
                if err > worst.0 {
                    worst = (err, name);
                }
            }
        }
    }
    Ok(worst)
}

fn gradient_integrity() -> Outcome {
    let t0 = Instant::now();
    let prims = primitive_cases();
    let worst_prim = worst_case(&prims)?;
    if worst_prim.0 > 1e-6 {
        return Err(format!("primitive `{}` relative error {:.2e} > 1e-6", worst_prim.1, worst_prim.0));
    }
    let customs = custom_cases();
    let worst_custom = worst_case(&customs)?;
    if worst_custom.0 > 1e-5 {
        return Err(format!("custom op `{}` relative error {:.2e} > 1e-5", worst_custom.1, worst_custom.0));
    }

    // End to end through extractor, registration network, integration, warp and every loss term.
    let dims = [12, 12, 12];
    let mut net = RegNet::<f64>::new(RegNetConfig::minimal(), 7).map_err(|e| e.to_string())?;
    let names: Vec<String> = net.params.names().map(String::from).collect();
    let mut r = rng(11);
    for (i, name) in names.iter().enumerate() {
        let t = net.params.tensor_mut(i);
        let std = if name.contains("head") { 0.05 } else { 0.3 };
        let noise = Tensor::randn(t.shape().to_vec(), std, &mut r);
        *t = if name.ends_with("gamma") { noise.map(|x| 1.0 + x) } else { noise };
    }
    let mut pr = rng(12);
    let labels_m = common::random_labels(dims, 3, &mut pr);
    let labels_f = common::random_labels(dims, 3, &mut pr);
    let moving = Tensor::rand_uniform(vec![1, 12, 12, 12], 0.0, 1.0, &mut pr);
    let fixed = Tensor::rand_uniform(vec![1, 12, 12, 12], 0.0, 1.0, &mut pr);
    let mut g = Graph64::new();
    let p = net.params.bind(&mut g);
    let (m, f) = (g.constant(moving), g.constant(fixed));
    let outs = net.forward(&mut g, &p, m, f).map_err(|e| e.to_string())?;
    let weights = LossWeights { lambda_c: 0.5, samples: 32, ..LossWeights::default() };
    let loss = total_loss(
        &mut g,
        &LossInputs {
            moving_labels: &labels_m,
            fixed_labels: &labels_f,
            displacement: outs.displacement,
            moving_features: outs.moving_features,
            fixed_features: outs.fixed_features,
            sample_seed: 3,
        },
        &weights,
    )
    .map_err(|e| e.to_string())?;
    let mut worst_param = (0.0f64, String::new());
    for (i, &node) in p.nodes().iter().enumerate() {
        let err = finite_difference_check_sampled(&mut g, loss.total, node, 1e-5, 3, i as u64).map_err(|e| e.to_string())?;
        if err > worst_param.0 {
            worst_param = (err, names[i].clone());
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    if worst_param.0 > 1e-4 {
        return Err(format!("end-to-end parameter `{}` relative error {:.2e} > 1e-4", worst_param.1, worst_param.0));
    }
    if secs > 300.0 {
        return Err(format!("took {secs:.0} s > 300 s"));
    }
    Ok(format!(
        "{} primitives x 20 cases max rel err {:.1e} (`{}`); {} custom ops {:.1e} (`{}`); end-to-end {} params max rel err {:.1e}; {secs:.1} s",
        prims.len(),
        worst_prim.0,
        worst_prim.1,
        customs.len(),
        worst_custom.0,
        worst_custom.1,
        p.nodes().len(),
        worst_param.0
    ))
}

fn scan_equivalence() -> Outcome {
    let mut r = rng(21);
    let mut worst = 0.0f64;
    for case in 0..50 {
        let len = if case < 5 { 1 << 14 } else { r.random_range(1..=(1 << 14)) };
        let batch = r.random_range(1..=2);
        let chans = r.random_range(1..=6);
        let state = r.random_range(1..=8);
        let chunk = r.random_range(1..=512);
        let ops = ScanOperands::<f64>::random(batch, len, chans, state, &mut r);
        let seq = selective_scan(ops.inputs()).map_err(|e| e.to_string())?;
        let par = selective_scan_parallel(ops.inputs(), chunk).map_err(|e| e.to_string())?;
        let oracle = common::scan_oracle(&ops.u, &ops.delta, &ops.a, &ops.b, &ops.c, &ops.d);
        worst = worst.max(seq.max_abs_diff(&par)).max(seq.max_abs_diff(&oracle));
    }
    if worst > EQUIVALENCE_TOL {
        return Err(format!("max |diff| {worst:.2e} > {EQUIVALENCE_TOL:e}"));
    }
    Ok(format!("50 configs (L <= 2^14) max |diff| {worst:.2e}"))
}

fn scan_scaling() -> Outcome {
    let lengths: Vec<usize> = (10..=17).map(|e| 1 << e).collect();
    let rows = bench_scan(&lengths, &BenchConfig::default()).map_err(|e| e.to_string())?;
    let seq: Vec<(f64, f64)> = rows.iter().map(|r| (r.len as f64, r.sequential_s)).collect();
    let par: Vec<(f64, f64)> = rows.iter().map(|r| (r.len as f64, r.parallel_s)).collect();
    let (es, ep) = (scaling_exponent(&seq).unwrap(), scaling_exponent(&par).unwrap());
    let detail = format!("log-log slope sequential {es:.3}, chunked {ep:.3} over L = 2^10..2^17");
    if (0.9..=1.2).contains(&es) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Cell gather written index by index.
fn gather_oracle(tokens: &Tensor<f64>, grid: [usize; 3]) -> Tensor<f64> {
    let (b, c) = (tokens.shape()[0], tokens.shape()[2]);
    let half = grid.map(|n| n / 2);
    let l = grid.iter().product::<usize>();
    Tensor::from_fn(vec![b, l / 8, 8 * c], |i| {
        let (bi, cell, ch) = (i[0], i[1], i[2]);
        let (corner, cc) = (ch / c, ch % c);
        let (ci, cj, ck) = (cell / (half[1] * half[2]), (cell / half[2]) % half[1], cell % half[2]);
        let (di, dj, dk) = (corner >> 2, (corner >> 1) & 1, corner & 1);
        let t = ((2 * ci + di) * grid[1] + 2 * cj + dj) * grid[2] + 2 * ck + dk;
        tokens.at(&[bi, t, cc])
    })
}

fn shape_law() -> Outcome {
    let dims = [192, 208, 176];
    let expected = 109_824;
    let count = patch_token_count(dims, 4).map_err(|e| e.to_string())?;
    let mut store = ParamStore::<f32>::new();
    let mut r = rng(31);
    let embed = PatchEmbed::new(&mut store, "embed", 1, 4, 8, &mut r);
    let mut g = ssmreg::Graph32::new();
    let p = store.bind(&mut g);
    let x = g.constant(Tensor::zeros(vec![1, dims[0], dims[1], dims[2]]));
    let tokens = embed.forward(&mut g, &p, x).map_err(|e| e.to_string())?;
    let shape = g.shape(tokens).to_vec();
    if count != expected || shape != [1, expected, 8] {
        return Err(format!("token count {count}, embed output {shape:?}, expected {expected}"));
    }

    let mut worst = 0.0f64;
    for case in 0..10 {
        let grid: [usize; 3] = std::array::from_fn(|_| 2 * r.random_range(1..=4));
        let c = r.random_range(1..=4);
        let b = 1 + case % 2;
        let l: usize = grid.iter().product();
        let tok = randn(&[b, l, c], &mut r);
        let mut store = ParamStore::<f64>::new();
        let merge = PatchMerge::new(&mut store, "merge", c, &mut r);
        let mut g = Graph64::new();
        let p = store.bind(&mut g);
        let t = g.constant(tok.clone());
        let cells = gather_cells(&mut g, t, grid, c).map_err(|e| e.to_string())?;
        let (merged, half) = merge.forward(&mut g, &p, t, grid).map_err(|e| e.to_string())?;
        let oracle = gather_oracle(&tok, grid);
        worst = worst.max(g.value(cells).max_abs_diff(&oracle));
        let w = store.get(merge.proj.weight);
        let projected = Tensor::from_fn(vec![b, l / 8, 2 * c], |i| {
            (0..8 * c).map(|k| oracle.at(&[i[0], i[1], k]) * w.at(&[k, i[2]])).sum()
        });
        if g.shape(merged) != [b, l / 8, 2 * c] || half != grid.map(|n| n / 2) {
            return Err(format!("merge on {grid:?} C={c} gave {:?}", g.shape(merged)));
        }
        worst = worst.max(g.value(merged).max_abs_diff(&projected));
    }
    if worst > 1e-12 {
        return Err(format!("patch merge differs from the gather oracle by {worst:.2e}"));
    }
    Ok(format!("{expected} tokens at {dims:?} with P=4; 10 merges exact (max |diff| {worst:.1e})"))
}

fn interior_max_diff(a: &Tensor<f64>, b: &Tensor<f64>, margin: usize) -> f64 {
    let s = a.shape();
    let mut worst = 0.0f64;
    for c in 0..3 {
        for i in margin..s[1] - margin {
            for j in margin..s[2] - margin {
                for k in margin..s[3] - margin {
                    worst = worst.max((a.at(&[c, i, j, k]) - b.at(&[c, i, j, k])).abs());
                }
            }
        }
    }
    worst
}

fn integration() -> Outcome {
    let dims = [12, 14, 10];
    let mut r = rng(41);
    let mut translation = 0.0f64;
    for _ in 0..5 {
        let c: [f64; 3] = std::array::from_fn(|_| r.random_range(-1.5..1.5));
        let v = Tensor::from_fn(vec![3, dims[0], dims[1], dims[2]], |i| c[i[0]]);
        let phi = integrate_svf(&VelocityField::new(v.clone()).unwrap(), 7).map_err(|e| e.to_string())?;
        translation = translation.max(interior_max_diff(phi.tensor(), &v, 2));
    }

    let mut euler = 0.0f64;
    for _ in 0..3 {
        let v = common::smooth_field([14, 14, 14], 0.5, &mut r);
        let phi = integrate_svf(&VelocityField::new(v.clone()).unwrap(), 7).map_err(|e| e.to_string())?;
        let oracle = common::euler_flow(&v, 1 << 7);
        euler = euler.max(interior_max_diff(phi.tensor(), &oracle, 3));
    }

    let mut folded = 0.0f64;
    for _ in 0..20 {
        let v = common::smooth_field([16, 16, 16], 0.5, &mut r);
        let phi = integrate_svf(&VelocityField::new(v).unwrap(), 7).map_err(|e| e.to_string())?;
        folded = folded.max(neg_jacobian_fraction(&phi).map_err(|e| e.to_string())?);
    }
    let detail = format!(
        "translation err {translation:.1e}, vs 128-step Euler {euler:.1e} (|v| <= 0.5), max folded {folded:.3}% over 20 fields |v| <= 0.5"
    );
    if translation <= 1e-6 && euler <= 1e-3 && folded == 0.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn metric_oracles() -> Outcome {
    let dims = [8, 8, 8];
    let mut r = rng(51);
    let mut worst = 0.0f64;
    for _ in 0..30 {
        let spacing: [f64; 3] = std::array::from_fn(|_| r.random_range(0.5..2.0));
        let a = common::random_labels(dims, 3, &mut r);
        let b = common::random_labels(dims, 3, &mut r);
        let ours = dice_score(&a, &b).map_err(|e| e.to_string())?;
        let (per, mean) = common::dice_oracle(&a, &b);
        worst = worst.max((ours.mean - mean).abs());
        for (x, y) in ours.per_class.iter().zip(&per) {
            match (x, y) {
                (Some(x), Some(y)) => worst = worst.max((x - y).abs()),
                (None, None) => {}
                _ => return Err("dice class presence differs from oracle".into()),
            }
        }
        for class in 1..3u16 {
            let (ma, mb) = (a.mask(class), b.mask(class));
            if ma.iter().any(|&x| x) && mb.iter().any(|&x| x) {
                let h = hd95(&ma, &mb, dims, spacing).map_err(|e| e.to_string())?;
                worst = worst.max((h - common::hd95_oracle(&ma, &mb, dims, spacing)).abs());
            }
        }
        let u = Tensor::randn(vec![3, 8, 8, 8], 0.6, &mut r);
        let ours = neg_jacobian_fraction(&DisplacementField::new(u.clone()).unwrap()).map_err(|e| e.to_string())?;
        worst = worst.max((ours - common::neg_jac_oracle(&u)).abs());
    }

    let cube = |shift: usize| {
        let mut m = vec![false; 16 * 16 * 16];
        for i in 4..10 {
            for j in 4..10 {
                for k in 4..10 {
                    m[common::idx([16; 3], i + shift, j, k)] = true;
                }
            }
        }
        m
    };
    let iso = hd95(&cube(0), &cube(2), [16; 3], [1.0; 3]).map_err(|e| e.to_string())?;
    let aniso = hd95(&cube(0), &cube(2), [16; 3], [2.0, 1.0, 1.0]).map_err(|e| e.to_string())?;
    let detail = format!("30 instances max |diff| {worst:.1e}; shifted cube HD95 {iso} / {aniso} mm");
    if worst <= 1e-9 && iso == 2.0 && aniso == 4.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

struct ToyData {
    _dir: tempfile::TempDir,
    train: Vec<RegistrationPair<f32>>,
    val: Vec<RegistrationPair<f32>>,
    test: Vec<RegistrationPair<f32>>,
}

fn toy_data() -> Result<ToyData, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let records = make_dataset(&DatasetConfig::default(), dir.path()).map_err(|e| e.to_string())?;
    let load = |split: Split| -> Result<Vec<RegistrationPair<f32>>, String> {
        records
            .iter()
            .filter(|r: &&ManifestRecord| r.split == split)
            .map(|r| load_pair(dir.path(), r).map_err(|e| e.to_string()))
            .collect()
    };
    let (train, val, test) = (load(Split::Train)?, load(Split::Val)?, load(Split::Test)?);
    Ok(ToyData { _dir: dir, train, val, test })
}

fn toy_config(seed: u64, extractor: bool) -> TrainConfig {
    let mut cfg = TrainConfig { seed, epochs: 30, ..TrainConfig::default() };
    cfg.optimizer.lr = 1e-3;
    if extractor {
        cfg
    } else {
        cfg.without_feature_extractor()
    }
}

fn median3(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

/// Test-split Dice gain over the identity map for three training seeds.
fn toy_gains(data: &ToyData, extractor: bool) -> Result<Vec<f64>, String> {
    let identity = summarize(&evaluate_pairs::<f32>(None, &data.test).map_err(|e| e.to_string())?).unwrap().dice_mean;
    (0..3)
        .map(|seed| {
            let (net, _) = train(&toy_config(seed, extractor), &data.train, &data.val, None).map_err(|e| e.to_string())?;
            let after = summarize(&evaluate_pairs(Some(&net), &data.test).map_err(|e| e.to_string())?).unwrap().dice_mean;
            Ok(after - identity)
        })
        .collect()
}

fn fmt_gains(g: &[f64]) -> String {
    g.iter().map(|x| format!("{x:+.2}")).collect::<Vec<_>>().join(", ")
}

fn toy_training(data: &ToyData) -> (Outcome, Option<f64>) {
    let t0 = Instant::now();
    match toy_gains(data, true) {
        Err(e) => (Err(e), None),
        Ok(g) => {
            let m = median3(g.clone());
            let mins = t0.elapsed().as_secs_f64() / 60.0;
            let detail = format!(
                "test Dice gain over identity [{}], median {m:+.2} (need >= +10); {mins:.1} min",
                fmt_gains(&g)
            );
            (if m >= 10.0 && mins <= 30.0 { Ok(detail) } else { Err(detail) }, Some(m))
        }
    }
}

fn ablation(data: &ToyData, with: Option<f64>) -> Outcome {
    let with = with.ok_or("full-model runs unavailable")?;
    let g = toy_gains(data, false)?;
    let without = median3(g.clone());
    let detail = format!(
        "without extractor [{}], median {without:+.2}; with {with:+.2}; gap {:+.2}",
        fmt_gains(&g),
        with - without
    );
    if with >= without {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn loss_sanity() -> Outcome {
    let dims = [10, 10, 10];
    let mut r = rng(81);
    let labels = common::random_labels(dims, 4, &mut r);
    let mut g = Graph64::new();
    let u = g.leaf(Tensor::zeros(vec![3, 10, 10, 10]));
    let nodes = total_loss(
        &mut g,
        &LossInputs {
            moving_labels: &labels,
            fixed_labels: &labels,
            displacement: u,
            moving_features: None,
            fixed_features: None,
            sample_seed: 0,
        },
        &LossWeights { lambda_c: 0.0, ..LossWeights::default() },
    )
    .map_err(|e| e.to_string())?;
    let total = g.value(nodes.total).item();
    let constant = Tensor::from_fn(vec![3, 6, 5, 7], |i| [0.3, -1.2, 2.5][i[0]]);
    let smooth = smooth_loss_value(&constant).map_err(|e| e.to_string())?;
    let detail = format!("identity total {total:.2e}, smooth(constant) {smooth}");
    if total <= 1e-4 && smooth == 0.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn report(name: &str, outcome: Outcome, failures: &mut Vec<String>) {
    match outcome {
        Ok(d) => println!("PASS {name}: {d}"),
        Err(d) => {
            println!("FAIL {name}: {d}");
            failures.push(name.to_string());
        }
    }
}

fn main() {
    let mut failures = Vec::new();
    report("gradient-integrity", gradient_integrity(), &mut failures);
    report("scan-equivalence", scan_equivalence(), &mut failures);
    report("scan-linear-scaling", scan_scaling(), &mut failures);
    report("patch-shape-law", shape_law(), &mut failures);
    report("svf-integration", integration(), &mut failures);
    report("metric-oracles", metric_oracles(), &mut failures);
    report("loss-sanity", loss_sanity(), &mut failures);
    match toy_data() {
        Ok(data) => {
            let (outcome, with) = toy_training(&data);
            report("toy-training", outcome, &mut failures);
            report("extractor-ablation", ablation(&data, with), &mut failures);
        }
        Err(e) => {
            report("toy-training", Err(e.clone()), &mut failures);
            report("extractor-ablation", Err(e), &mut failures);
        }
    }
    if !failures.is_empty() {
        eprintln!("{} acceptance criteria failed: {}", failures.len(), failures.join(", "));
        std::process::exit(1);
    }
}
