use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use ssmreg::metrics::{format_table, summarize, MetricReport};
use ssmreg::pipeline::{
    bench_scan, evaluate_field, evaluate_pairs, format_bench, load_toml, register_pair, scaling_exponent, train, BenchConfig,
    Precision, TrainConfig, BEST_CHECKPOINT, MODEL_CONFIG,
};
use ssmreg::regnet::{load_checkpoint, RegNet, RegNetConfig};
use ssmreg::synthdata::{
    load_pair, make_dataset, read_field, read_labels, read_manifest, read_volume, write_field, write_labels, write_volume,
    DatasetConfig, RegistrationPair, Split, MANIFEST_FILE,
};
use ssmreg::{Error, Real, Result};

#[derive(Parser)]
#[command(name = "ssmreg", version, about = "Multi-modal deformable volume registration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic two-modality dataset and its manifest.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a registration network on the train/val splits of a manifest.
    Train(TrainArgs),
    /// Register one moving volume onto a fixed volume.
    Register {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Model config; defaults to the one saved next to the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        moving: PathBuf,
        #[arg(long)]
        fixed: PathBuf,
        #[arg(long)]
        moving_labels: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Metrics on the test split for a checkpoint, saved fields, or the identity map.
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, conflicts_with = "fields")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory with `<subject>/displacement_{x,y,z}.srvol`.
        #[arg(long)]
        fields: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time the sequential and chunked selective scans.
    Bench {
        #[arg(long, value_delimiter = ',', default_values_t = [1024usize, 2048, 4096, 8192, 16384, 32768, 65536, 131072])]
        lengths: Vec<usize>,
        #[arg(long, default_value_t = 10)]
        runs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    no_feature_extractor: bool,
    #[arg(long)]
    no_grad_surgery: bool,
    #[arg(long)]
    lambda_c: Option<f64>,
    #[arg(long)]
    lambda_s: Option<f64>,
    /// Stop after this many optimizer steps.
    #[arg(long)]
    steps: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { config, out, seed } => gen_data(config.as_deref(), &out, seed),
        Command::Train(args) => train_cmd(args),
        Command::Register {
            checkpoint,
            config,
            moving,
            fixed,
            moving_labels,
            out,
        } => register(&checkpoint, config.as_deref(), &moving, &fixed, moving_labels.as_deref(), &out),
        Command::Evaluate {
            manifest,
            checkpoint,
            config,
            fields,
            out,
        } => evaluate(&manifest, checkpoint.as_deref(), config.as_deref(), fields.as_deref(), out.as_deref()),
        Command::Bench { lengths, runs, seed, out } => bench(&lengths, runs, seed, out.as_deref()),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn gen_data(config: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut cfg: DatasetConfig = config.map(load_toml).transpose()?.unwrap_or_default();
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let records = make_dataset(&cfg, out)?;
    let count = |s: Split| records.iter().filter(|r| r.split == s).count();
    println!(
        "wrote {} subjects to {} (train {}, val {}, test {}); manifest {}",
        records.len(),
        out.display(),
        count(Split::Train),
        count(Split::Val),
        count(Split::Test),
        out.join(MANIFEST_FILE).display()
    );
    Ok(())
}

fn load_split<T: Real>(manifest: &Path, split: Split) -> Result<(Vec<RegistrationPair<T>>, Vec<String>)> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut pairs = Vec::new();
    let mut missing = Vec::new();
    for rec in read_manifest(manifest)?.iter().filter(|r| r.split == split) {
        match load_pair(base, rec) {
            Ok(p) => pairs.push(p),
            Err(e @ (Error::Io { .. } | Error::Format { .. })) => missing.push(format!("{}: {e}", rec.subject)),
            Err(e) => return Err(e),
        }
    }
    Ok((pairs, missing))
}

fn train_cmd(args: TrainArgs) -> Result<()> {
    let mut cfg: TrainConfig = args.config.as_deref().map(load_toml).transpose()?.unwrap_or_default();
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if args.no_feature_extractor {
        cfg = cfg.without_feature_extractor();
    }
    if args.no_grad_surgery {
        cfg.grad_surgery = false;
    }
    if let Some(l) = args.lambda_c {
        cfg.loss.lambda_c = l;
    }
    if let Some(l) = args.lambda_s {
        cfg.loss.lambda_s = l;
    }
    if args.steps.is_some() {
        cfg.max_steps = args.steps;
    }
    cfg.validate()?;
    match cfg.precision {
        Precision::F32 => train_typed::<f32>(&cfg, &args.manifest, &args.out),
        Precision::F64 => train_typed::<f64>(&cfg, &args.manifest, &args.out),
    }
}

fn train_typed<T: Real>(cfg: &TrainConfig, manifest: &Path, out: &Path) -> Result<()> {
    let (train_pairs, missing) = load_split::<T>(manifest, Split::Train)?;
    if !missing.is_empty() {
        return Err(Error::Data(format!("unreadable training subjects: {}", missing.join("; "))));
    }
    let (val_pairs, missing) = load_split::<T>(manifest, Split::Val)?;
    if !missing.is_empty() {
        return Err(Error::Data(format!("unreadable validation subjects: {}", missing.join("; "))));
    }
    let (net, summary) = train(cfg, &train_pairs, &val_pairs, Some(out))?;
    println!(
        "trained {} steps over {} epochs in {:.1}s; {} parameters",
        summary.steps,
        summary.epochs,
        summary.wall_time_s,
        net.param_count()
    );
    if let (Some(a), Some(b), Some(e)) = (summary.initial_val_dice, summary.best_val_dice, summary.best_epoch) {
        println!("validation Dice {a:.2} -> {b:.2} (best epoch {e}); checkpoint {}", out.join(BEST_CHECKPOINT).display());
    }
    Ok(())
}

fn load_model(checkpoint: &Path, config: Option<&Path>) -> Result<RegNet<f32>> {
    let config_path = config
        .map(Path::to_path_buf)
        .unwrap_or_else(|| checkpoint.parent().unwrap_or(Path::new(".")).join(MODEL_CONFIG));
    let model_cfg: RegNetConfig = load_toml(&config_path)?;
    let mut net = RegNet::<f32>::new(model_cfg, 0)?;
    net.params.load_from(&load_checkpoint(checkpoint)?)?;
    Ok(net)
}

fn register(
    checkpoint: &Path,
    config: Option<&Path>,
    moving: &Path,
    fixed: &Path,
    moving_labels: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let start = Instant::now();
    let net = load_model(checkpoint, config)?;
    let mv = read_volume::<f32>(moving)?;
    let fx = read_volume::<f32>(fixed)?;
    if mv.dims() != fx.dims() || mv.spacing() != fx.spacing() {
        return Err(Error::Data(format!(
            "moving {:?} @ {:?} mm vs fixed {:?} @ {:?} mm",
            mv.dims(),
            mv.spacing(),
            fx.dims(),
            fx.spacing()
        )));
    }
    let labels = match moving_labels {
        Some(p) => read_labels(p, None)?,
        None => ssmreg::regnet::LabelVolume::new(mv.dims(), vec![0; mv.dims().iter().product()], 1, mv.spacing())?,
    };
    let pair = RegistrationPair {
        moving: mv,
        moving_labels: labels.clone(),
        fixed: fx,
        fixed_labels: labels,
    };
    let r = register_pair(&net, &pair)?;
    std::fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    write_volume(&out.join("warped.srvol"), &r.warped)?;
    write_field(out, "displacement", &r.registration.displacement, pair.moving.spacing())?;
    if moving_labels.is_some() {
        write_labels(&out.join("warped_labels.srvol"), &r.warped_labels)?;
    }
    let total_s = start.elapsed().as_secs_f64();
    let timing = json!({ "forward_s": r.forward_s, "total_s": total_s });
    write_text(&out.join("timing.json"), &timing.to_string())?;
    println!("registered in {:.3}s (network {:.3}s); outputs in {}", total_s, r.forward_s, out.display());
    Ok(())
}

fn evaluate(manifest: &Path, checkpoint: Option<&Path>, config: Option<&Path>, fields: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let (pairs, missing) = load_split::<f32>(manifest, Split::Test)?;
    for m in &missing {
        eprintln!("missing: {m}");
    }
    if pairs.is_empty() {
        return Err(Error::Data("no readable test pairs".into()));
    }
    let reports: Vec<MetricReport> = match (checkpoint, fields) {
        (Some(ckpt), _) => {
            let net = load_model(ckpt, config)?;
            evaluate_pairs(Some(&net), &pairs)?
        }
        (None, Some(dir)) => {
            let mut reports = Vec::new();
            for pair in &pairs {
                match read_field::<f32>(&dir.join(&pair.moving.id), "displacement") {
                    Ok(f) => reports.push(evaluate_field(pair, &f, 0, 0.0)?),
                    Err(e) => eprintln!("missing: {}: {e}", pair.moving.id),
                }
            }
            reports
        }
        (None, None) => evaluate_pairs::<f32>(None, &pairs)?,
    };
    print!("{}", format_table(&reports));
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
        let lines: String = reports
            .iter()
            .map(|r| serde_json::to_string(r).expect("report serializes") + "\n")
            .collect();
        write_text(&dir.join("metrics.jsonl"), &lines)?;
        if let Some(s) = summarize(&reports) {
            write_text(&dir.join("summary.json"), &serde_json::to_string_pretty(&s).expect("summary serializes"))?;
        }
    }
    Ok(())
}

fn bench(lengths: &[usize], runs: usize, seed: u64, out: Option<&Path>) -> Result<()> {
    let cfg = BenchConfig {
        runs,
        seed,
        ..BenchConfig::default()
    };
    let rows = bench_scan(lengths, &cfg)?;
    print!("{}", format_bench(&rows));
    if let Some(path) = out {
        let pts: Vec<(f64, f64)> = rows.iter().map(|r| (r.len as f64, r.sequential_s)).collect();
        let doc = json!({ "rows": rows, "sequential_exponent": scaling_exponent(&pts) });
        write_text(path, &serde_json::to_string_pretty(&doc).expect("bench serializes"))?;
    }
    Ok(())
}
