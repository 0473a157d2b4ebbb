use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{save_toml, TrainConfig};
use super::evaluate::register_pair;
use crate::error::{Error, Result};
use crate::metrics::dice_score;
use crate::objectives::{gradient_surgery_tensors, total_loss, LossInputs, LossReport};
use crate::regnet::{save_checkpoint, RegNet};
use crate::scalar::{lit, Real};
use crate::synthdata::RegistrationPair;
use crate::tensor::{Adam, Graph, Tensor};

pub const BEST_CHECKPOINT: &str = "best.mmkpt";
pub const LAST_CHECKPOINT: &str = "last.mmkpt";
pub const MODEL_CONFIG: &str = "model.toml";
pub const LOSS_LOG: &str = "loss_log.jsonl";
pub const VALIDATION_LOG: &str = "validation.jsonl";

/// One line of the loss log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub dice: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub supcon: Option<f64>,
    pub smooth: f64,
    pub total: f64,
    /// Present only when gradient surgery ran on this step.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub conflict: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub epoch: usize,
    pub step: usize,
    pub val_dice: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub epochs: usize,
    pub initial_val_dice: Option<f64>,
    pub best_val_dice: Option<f64>,
    pub best_epoch: Option<usize>,
    pub wall_time_s: f64,
}

struct Grads<T> {
    report: LossReport,
    registration: Vec<Tensor<T>>,
    contrastive: Option<Vec<Tensor<T>>>,
}

fn pair_gradients<T: Real>(
    net: &RegNet<T>,
    cfg: &TrainConfig,
    pair: &RegistrationPair<T>,
    sample_seed: u64,
) -> Result<Grads<T>> {
    let mut g = Graph::new();
    let p = net.params.bind(&mut g);
    let m = g.constant(pair.moving.as_channels());
    let f = g.constant(pair.fixed.as_channels());
    let out = net.forward(&mut g, &p, m, f)?;
    let inputs = LossInputs {
        moving_labels: &pair.moving_labels,
        fixed_labels: &pair.fixed_labels,
        displacement: out.displacement,
        moving_features: out.moving_features,
        fixed_features: out.fixed_features,
        sample_seed,
    };
    let nodes = total_loss(&mut g, &inputs, &cfg.loss)?;
    let report = nodes.report(&g);
    if !report.total.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {report:?}")));
    }
    match nodes.contrastive {
        Some(cl) if cfg.grad_surgery => {
            let gr = g.backward(nodes.registration)?;
            let gc = g.backward(cl)?;
            Ok(Grads {
                report,
                registration: net.params.collect_grads(&p, &gr),
                contrastive: Some(net.params.collect_grads(&p, &gc)),
            })
        }
        _ => {
            let gt = g.backward(nodes.total)?;
            Ok(Grads {
                report,
                registration: net.params.collect_grads(&p, &gt),
                contrastive: None,
            })
        }
    }
}

fn accumulate<T: Real>(acc: &mut Option<Vec<Tensor<T>>>, add: Vec<Tensor<T>>) {
    match acc {
        Some(a) => a.iter_mut().zip(&add).for_each(|(x, y)| x.add_assign(y)),
        None => *acc = Some(add),
    }
}

/// Mean foreground Dice (percent) after registering every pair.
pub fn validation_dice<T: Real>(net: &RegNet<T>, pairs: &[RegistrationPair<T>]) -> Result<f64> {
    let mut total = 0.0;
    for pair in pairs {
        let r = register_pair(net, pair)?;
        total += dice_score(&r.warped_labels, &pair.fixed_labels)?.mean;
    }
    Ok(total / pairs.len() as f64)
}

struct Outputs {
    dir: PathBuf,
    loss: BufWriter<File>,
    val: BufWriter<File>,
}

impl Outputs {
    fn create(dir: &Path, cfg: &TrainConfig) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_toml(&dir.join(MODEL_CONFIG), &cfg.model)?;
        save_toml(&dir.join("train.toml"), cfg)?;
        let open = |name: &str| {
            let path = dir.join(name);
            File::create(&path).map(BufWriter::new).map_err(|e| Error::io(path, e))
        };
        Ok(Self {
            dir: dir.to_path_buf(),
            loss: open(LOSS_LOG)?,
            val: open(VALIDATION_LOG)?,
        })
    }

    fn line<S: Serialize>(w: &mut BufWriter<File>, path: PathBuf, rec: &S) -> Result<()> {
        let s = serde_json::to_string(rec).expect("log records serialize");
        writeln!(w, "{s}").and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
    }
}

/// Train on `train`, selecting the checkpoint with the best validation Dice.
/// Returns the selected model. With `out`, writes checkpoints, the model
/// config, and line-delimited loss and validation logs there.
pub fn train<T: Real>(
    cfg: &TrainConfig,
    train: &[RegistrationPair<T>],
    val: &[RegistrationPair<T>],
    out: Option<&Path>,
) -> Result<(RegNet<T>, TrainSummary)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    for pair in train.iter().chain(val) {
        cfg.model.check_dims(pair.moving.dims())?;
    }
    let start = Instant::now();
    let mut net = RegNet::<T>::new(cfg.model.clone(), cfg.seed)?;
    let mut adam = Adam::new(cfg.optimizer, &net.params)?;
    let mut outputs = out.map(|d| Outputs::create(d, cfg)).transpose()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x7261_696e));
    let mut order: Vec<usize> = (0..train.len()).collect();

    let initial_val_dice = (!val.is_empty()).then(|| validation_dice(&net, val)).transpose()?;
    let mut best = initial_val_dice.map(|d| (d, 0, net.params.clone()));
    if let (Some(o), Some(d)) = (outputs.as_mut(), initial_val_dice) {
        Outputs::line(&mut o.val, o.dir.join(VALIDATION_LOG), &ValidationRecord { epoch: 0, step: 0, val_dice: d })?;
    }

    let mut step = 0;
    let mut epochs = 0;
    let budget = cfg.max_steps.unwrap_or(usize::MAX);
    'epochs: for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            if step >= budget {
                break 'epochs;
            }
            let mut reg = None;
            let mut cl = None;
            let mut report = LossReport::default();
            let mut supcon = None::<f64>;
            for &i in batch {
                let grads = match pair_gradients(&net, cfg, &train[i], rng.random()) {
                    Ok(g) => g,
                    Err(e) => return Err(abort(&net, outputs.as_ref(), e)),
                };
                report.dice += grads.report.dice;
                report.smooth += grads.report.smooth;
                report.total += grads.report.total;
                if let Some(s) = grads.report.supcon {
                    *supcon.get_or_insert(0.0) += s;
                }
                accumulate(&mut reg, grads.registration);
                if let Some(c) = grads.contrastive {
                    accumulate(&mut cl, c);
                }
            }
            let inv = 1.0 / batch.len() as f64;
            let mut reg = reg.expect("non-empty batch");
            reg.iter_mut().for_each(|t| *t = t.scale(lit(inv)));
            let (combined, conflict) = match cl {
                Some(mut c) => {
                    c.iter_mut().for_each(|t| *t = t.scale(lit(inv)));
                    let (g, conflict) = gradient_surgery_tensors(&reg, &c)?;
                    (g, Some(conflict))
                }
                None => (reg, None),
            };
            if combined.iter().any(|t| !t.all_finite()) {
                return Err(abort(&net, outputs.as_ref(), Error::Numeric(format!("non-finite gradient at step {}", step + 1))));
            }
            adam.step(&mut net.params, &combined)?;
            step += 1;
            if let Some(o) = outputs.as_mut() {
                let rec = StepRecord {
                    step,
                    epoch,
                    dice: report.dice * inv,
                    supcon: supcon.map(|s| s * inv),
                    smooth: report.smooth * inv,
                    total: report.total * inv,
                    conflict,
                };
                Outputs::line(&mut o.loss, o.dir.join(LOSS_LOG), &rec)?;
            }
        }
        epochs = epoch;
        let last_epoch = epoch == cfg.epochs || step >= budget;
        if !val.is_empty() && (epoch % cfg.validate_every == 0 || last_epoch) {
            let d = validation_dice(&net, val)?;
            if let Some(o) = outputs.as_mut() {
                Outputs::line(&mut o.val, o.dir.join(VALIDATION_LOG), &ValidationRecord { epoch, step, val_dice: d })?;
            }
            if best.as_ref().is_none_or(|b| d > b.0) {
                best = Some((d, epoch, net.params.clone()));
                if let Some(o) = &outputs {
                    save_checkpoint(&o.dir.join(BEST_CHECKPOINT), &net.params)?;
                }
            }
        }
        if let Some(o) = &outputs {
            if epoch % cfg.checkpoint_every == 0 || last_epoch {
                save_checkpoint(&o.dir.join(LAST_CHECKPOINT), &net.params)?;
            }
        }
    }
    if let Some(o) = &outputs {
        save_checkpoint(&o.dir.join(LAST_CHECKPOINT), &net.params)?;
        if best.as_ref().is_none_or(|b| b.1 == 0) {
            let params = best.as_ref().map_or(&net.params, |b| &b.2);
            save_checkpoint(&o.dir.join(BEST_CHECKPOINT), params)?;
        }
    }
    let summary = TrainSummary {
        steps: step,
        epochs,
        initial_val_dice,
        best_val_dice: best.as_ref().map(|b| b.0),
        best_epoch: best.as_ref().map(|b| b.1),
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    if let Some((_, _, params)) = best {
        net.params = params;
    }
    Ok((net, summary))
}

/// Keep the last parameters that produced a finite step.
fn abort<T: Real>(net: &RegNet<T>, outputs: Option<&Outputs>, err: Error) -> Error {
    if let Some(o) = outputs {
        if let Err(e) = save_checkpoint(&o.dir.join(LAST_CHECKPOINT), &net.params) {
            return e;
        }
    }
    err
}
