//! Deterministic training loop, optimizer and checkpoints.
//!
//! All randomness derives from the configured seed: the sample order of epoch
//! `e` from `(seed, e)`, dropout masks and margin pairs of step `s` from
//! `(seed, s)`. A run resumed from a checkpoint therefore replays the same
//! stream as an uninterrupted one.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::harness::config::Config;
use crate::harness::eval::{evaluate, EvalReport};
use crate::harness::io::Dataset;
use crate::model::BamDetr;
use crate::nn::{ForwardCtx, ParamStore};
use crate::objective::{total_loss, LossBreakdown};
use crate::sample::{Batch, Sample};
use crate::{Error, Result};

pub const CHECKPOINT_FORMAT: u32 = 1;

/// Decoupled-weight-decay Adam with global gradient-norm clipping.
pub struct AdamW {
    vars: Vec<(String, Var)>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Maximum global gradient norm (0 disables clipping).
    pub clip: f64,
}

impl AdamW {
    pub fn new(store: &ParamStore, lr: f64, weight_decay: f64, clip: f64) -> Result<Self> {
        let vars = store.vars();
        let zeros = |v: &Var| v.as_tensor().zeros_like();
        let m = vars.iter().map(|(_, v)| zeros(v)).collect::<candle_core::Result<Vec<_>>>()?;
        let v = m.clone();
        Ok(Self { vars, m, v, step: 0, lr, weight_decay, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip })
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Applies one update from the gradients of `loss`; returns the
    /// pre-clipping gradient norm.
    pub fn backward_step(&mut self, loss: &Tensor) -> Result<f64> {
        let grads = loss.backward()?;
        let gs: Vec<Option<Tensor>> = self.vars.iter().map(|(_, v)| grads.get(v.as_tensor()).map(Tensor::detach)).collect();
        let mut sq = 0.0;
        for g in gs.iter().flatten() {
            sq += g.sqr()?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
        }
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite("gradient"));
        }
        let scale = if self.clip > 0.0 && norm > self.clip { self.clip / (norm + 1e-6) } else { 1.0 };
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, g) in gs.into_iter().enumerate() {
            let Some(g) = g else { continue };
            let g = (g * scale)?;
            let m = ((&self.m[i] * self.beta1)? + (&g * (1.0 - self.beta1))?)?;
            let v = ((&self.v[i] * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let var = &self.vars[i].1;
            let theta = (var.as_tensor().detach() * (1.0 - self.lr * self.weight_decay))?;
            let upd = ((&m / bc1)? / ((&v / bc2)?.sqrt()? + self.eps)?)?;
            var.set(&(theta - (upd * self.lr)?)?)?;
            self.m[i] = m;
            self.v[i] = v;
        }
        Ok(norm)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut map = HashMap::new();
        for (i, (name, _)) in self.vars.iter().enumerate() {
            map.insert(format!("m.{name}"), self.m[i].clone());
            map.insert(format!("v.{name}"), self.v[i].clone());
        }
        map.insert("step".into(), Tensor::new(&[self.step as u32], &candle_core::Device::Cpu)?);
        candle_core::safetensors::save(&map, path)?;
        Ok(())
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        let map = candle_core::safetensors::load(path, &candle_core::Device::Cpu)?;
        let get = |k: &str| map.get(k).cloned().ok_or_else(|| Error::Config(format!("optimizer state lacks {k}")));
        for (i, (name, var)) in self.vars.iter().enumerate() {
            self.m[i] = get(&format!("m.{name}"))?.to_dtype(var.dtype())?;
            self.v[i] = get(&format!("v.{name}"))?.to_dtype(var.dtype())?;
        }
        self.step = get("step")?.to_vec1::<u32>()?[0] as usize;
        Ok(())
    }
}

/// Sidecar of a checkpoint file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub config: Config,
    pub video_dim: usize,
    pub text_dim: usize,
    pub step: usize,
    pub epoch: usize,
    /// Average mAP when the checkpoint was written, if evaluated.
    pub metric: Option<f64>,
}

pub fn manifest_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("json")
}

fn optimizer_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("optim.safetensors")
}

pub fn save_checkpoint(model: &BamDetr, manifest: &CheckpointManifest, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    model.store().save(path)?;
    fs::write(manifest_path(path), serde_json::to_string_pretty(manifest)?)?;
    Ok(())
}

/// Rebuilds the model described by a checkpoint's manifest and loads its weights.
pub fn load_checkpoint(path: &Path) -> Result<(BamDetr, CheckpointManifest)> {
    let manifest: CheckpointManifest = serde_json::from_str(&fs::read_to_string(manifest_path(path))?)?;
    if manifest.format_version != CHECKPOINT_FORMAT {
        return Err(Error::Config(format!("unsupported checkpoint format {}", manifest.format_version)));
    }
    let c = &manifest.config;
    let model = BamDetr::new(c.model_config(manifest.video_dim, manifest.text_dim)?, c.seed, c.dtype()?)?;
    model.store().load(path)?;
    Ok((model, manifest))
}

/// One row of `train_log.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub loc: f64,
    pub qual: f64,
    pub sal: f64,
    pub regul: f64,
    pub grad_norm: f64,
    pub seconds: f64,
    /// Training-set average mAP when evaluated this epoch.
    pub avg_map: Option<f64>,
}

pub struct TrainOutcome {
    pub model: BamDetr,
    pub log: Vec<EpochLog>,
    pub steps: usize,
    pub final_report: EvalReport,
    pub best_metric: Option<f64>,
}

/// Where a run writes its artifacts.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Output directory for checkpoints and the log; nothing is written when absent.
    pub out_dir: Option<PathBuf>,
    /// Checkpoint (with optimizer state) to continue from.
    pub resume: Option<PathBuf>,
    /// Suppress per-epoch log lines.
    pub quiet: bool,
}

fn mix(seed: u64, tag: u64, k: u64) -> u64 {
    // SplitMix64 finalizer over the three inputs.
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ k.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(seed, 1, epoch as u64)));
    idx
}

/// Trains on `data` and evaluates on it, per the configuration.
pub fn train(config: &Config, data: &Dataset, opts: &TrainOptions) -> Result<TrainOutcome> {
    config.validate()?;
    let dtype = config.dtype()?;
    let mcfg = config.model_config(data.video_dim(), data.text_dim())?;
    let model = BamDetr::new(mcfg, config.seed, dtype)?;
    let mut opt = AdamW::new(model.store(), config.lr, config.weight_decay, config.grad_clip)?;
    let weights = config.loss_weights();
    let device = model.store().device().clone();

    let batch_size = config.batch_size.min(data.len());
    let per_epoch = data.len().div_ceil(batch_size);
    let total_steps = if config.max_steps > 0 { config.max_steps.min(per_epoch * config.epochs) } else { per_epoch * config.epochs };

    let mut log = Vec::new();
    let mut best: Option<f64> = None;
    if let Some(r) = &opts.resume {
        model.store().load(r)?;
        opt.load(&optimizer_path(r))?;
        if let Ok(text) = fs::read_to_string(log_path_for(r)) {
            log = parse_log(&text)?;
        }
        best = log.iter().filter_map(|l| l.avg_map).fold(None, |b, v| Some(b.map_or(v, |b: f64| b.max(v))));
    }
    let manifest = |step: usize, epoch: usize, metric: Option<f64>| CheckpointManifest {
        format_version: CHECKPOINT_FORMAT,
        config: config.clone(),
        video_dim: data.video_dim(),
        text_dim: data.text_dim(),
        step,
        epoch,
        metric,
    };

    let mut step = opt.steps_taken();
    let start = Instant::now();
    let mut acc = LossBreakdown::default();
    let mut acc_norm = 0.0;
    let mut acc_n = 0usize;
    while step < total_steps {
        let epoch = step / per_epoch;
        let pos = step % per_epoch;
        let order = epoch_order(config.seed, epoch, data.len());
        let chunk = &order[pos * batch_size..((pos + 1) * batch_size).min(order.len())];
        let samples: Vec<&Sample> = chunk.iter().map(|&i| &data.samples[i]).collect();
        let batch = Batch::collate(&samples, dtype, &device)?;
        let ctx = ForwardCtx::train(config.dropout, mix(config.seed, 2, step as u64));
        let mut rng = ChaCha8Rng::seed_from_u64(mix(config.seed, 3, step as u64));
        let out = model.forward(&batch, &ctx, true)?;
        let loss = total_loss(&out, &batch, &weights, &mut rng)?;
        if let Some(term) = loss.breakdown.non_finite_term() {
            return Err(Error::NonFinite(term));
        }
        opt.lr = config.lr_at(step, total_steps);
        acc_norm += opt.backward_step(&loss.total)?;
        accumulate(&mut acc, &loss.breakdown);
        acc_n += 1;
        step += 1;

        let epoch_done = step % per_epoch == 0 || step == total_steps;
        if !epoch_done {
            continue;
        }
        let epoch_no = epoch + 1;
        let evaluate_now = epoch_no % config.eval_every == 0 || step == total_steps;
        let avg_map = if evaluate_now { Some(evaluate(&model, data, batch_size)?.0.avg_map()) } else { None };
        let n = acc_n.max(1) as f64;
        let row = EpochLog {
            epoch: epoch_no,
            step,
            loss: acc.total / n,
            loc: acc.loc / n,
            qual: acc.qual / n,
            sal: acc.sal / n,
            regul: acc.regul / n,
            grad_norm: acc_norm / n,
            seconds: start.elapsed().as_secs_f64(),
            avg_map,
        };
        if !opts.quiet {
            log::info!(
                "epoch {} step {} loss {:.4} (loc {:.4} qual {:.4} sal {:.4} regul {:.4}){}",
                row.epoch,
                row.step,
                row.loss,
                row.loc,
                row.qual,
                row.sal,
                row.regul,
                avg_map.map(|m| format!(" mAP {m:.4}")).unwrap_or_default()
            );
        }
        log.push(row);
        acc = LossBreakdown::default();
        acc_norm = 0.0;
        acc_n = 0;

        if let Some(dir) = &opts.out_dir {
            if let Some(m) = avg_map {
                if best.map_or(true, |b| m > b) {
                    best = Some(m);
                    save_checkpoint(&model, &manifest(step, epoch_no, Some(m)), &dir.join("best.safetensors"))?;
                }
            }
            let last = dir.join("last.safetensors");
            save_checkpoint(&model, &manifest(step, epoch_no, avg_map), &last)?;
            opt.save(&optimizer_path(&last))?;
            write_log(&dir.join("train_log.csv"), &log)?;
        } else if let Some(m) = avg_map {
            best = Some(best.map_or(m, |b: f64| b.max(m)));
        }
    }
    let (final_report, _) = evaluate(&model, data, batch_size)?;
    Ok(TrainOutcome { model, log, steps: step, final_report, best_metric: best })
}

fn accumulate(acc: &mut LossBreakdown, b: &LossBreakdown) {
    acc.total += b.total;
    acc.loc += b.loc;
    acc.qual += b.qual;
    acc.sal += b.sal;
    acc.regul += b.regul;
}

fn log_path_for(ckpt: &Path) -> PathBuf {
    ckpt.with_file_name("train_log.csv")
}

pub fn write_log(path: &Path, rows: &[EpochLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn parse_log(text: &str) -> Result<Vec<EpochLog>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    Ok(r.deserialize().collect::<std::result::Result<Vec<EpochLog>, _>>()?)
}
