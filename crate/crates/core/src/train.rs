//! Maximum-likelihood training loop.

use std::collections::BTreeMap;
use std::path::Path;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::batch::{make_batch, BatchConfig, TrainingExample};
use crate::data::{normalize, NormStats, PairedDataset};
use crate::model::{CheckpointMeta, Model, ModelCheckpoint, ModelConfig, Params};
use crate::rng::substream;
use crate::{Error, Result};

/// Optimization settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    #[serde(flatten)]
    pub batch: BatchConfig,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    /// Steps between checkpoint callbacks; 0 disables them.
    pub checkpoint_interval: usize,
    /// Steps between held-out evaluations.
    pub eval_interval: usize,
    /// Held-out batches scored at each evaluation.
    pub val_batches: usize,
    /// Trailing share of the observations kept for validation.
    pub val_fraction: f64,
    /// Evaluations without improvement before stopping.
    pub patience: usize,
    /// Stop once the held-out NLL falls below this value.
    pub nll_threshold: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch: BatchConfig::default(),
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            checkpoint_interval: 0,
            eval_interval: 50,
            val_batches: 2,
            val_fraction: 0.1,
            patience: 10,
            nll_threshold: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.epsilon > 0.0) {
            return Err(Error::Config("optimizer moments must lie in [0, 1) with epsilon > 0".into()));
        }
        if self.eval_interval == 0 || self.val_batches == 0 || self.patience == 0 {
            return Err(Error::Config("eval_interval, val_batches and patience must be positive".into()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config("val_fraction must lie in (0, 1)".into()));
        }
        self.batch.validate()
    }
}

/// Adaptive-moment gradient descent.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    t: i32,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            epsilon,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut Params, grads: &BTreeMap<String, Tensor>) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.numel()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.numel()]);
            for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *x -= self.lr * mhat / (vhat.sqrt() + self.epsilon);
            }
        }
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub train_nll: f64,
    pub val_nll: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxSteps,
    Plateau,
    Threshold,
    /// Training hit a non-finite loss or gradient; the checkpoint holds the
    /// last finite parameters.
    NonFinite,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub checkpoint: ModelCheckpoint,
    pub log: Vec<LogRow>,
    pub stop: StopReason,
}

/// Normalized training and validation parts of a dataset.
#[derive(Debug, Clone)]
pub struct Split {
    pub stats: NormStats,
    pub train: PairedDataset,
    pub val: Option<PairedDataset>,
}

fn normalized(ds: &PairedDataset, stats: &NormStats) -> Result<PairedDataset> {
    let obs = normalize(&ds.obs, stats)?;
    let runs = ds
        .run_ids()
        .iter()
        .zip(ds.runs())
        .map(|(&id, r)| Ok((id, normalize(r, stats)?)))
        .collect::<Result<Vec<_>>>()?;
    PairedDataset::new(obs, runs, ds.location_id.clone())
}

/// Fits statistics on the training part and splits off the trailing
/// `val_fraction` of the paired observations.
pub fn split_dataset(ds: &PairedDataset, val_fraction: f64) -> Result<Split> {
    let n = ds.overlap_len();
    let n_val = ((n as f64) * val_fraction).ceil() as usize;
    if n_val >= n {
        return Err(Error::Validation(format!("{n} paired days leave nothing to train on")));
    }
    let times = ds.obs.times();
    let t_last_train = times[n - n_val - 1];
    let stats = NormStats::fit(&ds.obs.values()[..n - n_val])?;
    let full = normalized(ds, &stats)?;
    let train = full.window(f64::NEG_INFINITY, t_last_train)?;
    let val = if n_val > 0 {
        Some(full.window(times[n - n_val], times[n - 1])?)
    } else {
        None
    };
    Ok(Split { stats, train, val })
}

/// Fixed held-out examples, or `None` when the validation part is too short
/// for a window.
pub fn validation_examples(
    val: &PairedDataset,
    cfg: &TrainConfig,
) -> Result<Option<Vec<TrainingExample>>> {
    let window = cfg.batch.window.clamped_to(val.overlap_len());
    if window.validate().is_err() {
        return Ok(None);
    }
    let batch = BatchConfig {
        batch_size: cfg.batch.batch_size * cfg.val_batches,
        window,
        ..cfg.batch
    };
    Ok(Some(make_batch(val, &batch, &mut substream(cfg.seed, "validation"))?))
}

/// Mean of per-example NLLs.
pub fn mean_nll(model: &Model, examples: &[TrainingExample]) -> Result<f64> {
    let mut total = 0.0;
    for ex in examples {
        total += model.example_nll(ex)?;
    }
    Ok(total / examples.len() as f64)
}

fn batch_loss_grad(model: &Model, batch: &[TrainingExample]) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut acc: Option<BTreeMap<String, Tensor>> = None;
    for ex in batch {
        let (l, g) = model.loss_and_grad(ex)?;
        loss += l * scale;
        match acc.as_mut() {
            None => acc = Some(g),
            Some(a) => {
                for (k, t) in a.iter_mut() {
                    t.add_assign(&g[k]);
                }
            }
        }
    }
    let mut grads = acc.unwrap_or_default();
    for t in grads.values_mut() {
        for v in t.data_mut() {
            *v *= scale;
        }
    }
    Ok((loss, grads))
}

/// Trains from scratch; see [`train_with`].
pub fn train(dataset: &PairedDataset, model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<TrainOutput> {
    train_with(dataset, model_cfg, cfg, |_| Ok(()))
}

/// Draws a batch, scores it, backpropagates and updates the parameters at
/// every step. `on_checkpoint` receives a snapshot every
/// `checkpoint_interval` steps.
pub fn train_with(
    dataset: &PairedDataset,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    mut on_checkpoint: impl FnMut(&ModelCheckpoint) -> Result<()>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    model_cfg.validate()?;
    crate::alloc::retain_heap();
    if cfg.batch.features != model_cfg.features {
        return Err(Error::Config(
            "batch feature settings differ from the model feature settings".into(),
        ));
    }
    let split = split_dataset(dataset, cfg.val_fraction)?;
    if split.train.overlap_len() <= cfg.batch.window.window_max {
        return Err(Error::Validation(format!(
            "series too short: {} training days, need more than {}",
            split.train.overlap_len(),
            cfg.batch.window.window_max
        )));
    }
    let val = match &split.val {
        Some(v) => validation_examples(v, cfg)?,
        None => None,
    };
    if val.is_none() {
        warn!("validation part too short for a window; held-out NLL disabled");
    }

    let mut model = Model::init(*model_cfg, &mut substream(cfg.seed, "init"))?;
    let mut opt = Adam::new(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon);
    let mut rng = substream(cfg.seed, "batchgen");
    let mut log = Vec::with_capacity(cfg.steps);
    let mut best = f64::INFINITY;
    let mut since_best = 0;
    let mut stop = StopReason::MaxSteps;
    let mut steps_done = 0;
    let snapshot = |model: &Model, steps: usize| {
        ModelCheckpoint::new(model, split.stats, CheckpointMeta { seed: cfg.seed, steps })
    };

    for step in 0..cfg.steps {
        let batch = make_batch(&split.train, &cfg.batch, &mut rng)?;
        let (loss, grads) = batch_loss_grad(&model, &batch)?;
        if !loss.is_finite() || grads.values().any(|g| !g.all_finite()) {
            warn!("non-finite loss at step {step}; keeping the last finite parameters");
            stop = StopReason::NonFinite;
            break;
        }
        let evaluate = step % cfg.eval_interval == 0 || step + 1 == cfg.steps;
        let val_nll = match (&val, evaluate) {
            (Some(v), true) => Some(mean_nll(&model, v)?),
            _ => None,
        };
        log.push(LogRow {
            step,
            train_nll: loss,
            val_nll,
        });
        if let Some(v) = val_nll {
            info!("step {step}: train {loss:.4} val {v:.4}");
            if v < best {
                best = v;
                since_best = 0;
            } else {
                since_best += 1;
            }
            if cfg.nll_threshold.is_some_and(|th| v < th) {
                stop = StopReason::Threshold;
                break;
            }
            if since_best >= cfg.patience {
                stop = StopReason::Plateau;
                break;
            }
        }
        opt.step(&mut model.params, &grads);
        steps_done = step + 1;
        if cfg.checkpoint_interval > 0 && steps_done % cfg.checkpoint_interval == 0 {
            on_checkpoint(&snapshot(&model, steps_done))?;
        }
    }
    Ok(TrainOutput {
        checkpoint: snapshot(&model, steps_done),
        log,
        stop,
    })
}

/// Writes `step,train_nll,val_nll`; steps without evaluation leave the last
/// field empty.
pub fn write_log_csv(path: impl AsRef<Path>, log: &[LogRow]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("step,train_nll,val_nll\n");
    for r in log {
        let val = r.val_nll.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{}\n", r.step, r.train_nll, val));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a log written by [`write_log_csv`].
pub fn read_log_csv(path: impl AsRef<Path>) -> Result<Vec<LogRow>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let bad = |msg: &str| Error::Parse {
            path: path.to_path_buf(),
            line: i as u64 + 1,
            msg: msg.to_string(),
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 3 {
            return Err(bad("expected 3 fields"));
        }
        rows.push(LogRow {
            step: f[0].parse().map_err(|_| bad("bad step"))?,
            train_nll: f[1].parse().map_err(|_| bad("bad train_nll"))?,
            val_nll: if f[2].is_empty() {
                None
            } else {
                Some(f[2].parse().map_err(|_| bad("bad val_nll"))?)
            },
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests;
