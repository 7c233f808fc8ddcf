//! Sequential day-by-day generation of observation trajectories.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::batch::TrainingExample;
use crate::data::{create, read_rows, NormStats, PairedDataset, SourceTag, TimeSeries};
use crate::model::{Model, ModelCheckpoint};
use crate::rng::substream_seed;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    /// Trailing observed or sampled days conditioned on.
    pub obs_window: usize,
    /// Climate-model days before the generated day.
    pub gcm_past: usize,
    /// Climate-model days from the generated day onwards.
    pub gcm_future: usize,
    pub horizon: usize,
    pub n_trajectories: usize,
    pub seed: u64,
    /// Emit the predictive mean instead of a draw.
    pub deterministic_mode: bool,
    /// First generated day; defaults to the day after the last observation.
    pub start: Option<f64>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            obs_window: 60,
            gcm_past: 60,
            gcm_future: 120,
            horizon: 365,
            n_trajectories: 8,
            seed: 0,
            deterministic_mode: false,
            start: None,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.obs_window == 0 || self.gcm_past + self.gcm_future == 0 || self.gcm_future == 0 {
            return Err(Error::Config("sampler windows must be positive".into()));
        }
        if self.horizon == 0 || self.n_trajectories == 0 {
            return Err(Error::Config("horizon and n_trajectories must be positive".into()));
        }
        Ok(())
    }
}

/// One generated series with the predictive distribution of every day.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub run_id: u32,
    pub index: usize,
    /// Generated values in degrees.
    pub series: TimeSeries,
    pub pred_mean: Vec<f64>,
    pub pred_std: Vec<f64>,
}

/// Seed of the streams used for `run_id`: the `"sampler"` substream of
/// `seed`, xor the run id.
pub fn run_seed(seed: u64, run_id: u32) -> u64 {
    substream_seed(seed, "sampler") ^ u64::from(run_id)
}

struct Plan {
    start_idx: usize,
    history: Vec<f64>,
}

fn plan(dataset: &PairedDataset, run: &TimeSeries, cfg: &SamplerConfig, stats: &NormStats) -> Result<Plan> {
    let obs = &dataset.obs;
    let start = match cfg.start {
        Some(s) => s,
        None => obs.end().expect("dataset observations are non-empty") + 1.0,
    };
    let n_hist = obs.times().partition_point(|&t| t < start);
    if n_hist < cfg.obs_window || obs.times()[n_hist - 1] != start - 1.0 {
        return Err(Error::Validation(format!(
            "need {} observed days immediately before day {start}",
            cfg.obs_window
        )));
    }
    let history = obs.values()[n_hist - cfg.obs_window..n_hist]
        .iter()
        .map(|&v| stats.apply(v))
        .collect();
    let g0 = run.times()[0];
    let start_idx = start - g0;
    if start_idx.fract() != 0.0 || start_idx < cfg.gcm_past as f64 {
        return Err(Error::Validation(format!(
            "climate-model run does not cover {} days before day {start}",
            cfg.gcm_past
        )));
    }
    let start_idx = start_idx as usize;
    if start_idx + cfg.horizon > run.len() {
        return Err(Error::Validation(format!(
            "climate-model run ends before the last generated day {}",
            start + cfg.horizon as f64 - 1.0
        )));
    }
    if start_idx + cfg.horizon - 1 + cfg.gcm_future > run.len() {
        warn!("climate-model window is truncated at the end of the run for the final generated days");
    }
    Ok(Plan { start_idx, history })
}

/// Conditioning example for the day at grid index `day`.
fn step_example(
    model: &Model,
    run_id: u32,
    run: &TimeSeries,
    gcm_norm: &[f64],
    history: &[f64],
    day: usize,
    cfg: &SamplerConfig,
) -> Result<TrainingExample> {
    let times = run.times();
    let today = times[day];
    let n = history.len();
    let context: Vec<(f64, f64)> = history[n - cfg.obs_window..]
        .iter()
        .enumerate()
        .map(|(i, &v)| (today - (cfg.obs_window - i) as f64, v))
        .collect();
    let hi = (day + cfg.gcm_future).min(run.len());
    let gcm: Vec<(f64, f64)> = (day - cfg.gcm_past..hi).map(|i| (times[i], gcm_norm[i])).collect();
    TrainingExample::build(
        context,
        gcm,
        vec![(today, 0.0)],
        today - 1.0,
        run_id,
        &model.config.features,
    )
}

/// Generates `cfg.n_trajectories` continuations of the observations driven
/// by climate-model run `run_id`.
pub fn sample_trajectories(
    checkpoint: &ModelCheckpoint,
    dataset: &PairedDataset,
    run_id: u32,
    cfg: &SamplerConfig,
) -> Result<Vec<Trajectory>> {
    cfg.validate()?;
    crate::alloc::retain_heap();
    let model = checkpoint.model()?;
    let stats = checkpoint.norm_stats;
    let run = dataset
        .run(run_id)
        .ok_or_else(|| Error::Validation(format!("run {run_id} is not in the dataset")))?;
    let p = plan(dataset, run, cfg, &stats)?;
    let gcm_norm: Vec<f64> = run.values().iter().map(|&v| stats.apply(v)).collect();
    let times: Vec<f64> = run.times()[p.start_idx..p.start_idx + cfg.horizon].to_vec();

    (0..cfg.n_trajectories)
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(run_seed(cfg.seed, run_id));
            rng.set_stream(k as u64);
            let mut history = p.history.clone();
            let mut values = Vec::with_capacity(cfg.horizon);
            let mut pred_mean = Vec::with_capacity(cfg.horizon);
            let mut pred_std = Vec::with_capacity(cfg.horizon);
            for day in p.start_idx..p.start_idx + cfg.horizon {
                let ex = step_example(&model, run_id, run, &gcm_norm, &history, day, cfg)?;
                let pred = model.predict(&ex)?[0];
                let z = if cfg.deterministic_mode {
                    pred.mean
                } else {
                    let e: f64 = rng.sample(StandardNormal);
                    pred.mean + pred.std * e
                };
                if !z.is_finite() {
                    return Err(Error::Numeric(format!("non-finite sample on day {}", run.times()[day])));
                }
                history.push(z);
                values.push(stats.invert(z));
                pred_mean.push(stats.invert(pred.mean));
                pred_std.push(pred.std * stats.std);
            }
            Ok(Trajectory {
                run_id,
                index: k,
                series: TimeSeries::new(times.clone(), values, SourceTag::Obs)?,
                pred_mean,
                pred_std,
            })
        })
        .collect()
}

/// [`sample_trajectories`] for every run of the dataset.
pub fn sample_all_runs(
    checkpoint: &ModelCheckpoint,
    dataset: &PairedDataset,
    cfg: &SamplerConfig,
) -> Result<BTreeMap<u32, Vec<Trajectory>>> {
    dataset
        .run_ids()
        .iter()
        .map(|&id| Ok((id, sample_trajectories(checkpoint, dataset, id, cfg)?)))
        .collect()
}

/// Conditioning set sizes `(observations, climate-model days)` of the
/// example used for the day at run index `day`; exposed for diagnostics.
pub fn conditioning_sizes(
    checkpoint: &ModelCheckpoint,
    dataset: &PairedDataset,
    run_id: u32,
    cfg: &SamplerConfig,
    offset: usize,
) -> Result<(usize, usize)> {
    cfg.validate()?;
    let model = checkpoint.model()?;
    let run = dataset
        .run(run_id)
        .ok_or_else(|| Error::Validation(format!("run {run_id} is not in the dataset")))?;
    let p = plan(dataset, run, cfg, &checkpoint.norm_stats)?;
    if offset >= cfg.horizon {
        return Err(Error::Config(format!("offset {offset} beyond horizon {}", cfg.horizon)));
    }
    let mut history = p.history.clone();
    history.extend(std::iter::repeat_n(0.0, offset));
    let gcm: Vec<f64> = run.values().to_vec();
    let ex = step_example(&model, run_id, run, &gcm, &history, p.start_idx + offset, cfg)?;
    Ok((ex.context_obs.len(), ex.context_gcm.len()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleRow {
    pub run: u32,
    pub trajectory: usize,
    pub t: f64,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictiveRow {
    pub run: u32,
    pub trajectory: usize,
    pub t: f64,
    pub mean: f64,
    pub std: f64,
}

fn write_lines(path: &Path, header: &str, lines: impl Iterator<Item = String>) -> Result<()> {
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    writeln!(w, "{header}").map_err(io)?;
    for line in lines {
        writeln!(w, "{line}").map_err(io)?;
    }
    w.flush().map_err(io)
}

fn flatten(trajs: &BTreeMap<u32, Vec<Trajectory>>) -> impl Iterator<Item = (&Trajectory, usize)> {
    trajs.values().flatten().flat_map(|tr| (0..tr.series.len()).map(move |i| (tr, i)))
}

/// Writes `run,trajectory,t,value`.
pub fn write_samples_csv(path: impl AsRef<Path>, trajs: &BTreeMap<u32, Vec<Trajectory>>) -> Result<()> {
    let lines = flatten(trajs).map(|(tr, i)| {
        format!("{},{},{},{}", tr.run_id, tr.index, tr.series.times()[i], tr.series.values()[i])
    });
    write_lines(path.as_ref(), "run,trajectory,t,value", lines)
}

/// Writes `run,trajectory,t,mean,std` with each day's predictive distribution.
pub fn write_predictive_csv(path: impl AsRef<Path>, trajs: &BTreeMap<u32, Vec<Trajectory>>) -> Result<()> {
    let lines = flatten(trajs).map(|(tr, i)| {
        format!(
            "{},{},{},{},{}",
            tr.run_id,
            tr.index,
            tr.series.times()[i],
            tr.pred_mean[i],
            tr.pred_std[i]
        )
    });
    write_lines(path.as_ref(), "run,trajectory,t,mean,std", lines)
}

pub fn read_samples_csv(path: impl AsRef<Path>) -> Result<Vec<SampleRow>> {
    read_rows(path.as_ref(), &["run", "trajectory", "t", "value"])
}

pub fn read_predictive_csv(path: impl AsRef<Path>) -> Result<Vec<PredictiveRow>> {
    read_rows(path.as_ref(), &["run", "trajectory", "t", "mean", "std"])
}
