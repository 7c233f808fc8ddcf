use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use log::info;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tempbc::baselines::write_baseline_csv;
use tempbc::data::{load_paired, write_gcm_csv, write_obs_csv};
use tempbc::sampler::{write_predictive_csv, write_samples_csv};
use tempbc::train::write_log_csv;
use tempbc::{
    apply_baseline, sample_all_runs, sample_trajectories, train_with, BaselineSpec, Calendar, Error, Kernel,
    Method, ModelCheckpoint, ModelConfig, PairedDataset, Result, SamplerConfig, StopReason, SynthMeta,
    TrainConfig,
};

use crate::args::{BaselineArgs, DataArgs, SampleArgs, SynthArgs, TrainArgs};
use crate::manifest::{io_error, write_json, Outputs};

pub const DEFAULT_EPOCH: &str = "2000-01-01";
pub const DEFAULT_LOCATION: &str = "site";

pub fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| io_error(p, e))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
        }
    }
}

/// Contents of a `--data` file. Relative paths resolve against the file's directory.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub obs: Option<PathBuf>,
    pub gcm: Option<PathBuf>,
    pub epoch: Option<String>,
    pub location_id: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct DataSource {
    pub obs: PathBuf,
    pub gcm: PathBuf,
    pub epoch: String,
    pub location_id: String,
}

impl DataSource {
    pub fn resolve(args: &DataArgs) -> Result<Self> {
        let mut file: DataConfig = read_config(args.data.as_deref())?;
        if let Some(base) = args.data.as_deref().and_then(Path::parent) {
            for p in [&mut file.obs, &mut file.gcm].into_iter().flatten() {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        let missing = |what: &str| Error::Config(format!("no {what} file given (use --{what} or --data)"));
        Ok(DataSource {
            obs: args.obs.clone().or(file.obs).ok_or_else(|| missing("obs"))?,
            gcm: args.gcm.clone().or(file.gcm).ok_or_else(|| missing("gcm"))?,
            epoch: args.epoch.clone().or(file.epoch).unwrap_or_else(|| DEFAULT_EPOCH.into()),
            location_id: args.location.clone().or(file.location_id).unwrap_or_else(|| DEFAULT_LOCATION.into()),
        })
    }

    pub fn load(&self, out: &mut Outputs) -> Result<(PairedDataset, Calendar)> {
        let calendar = Calendar::parse(&self.epoch)?;
        out.input(&self.obs);
        out.input(&self.gcm);
        Ok((load_paired(&self.obs, &self.gcm, &self.location_id)?, calendar))
    }
}

pub fn synth(a: SynthArgs) -> Result<ExitCode> {
    let mut meta: SynthMeta = read_config(a.config.as_deref())?;
    if let Some(v) = a.days {
        meta.days = v;
    }
    if let Some(v) = a.runs {
        meta.runs = v;
    }
    if let Some(v) = a.mean_bias {
        meta.mean_bias = v;
    }
    if let Some(v) = a.time_shift {
        meta.time_shift = v;
    }
    if let Some(v) = a.noise_std {
        meta.noise_std = v;
    }
    if let Some(v) = a.lengthscale {
        meta.kernel = Kernel::rbf(v)?;
    }
    if let Some(v) = a.seed {
        meta.seed = v;
    }
    let pair = meta.generate()?;
    let mut out = Outputs::new("synth", &a.out_dir)?;
    out.seed("synth", meta.seed);
    let runs: Vec<(u32, &tempbc::TimeSeries)> =
        std::iter::once(&pair.gcm).chain(&pair.extra_runs).enumerate().map(|(i, s)| (i as u32, s)).collect();
    write_obs_csv(out.file("obs.csv"), &pair.obs)?;
    write_gcm_csv(out.file("gcm.csv"), &runs)?;
    write_json(&out.file("synth.json"), &meta)?;
    let data = DataConfig {
        obs: Some("obs.csv".into()),
        gcm: Some("gcm.csv".into()),
        epoch: Some(DEFAULT_EPOCH.into()),
        location_id: Some("synthetic".into()),
    };
    write_json(&out.file("data.json"), &data)?;
    info!("wrote {} days and {} runs to {}", meta.days, runs.len(), a.out_dir.display());
    out.commit(&meta)?;
    Ok(ExitCode::SUCCESS)
}

/// Contents of a `train --config` file. Time features are taken from `model`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainFile {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

#[derive(Serialize)]
struct TrainRecord<'a> {
    data: &'a DataSource,
    train_end: Option<f64>,
    model: ModelConfig,
    train: TrainConfig,
}

pub fn train(a: TrainArgs) -> Result<ExitCode> {
    let mut cfg: TrainFile = read_config(a.config.as_deref())?;
    if let Some(v) = a.steps {
        cfg.train.steps = v;
    }
    if let Some(v) = a.seed {
        cfg.train.seed = v;
    }
    if let Some(v) = a.learning_rate {
        cfg.train.learning_rate = v;
    }
    cfg.train.batch.features = cfg.model.features;
    cfg.train.validate()?;
    cfg.model.validate()?;
    let source = DataSource::resolve(&a.data)?;
    let mut out = Outputs::new("train", &a.out_dir)?;
    let (mut ds, _) = source.load(&mut out)?;
    if let Some(end) = a.train_end {
        ds = ds.truncate_obs(end)?;
    }
    out.seed("train", cfg.train.seed);
    let ck_path = out.register(a.checkpoint.clone().unwrap_or_else(|| a.out_dir.join("checkpoint.json")));
    let log_path = out.file("train_log.csv");
    let result = train_with(&ds, &cfg.model, &cfg.train, |ck| ck.save(&ck_path))?;
    result.checkpoint.save(&ck_path)?;
    write_log_csv(&log_path, &result.log)?;
    info!("stopped after {} steps: {:?}", result.checkpoint.meta.steps, result.stop);
    out.commit(&TrainRecord {
        data: &source,
        train_end: a.train_end,
        model: cfg.model,
        train: cfg.train,
    })?;
    if result.stop == StopReason::NonFinite {
        eprintln!("error: numeric failure: non-finite loss; kept the last finite checkpoint");
        return Ok(ExitCode::from(crate::EXIT_NUMERIC));
    }
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct SampleRecord<'a> {
    data: &'a DataSource,
    run: Option<u32>,
    sampler: SamplerConfig,
}

pub fn sample(a: SampleArgs) -> Result<ExitCode> {
    let mut cfg: SamplerConfig = read_config(a.config.as_deref())?;
    if let Some(v) = a.horizon {
        cfg.horizon = v;
    }
    if let Some(v) = a.trajectories {
        cfg.n_trajectories = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if a.start.is_some() {
        cfg.start = a.start;
    }
    cfg.deterministic_mode |= a.deterministic;
    cfg.validate()?;
    let source = DataSource::resolve(&a.data)?;
    let mut out = Outputs::new("sample", &a.out_dir)?;
    out.input(&a.checkpoint);
    let ck = ModelCheckpoint::load(&a.checkpoint)?;
    let (ds, _) = source.load(&mut out)?;
    out.seed("sample", cfg.seed);
    let trajs = match a.run {
        Some(run) => BTreeMap::from([(run, sample_trajectories(&ck, &ds, run, &cfg)?)]),
        None => sample_all_runs(&ck, &ds, &cfg)?,
    };
    write_samples_csv(out.file("samples.csv"), &trajs)?;
    write_predictive_csv(out.file("predictive.csv"), &trajs)?;
    out.commit(&SampleRecord {
        data: &source,
        run: a.run,
        sampler: cfg,
    })?;
    Ok(ExitCode::SUCCESS)
}

/// Contents of a `baseline --config` file; flags override each field.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineFile {
    pub method: Option<Method>,
    pub ref_period: Option<(f64, f64)>,
    pub proj_period: Option<(f64, f64)>,
    pub template_period: Option<(f64, f64)>,
    pub monthly: Option<bool>,
}

fn period(name: &str, base: Option<(f64, f64)>, start: Option<f64>, end: Option<f64>) -> Result<Option<(f64, f64)>> {
    match (base, start, end) {
        (_, Some(s), Some(e)) => Ok(Some((s, e))),
        (Some((s, e)), start, end) => Ok(Some((start.unwrap_or(s), end.unwrap_or(e)))),
        (None, None, None) => Ok(None),
        (None, _, _) => Err(Error::Config(format!("{name} period needs both a start and an end"))),
    }
}

#[derive(Serialize)]
struct BaselineRecord<'a> {
    data: &'a DataSource,
    baseline: BaselineSpec,
}

pub fn baseline(a: BaselineArgs) -> Result<ExitCode> {
    let file: BaselineFile = read_config(a.config.as_deref())?;
    let method = match &a.method {
        Some(m) => m.parse()?,
        None => file.method.ok_or_else(|| Error::Config("no baseline method given".into()))?,
    };
    let required = |name: &str, p: Option<(f64, f64)>| p.ok_or_else(|| Error::Config(format!("no {name} period given")));
    let spec = BaselineSpec {
        method,
        ref_period: required("reference", period("reference", file.ref_period, a.ref_start, a.ref_end)?)?,
        proj_period: required("projection", period("projection", file.proj_period, a.proj_start, a.proj_end)?)?,
        template_period: period("template", file.template_period, a.template_start, a.template_end)?,
        monthly: !a.pooled && file.monthly.unwrap_or(true),
    };
    spec.validate()?;
    let source = DataSource::resolve(&a.data)?;
    let mut out = Outputs::new("baseline", &a.out_dir)?;
    out.manifest_name(format!("baseline_{}.manifest.json", method_name(method)));
    let (ds, calendar) = source.load(&mut out)?;
    let corrected = apply_baseline(&spec, &ds, &calendar)?;
    write_baseline_csv(out.file(&format!("baseline_{}.csv", method_name(method))), &corrected)?;
    out.commit(&BaselineRecord {
        data: &source,
        baseline: spec,
    })?;
    Ok(ExitCode::SUCCESS)
}

fn method_name(m: Method) -> &'static str {
    match m {
        Method::Mean => "mean",
        Method::Meanvar => "meanvar",
        Method::Eqm => "eqm",
        Method::Ecbc => "ecbc",
    }
}
