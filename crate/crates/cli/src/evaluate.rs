use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::process::ExitCode;

use serde::Serialize;
use tempbc::baselines::read_baseline_csv;
use tempbc::data::{load_gcm_csv, load_obs_csv};
use tempbc::metrics::{heatwave_runs, mean_relative_heatwave_error, probabilities};
use tempbc::sampler::{read_predictive_csv, read_samples_csv};
use tempbc::{report, Error, ReportConfig, Result, ScoreReport, TimeSeries};

use crate::args::{EvalArgs, ReportArgs};
use crate::commands::read_config;
use crate::manifest::{io_error, write_json, write_text, Outputs};

/// Candidate series keyed by `(run, member)` on a shared day grid.
#[derive(Debug, Clone)]
pub struct Ensemble {
    pub times: Vec<f64>,
    pub members: BTreeMap<(u32, usize), Vec<f64>>,
}

impl Ensemble {
    fn from_series(series: BTreeMap<(u32, usize), (Vec<f64>, Vec<f64>)>, what: &str) -> Result<Self> {
        let mut times: Option<Vec<f64>> = None;
        let mut members = BTreeMap::new();
        for (key, (t, v)) in series {
            match &times {
                None => times = Some(t),
                Some(first) if *first != t => {
                    return Err(Error::Validation(format!(
                        "{what}: run {} member {} covers different days from the first member",
                        key.0, key.1
                    )))
                }
                Some(_) => {}
            }
            members.insert(key, v);
        }
        let times = times.ok_or_else(|| Error::Validation(format!("{what}: no series")))?;
        Ok(Ensemble { times, members })
    }

    /// Reads sampler output or baseline output, picking the format from the header.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
        let header = text.lines().next().unwrap_or_default();
        let mut series: BTreeMap<(u32, usize), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
        if header.split(',').any(|c| c.trim() == "trajectory") {
            for r in read_samples_csv(path)? {
                let e = series.entry((r.run, r.trajectory)).or_default();
                e.0.push(r.t);
                e.1.push(r.value);
            }
        } else {
            for (run, s) in read_baseline_csv(path)? {
                series.insert((run, 0), (s.times().to_vec(), s.values().to_vec()));
            }
        }
        Self::from_series(series, &path.display().to_string())
    }

    pub fn from_runs(runs: &[(u32, TimeSeries)], times: &[f64], what: &str) -> Result<Self> {
        let mut members = BTreeMap::new();
        for (id, s) in runs {
            members.insert((*id, 0), align(s, times, &format!("{what} run {id}"))?);
        }
        Ok(Ensemble {
            times: times.to_vec(),
            members,
        })
    }

    pub fn retain_run(&mut self, run: u32) -> Result<()> {
        self.members.retain(|k, _| k.0 == run);
        if self.members.is_empty() {
            return Err(Error::Validation(format!("no series for run {run}")));
        }
        Ok(())
    }

    pub fn values(&self) -> Vec<Vec<f64>> {
        self.members.values().cloned().collect()
    }
}

/// Values of `series` on `times`; every day must be present.
pub fn align(series: &TimeSeries, times: &[f64], what: &str) -> Result<Vec<f64>> {
    times
        .iter()
        .map(|&t| {
            series
                .index_of(t)
                .map(|i| series.values()[i])
                .ok_or_else(|| Error::Validation(format!("{what} has no value on day {t}")))
        })
        .collect()
}

/// Per-member predictive means and standard deviations ordered like `ens`.
fn load_predictive(path: &Path, ens: &Ensemble) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let mut by: BTreeMap<(u32, usize), (Vec<f64>, Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in read_predictive_csv(path)? {
        let e = by.entry((r.run, r.trajectory)).or_default();
        e.0.push(r.t);
        e.1.push(r.mean);
        e.2.push(r.std);
    }
    let mut means = Vec::new();
    let mut stds = Vec::new();
    for key in ens.members.keys() {
        match by.remove(key) {
            Some((t, m, s)) if t == ens.times => {
                means.push(m);
                stds.push(s);
            }
            _ => {
                return Err(Error::Validation(format!(
                    "{}: predictive rows for run {} trajectory {} do not match the samples",
                    path.display(),
                    key.0,
                    key.1
                )))
            }
        }
    }
    Ok((means, stds))
}

fn score_ensemble(
    ens: &Ensemble,
    observed: &[f64],
    predictive: Option<&(Vec<Vec<f64>>, Vec<Vec<f64>>)>,
    cfg: &ReportConfig,
) -> Result<ScoreReport> {
    let members = ens.values();
    report(&members, observed, predictive.map(|(m, s)| (m.as_slice(), s.as_slice())), cfg)
}

fn qq_csv(r: &ScoreReport, n: usize) -> String {
    let mut s = String::from("p,candidate,observed\n");
    for (p, (c, o)) in probabilities(n).iter().zip(&r.quantiles) {
        let _ = writeln!(s, "{p},{c},{o}");
    }
    s
}

fn pacf_csv(r: &ScoreReport) -> String {
    let mut s = String::from("lag,candidate,observed\n");
    for ((lag, c), o) in r.pacf_lags.iter().zip(&r.pacf).zip(&r.pacf_observed) {
        let _ = writeln!(s, "{lag},{c},{o}");
    }
    s
}

#[derive(Serialize)]
struct EvalRecord<'a> {
    candidate: &'a Path,
    obs: &'a Path,
    predictive: Option<&'a Path>,
    run: Option<u32>,
    report: ReportConfig,
}

pub fn eval(a: EvalArgs) -> Result<ExitCode> {
    let mut cfg: ReportConfig = read_config(a.config.as_deref())?;
    if a.threshold.is_some() {
        cfg.heatwave_threshold = a.threshold;
    }
    let mut out = Outputs::new("eval", &a.out_dir)?;
    out.manifest_name(format!("{}.manifest.json", a.name));
    out.input(&a.candidate);
    out.input(&a.obs);
    let mut ens = Ensemble::load(&a.candidate)?;
    if let Some(run) = a.run {
        ens.retain_run(run)?;
    }
    let observed = align(&load_obs_csv(&a.obs)?, &ens.times, "observation series")?;
    let predictive = match &a.predictive {
        Some(p) => {
            out.input(p);
            Some(load_predictive(p, &ens)?)
        }
        None => None,
    };
    let r = score_ensemble(&ens, &observed, predictive.as_ref(), &cfg)?;
    write_json(&out.file(&format!("{}_report.json", a.name)), &r)?;
    write_text(&out.file(&format!("{}_qq.csv", a.name)), &qq_csv(&r, cfg.n_quantiles))?;
    write_text(&out.file(&format!("{}_pacf.csv", a.name)), &pacf_csv(&r))?;
    if let Some(hw) = &r.heatwaves {
        let mut s = String::from("run,member,count\n");
        for ((run, m), c) in ens.members.keys().zip(&hw.counts) {
            let _ = writeln!(s, "{run},{m},{c}");
        }
        write_text(&out.file(&format!("{}_heatwaves.csv", a.name)), &s)?;
    }
    println!(
        "mse {:.6} loglik {:.6} ({:?}) ensemble-mean bias {:.6}",
        r.mse, r.loglik, r.loglik_convention, r.ensemble_mean_bias
    );
    out.commit(&EvalRecord {
        candidate: &a.candidate,
        obs: &a.obs,
        predictive: a.predictive.as_deref(),
        run: a.run,
        report: cfg,
    })?;
    Ok(ExitCode::SUCCESS)
}

/// One row of the comparison table.
#[derive(Debug, Clone, Serialize)]
pub struct MethodSummary {
    pub method: String,
    /// Mean relative heatwave-count error per threshold, in percent.
    pub heatwave_error_pct: Vec<Option<f64>>,
    pub score: ScoreReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct Comparison {
    pub first_day: f64,
    pub last_day: f64,
    pub thresholds: Vec<f64>,
    pub observed_heatwaves: Vec<usize>,
    pub methods: Vec<MethodSummary>,
}

#[derive(Serialize)]
struct ReportRecord<'a> {
    obs: &'a Path,
    samples: &'a Path,
    predictive: Option<&'a Path>,
    baselines: &'a [String],
    gcm: Option<&'a Path>,
    thresholds: &'a [f64],
    report: ReportConfig,
}

fn parse_named(spec: &str) -> Result<(String, &Path)> {
    match spec.split_once('=') {
        Some((name, path)) if !name.is_empty() && !path.is_empty() => Ok((name.to_string(), Path::new(path))),
        _ => Err(Error::Config(format!("expected NAME=PATH, got `{spec}`"))),
    }
}

pub fn compare(a: ReportArgs) -> Result<ExitCode> {
    let mut cfg: ReportConfig = read_config(a.config.as_deref())?;
    cfg.heatwave_threshold = None;
    if a.thresholds.iter().any(|t| !t.is_finite()) {
        return Err(Error::Config("thresholds must be finite".into()));
    }
    let mut out = Outputs::new("report", &a.out_dir)?;
    out.input(&a.obs);
    out.input(&a.samples);
    let model = Ensemble::load(&a.samples)?;
    let observed = align(&load_obs_csv(&a.obs)?, &model.times, "observation series")?;
    let predictive = match &a.predictive {
        Some(p) => {
            out.input(p);
            Some(load_predictive(p, &model)?)
        }
        None => None,
    };

    let mut sources = vec![("model".to_string(), model.clone(), predictive)];
    for spec in &a.baselines {
        let (name, path) = parse_named(spec)?;
        out.input(path);
        let runs = read_baseline_csv(path)?;
        sources.push((name.clone(), Ensemble::from_runs(&runs, &model.times, &name)?, None));
    }
    if let Some(g) = &a.gcm {
        out.input(g);
        sources.push(("gcm".into(), Ensemble::from_runs(&load_gcm_csv(g)?, &model.times, "gcm")?, None));
    }

    let observed_heatwaves: Vec<usize> = a.thresholds.iter().map(|&t| heatwave_runs(&observed, t).count).collect();
    let mut dist = String::from("source,run,member,threshold,count\n");
    for (t, c) in a.thresholds.iter().zip(&observed_heatwaves) {
        let _ = writeln!(dist, "observed,,,{t},{c}");
    }
    let mut methods = Vec::new();
    for (name, ens, pred) in &sources {
        let score = score_ensemble(ens, &observed, pred.as_ref(), &cfg)?;
        let mut errors = Vec::new();
        for (&t, &obs_count) in a.thresholds.iter().zip(&observed_heatwaves) {
            let mut counts = Vec::new();
            for ((run, m), v) in &ens.members {
                let c = heatwave_runs(v, t).count;
                let _ = writeln!(dist, "{name},{run},{m},{t},{c}");
                counts.push(c);
            }
            errors.push(mean_relative_heatwave_error(&counts, obs_count).ok().map(|e| 100.0 * e));
        }
        methods.push(MethodSummary {
            method: name.clone(),
            heatwave_error_pct: errors,
            score,
        });
    }

    let mut table = String::from("method,mse,loglik,loglik_convention");
    for t in &a.thresholds {
        let _ = write!(table, ",heatwave_error_pct_{t}");
    }
    table.push('\n');
    for m in &methods {
        let conv = serde_json::to_value(m.score.loglik_convention)?;
        let _ = write!(table, "{},{},{},{}", m.method, m.score.mse, m.score.loglik, conv.as_str().unwrap_or_default());
        for e in &m.heatwave_error_pct {
            match e {
                Some(v) => {
                    let _ = write!(table, ",{v}");
                }
                None => table.push(','),
            }
        }
        table.push('\n');
    }
    print!("{table}");

    let comparison = Comparison {
        first_day: model.times[0],
        last_day: *model.times.last().unwrap_or(&model.times[0]),
        thresholds: a.thresholds.clone(),
        observed_heatwaves,
        methods,
    };
    write_text(&out.file("heatwave_distribution.csv"), &dist)?;
    write_text(&out.file("comparison.csv"), &table)?;
    write_json(&out.file("report.json"), &comparison)?;
    out.commit(&ReportRecord {
        obs: &a.obs,
        samples: &a.samples,
        predictive: a.predictive.as_deref(),
        baselines: &a.baselines,
        gcm: a.gcm.as_deref(),
        thresholds: &a.thresholds,
        report: cfg,
    })?;
    Ok(ExitCode::SUCCESS)
}
