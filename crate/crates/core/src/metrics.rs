//! Evaluation statistics.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::data::TimeSeries;
use crate::{Error, Result};

/// Variance floor applied to the constant-variance log-likelihood.
pub const MSE_FLOOR: f64 = 1e-12;
/// Days per trend-averaging block.
pub const BLOCK_DAYS: usize = 5 * 365;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatwaveStats {
    pub threshold: f64,
    pub count: usize,
    pub run_lengths: Vec<usize>,
}

/// Maximal runs of values strictly above `threshold` lasting three days or more.
pub fn heatwave_runs(values: &[f64], threshold: f64) -> HeatwaveStats {
    let mut run_lengths = Vec::new();
    let mut run = 0usize;
    for &v in values.iter().chain(std::iter::once(&f64::NEG_INFINITY)) {
        if v > threshold {
            run += 1;
        } else {
            if run >= 3 {
                run_lengths.push(run);
            }
            run = 0;
        }
    }
    HeatwaveStats {
        threshold,
        count: run_lengths.len(),
        run_lengths,
    }
}

/// [`heatwave_runs`] on a series that must be on a gap-free daily grid.
pub fn heatwave_count(series: &TimeSeries, threshold: f64) -> Result<HeatwaveStats> {
    if !series.is_daily_contiguous() {
        return Err(Error::Validation("heatwave counting needs a gap-free daily series".into()));
    }
    Ok(heatwave_runs(series.values(), threshold))
}

/// Percentage difference between a candidate and the observed heatwave count.
pub fn relative_heatwave_error(candidate: usize, observed: usize) -> Result<f64> {
    if observed == 0 {
        return Err(Error::Validation("no observed heatwaves to compare against".into()));
    }
    Ok(100.0 * (candidate as f64 - observed as f64).abs() / observed as f64)
}

/// Mean of [`relative_heatwave_error`] over several candidates.
pub fn mean_relative_heatwave_error(candidates: &[usize], observed: usize) -> Result<f64> {
    if candidates.is_empty() {
        return Err(Error::Validation("no candidate counts".into()));
    }
    let mut total = 0.0;
    for &c in candidates {
        total += relative_heatwave_error(c, observed)?;
    }
    Ok(total / candidates.len() as f64)
}

/// Empirical quantile of sorted data, interpolating linearly between order
/// statistics at position `p * (n - 1)`.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = p.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn sorted(values: &[f64]) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::Validation("empty series".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("series contains non-finite values".into()));
    }
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    Ok(s)
}

/// Evenly spaced probabilities `k / (n - 1)`; a single quantile is the median.
pub fn probabilities(n_quantiles: usize) -> Vec<f64> {
    match n_quantiles {
        0 => Vec::new(),
        1 => vec![0.5],
        n => (0..n).map(|k| k as f64 / (n - 1) as f64).collect(),
    }
}

/// Matched quantiles `(a, b)` of two samples.
pub fn qq(a: &[f64], b: &[f64], n_quantiles: usize) -> Result<Vec<(f64, f64)>> {
    if n_quantiles == 0 {
        return Err(Error::Config("n_quantiles must be positive".into()));
    }
    let (sa, sb) = (sorted(a)?, sorted(b)?);
    Ok(probabilities(n_quantiles)
        .into_iter()
        .map(|p| (quantile_sorted(&sa, p), quantile_sorted(&sb, p)))
        .collect())
}

/// Partial autocorrelations at lags `1..=max_lag` by the Durbin-Levinson
/// recursion on biased sample autocorrelations.
pub fn pacf(values: &[f64], max_lag: usize) -> Result<Vec<f64>> {
    let n = values.len();
    if max_lag == 0 {
        return Err(Error::Config("max_lag must be positive".into()));
    }
    if n < max_lag + 1 {
        return Err(Error::Validation(format!("{n} values are too few for lag {max_lag}")));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let dev: Vec<f64> = values.iter().map(|v| v - mean).collect();
    let c0 = dev.iter().map(|d| d * d).sum::<f64>();
    if !(c0 > 0.0) || !c0.is_finite() {
        return Err(Error::Validation("series has zero or non-finite variance".into()));
    }
    let rho: Vec<f64> = (0..=max_lag)
        .map(|k| dev[..n - k].iter().zip(&dev[k..]).map(|(a, b)| a * b).sum::<f64>() / c0)
        .collect();

    let mut out = Vec::with_capacity(max_lag);
    let mut phi: Vec<f64> = Vec::with_capacity(max_lag);
    let mut v = 1.0;
    for k in 1..=max_lag {
        let num = rho[k] - (1..k).map(|j| phi[j - 1] * rho[k - j]).sum::<f64>();
        let a = if v > 0.0 { num / v } else { 0.0 };
        let prev = phi.clone();
        for j in 1..k {
            phi[j - 1] = prev[j - 1] - a * prev[k - j - 1];
        }
        phi.push(a);
        v *= 1.0 - a * a;
        out.push(a);
    }
    Ok(out)
}

/// Means over consecutive 1825-day blocks; a trailing partial block is dropped.
pub fn five_year_means(values: &[f64]) -> Result<Vec<f64>> {
    if values.len() < BLOCK_DAYS {
        return Err(Error::Validation(format!(
            "{} days are shorter than one {BLOCK_DAYS}-day block",
            values.len()
        )));
    }
    Ok(values
        .chunks_exact(BLOCK_DAYS)
        .map(|c| c.iter().sum::<f64>() / BLOCK_DAYS as f64)
        .collect())
}

/// Mean squared error and Gaussian log-likelihood of a point forecast.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointScore {
    pub mse: f64,
    pub loglik: f64,
    /// The variance was raised to [`MSE_FLOOR`].
    pub floored: bool,
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Validation(format!("{a} predicted values for {b} observations")));
    }
    if a == 0 {
        return Err(Error::Validation("nothing to score".into()));
    }
    Ok(())
}

/// Scores `candidate` against `observed` with one shared variance equal to
/// the mse.
pub fn score(candidate: &[f64], observed: &[f64]) -> Result<PointScore> {
    check_lengths(candidate.len(), observed.len())?;
    let n = observed.len() as f64;
    let mse = candidate.iter().zip(observed).map(|(c, o)| (c - o) * (c - o)).sum::<f64>() / n;
    if !mse.is_finite() {
        return Err(Error::Numeric("non-finite mean squared error".into()));
    }
    let floored = mse < MSE_FLOOR;
    if floored {
        warn!("mse {mse:e} is below {MSE_FLOOR:e}; log-likelihood uses the floor");
    }
    let var = mse.max(MSE_FLOOR);
    let loglik = -HALF_LN_2PI - 0.5 * var.ln() - 0.5 * mse / var;
    Ok(PointScore { mse, loglik, floored })
}

/// Mean log-likelihood of `observed` under per-point Gaussians.
pub fn predictive_loglik(means: &[f64], stds: &[f64], observed: &[f64]) -> Result<f64> {
    mixture_loglik(&[means.to_vec()], &[stds.to_vec()], observed)
}

/// Mean log-likelihood of `observed` under equally weighted Gaussian
/// mixtures; `means[m][i]` and `stds[m][i]` describe component `m` at point `i`.
pub fn mixture_loglik(means: &[Vec<f64>], stds: &[Vec<f64>], observed: &[f64]) -> Result<f64> {
    if means.is_empty() || means.len() != stds.len() {
        return Err(Error::Validation("mixture needs matching, non-empty mean and std sets".into()));
    }
    for (m, s) in means.iter().zip(stds) {
        check_lengths(m.len(), observed.len())?;
        check_lengths(s.len(), observed.len())?;
    }
    let ln_m = (means.len() as f64).ln();
    let mut total = 0.0;
    let mut terms = vec![0.0; means.len()];
    for (i, &o) in observed.iter().enumerate() {
        for (k, (m, s)) in means.iter().zip(stds).enumerate() {
            let sd = s[i];
            if !(sd > 0.0) || !sd.is_finite() {
                return Err(Error::Numeric(format!("predictive std {sd} is not positive")));
            }
            let r = (o - m[i]) / sd;
            terms[k] = -HALF_LN_2PI - sd.ln() - 0.5 * r * r;
        }
        let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        total += max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln() - ln_m;
    }
    let ll = total / observed.len() as f64;
    if !ll.is_finite() {
        return Err(Error::Numeric("non-finite log-likelihood".into()));
    }
    Ok(ll)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoglikConvention {
    /// Gaussian around each value with variance equal to its mse.
    ConstantVariance,
    /// Equally weighted mixture of per-member predictive Gaussians.
    PredictiveMixture,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatwaveComparison {
    pub threshold: f64,
    pub observed_count: usize,
    /// One count per ensemble member.
    pub counts: Vec<usize>,
    pub mean_relative_error: Option<f64>,
}

/// Evaluation summary of an ensemble of candidate series against
/// observations; a single series is a one-member ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub n_members: usize,
    pub n_days: usize,
    /// Mean over members of the per-member mse.
    pub mse: f64,
    pub loglik: f64,
    pub loglik_convention: LoglikConvention,
    pub loglik_floored: bool,
    pub ensemble_mean_mse: f64,
    /// Mean of ensemble mean minus observation.
    pub ensemble_mean_bias: f64,
    /// `(candidate, observed)` quantile pairs over all member values.
    pub quantiles: Vec<(f64, f64)>,
    /// Member-averaged partial autocorrelation at `pacf_lags`.
    pub pacf: Vec<f64>,
    pub pacf_observed: Vec<f64>,
    pub pacf_lags: Vec<usize>,
    /// Block means of the ensemble mean.
    pub five_year_means: Option<Vec<f64>>,
    pub five_year_means_observed: Option<Vec<f64>>,
    pub heatwaves: Option<HeatwaveComparison>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReportConfig {
    pub n_quantiles: usize,
    pub max_lag: usize,
    /// Reported lags start here.
    pub min_lag: usize,
    pub heatwave_threshold: Option<f64>,
}

impl Default for ReportConfig {
    fn default() -> Self {
        ReportConfig {
            n_quantiles: 99,
            max_lag: 14,
            min_lag: 2,
            heatwave_threshold: None,
        }
    }
}

/// Builds a [`ScoreReport`]. `predictive`, when given, holds per-member
/// `(means, stds)` and switches the log-likelihood to the mixture convention.
pub fn report(
    members: &[Vec<f64>],
    observed: &[f64],
    predictive: Option<(&[Vec<f64>], &[Vec<f64>])>,
    cfg: &ReportConfig,
) -> Result<ScoreReport> {
    if cfg.min_lag == 0 || cfg.min_lag > cfg.max_lag {
        return Err(Error::Config("need 1 <= min_lag <= max_lag".into()));
    }
    if members.is_empty() {
        return Err(Error::Validation("no candidate series".into()));
    }
    let k = members.len() as f64;
    let mut point = Vec::with_capacity(members.len());
    for m in members {
        point.push(score(m, observed)?);
    }
    let mse = point.iter().map(|p| p.mse).sum::<f64>() / k;
    let (loglik, convention, floored) = match predictive {
        Some((m, s)) => (mixture_loglik(m, s, observed)?, LoglikConvention::PredictiveMixture, false),
        None => (
            point.iter().map(|p| p.loglik).sum::<f64>() / k,
            LoglikConvention::ConstantVariance,
            point.iter().any(|p| p.floored),
        ),
    };
    let ens: Vec<f64> = (0..observed.len())
        .map(|i| members.iter().map(|m| m[i]).sum::<f64>() / k)
        .collect();
    let n = observed.len() as f64;
    let ensemble_mean_mse = ens.iter().zip(observed).map(|(e, o)| (e - o) * (e - o)).sum::<f64>() / n;
    let ensemble_mean_bias = ens.iter().zip(observed).map(|(e, o)| e - o).sum::<f64>() / n;

    let pooled: Vec<f64> = members.iter().flatten().copied().collect();
    let mut pacf_sum = vec![0.0; cfg.max_lag];
    for m in members {
        for (acc, v) in pacf_sum.iter_mut().zip(pacf(m, cfg.max_lag)?) {
            *acc += v / k;
        }
    }
    let from = cfg.min_lag - 1;
    let heatwaves = cfg.heatwave_threshold.map(|thr| {
        let observed_count = heatwave_runs(observed, thr).count;
        let counts: Vec<usize> = members.iter().map(|m| heatwave_runs(m, thr).count).collect();
        HeatwaveComparison {
            threshold: thr,
            observed_count,
            mean_relative_error: mean_relative_heatwave_error(&counts, observed_count).ok(),
            counts,
        }
    });
    Ok(ScoreReport {
        n_members: members.len(),
        n_days: observed.len(),
        mse,
        loglik,
        loglik_convention: convention,
        loglik_floored: floored,
        ensemble_mean_mse,
        ensemble_mean_bias,
        quantiles: qq(&pooled, observed, cfg.n_quantiles)?,
        pacf: pacf_sum[from..].to_vec(),
        pacf_observed: pacf(observed, cfg.max_lag)?[from..].to_vec(),
        pacf_lags: (cfg.min_lag..=cfg.max_lag).collect(),
        five_year_means: five_year_means(&ens).ok(),
        five_year_means_observed: five_year_means(observed).ok(),
        heatwaves,
    })
}
