//! Gaussian-process generators for synthetic (observation, climate model)
//! pairs with known biases, plus exact GP conditioning.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{SourceTag, TimeSeries};
use crate::error::{Error, Result};

const JITTER_START: f64 = 1e-14;
const JITTER_MAX: f64 = 1e-4;

/// Stationary covariance functions of the absolute time difference `r`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Kernel {
    /// `exp(-r² / 2ℓ²)`
    Rbf { lengthscale: f64 },
    /// `exp(-0.5 · (sin(πr) / γ)² / ℓ²)`, with `γ` the period parameter.
    Periodic { lengthscale: f64, period: f64 },
    /// `(1 + r² / (2αℓ²))^(-α)`
    RationalQuadratic { lengthscale: f64, alpha: f64 },
    Product { left: Box<Kernel>, right: Box<Kernel> },
}

fn positive(name: &str, v: f64) -> Result<f64> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Config(format!("kernel {name} must be positive, got {v}")))
    }
}

impl Kernel {
    pub fn rbf(lengthscale: f64) -> Result<Self> {
        Ok(Kernel::Rbf {
            lengthscale: positive("lengthscale", lengthscale)?,
        })
    }

    pub fn periodic(lengthscale: f64, period: f64) -> Result<Self> {
        Ok(Kernel::Periodic {
            lengthscale: positive("lengthscale", lengthscale)?,
            period: positive("period", period)?,
        })
    }

    pub fn rational_quadratic(lengthscale: f64, alpha: f64) -> Result<Self> {
        Ok(Kernel::RationalQuadratic {
            lengthscale: positive("lengthscale", lengthscale)?,
            alpha: positive("alpha", alpha)?,
        })
    }

    pub fn product(a: Kernel, b: Kernel) -> Self {
        Kernel::Product {
            left: Box::new(a),
            right: Box::new(b),
        }
    }

    /// Re-checks parameters, e.g. after deserializing.
    pub fn validate(&self) -> Result<()> {
        match self {
            Kernel::Rbf { lengthscale } => positive("lengthscale", *lengthscale).map(|_| ()),
            Kernel::Periodic {
                lengthscale,
                period,
            } => {
                positive("lengthscale", *lengthscale)?;
                positive("period", *period).map(|_| ())
            }
            Kernel::RationalQuadratic { lengthscale, alpha } => {
                positive("lengthscale", *lengthscale)?;
                positive("alpha", *alpha).map(|_| ())
            }
            Kernel::Product { left, right } => {
                left.validate()?;
                right.validate()
            }
        }
    }

    pub fn eval(&self, t: f64, s: f64) -> f64 {
        let r = (t - s).abs();
        match self {
            Kernel::Rbf { lengthscale } => (-r * r / (2.0 * lengthscale * lengthscale)).exp(),
            Kernel::Periodic {
                lengthscale,
                period,
            } => {
                let u = (PI * r).sin() / period;
                (-0.5 * u * u / (lengthscale * lengthscale)).exp()
            }
            Kernel::RationalQuadratic { lengthscale, alpha } => {
                (1.0 + r * r / (2.0 * alpha * lengthscale * lengthscale)).powf(-alpha)
            }
            Kernel::Product { left, right } => left.eval(t, s) * right.eval(t, s),
        }
    }
}

/// Covariance matrix between two sets of times.
pub fn gram(kernel: &Kernel, times_a: &[f64], times_b: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(times_a.len(), times_b.len(), |i, j| {
        kernel.eval(times_a[i], times_b[j])
    })
}

/// Cholesky factor of `k + jitter·I`, escalating the jitter tenfold from
/// 1e-14 up to 1e-4.
pub fn jittered_cholesky(k: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    let mut jitter = JITTER_START;
    while jitter <= JITTER_MAX * (1.0 + 1e-9) {
        let mut m = k.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += jitter;
        }
        if let Some(chol) = Cholesky::new(m) {
            return Ok(chol);
        }
        jitter *= 10.0;
    }
    Err(Error::Numeric(format!(
        "Cholesky factorization failed with jitter up to {JITTER_MAX:e}"
    )))
}

/// One draw from `MVN(0, K)` at `times`, deterministic in `seed`.
pub fn sample_gp(kernel: &Kernel, times: &[f64], seed: u64) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_gp_with(kernel, times, &mut rng)
}

fn sample_gp_with(kernel: &Kernel, times: &[f64], rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    kernel.validate()?;
    if times.iter().any(|t| !t.is_finite()) {
        return Err(Error::Validation("GP sample times must be finite".into()));
    }
    let chol = jittered_cholesky(&gram(kernel, times, times))?;
    let eps = DVector::from_fn(times.len(), |_, _| StandardNormal.sample(rng));
    Ok((chol.l() * eps).iter().copied().collect())
}

/// Posterior mean and covariance of `f(test_times)` given noisy values at
/// `train_times`.
pub fn gp_posterior(
    kernel: &Kernel,
    train_times: &[f64],
    train_values: &[f64],
    test_times: &[f64],
    noise_var: f64,
) -> Result<(Vec<f64>, DMatrix<f64>)> {
    kernel.validate()?;
    if train_times.is_empty() {
        return Err(Error::Validation("GP posterior needs training points".into()));
    }
    if train_times.len() != train_values.len() {
        return Err(Error::Validation("train times and values differ in length".into()));
    }
    if !(noise_var >= 0.0) {
        return Err(Error::Config(format!("noise variance must be >= 0, got {noise_var}")));
    }
    let mut k_tt = gram(kernel, train_times, train_times);
    for i in 0..k_tt.nrows() {
        k_tt[(i, i)] += noise_var;
    }
    let chol = jittered_cholesky(&k_tt)?;
    let k_st = gram(kernel, test_times, train_times);
    let y = DVector::from_column_slice(train_values);
    let alpha = chol.solve(&y);
    let mean = (&k_st * alpha).iter().copied().collect();
    let v = chol.l().solve_lower_triangular(&k_st.transpose()).ok_or_else(|| {
        Error::Numeric("triangular solve failed in GP posterior".into())
    })?;
    let cov = gram(kernel, test_times, test_times) - v.transpose() * v;
    Ok((mean, cov))
}

/// Synthetic pair built from one latent GP draw with known distortions.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPair {
    pub obs: TimeSeries,
    pub gcm: TimeSeries,
    /// Additional climate-model runs sharing the latent draw, if requested.
    pub extra_runs: Vec<TimeSeries>,
    pub true_mean_bias: f64,
    pub true_time_shift: f64,
    pub noise_std: f64,
}

/// Sidecar describing how a synthetic pair was generated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthMeta {
    pub kernel: Kernel,
    pub days: usize,
    pub runs: usize,
    pub mean_bias: f64,
    pub time_shift: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthMeta {
    fn default() -> Self {
        SynthMeta {
            kernel: Kernel::Rbf { lengthscale: 5.0 },
            days: 2620,
            runs: 1,
            mean_bias: 2.0,
            time_shift: 0.0,
            noise_std: 0.3,
            seed: 0,
        }
    }
}

impl SynthMeta {
    /// Draws the pair on days `0..days`.
    pub fn generate(&self) -> Result<SyntheticPair> {
        self.kernel.validate()?;
        if self.days == 0 {
            return Err(Error::Config("days must be positive".into()));
        }
        let times: Vec<f64> = (0..self.days).map(|d| d as f64).collect();
        make_shifted_runs(
            &self.kernel,
            &times,
            self.mean_bias,
            self.time_shift,
            self.noise_std,
            self.runs,
            self.seed,
        )
    }
}

/// Builds a pair on the grid `times`:
/// `gcm(t) = Z(t) + ε` and `obs(t) = Z(t + time_shift) + mean_bias + ε'`.
///
/// The latent `Z` is drawn jointly on the union of `times` and
/// `times + time_shift`, so fractional shifts need no interpolation.
pub fn make_shifted_pair(
    kernel: &Kernel,
    times: &[f64],
    mean_bias: f64,
    time_shift: f64,
    noise_std: f64,
    seed: u64,
) -> Result<SyntheticPair> {
    make_shifted_runs(kernel, times, mean_bias, time_shift, noise_std, 1, seed)
}

/// Like [`make_shifted_pair`] with `n_runs` climate-model runs that share
/// the latent draw and differ in their noise.
pub fn make_shifted_runs(
    kernel: &Kernel,
    times: &[f64],
    mean_bias: f64,
    time_shift: f64,
    noise_std: f64,
    n_runs: usize,
    seed: u64,
) -> Result<SyntheticPair> {
    if times.is_empty() || n_runs == 0 {
        return Err(Error::Config("synthetic pair needs times and at least one run".into()));
    }
    if !time_shift.is_finite() || !mean_bias.is_finite() || !(noise_std >= 0.0) {
        return Err(Error::Config(format!(
            "invalid synthetic parameters: bias {mean_bias}, shift {time_shift}, noise {noise_std}"
        )));
    }
    let mut union: Vec<f64> = times
        .iter()
        .copied()
        .chain(times.iter().map(|t| t + time_shift))
        .collect();
    union.sort_by(f64::total_cmp);
    union.dedup();
    let lookup = |t: f64| -> usize {
        union
            .binary_search_by(|probe| probe.total_cmp(&t))
            .expect("time is part of the union grid")
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let latent = sample_gp_with(kernel, &union, &mut rng)?;
    let mut noise = |n: usize| -> Vec<f64> {
        (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                noise_std * z
            })
            .collect()
    };
    let mut runs = Vec::with_capacity(n_runs);
    for _ in 0..n_runs {
        let eps = noise(times.len());
        let values = times
            .iter()
            .zip(eps)
            .map(|(&t, e)| latent[lookup(t)] + e)
            .collect();
        runs.push(TimeSeries::new(times.to_vec(), values, SourceTag::Gcm)?);
    }
    let eps = noise(times.len());
    let obs_values = times
        .iter()
        .zip(eps)
        .map(|(&t, e)| latent[lookup(t + time_shift)] + mean_bias + e)
        .collect();
    let obs = TimeSeries::new(times.to_vec(), obs_values, SourceTag::Obs)?;
    let gcm = runs.remove(0);
    Ok(SyntheticPair {
        obs,
        gcm,
        extra_runs: runs,
        true_mean_bias: mean_bias,
        true_time_shift: time_shift,
        noise_std,
    })
}
