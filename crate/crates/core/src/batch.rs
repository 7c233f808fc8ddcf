//! Random training windows, pruning and engineered input features.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::PairedDataset;
use crate::{Error, Result};

/// Window boundaries over a series of length `n`, 1-based and inclusive:
/// context is `k..=j`, targets are `j+1..=h`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub k: usize,
    pub h: usize,
    pub j: usize,
}

impl WindowSpec {
    pub fn len(&self) -> usize {
        self.h - self.k + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Window length limits. `h - k` lies in `[window_min, window_max]` and the
/// prediction index keeps `margin` points on each side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct WindowConfig {
    pub window_min: usize,
    pub window_max: usize,
    pub margin: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        WindowConfig {
            window_min: 60,
            window_max: 360,
            margin: 5,
        }
    }
}

impl WindowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_min > self.window_max || self.window_min < 2 * self.margin {
            return Err(Error::Config(format!(
                "window limits need 2*margin <= window_min <= window_max, got {} / {} / {}",
                self.margin, self.window_min, self.window_max
            )));
        }
        Ok(())
    }

    /// Shrinks the limits so windows fit a series of `n` points.
    pub fn clamped_to(&self, n: usize) -> WindowConfig {
        let window_max = self.window_max.min(n.saturating_sub(1));
        WindowConfig {
            window_min: self.window_min.min(window_max),
            window_max,
            margin: self.margin,
        }
    }
}

/// Draws `k`, then `h`, then `j` uniformly from their admissible ranges.
pub fn draw_window<R: Rng + ?Sized>(n: usize, cfg: WindowConfig, rng: &mut R) -> Result<WindowSpec> {
    cfg.validate()?;
    if n <= cfg.window_max {
        return Err(Error::Validation(format!(
            "series too short: {n} points, need more than {}",
            cfg.window_max
        )));
    }
    let k = rng.random_range(1..=n - cfg.window_max);
    let h = rng.random_range(k + cfg.window_min..=k + cfg.window_max);
    let j = rng.random_range(k + cfg.margin..=h - cfg.margin);
    Ok(WindowSpec { k, h, j })
}

/// Sinusoidal features of a (relative) time: `sin` at even slots and `cos`
/// at odd slots, slot pair `l` using frequency `(t_max/δ)^(-2l/d)`.
pub fn positional_features(t: f64, d: usize, t_max: f64, delta_t: f64) -> Result<Vec<f64>> {
    if d == 0 || d % 2 != 0 {
        return Err(Error::Config(format!("feature dimension must be even and positive, got {d}")));
    }
    if !(t_max > 0.0 && delta_t > 0.0) {
        return Err(Error::Config("t_max and delta_t must be positive".into()));
    }
    let scaled = t / delta_t;
    let base = t_max / delta_t;
    let mut out = Vec::with_capacity(d);
    for l in 0..d / 2 {
        let angle = scaled / base.powf(2.0 * l as f64 / d as f64);
        out.push(angle.sin());
        out.push(angle.cos());
    }
    Ok(out)
}

/// Nearest entry of a time-sorted list.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub t: f64,
    pub value: f64,
}

/// Point of `observed` (sorted by time) closest to `t`; ties go to the
/// earlier time.
pub fn closest_observed(t: f64, observed: &[(f64, f64)]) -> Result<Neighbor> {
    if observed.is_empty() {
        return Err(Error::Validation("no observed point to anchor on".into()));
    }
    let idx = observed.partition_point(|p| p.0 < t);
    let pick = if idx == 0 {
        0
    } else if idx == observed.len() {
        idx - 1
    } else if observed[idx].0 - t < t - observed[idx - 1].0 {
        idx
    } else {
        idx - 1
    };
    Ok(Neighbor {
        index: pick,
        t: observed[pick].0,
        value: observed[pick].1,
    })
}

const PRUNE_RETRIES: usize = 100;

/// Keeps each point independently with probability `retain_p`, redrawing
/// while fewer than `min_keep` survive. After repeated failures the first
/// `min_keep` points are returned.
pub fn prune<T: Clone, R: Rng + ?Sized>(
    points: &[T],
    retain_p: f64,
    min_keep: usize,
    rng: &mut R,
) -> Vec<T> {
    debug_assert!(retain_p > 0.0 && retain_p <= 1.0);
    if retain_p >= 1.0 {
        return points.to_vec();
    }
    let need = min_keep.min(points.len());
    for _ in 0..PRUNE_RETRIES {
        let kept: Vec<T> = points
            .iter()
            .filter(|_| rng.random::<f64>() < retain_p)
            .cloned()
            .collect();
        if kept.len() >= need {
            return kept;
        }
    }
    points[..need].to_vec()
}

/// Settings of the sinusoidal time features.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureSpec {
    #[serde(rename = "feature_dim")]
    pub dim: usize,
    pub t_max: f64,
    pub delta_t: f64,
}

impl Default for FeatureSpec {
    fn default() -> Self {
        FeatureSpec {
            dim: 32,
            t_max: 10000.0,
            delta_t: 1.0,
        }
    }
}

impl FeatureSpec {
    pub fn validate(&self) -> Result<()> {
        positional_features(0.0, self.dim, self.t_max, self.delta_t).map(|_| ())
    }

    pub fn encode(&self, t: f64) -> Vec<f64> {
        positional_features(t, self.dim, self.t_max, self.delta_t)
            .expect("feature spec validated")
    }
}

/// Engineered inputs of one point relative to its closest already-observed
/// neighbour `n(i)`. Times are measured from the prediction index.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBlock {
    pub pos_enc: Vec<f64>,
    /// `value - closest_value`.
    pub delta: f64,
    /// `t - closest_t`, in days.
    pub dist: f64,
    /// `delta / dist`, or 0 when `dist == 0`.
    pub deriv: f64,
    pub closest_value: f64,
    pub closest_t: f64,
    pub closest_pos_enc: Vec<f64>,
}

impl FeatureBlock {
    fn new(spec: &FeatureSpec, t_ref: f64, t: f64, value: f64, anchor: (f64, f64)) -> Self {
        let delta = value - anchor.1;
        let dist = t - anchor.0;
        FeatureBlock {
            pos_enc: spec.encode(t - t_ref),
            delta,
            dist,
            deriv: if dist == 0.0 { 0.0 } else { delta / dist },
            closest_value: anchor.1,
            closest_t: anchor.0,
            closest_pos_enc: spec.encode(anchor.0 - t_ref),
        }
    }
}

/// Features of the three point lists of an example.
#[derive(Debug, Clone, PartialEq)]
pub struct ExampleFeatures {
    pub gcm: Vec<FeatureBlock>,
    pub obs: Vec<FeatureBlock>,
    pub targets: Vec<FeatureBlock>,
}

/// One training (or generation) problem: conditioning observations before
/// `t_pred`, climate-model points around it, and targets after it.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub window: Option<WindowSpec>,
    pub run_id: u32,
    pub t_pred: f64,
    pub context_obs: Vec<(f64, f64)>,
    pub context_gcm: Vec<(f64, f64)>,
    pub targets: Vec<(f64, f64)>,
    pub features: ExampleFeatures,
}

fn sorted(points: &[(f64, f64)]) -> bool {
    points.windows(2).all(|w| w[0].0 < w[1].0)
}

/// Each point anchored on its nearest other point of the same list.
fn conditioning_features(spec: &FeatureSpec, t_ref: f64, points: &[(f64, f64)]) -> Vec<FeatureBlock> {
    points
        .iter()
        .enumerate()
        .map(|(i, &(t, v))| {
            let prev = i.checked_sub(1).map(|p| points[p]);
            let next = points.get(i + 1).copied();
            let anchor = match (prev, next) {
                (Some(p), Some(n)) => {
                    if n.0 - t < t - p.0 {
                        n
                    } else {
                        p
                    }
                }
                (Some(p), None) => p,
                (None, Some(n)) => n,
                (None, None) => (t, v),
            };
            FeatureBlock::new(spec, t_ref, t, v, anchor)
        })
        .collect()
}

impl TrainingExample {
    /// Validates ordering and computes features. Each target is anchored on
    /// the conditioning observations plus the targets before it.
    pub fn build(
        context_obs: Vec<(f64, f64)>,
        context_gcm: Vec<(f64, f64)>,
        targets: Vec<(f64, f64)>,
        t_pred: f64,
        run_id: u32,
        spec: &FeatureSpec,
    ) -> Result<Self> {
        spec.validate()?;
        if context_obs.is_empty() {
            return Err(Error::Validation("example has no conditioning observations".into()));
        }
        if !(sorted(&context_obs) && sorted(&context_gcm) && sorted(&targets)) {
            return Err(Error::Validation("example points must be strictly increasing in time".into()));
        }
        let last_obs = context_obs[context_obs.len() - 1].0;
        if last_obs > t_pred || targets.first().is_some_and(|p| p.0 <= t_pred) {
            return Err(Error::Validation(format!(
                "conditioning observations must end at or before {t_pred} and targets start after it"
            )));
        }
        if [&context_obs, &context_gcm, &targets]
            .iter()
            .any(|l| l.iter().any(|p| !p.0.is_finite() || !p.1.is_finite()))
        {
            return Err(Error::Validation("example contains a non-finite value".into()));
        }

        let gcm = conditioning_features(spec, t_pred, &context_gcm);
        let obs = conditioning_features(spec, t_pred, &context_obs);
        let mut known = context_obs.clone();
        let mut tf = Vec::with_capacity(targets.len());
        for &(t, v) in &targets {
            let n = closest_observed(t, &known)?;
            tf.push(FeatureBlock::new(spec, t_pred, t, v, (n.t, n.value)));
            known.push((t, v));
        }
        Ok(TrainingExample {
            window: None,
            run_id,
            t_pred,
            context_obs,
            context_gcm,
            targets,
            features: ExampleFeatures { gcm, obs, targets: tf },
        })
    }

    pub fn n_conditioning(&self) -> usize {
        self.context_gcm.len() + self.context_obs.len()
    }

    pub fn len(&self) -> usize {
        self.n_conditioning() + self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Batch construction settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BatchConfig {
    pub batch_size: usize,
    pub retain_p: f64,
    pub min_keep: usize,
    #[serde(flatten)]
    pub window: WindowConfig,
    #[serde(flatten)]
    pub features: FeatureSpec,
}

impl Default for BatchConfig {
    fn default() -> Self {
        BatchConfig {
            batch_size: 16,
            retain_p: 0.5,
            min_keep: 5,
            window: WindowConfig::default(),
            features: FeatureSpec::default(),
        }
    }
}

impl BatchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.retain_p > 0.0 && self.retain_p <= 1.0) {
            return Err(Error::Config(format!("retain_p must be in (0, 1], got {}", self.retain_p)));
        }
        if self.min_keep == 0 {
            return Err(Error::Config("min_keep must be positive".into()));
        }
        self.window.validate()?;
        self.features.validate()
    }
}

/// Draws one example: run, window, prediction index, then pruning of the
/// context observations, the climate-model points and the targets.
pub fn draw_example<R: Rng + ?Sized>(
    dataset: &PairedDataset,
    cfg: &BatchConfig,
    rng: &mut R,
) -> Result<TrainingExample> {
    let n = dataset.overlap_len();
    let z = rng.random_range(0..dataset.run_ids().len());
    let w = draw_window(n, cfg.window, rng)?;
    let obs = &dataset.obs;
    let run = &dataset.runs()[z];
    let off = dataset.obs_offset();
    let obs_pt = |i: usize| (obs.times()[i - 1], obs.values()[i - 1]);
    let gcm_pt = |i: usize| (run.times()[off + i - 1], run.values()[off + i - 1]);

    let context: Vec<_> = (w.k..=w.j).map(obs_pt).collect();
    let ahead: Vec<_> = (w.j + 1..=w.h).map(obs_pt).collect();
    let gcm: Vec<_> = (w.k..=w.h).map(gcm_pt).collect();

    let context = prune(&context, cfg.retain_p, cfg.min_keep, rng);
    let gcm = prune(&gcm, cfg.retain_p, cfg.min_keep, rng);
    let targets = prune(&ahead, cfg.retain_p, cfg.min_keep, rng);

    let mut ex = TrainingExample::build(
        context,
        gcm,
        targets,
        obs_pt(w.j).0,
        dataset.run_ids()[z],
        &cfg.features,
    )?;
    ex.window = Some(w);
    Ok(ex)
}

/// `cfg.batch_size` independent examples.
pub fn make_batch<R: Rng + ?Sized>(
    dataset: &PairedDataset,
    cfg: &BatchConfig,
    rng: &mut R,
) -> Result<Vec<TrainingExample>> {
    cfg.validate()?;
    (0..cfg.batch_size)
        .map(|_| draw_example(dataset, cfg, rng))
        .collect()
}
