//! Attention model over generalized points with a Gaussian head anchored at
//! the closest observed value.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{concat, softplus, ShapeError, Tape, Tensor, Var};
use crate::batch::{FeatureBlock, FeatureSpec, TrainingExample};
use crate::data::NormStats;
use crate::{Error, Result};

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub model_dim: usize,
    /// Hidden width of every two-layer map.
    pub hidden: usize,
    #[serde(flatten)]
    pub features: FeatureSpec,
    pub sigma_floor: f64,
    /// Replace every climate-model value by zero before embedding.
    pub ablate_gcm: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 2,
            n_heads: 4,
            model_dim: 64,
            hidden: 64,
            features: FeatureSpec::default(),
            sigma_floor: 1e-3,
            ablate_gcm: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.n_heads == 0 || self.model_dim == 0 || self.hidden == 0 {
            return Err(Error::Config("model sizes must be positive".into()));
        }
        if self.model_dim % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} is not divisible by n_heads {}",
                self.model_dim, self.n_heads
            )));
        }
        if !(self.sigma_floor > 0.0) {
            return Err(Error::Config("sigma_floor must be positive".into()));
        }
        self.features.validate()
    }

    /// Width of the query and key/value inputs.
    pub fn input_dim(&self) -> usize {
        2 * self.features.dim + 5
    }

    /// Every parameter name with its shape.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (dm, hid, kv) = (self.model_dim, self.hidden, self.input_dim());
        let xqk = self.features.dim + 1;
        let mut out = Vec::new();
        let mut mlp = |name: String, fan_in: usize, fan_out: usize| {
            out.push((format!("{name}.w1"), vec![fan_in, hid]));
            out.push((format!("{name}.b1"), vec![hid]));
            out.push((format!("{name}.w2"), vec![hid, fan_out]));
            out.push((format!("{name}.b2"), vec![fan_out]));
        };
        for l in 0..self.n_layers {
            let (q_in, kv_in, x_in) = if l == 0 { (kv, kv, xqk) } else { (dm, dm + kv, dm) };
            mlp(format!("l{l}.q"), q_in, dm);
            mlp(format!("l{l}.k"), kv_in, dm);
            mlp(format!("l{l}.v"), kv_in, dm);
            mlp(format!("l{l}.b"), dm, dm);
            mlp(format!("l{l}.xq"), x_in, dm);
            mlp(format!("l{l}.xk"), x_in, dm);
            mlp(format!("l{l}.xv"), 1, dm);
            mlp(format!("l{l}.xb"), dm, dm);
        }
        mlp("head".into(), 2 * dm + kv, 2);
        out
    }
}

/// Column layout of the query and key/value inputs.
pub mod slots {
    pub fn delta(d: usize) -> usize {
        d
    }
    pub fn dist(d: usize) -> usize {
        d + 1
    }
    pub fn deriv(d: usize) -> usize {
        d + 2
    }
    pub fn closest_value(d: usize) -> usize {
        d + 3
    }
    pub fn closest_pos(d: usize) -> std::ops::Range<usize> {
        d + 4..2 * d + 4
    }
    pub fn series(d: usize) -> usize {
        2 * d + 4
    }
}

/// Named parameter tensors in name order.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    tensors: BTreeMap<String, Tensor>,
}

impl Params {
    /// Glorot-uniform weights, zero biases and a zero final head layer.
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let mut tensors = BTreeMap::new();
        for (name, shape) in cfg.param_shapes() {
            let t = if name == "head.w2" || shape.len() == 1 {
                Tensor::zeros(&shape)
            } else {
                let a = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                let n = shape[0] * shape[1];
                Tensor::new(shape.clone(), (0..n).map(|_| rng.random_range(-a..a)).collect())
                    .expect("shape matches data")
            };
            tensors.insert(name, t);
        }
        Params { tensors }
    }

    pub fn from_map(cfg: &ModelConfig, tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        let expected = cfg.param_shapes();
        if expected.len() != tensors.len() {
            return Err(Error::Validation(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                tensors.len()
            )));
        }
        for (name, shape) in &expected {
            match tensors.get(name) {
                None => return Err(Error::Validation(format!("missing parameter `{name}`"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::Validation(format!(
                        "parameter `{name}` has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                Some(t) if !t.all_finite() => {
                    return Err(Error::Numeric(format!("parameter `{name}` is not finite")))
                }
                _ => {}
            }
        }
        Ok(Params { tensors })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> Vec<String> {
        self.tensors.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::all_finite)
    }

    /// Records every tensor on `tape`, as trainable leaves when `trainable`.
    pub fn record<'t>(&self, tape: &'t Tape, trainable: bool) -> BTreeMap<String, Var<'t>> {
        self.tensors
            .iter()
            .map(|(k, v)| {
                let var = if trainable {
                    tape.param(v.clone())
                } else {
                    tape.constant(v.clone())
                };
                (k.clone(), var)
            })
            .collect()
    }
}

/// Predictive distribution of one target, in normalized units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianPrediction {
    pub mean: f64,
    pub std: f64,
}

/// Dense model inputs for one example. Rows are ordered climate-model
/// points, conditioning observations, then targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub q_in: Tensor,
    pub kv_in: Tensor,
    /// Positional features plus the series indicator.
    pub x_pos: Tensor,
    /// Raw values, one column.
    pub x_val: Tensor,
    /// Row-major `[rows, rows]`, `true` where attention is forbidden.
    pub mask: Vec<bool>,
    pub n_cond: usize,
    pub anchors: Vec<f64>,
    pub target_values: Vec<f64>,
}

impl Embedding {
    pub fn rows(&self) -> usize {
        self.q_in.shape()[0]
    }

    pub fn n_targets(&self) -> usize {
        self.anchors.len()
    }

    /// Mask rows of the targets only.
    pub fn target_mask(&self) -> &[bool] {
        let l = self.rows();
        &self.mask[self.n_cond * l..]
    }
}

/// Conditioning points see each other; target `r` sees the conditioning
/// points and targets `0..r`.
pub fn causal_mask(n_cond: usize, n_targets: usize) -> Vec<bool> {
    let l = n_cond + n_targets;
    let mut mask = vec![false; l * l];
    for i in 0..l {
        let limit = if i < n_cond { n_cond } else { i };
        for m in &mut mask[i * l + limit..(i + 1) * l] {
            *m = true;
        }
    }
    mask
}

/// Builds the dense inputs of an example.
pub fn embed(cfg: &ModelConfig, ex: &TrainingExample) -> Result<Embedding> {
    let d = cfg.features.dim;
    let width = cfg.input_dim();
    let f = &ex.features;
    let blocks = [
        (&f.gcm, &ex.context_gcm, 0.0, cfg.ablate_gcm),
        (&f.obs, &ex.context_obs, 1.0, false),
        (&f.targets, &ex.targets, 1.0, false),
    ];
    for (feats, pts, _, _) in &blocks {
        if feats.len() != pts.len()
            || feats
                .iter()
                .any(|b| b.pos_enc.len() != d || b.closest_pos_enc.len() != d)
        {
            return Err(Error::Validation(format!(
                "example features missing or not of dimension {d}"
            )));
        }
    }
    let l = ex.len();
    let mut kv = Vec::with_capacity(l * width);
    let mut q = Vec::with_capacity(l * width);
    let mut xp = Vec::with_capacity(l * (d + 1));
    let mut xv = Vec::with_capacity(l);
    let push_row = |out: &mut Vec<f64>, b: &FeatureBlock, series: f64, zero_value: bool, query: bool| {
        let keep = |v: f64| if zero_value { 0.0 } else { v };
        out.extend_from_slice(&b.pos_enc);
        out.push(if query { 0.0 } else { keep(b.delta) });
        out.push(b.dist);
        out.push(if query { 0.0 } else { keep(b.deriv) });
        out.push(keep(b.closest_value));
        out.extend_from_slice(&b.closest_pos_enc);
        out.push(series);
    };
    for (feats, pts, series, zero_value) in blocks {
        for (b, &(_, v)) in feats.iter().zip(pts) {
            push_row(&mut kv, b, series, zero_value, false);
            push_row(&mut q, b, series, zero_value, true);
            xp.extend_from_slice(&b.pos_enc);
            xp.push(series);
            xv.push(if zero_value { 0.0 } else { v });
        }
    }
    let n_cond = ex.n_conditioning();
    Ok(Embedding {
        q_in: Tensor::new(vec![l, width], q)?,
        kv_in: Tensor::new(vec![l, width], kv)?,
        x_pos: Tensor::new(vec![l, d + 1], xp)?,
        x_val: Tensor::new(vec![l, 1], xv)?,
        mask: causal_mask(n_cond, ex.targets.len()),
        n_cond,
        anchors: f.targets.iter().map(|b| b.closest_value).collect(),
        target_values: ex.targets.iter().map(|p| p.1).collect(),
    })
}

/// Multi-head scaled dot-product attention. `q` has one row per mask row;
/// returns the concatenated head outputs and each head's weights.
pub fn attention<'t>(
    q: Var<'t>,
    k: Var<'t>,
    v: Var<'t>,
    mask: &[bool],
    n_heads: usize,
) -> Result<(Var<'t>, Vec<Var<'t>>), ShapeError> {
    let dm = *q.shape().last().unwrap_or(&0);
    if n_heads == 0 || dm % n_heads != 0 {
        return Err(ShapeError::new("attention", format!("{dm} columns for {n_heads} heads")));
    }
    let dk = dm / n_heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let kt = k.transpose()?;
    let mut outs = Vec::with_capacity(n_heads);
    let mut weights = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = q.slice(1, h * dk, (h + 1) * dk)?;
        let kh = kt.slice(0, h * dk, (h + 1) * dk)?;
        let vh = v.slice(1, h * dk, (h + 1) * dk)?;
        let a = qh.matmul(kh)?.scale(scale).masked_softmax(mask)?;
        outs.push(a.matmul(vh)?);
        weights.push(a);
    }
    let out = if n_heads == 1 { outs[0] } else { concat(&outs, 1)? };
    Ok((out, weights))
}

type VarMap<'t> = BTreeMap<String, Var<'t>>;

fn param<'t>(vars: &VarMap<'t>, name: &str) -> Result<Var<'t>, ShapeError> {
    vars.get(name)
        .copied()
        .ok_or_else(|| ShapeError::new("param", format!("missing parameter `{name}`")))
}

/// `tanh(x·w1 + b1)·w2 + b2`.
fn mlp<'t>(vars: &VarMap<'t>, name: &str, x: Var<'t>) -> Result<Var<'t>, ShapeError> {
    let p = |s: &str| param(vars, &format!("{name}.{s}"));
    x.matmul(p("w1")?)?
        .add(p("b1")?)?
        .tanh()
        .matmul(p("w2")?)?
        .add(p("b2")?)
}

/// Model outputs of one example on a tape: means and standard deviations
/// of the targets, each of shape `[targets]`.
pub struct ForwardOutput<'t> {
    pub mean: Var<'t>,
    pub std: Var<'t>,
}

/// Runs the network for the targets of `emb`, which must have at least one.
pub fn forward<'t>(
    cfg: &ModelConfig,
    tape: &'t Tape,
    vars: &VarMap<'t>,
    emb: &Embedding,
) -> Result<ForwardOutput<'t>, ShapeError> {
    let l = emb.rows();
    let t = emb.n_targets();
    if t == 0 {
        return Err(ShapeError::new("forward", "example has no targets"));
    }
    let kv_in = tape.constant(emb.kv_in.clone());
    let q_in = tape.constant(emb.q_in.clone());
    let x_pos = tape.constant(emb.x_pos.clone());
    let x_val = tape.constant(emb.x_val.clone());

    let mut h = q_in;
    let mut x = x_pos;
    for layer in 0..cfg.n_layers {
        let last = layer + 1 == cfg.n_layers;
        let name = |s: &str| format!("l{layer}.{s}");
        let (kv_src, x_src) = if layer == 0 {
            (kv_in, x_pos)
        } else {
            (concat(&[h, kv_in], 1)?, x)
        };
        let (q_src, xq_src, mask) = if last {
            (h.slice(0, l - t, l)?, x.slice(0, l - t, l)?, emb.target_mask())
        } else {
            (h, x, emb.mask.as_slice())
        };
        let q = mlp(vars, &name("q"), q_src)?;
        let k = mlp(vars, &name("k"), kv_src)?;
        let v = mlp(vars, &name("v"), kv_src)?;
        let (a, _) = attention(q, k, v, mask, cfg.n_heads)?;
        let qx = mlp(vars, &name("xq"), xq_src)?;
        let kx = mlp(vars, &name("xk"), x_src)?;
        let vx = mlp(vars, &name("xv"), x_val)?;
        let (ax, _) = attention(qx, kx, vx, mask, cfg.n_heads)?;
        let (bh, bx) = (mlp(vars, &name("b"), a)?, mlp(vars, &name("xb"), ax)?);
        if layer == 0 {
            (h, x) = (bh, bx);
        } else if last {
            (h, x) = (h.slice(0, l - t, l)?.add(bh)?, x.slice(0, l - t, l)?.add(bx)?);
        } else {
            (h, x) = (h.add(bh)?, x.add(bx)?);
        }
    }
    let skip = q_in.slice(0, l - t, l)?;
    let raw = mlp(vars, "head", concat(&[h, x, skip], 1)?)?;
    let anchors = tape.constant(Tensor::new(vec![t], emb.anchors.clone())?);
    let raw_t = raw.transpose()?;
    let mean = raw_t.slice(0, 0, 1)?.sum(0)?.add(anchors)?;
    let std = raw_t
        .slice(0, 1, 2)?
        .sum(0)?
        .softplus()
        .add_scalar(cfg.sigma_floor);
    Ok(ForwardOutput { mean, std })
}

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

/// Mean Gaussian negative log-likelihood of `targets` on a tape.
pub fn nll_on_tape<'t>(
    out: &ForwardOutput<'t>,
    targets: Var<'t>,
) -> Result<Var<'t>, ShapeError> {
    let r = targets.sub(out.mean)?.div(out.std)?;
    let half_sq = r.mul(r)?.scale(0.5);
    Ok(half_sq.add(out.std.log())?.mean(0)?.add_scalar(HALF_LN_2PI))
}

/// Mean Gaussian negative log-likelihood of `targets` under `predictions`.
pub fn nll(predictions: &[GaussianPrediction], targets: &[f64], sigma_floor: f64) -> Result<f64> {
    if predictions.len() != targets.len() || targets.is_empty() {
        return Err(Error::Validation(format!(
            "{} predictions for {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    let mut total = 0.0;
    for (p, &o) in predictions.iter().zip(targets) {
        if !(p.std >= sigma_floor) {
            return Err(Error::Numeric(format!(
                "predictive std {} below the floor {sigma_floor}",
                p.std
            )));
        }
        let r = (o - p.mean) / p.std;
        total += HALF_LN_2PI + p.std.ln() + 0.5 * r * r;
    }
    Ok(total / targets.len() as f64)
}

/// Configuration plus parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Params,
}

impl Model {
    pub fn new(config: ModelConfig, params: Params) -> Result<Self> {
        config.validate()?;
        let params = Params::from_map(&config, params.tensors)?;
        Ok(Model { config, params })
    }

    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let params = Params::init(&config, rng);
        Ok(Model { config, params })
    }

    /// Predictive distributions of the targets of `ex`.
    pub fn predict(&self, ex: &TrainingExample) -> Result<Vec<GaussianPrediction>> {
        let emb = embed(&self.config, ex)?;
        self.predict_embedded(&emb)
    }

    pub fn predict_embedded(&self, emb: &Embedding) -> Result<Vec<GaussianPrediction>> {
        if emb.n_targets() == 0 {
            return Ok(Vec::new());
        }
        let tape = Tape::new();
        let vars = self.params.record(&tape, false);
        let out = forward(&self.config, &tape, &vars, emb)?;
        let mean = out.mean.value();
        let std = out.std.value();
        let preds: Vec<_> = mean
            .data()
            .iter()
            .zip(std.data())
            .map(|(&mean, &std)| GaussianPrediction { mean, std })
            .collect();
        if preds.iter().any(|p| !p.mean.is_finite() || !p.std.is_finite()) {
            return Err(Error::Numeric("model produced a non-finite prediction".into()));
        }
        Ok(preds)
    }

    /// Mean target NLL of one example.
    pub fn example_nll(&self, ex: &TrainingExample) -> Result<f64> {
        let preds = self.predict(ex)?;
        nll(&preds, &ex.targets.iter().map(|p| p.1).collect::<Vec<_>>(), self.config.sigma_floor)
    }

    /// Mean target NLL of one example and its gradient for every parameter.
    pub fn loss_and_grad(&self, ex: &TrainingExample) -> Result<(f64, BTreeMap<String, Tensor>)> {
        let emb = embed(&self.config, ex)?;
        let tape = Tape::new();
        let vars = self.params.record(&tape, true);
        let out = forward(&self.config, &tape, &vars, &emb)?;
        let y = tape.constant(Tensor::vector(emb.target_values.clone()));
        let loss = nll_on_tape(&out, y)?;
        let value = loss.item();
        let mut grads = tape.backward(loss)?;
        let mut map = BTreeMap::new();
        for (name, var) in vars {
            let g = grads
                .take(var)
                .unwrap_or_else(|| Tensor::zeros(self.params.tensors[&name].shape()));
            map.insert(name, g);
        }
        Ok((value, map))
    }
}

/// Stored parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Training provenance saved with a checkpoint.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub steps: usize,
}

/// Everything needed to reuse a trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub config: ModelConfig,
    pub norm_stats: NormStats,
    pub params: BTreeMap<String, StoredTensor>,
    pub meta: CheckpointMeta,
}

impl ModelCheckpoint {
    pub fn new(model: &Model, norm_stats: NormStats, meta: CheckpointMeta) -> Self {
        let params = model
            .params
            .iter()
            .map(|(k, t)| {
                (
                    k.clone(),
                    StoredTensor {
                        shape: t.shape().to_vec(),
                        data: t.data().to_vec(),
                    },
                )
            })
            .collect();
        ModelCheckpoint {
            config: model.config,
            norm_stats,
            params,
            meta,
        }
    }

    pub fn model(&self) -> Result<Model> {
        let mut tensors = BTreeMap::new();
        for (k, s) in &self.params {
            let t = Tensor::new(s.shape.clone(), s.data.clone())
                .map_err(|e| Error::Validation(format!("parameter `{k}`: {e}")))?;
            tensors.insert(k.clone(), t);
        }
        self.config.validate()?;
        Model::new(self.config, Params::from_map(&self.config, tensors)?)
    }

    pub fn to_json(&self) -> Result<String> {
        if self.params.values().any(|t| t.data.iter().any(|v| !v.is_finite())) {
            return Err(Error::Numeric("refusing to store non-finite parameters".into()));
        }
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ck: ModelCheckpoint = serde_json::from_str(s)?;
        ck.model()?;
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}

/// Standard deviation from a raw head output, as used by the model.
pub fn std_from_raw(raw: f64, sigma_floor: f64) -> f64 {
    softplus(raw) + sigma_floor
}
