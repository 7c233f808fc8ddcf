use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use tempbc::batch::{make_batch, FeatureSpec};
use tempbc::metrics::pacf;
use tempbc::model::CheckpointMeta;
use tempbc::rng::substream;
use tempbc::synth::{make_shifted_pair, Kernel};
use tempbc::{
    apply_baseline, sample_trajectories, BaselineSpec, BatchConfig, Calendar, Method, Model, ModelCheckpoint,
    ModelConfig, NormStats, PairedDataset, SamplerConfig,
};

fn dataset(days: usize) -> PairedDataset {
    let times: Vec<f64> = (0..days).map(|d| d as f64).collect();
    let pair = make_shifted_pair(&Kernel::rbf(5.0).unwrap(), &times, 2.0, 0.0, 0.3, 1).unwrap();
    PairedDataset::new(pair.obs, vec![(0, pair.gcm)], "bench").unwrap()
}

fn small_model() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        n_heads: 2,
        model_dim: 16,
        hidden: 16,
        features: FeatureSpec { dim: 16, ..FeatureSpec::default() },
        ..ModelConfig::default()
    }
}

fn batches(c: &mut Criterion) {
    let ds = dataset(2000);
    let cfg = BatchConfig { batch_size: 8, features: small_model().features, ..BatchConfig::default() };
    let mut rng = substream(1, "bench");
    c.bench_function("make_batch/8", |b| b.iter(|| make_batch(&ds, &cfg, &mut rng).unwrap()));
}

fn gradients(c: &mut Criterion) {
    let ds = dataset(2000);
    let cfg = BatchConfig { batch_size: 1, features: small_model().features, ..BatchConfig::default() };
    let mut rng = substream(1, "bench");
    let ex = make_batch(&ds, &cfg, &mut rng).unwrap().remove(0);
    let model = Model::init(small_model(), &mut substream(2, "init")).unwrap();
    c.bench_function("loss_and_grad/dim16", |b| b.iter(|| model.loss_and_grad(black_box(&ex)).unwrap()));
}

fn sampling(c: &mut Criterion) {
    let ds = dataset(1000);
    let model = Model::init(small_model(), &mut substream(2, "init")).unwrap();
    let ck = ModelCheckpoint::new(&model, NormStats::new(0.0, 1.0).unwrap(), CheckpointMeta { seed: 2, steps: 0 });
    let cfg = SamplerConfig { horizon: 20, n_trajectories: 1, start: Some(500.0), ..SamplerConfig::default() };
    c.bench_function("sample/20_days", |b| b.iter(|| sample_trajectories(&ck, &ds, 0, &cfg).unwrap()));
}

fn baselines(c: &mut Criterion) {
    let ds = dataset(3650);
    let calendar = Calendar::parse("2000-01-01").unwrap();
    for method in [Method::Mean, Method::Meanvar, Method::Eqm, Method::Ecbc] {
        let spec = BaselineSpec {
            method,
            ref_period: (0.0, 1825.0),
            proj_period: (1826.0, 3649.0),
            template_period: None,
            monthly: true,
        };
        c.bench_function(&format!("baseline/{method:?}"), |b| {
            b.iter(|| apply_baseline(&spec, &ds, &calendar).unwrap())
        });
    }
}

fn metrics(c: &mut Criterion) {
    let ds = dataset(3650);
    let values = ds.obs.values().to_vec();
    c.bench_function("pacf/10_lags", |b| b.iter(|| pacf(black_box(&values), 10).unwrap()));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = batches, gradients, sampling, baselines, metrics
}
criterion_main!(benches);
