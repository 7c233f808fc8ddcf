use super::*;
use crate::batch::{FeatureSpec, WindowConfig};
use crate::model::{embed, nll, std_from_raw, GaussianPrediction};
use crate::synth::{make_shifted_pair, Kernel};

fn dataset(days: usize) -> PairedDataset {
    let times: Vec<f64> = (0..days).map(|d| d as f64).collect();
    let pair = make_shifted_pair(&Kernel::rbf(5.0).unwrap(), &times, 2.0, 0.0, 0.3, 11).unwrap();
    PairedDataset::new(pair.obs, vec![(0, pair.gcm)], "t").unwrap()
}

fn features() -> FeatureSpec {
    FeatureSpec { dim: 8, ..FeatureSpec::default() }
}

fn model_cfg() -> ModelConfig {
    ModelConfig {
        n_layers: 1,
        n_heads: 2,
        model_dim: 8,
        hidden: 8,
        features: features(),
        ..ModelConfig::default()
    }
}

fn train_cfg(steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        batch: BatchConfig {
            batch_size: 2,
            window: WindowConfig { window_min: 60, window_max: 120, margin: 5 },
            features: features(),
            ..BatchConfig::default()
        },
        eval_interval: 5,
        seed: 7,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_steps_is_an_error() {
    let err = train(&dataset(500), &model_cfg(), &train_cfg(0)).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn short_series_is_rejected() {
    let cfg = TrainConfig {
        batch: BatchConfig { features: features(), ..BatchConfig::default() },
        ..train_cfg(3)
    };
    assert!(matches!(train(&dataset(380), &model_cfg(), &cfg), Err(Error::Validation(_))));
}

#[test]
fn mismatched_features_are_rejected() {
    let mut cfg = train_cfg(3);
    cfg.batch.features.dim = 4;
    assert!(matches!(train(&dataset(500), &model_cfg(), &cfg), Err(Error::Config(_))));
}

#[test]
fn same_seed_gives_identical_logs() {
    let ds = dataset(500);
    let a = train(&ds, &model_cfg(), &train_cfg(12)).unwrap();
    let b = train(&ds, &model_cfg(), &train_cfg(12)).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.checkpoint, b.checkpoint);
    assert_eq!(a.stop, StopReason::MaxSteps);
    assert_eq!(a.checkpoint.meta.steps, 12);
    let c = train(&ds, &model_cfg(), &TrainConfig { seed: 8, ..train_cfg(12) }).unwrap();
    assert_ne!(a.log, c.log);
}

#[test]
fn log_marks_evaluation_steps() {
    let out = train(&dataset(500), &model_cfg(), &train_cfg(12)).unwrap();
    let evaluated: Vec<usize> = out.log.iter().filter(|r| r.val_nll.is_some()).map(|r| r.step).collect();
    assert_eq!(evaluated, vec![0, 5, 10, 11]);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("log.csv");
    write_log_csv(&path, &out.log).unwrap();
    assert_eq!(read_log_csv(&path).unwrap(), out.log);
}

#[test]
fn zero_gradient_leaves_parameters_unchanged() {
    let mut model = Model::init(model_cfg(), &mut substream(1, "init")).unwrap();
    for (_, t) in model.params.iter_mut() {
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            *v = (i as f64 * 0.37).sin();
        }
    }
    let before = model.params.clone();
    let zeros: BTreeMap<String, Tensor> = model
        .params
        .iter()
        .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape())))
        .collect();
    let mut opt = Adam::new(1e-2, 0.9, 0.999, 1e-8);
    for _ in 0..5 {
        opt.step(&mut model.params, &zeros);
    }
    assert_eq!(model.params, before);
}

#[test]
fn adam_first_step_moves_each_weight_by_the_learning_rate() {
    let mut model = Model::init(model_cfg(), &mut substream(1, "init")).unwrap();
    let before = model.params.clone();
    let grads: BTreeMap<String, Tensor> = model
        .params
        .iter()
        .map(|(k, t)| {
            let mut g = Tensor::zeros(t.shape());
            g.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = if i % 2 == 0 { 3.0 } else { -0.5 });
            (k.clone(), g)
        })
        .collect();
    Adam::new(1e-2, 0.9, 0.999, 1e-8).step(&mut model.params, &grads);
    for ((_, a), (_, b)) in model.params.iter().zip(before.iter()) {
        for (i, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
            let expected = if i % 2 == 0 { -1e-2 } else { 1e-2 };
            assert!((x - y - expected).abs() < 1e-9);
        }
    }
}

#[test]
fn checkpoint_round_trip_preserves_held_out_nll() {
    let ds = dataset(500);
    let cfg = train_cfg(8);
    let out = train(&ds, &model_cfg(), &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    out.checkpoint.save(&path).unwrap();
    let loaded = ModelCheckpoint::load(&path).unwrap();
    assert_eq!(loaded, out.checkpoint);
    let split = split_dataset(&ds, cfg.val_fraction).unwrap();
    let val = validation_examples(split.val.as_ref().unwrap(), &cfg).unwrap().unwrap();
    let a = mean_nll(&out.checkpoint.model().unwrap(), &val).unwrap();
    let b = mean_nll(&loaded.model().unwrap(), &val).unwrap();
    assert!((a - b).abs() <= 1e-12);
}

#[test]
fn step_zero_matches_the_copy_anchor_predictor() {
    let ds = dataset(500);
    let (mc, cfg) = (model_cfg(), train_cfg(1));
    let out = train(&ds, &mc, &cfg).unwrap();
    let split = split_dataset(&ds, cfg.val_fraction).unwrap();
    let batch = make_batch(&split.train, &cfg.batch, &mut substream(cfg.seed, "batchgen")).unwrap();
    let std = std_from_raw(0.0, mc.sigma_floor);
    let mut total = 0.0;
    for ex in &batch {
        let emb = embed(&mc, ex).unwrap();
        let preds: Vec<GaussianPrediction> =
            emb.anchors.iter().map(|&mean| GaussianPrediction { mean, std }).collect();
        total += nll(&preds, &emb.target_values, mc.sigma_floor).unwrap();
    }
    let anchor = total / batch.len() as f64;
    assert!((out.log[0].train_nll - anchor).abs() < 1e-9, "{} vs {anchor}", out.log[0].train_nll);
}

#[test]
fn checkpoints_are_emitted_at_the_interval() {
    let mut seen = Vec::new();
    let cfg = TrainConfig { checkpoint_interval: 4, ..train_cfg(10) };
    let out = train_with(&dataset(500), &model_cfg(), &cfg, |ck| {
        seen.push(ck.meta.steps);
        Ok(())
    })
    .unwrap();
    assert_eq!(seen, vec![4, 8]);
    assert_eq!(out.checkpoint.meta.steps, 10);
}

#[test]
fn threshold_stops_early() {
    let cfg = TrainConfig { nll_threshold: Some(1e6), ..train_cfg(50) };
    let out = train(&dataset(500), &model_cfg(), &cfg).unwrap();
    assert_eq!(out.stop, StopReason::Threshold);
    assert_eq!(out.log.len(), 1);
    assert_eq!(out.checkpoint.meta.steps, 0);
}

#[test]
fn split_keeps_temporal_order() {
    let ds = dataset(500);
    let s = split_dataset(&ds, 0.1).unwrap();
    let val = s.val.unwrap();
    assert_eq!(s.train.obs.len(), 450);
    assert_eq!(val.obs.len(), 50);
    assert!(s.train.obs.end().unwrap() < val.obs.start().unwrap());
    let raw: Vec<f64> = ds.obs.values()[..450].to_vec();
    let mean = raw.iter().sum::<f64>() / 450.0;
    assert!((s.stats.mean - mean).abs() < 1e-12);
}
