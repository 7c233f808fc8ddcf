use tempbc::batch::{BatchConfig, FeatureSpec};
use tempbc::synth::{make_shifted_pair, Kernel};
use tempbc::{train, ModelConfig, PairedDataset, StopReason, TrainConfig};

#[test]
fn two_thousand_steps_drop_the_training_nll_by_a_nat() {
    let times: Vec<f64> = (0..2620).map(f64::from).collect();
    let pair = make_shifted_pair(&Kernel::rbf(1.0).unwrap(), &times, 2.0, 0.0, 0.3, 1).unwrap();
    let obs = pair.obs.slice_time(0.0, 1999.0);
    assert_eq!(obs.len(), 2000);
    let ds = PairedDataset::new(obs, vec![(0, pair.gcm)], "synthetic").unwrap();
    let features = FeatureSpec { dim: 8, ..FeatureSpec::default() };
    let model = ModelConfig {
        n_layers: 1,
        n_heads: 2,
        model_dim: 8,
        hidden: 8,
        features,
        ..ModelConfig::default()
    };
    let cfg = TrainConfig {
        steps: 2000,
        learning_rate: 3e-3,
        batch: BatchConfig { batch_size: 8, features, ..BatchConfig::default() },
        eval_interval: 50,
        seed: 3,
        patience: 1000,
        ..TrainConfig::default()
    };
    let out = train(&ds, &model, &cfg).unwrap();
    assert_eq!(out.stop, StopReason::MaxSteps);
    assert_eq!(out.log.len(), 2000);

    let step0 = out.log[0].train_nll;
    let tail: Vec<f64> = out.log.iter().rev().take(50).map(|r| r.train_nll).collect();
    let late = tail.iter().sum::<f64>() / tail.len() as f64;
    let min = out.log.iter().map(|r| r.train_nll).fold(f64::INFINITY, f64::min);
    assert!(min < step0);
    assert!(step0 - late >= 1.0, "step 0 {step0:.4}, last 50 mean {late:.4}");
}
