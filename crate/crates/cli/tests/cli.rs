mod common;

use std::fs;

use common::{fixtures, run_ok, s, tempbc};

fn baseline_args(method: &str, out: &std::path::Path) -> Vec<String> {
    let fx = fixtures();
    [
        "baseline", "--obs", &s(&fx.join("obs.csv")), "--gcm", &s(&fx.join("gcm.csv")), "--method", method,
        "--ref-start", "0", "--ref-end", "365", "--proj-start", "366", "--proj-end", "730", "--out-dir", &s(out),
    ]
    .iter()
    .map(|a| a.to_string())
    .collect()
}

#[test]
fn eqm_reproduces_the_golden_file() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(baseline_args("eqm", dir.path())).unwrap();
    let got = fs::read(dir.path().join("baseline_eqm.csv")).unwrap();
    assert_eq!(got, fs::read(fixtures().join("golden_eqm.csv")).unwrap());
    let manifest = fs::read_to_string(dir.path().join("baseline_eqm.manifest.json")).unwrap();
    let m: serde_json::Value = serde_json::from_str(&manifest).unwrap();
    assert_eq!(m["command"], "baseline");
    assert_eq!(m["config"]["baseline"]["method"], "eqm");
    assert_eq!(m["inputs"].as_object().unwrap().len(), 2);
}

#[test]
fn baseline_config_file_and_flag_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("b.json");
    fs::write(&cfg, r#"{"method": "mean", "ref_period": [0, 365], "proj_period": [366, 400]}"#).unwrap();
    let fx = fixtures();
    run_ok([
        "baseline", "--obs", &s(&fx.join("obs.csv")), "--gcm", &s(&fx.join("gcm.csv")), "--config", &s(&cfg),
        "--proj-end", "730", "--pooled", "--out-dir", &s(dir.path()),
    ])
    .unwrap();
    let text = fs::read_to_string(dir.path().join("baseline_mean.csv")).unwrap();
    assert_eq!(text.lines().count(), 1 + 2 * 365);
    let m: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("baseline_mean.manifest.json")).unwrap()).unwrap();
    assert_eq!(m["config"]["baseline"]["monthly"], false);
    assert_eq!(m["config"]["baseline"]["proj_period"], serde_json::json!([366.0, 730.0]));
}

#[test]
fn eval_of_the_observations_themselves_has_zero_mse() {
    let dir = tempfile::tempdir().unwrap();
    let obs = fixtures().join("obs.csv");
    let mut candidate = String::from("run,t,value\n");
    for line in fs::read_to_string(&obs).unwrap().lines().skip(1) {
        candidate.push_str(&format!("0,{line}\n"));
    }
    let cand = dir.path().join("cand.csv");
    fs::write(&cand, candidate).unwrap();
    let stdout = run_ok(["eval", "--candidate", &s(&cand), "--obs", &s(&obs), "--out-dir", &s(dir.path())]).unwrap();
    assert!(stdout.starts_with("mse 0.000000"), "{stdout}");
    let r: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("eval_report.json")).unwrap()).unwrap();
    assert_eq!(r["mse"], 0.0);
    assert_eq!(r["loglik_floored"], true);
    let qq = fs::read_to_string(dir.path().join("eval_qq.csv")).unwrap();
    assert_eq!(qq.lines().count(), 100);
    for line in qq.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        assert_eq!(f[1], f[2]);
    }
}

#[test]
fn exit_codes_follow_the_error_kind() {
    let dir = tempfile::tempdir().unwrap();
    let out = tempbc(["train", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));

    let out = tempbc(baseline_args("nope", dir.path()));
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown baseline method"));

    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{\"model\": {\"n_layers\": \"two\"}}").unwrap();
    let out = tempbc(["train", "--obs", "x", "--gcm", "y", "--config", &s(&bad), "--out-dir", &s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));

    let out = tempbc([
        "eval", "--candidate", &s(&dir.path().join("missing.csv")), "--obs", "x", "--out-dir", &s(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.csv"));
}

#[test]
fn failed_commands_leave_no_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let syn = dir.path().join("syn");
    run_ok(["synth", "--out-dir", &s(&syn), "--days", "700", "--seed", "1"]).unwrap();
    let cfg = dir.path().join("t.json");
    fs::write(
        &cfg,
        r#"{"model": {"n_layers": 1, "n_heads": 1, "model_dim": 4, "hidden": 4, "feature_dim": 4},
            "train": {"batch_size": 1, "checkpoint_interval": 1}}"#,
    )
    .unwrap();
    let train = |end: &str, out_dir: &std::path::Path| {
        tempbc([
            "train", "--data", &s(&syn.join("data.json")), "--config", &s(&cfg), "--steps", "3",
            "--train-end", end, "--out-dir", &s(out_dir),
        ])
    };
    let short = dir.path().join("short");
    let out = train("300", &short);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read_dir(&short).unwrap().count(), 0);

    // the log path is occupied by a directory, so the run fails after writing its checkpoint
    let blocked = dir.path().join("blocked");
    fs::create_dir_all(blocked.join("train_log.csv")).unwrap();
    let out = train("599", &blocked);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let left: Vec<_> = fs::read_dir(&blocked).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(left, vec![std::ffi::OsString::from("train_log.csv")]);
}

#[test]
fn small_pipeline_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let d = |p: &str| s(&dir.path().join(p));
    run_ok(["synth", "--out-dir", &d("syn"), "--days", "700", "--runs", "2", "--seed", "3"]).unwrap();
    fs::write(
        dir.path().join("t.json"),
        r#"{"model": {"n_layers": 1, "n_heads": 2, "model_dim": 4, "hidden": 4, "feature_dim": 4},
            "train": {"batch_size": 2, "checkpoint_interval": 2}}"#,
    )
    .unwrap();
    run_ok([
        "train", "--data", &d("syn/data.json"), "--config", &d("t.json"), "--steps", "4", "--train-end", "599",
        "--out-dir", &d("model"),
    ])
    .unwrap();
    let log = fs::read_to_string(dir.path().join("model/train_log.csv")).unwrap();
    assert_eq!(log.lines().next(), Some("step,train_nll,val_nll"));
    assert_eq!(log.lines().count(), 5);
    run_ok([
        "sample", "--data", &d("syn/data.json"), "--checkpoint", &d("model/checkpoint.json"), "--start", "600",
        "--horizon", "40", "--trajectories", "2", "--run", "1", "--out-dir", &d("samples"),
    ])
    .unwrap();
    let samples = fs::read_to_string(dir.path().join("samples/samples.csv")).unwrap();
    assert_eq!(samples.lines().count(), 1 + 2 * 40);
    assert!(samples.lines().skip(1).all(|l| l.starts_with("1,")));
    run_ok([
        "report", "--obs", &d("syn/obs.csv"), "--samples", &d("samples/samples.csv"), "--predictive",
        &d("samples/predictive.csv"), "--gcm", &d("syn/gcm.csv"), "--thresholds", "1.5", "--out-dir", &d("report"),
    ])
    .unwrap();
    let table = fs::read_to_string(dir.path().join("report/comparison.csv")).unwrap();
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(rows[0], "method,mse,loglik,loglik_convention,heatwave_error_pct_1.5");
    assert!(rows[1].starts_with("model,") && rows[1].contains(",predictive_mixture,"));
    assert!(rows[2].starts_with("gcm,") && rows[2].contains(",constant_variance,"));
    let dist = fs::read_to_string(dir.path().join("report/heatwave_distribution.csv")).unwrap();
    assert_eq!(dist.lines().filter(|l| l.starts_with("model,1,")).count(), 2);
    assert_eq!(dist.lines().filter(|l| l.starts_with("gcm,")).count(), 2);
    for name in ["synth", "train", "sample", "report"] {
        let sub = match name {
            "synth" => "syn",
            "train" => "model",
            "sample" => "samples",
            _ => "report",
        };
        assert!(dir.path().join(sub).join(format!("{name}.manifest.json")).exists(), "{name}");
    }
}
