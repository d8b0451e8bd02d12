use std::path::Path;
use std::process::{Command, Output};

fn eager(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eager")).args(args).env_remove("EAGER_SEED").output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn dry_run(extra: &[&str]) -> serde_json::Value {
    let mut args = vec!["train-agent", "--out", "/nonexistent/never-written", "--dry-run"];
    args.extend_from_slice(extra);
    let o = eager(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_str(&stdout(&o)).unwrap()
}

fn gen(dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["gen-dataset", "--task", "PutNextTo-Local", "--n-per-task", "12", "--out", dir.to_str().unwrap()];
    args.extend_from_slice(extra);
    eager(&args)
}

#[test]
fn auto_lambda_on_unlock_medium_is_tabulated_value() {
    let v = dry_run(&["--task", "Unlock-Medium", "--shaping", "eager", "--qa", "oracle"]);
    assert!((v["lambda"].as_f64().unwrap() - 4.8).abs() < 0.05);
    assert_eq!(v["lambda_inputs"]["n"], 40);
    assert_eq!(v["lambda_inputs"]["k"], 2);
}

#[test]
fn enforce_bound_refuses_large_lambda_with_exit_2() {
    let o = eager(&[
        "train-agent", "--task", "Unlock-Medium", "--shaping", "eager", "--qa", "oracle", "--enforce-bound", "--out", "/tmp/unused", "--dry-run",
    ]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("bound"));
    let v = dry_run(&["--task", "Unlock-Medium", "--shaping", "eager", "--qa", "oracle", "--enforce-bound", "--lambda", "0.1"]);
    assert_eq!(v["lambda"], 0.1);
}

#[test]
fn config_errors_exit_2() {
    assert_eq!(code(&eager(&["train-agent", "--task", "Unlock-Local", "--out", "/tmp/unused", "--dry-run"])), 2);
    assert_eq!(code(&eager(&["train-agent", "--task", "PutNextTo-Local", "--shaping", "eager", "--out", "/tmp/unused"])), 2);
    assert_eq!(code(&eager(&["train-agent", "--task", "PutNextTo-Local", "--lambda", "big", "--out", "/tmp/unused"])), 2);
    assert_eq!(code(&eager(&["no-such-command"])), 2);
}

#[test]
fn missing_data_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let o = eager(&["eval-qa", "--data", dir.path().join("none").to_str().unwrap(), "--ckpt", "x.ckpt"]);
    assert_eq!(code(&o), 3);
}

#[test]
fn seed_env_overrides_seed_list() {
    let o = Command::new(env!("CARGO_BIN_EXE_eager"))
        .args(["train-agent", "--task", "PutNextTo-Local", "--seeds", "0,1", "--out", "/tmp/unused", "--dry-run"])
        .env("EAGER_SEED", "40")
        .output()
        .unwrap();
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["seeds"], serde_json::json!([40, 41]));
}

#[test]
fn flags_override_config_file_which_overrides_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    std::fs::write(&cfg, r#"{"task": "PutNextTo-Local", "frames": 5120, "gamma": 0.95, "seeds": [3]}"#).unwrap();
    let v = dry_run(&["--config", cfg.to_str().unwrap(), "--frames", "2560"]);
    assert_eq!(v["frames"], 2560);
    assert_eq!(v["ppo"]["gamma"], 0.95);
    assert_eq!(v["seeds"], serde_json::json!([3]));
    assert_eq!(v["ppo"]["lr"], 7e-4);
}

#[test]
fn gen_dataset_refuses_to_overwrite_without_force() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ds");
    let first = gen(&out, &[]);
    assert_eq!(code(&first), 0, "{}", String::from_utf8_lossy(&first.stderr));
    assert!(out.join("manifest.json").exists());
    assert_eq!(code(&gen(&out, &[])), 2);
    assert_eq!(code(&gen(&out, &["--force"])), 0);
}

#[test]
fn qa_train_and_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dir.path().join("ds");
    assert_eq!(code(&gen(&ds, &["--test-fraction", "0.3"])), 0);
    let qa = dir.path().join("qa");
    let o = eager(&[
        "train-qa", "--data", ds.to_str().unwrap(), "--out", qa.to_str().unwrap(), "--epochs", "1", "--d-model", "8", "--layers", "1",
        "--heads", "2", "--d-ff", "8",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["qa.ckpt", "sr_log.csv", "manifest.json"] {
        assert!(qa.join(f).exists(), "{f}");
    }
    let report = dir.path().join("eval.json");
    let o = eager(&[
        "eval-qa", "--data", ds.to_str().unwrap(), "--ckpt", qa.join("qa.ckpt").to_str().unwrap(), "--json", report.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(report).unwrap()).unwrap();
    let sr = v["sr"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&sr));
    assert!(v["total"].as_u64().unwrap() > 0);
}

fn small_run(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "train-agent", "--task", "PutNextTo-Local", "--room-size", "6", "--horizon", "32", "--frames", "512", "--envs", "4", "--batch",
        "256", "--minibatch", "128", "--hidden", "16", "--eval-episodes", "4", "--out", out.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    eager(&args)
}

#[test]
fn train_agent_writes_run_layout_and_plot_aggregates() {
    let dir = tempfile::tempdir().unwrap();
    let shaped = dir.path().join("eager");
    let plain = dir.path().join("ppo");
    let o = small_run(&shaped, &["--seeds", "0,1", "--shaping", "eager", "--qa", "oracle"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(code(&small_run(&plain, &["--seeds", "0"])), 0);
    for s in ["seed_0", "seed_1"] {
        for f in ["curve.csv", "policy.ckpt", "eval.json", "trace.csv"] {
            assert!(shaped.join(s).join(f).exists(), "{s}/{f}");
        }
    }
    for f in ["curves.csv", "curve.svg", "manifest.json"] {
        assert!(shaped.join(f).exists(), "{f}");
    }
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(shaped.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["resolved"]["seeds"], serde_json::json!([0, 1]));
    assert_eq!(code(&small_run(&plain, &["--seeds", "0"])), 2);

    let plot = dir.path().join("plot");
    let o = eager(&["plot", "--input", shaped.to_str().unwrap(), "--input", plain.to_str().unwrap(), "--out", plot.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let svg = std::fs::read_to_string(plot.join("plot.svg")).unwrap();
    assert_eq!(svg.matches("fill-opacity").count(), 1);
    assert_eq!(svg.matches("<polyline").count(), 2);
    assert!(svg.contains(">eager<") && svg.contains(">ppo<"));
    let agg = std::fs::read_to_string(plot.join("aggregated.csv")).unwrap();
    assert!(agg.starts_with("method,frames,mean_return,std_return"));
}
