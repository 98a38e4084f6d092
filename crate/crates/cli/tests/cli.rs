use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use livlr_core::train::read_metrics_csv;
use livlr_core::ModelConfig;

fn livlr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_livlr")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn write_config(dir: &Path, cfg: &ModelConfig) -> String {
    let p = dir.join("cfg.json");
    fs::write(&p, cfg.to_pretty_json()).unwrap();
    p.to_str().unwrap().to_string()
}

fn gen_data(dir: &Path, config: &str, n: usize) -> String {
    let spec = dir.join("spec.json");
    fs::write(
        &spec,
        format!(r#"{{"n_samples": {n}, "signal_source": "finegrained_visual", "noise_scale": 0.1, "n_classes": 4}}"#),
    )
    .unwrap();
    let data = dir.join("data");
    let out = livlr(&[
        "gen-data",
        "--spec",
        spec.to_str().unwrap(),
        "--out",
        data.to_str().unwrap(),
        "--config",
        config,
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    data.to_str().unwrap().to_string()
}

#[test]
fn train_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ModelConfig {
        epochs: 3,
        ..ModelConfig::tiny()
    };
    let config = write_config(dir.path(), &cfg);
    let data = gen_data(dir.path(), &config, 8);
    let run = dir.path().join("run");
    let out = livlr(&[
        "train",
        "--config",
        &config,
        "--data",
        &data,
        "--out-dir",
        run.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    assert_eq!(read_metrics_csv(&run.join("metrics.csv")).unwrap().len(), 3);
    let written = fs::read_to_string(run.join("config.json")).unwrap();
    assert_eq!(ModelConfig::from_json(&written).unwrap(), cfg);
    let keys = serde_json::from_str::<serde_json::Value>(&written).unwrap();
    assert_eq!(
        keys.as_object().unwrap().len(),
        serde_json::to_value(ModelConfig::default())
            .unwrap()
            .as_object()
            .unwrap()
            .len()
    );

    let ckpt = run.join("model.ckpt");
    let out = livlr(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--data", &data]);
    assert_eq!(code(&out), 0);
    assert!(stdout(&out).contains("accuracy="));

    let mut bytes = fs::read(&ckpt).unwrap();
    bytes[0] = b'X';
    fs::write(&ckpt, bytes).unwrap();
    let out = livlr(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--data", &data]);
    assert_eq!(code(&out), 3);
}

#[test]
fn param_count_reports_modules() {
    let out = livlr(&["param-count", "--config", "paper"]);
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    for group in ["visual", "linguistic", "question", "davl", "head", "total"] {
        assert!(text.contains(group), "{text}");
    }
}

#[test]
fn grad_check_passes_on_tiny() {
    let out = livlr(&["grad-check", "--config", "tiny"]);
    assert_eq!(code(&out), 0, "{}", stdout(&out));
    assert!(!stdout(&out).contains("FAIL"));
}

#[test]
fn sweep_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ModelConfig {
        epochs: 2,
        ..ModelConfig::tiny()
    };
    let config = write_config(dir.path(), &cfg);
    let out = livlr(&["sweep-nh", "--config", &config, "--values", "1,2,4"]);
    assert_eq!(code(&out), 0);
    let lines: Vec<String> = stdout(&out).lines().map(str::to_string).collect();
    assert_eq!(lines[0], "n_h,final_train_acc,final_train_loss");
    assert_eq!(lines.len(), 4);
    assert!(lines[3].starts_with("4,"));

    let out = livlr(&["sweep-nh", "--config", &config, "--values", "3"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"d": 8, "no_such_field": 1}"#).unwrap();
    assert_eq!(code(&livlr(&["param-count", "--config", bad.to_str().unwrap()])), 2);
    fs::write(&bad, r#"{"d": 7}"#).unwrap();
    assert_eq!(code(&livlr(&["param-count", "--config", bad.to_str().unwrap()])), 2);

    let missing = dir.path().join("nowhere");
    let out = livlr(&[
        "train",
        "--config",
        "tiny",
        "--data",
        missing.to_str().unwrap(),
        "--out-dir",
        missing.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 3);

    // data generated for the tiny extents does not fit the desk model
    let tiny = write_config(dir.path(), &ModelConfig::tiny());
    let data = gen_data(dir.path(), &tiny, 4);
    let out = livlr(&[
        "train",
        "--config",
        "desk",
        "--data",
        &data,
        "--out-dir",
        missing.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 3);

    let exploding = write_config(
        dir.path(),
        &ModelConfig {
            lr: 1e300,
            epochs: 2,
            ..ModelConfig::tiny()
        },
    );
    let out = livlr(&[
        "train",
        "--config",
        &exploding,
        "--data",
        &data,
        "--out-dir",
        missing.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("parameter"));
}
