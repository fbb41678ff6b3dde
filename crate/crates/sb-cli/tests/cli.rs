//! Black-box tests of the `sb` binary: exit codes, the
//! train/eval/collapse/diagnose pipeline, and flag overrides.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn sb() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sb"))
}

fn write_config(dir: &Path, name: &str, body: serde_json::Value) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, body.to_string()).unwrap();
    path
}

fn tiny_config(out_dir: &Path, epochs: usize) -> serde_json::Value {
    serde_json::json!({
        "seed": 9,
        "output_dir": out_dir,
        "data": { "source": "synthetic", "n_train": 300, "n_test": 100 },
        "optimizer": { "learning_rate": 0.05, "batch_size": 50, "epochs": epochs },
        "input": [1, 28, 28],
        "architecture": [
            { "kind": "flatten" },
            { "kind": "sb_linear", "in_features": 784, "out_features": 24,
              "branches": 3, "keep_prob": 0.5 },
            { "kind": "batch_norm", "features": 24 },
            { "kind": "relu" },
            { "kind": "linear", "in_features": 24, "out_features": 10 }
        ]
    })
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("process not signal-killed")
}

#[test]
fn pipeline_train_eval_collapse_diagnose() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let config = write_config(dir.path(), "run.json", tiny_config(&out_dir, 2));

    let train = sb().args(["train", "--config"]).arg(&config).output().unwrap();
    assert_eq!(code(&train), 0, "{}", String::from_utf8_lossy(&train.stderr));
    let model = out_dir.join("model.sbm");
    assert!(model.is_file());
    let metrics = std::fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("# sb-metrics v1\nepoch,train_loss,test_error,seconds\n"));
    assert_eq!(metrics.lines().count(), 4, "two epochs, two data rows");

    let eval = sb()
        .args(["eval", "--config"])
        .arg(&config)
        .arg("--model")
        .arg(&model)
        .output()
        .unwrap();
    assert_eq!(code(&eval), 0, "{}", String::from_utf8_lossy(&eval.stderr));
    let eval_text = String::from_utf8_lossy(&eval.stdout).to_string();
    assert!(eval_text.contains("test error"), "{eval_text}");

    let collapsed = out_dir.join("collapsed.sbm");
    let collapse = sb().args(["collapse", "--model"]).arg(&model).output().unwrap();
    assert_eq!(code(&collapse), 0, "{}", String::from_utf8_lossy(&collapse.stderr));
    assert!(collapsed.is_file());

    // folded model evaluates identically
    let eval2 = sb()
        .args(["eval", "--config"])
        .arg(&config)
        .arg("--model")
        .arg(&collapsed)
        .output()
        .unwrap();
    assert_eq!(code(&eval2), 0);
    assert_eq!(String::from_utf8_lossy(&eval2.stdout), eval_text);

    let diagnose = sb()
        .args(["diagnose", "--config"])
        .arg(&config)
        .arg("--model")
        .arg(&model)
        .output()
        .unwrap();
    assert_eq!(code(&diagnose), 0, "{}", String::from_utf8_lossy(&diagnose.stderr));
    for name in [
        "vsr.json",
        "branch_cosine.json",
        "activation_histograms.json",
        "turn_off.json",
        "ensemble.json",
    ] {
        let path = out_dir.join("diagnostics").join(name);
        let text = std::fs::read_to_string(&path)
            .unwrap_or_else(|e| panic!("{name} missing: {e}"));
        let parsed: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert!(parsed.is_object(), "{name} is not a json object");
    }

    // the branch layer carries 3 branches over 24 units
    let ensemble: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(out_dir.join("diagnostics/ensemble.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(ensemble["total_log2_members"], 72);
    let off: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(out_dir.join("diagnostics/turn_off.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(off["layers"][0]["all_off_probability"], 0.125);
}

#[test]
fn zero_epochs_writes_the_initial_model_and_empty_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let config = write_config(dir.path(), "run.json", tiny_config(&out_dir, 0));
    let train = sb().args(["train", "--config"]).arg(&config).output().unwrap();
    assert_eq!(code(&train), 0, "{}", String::from_utf8_lossy(&train.stderr));
    assert!(out_dir.join("model.sbm").is_file());
    let metrics = std::fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    assert_eq!(metrics, "# sb-metrics v1\nepoch,train_loss,test_error,seconds\n");
}

#[test]
fn seed_flag_overrides_the_config_seed() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "run.json", tiny_config(&dir.path().join("a"), 1));

    let run = |args: &[&str], out: &str| {
        let res = sb()
            .args(["train", "--config"])
            .arg(&config)
            .arg("--out")
            .arg(dir.path().join(out))
            .args(args)
            .output()
            .unwrap();
        assert!(res.status.success());
        std::fs::read(dir.path().join(out).join("model.sbm")).unwrap()
    };
    let with_flag = run(&["--seed", "33"], "a");
    let with_config_seed = run(&[], "b");
    assert_ne!(with_flag, with_config_seed, "--seed 33 must differ from seed 9");

    // a config whose seed field says 33 matches the flag run byte for byte
    let mut body = tiny_config(&dir.path().join("c"), 1);
    body["seed"] = serde_json::json!(33);
    let config33 = write_config(dir.path(), "run33.json", body);
    let res = sb()
        .args(["train", "--config"])
        .arg(&config33)
        .arg("--out")
        .arg(dir.path().join("c"))
        .output()
        .unwrap();
    assert!(res.status.success());
    let with_config_33 = std::fs::read(dir.path().join("c/model.sbm")).unwrap();
    assert_eq!(with_flag, with_config_33);
}

#[test]
fn config_problems_exit_2() {
    let dir = tempfile::tempdir().unwrap();

    let missing = sb().args(["train", "--config", "/nonexistent/x.json"]).output().unwrap();
    assert_eq!(code(&missing), 2);

    let garbage = dir.path().join("bad.json");
    std::fs::write(&garbage, "{not json").unwrap();
    let bad = sb().args(["train", "--config"]).arg(&garbage).output().unwrap();
    assert_eq!(code(&bad), 2);

    let unknown_preset = write_config(
        dir.path(),
        "preset.json",
        serde_json::json!({ "preset": "transformer" }),
    );
    let out = sb().args(["train", "--config"]).arg(&unknown_preset).output().unwrap();
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("config error"));

    let mut body = tiny_config(&dir.path().join("x"), 1);
    body["optimizer"]["learning_rate"] = serde_json::json!(-0.5);
    let negative = write_config(dir.path(), "neg.json", body);
    let out = sb().args(["train", "--config"]).arg(&negative).output().unwrap();
    assert_eq!(code(&out), 2);

    // usage errors from argument parsing share the config exit code
    let usage = sb().args(["train"]).output().unwrap();
    assert_eq!(code(&usage), 2);
}

#[test]
fn data_problems_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let mut body = tiny_config(&dir.path().join("x"), 1);
    body["data"] = serde_json::json!({ "source": "idx" });
    let config = write_config(dir.path(), "idx.json", body);

    // no root in the config and no environment fallback
    let out = sb()
        .args(["train", "--config"])
        .arg(&config)
        .env_remove("SB_DATA_ROOT")
        .output()
        .unwrap();
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("SB_DATA_ROOT"));

    // the environment fallback is honored, but the directory has no files
    let out = sb()
        .args(["train", "--config"])
        .arg(&config)
        .env("SB_DATA_ROOT", dir.path().join("empty"))
        .output()
        .unwrap();
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("data error"));
}

#[test]
fn model_problems_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "run.json", tiny_config(&dir.path().join("x"), 1));

    let gone = sb()
        .args(["eval", "--config"])
        .arg(&config)
        .args(["--model", "/nonexistent/m.sbm"])
        .output()
        .unwrap();
    assert_eq!(code(&gone), 4);

    let junk = dir.path().join("junk.sbm");
    std::fs::write(&junk, b"JUNKFILE 9 4\nxxxx").unwrap();
    let out = sb()
        .args(["eval", "--config"])
        .arg(&config)
        .arg("--model")
        .arg(&junk)
        .output()
        .unwrap();
    assert_eq!(code(&out), 4);
    assert!(String::from_utf8_lossy(&out.stderr).contains("model error"));

    let collapse = sb().args(["collapse", "--model"]).arg(&junk).output().unwrap();
    assert_eq!(code(&collapse), 4);
}

#[test]
fn verify_passes_and_fault_injection_fails_with_exit_1() {
    let ok = sb().args(["verify"]).output().unwrap();
    assert_eq!(code(&ok), 0, "{}", String::from_utf8_lossy(&ok.stderr));
    let stdout = String::from_utf8_lossy(&ok.stdout).to_string();
    assert!(stdout.contains("all 6 checks passed"), "{stdout}");

    // repeated runs print the same report
    let again = sb().args(["verify"]).output().unwrap();
    assert_eq!(String::from_utf8_lossy(&again.stdout), stdout);

    let broken = sb().args(["verify", "--fault", "gradient"]).output().unwrap();
    assert_eq!(code(&broken), 1);
    let text = String::from_utf8_lossy(&broken.stdout);
    assert!(text.contains("FAIL  gradient-check"), "{text}");
    assert!(String::from_utf8_lossy(&broken.stderr).contains("gradient-check"));

    let unknown = sb().args(["verify", "--fault", "nonsense"]).output().unwrap();
    assert_eq!(code(&unknown), 2);
}

#[test]
fn collapse_fault_injection_trips_the_probe_check() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let config = write_config(dir.path(), "run.json", tiny_config(&out_dir, 1));
    let train = sb().args(["train", "--config"]).arg(&config).output().unwrap();
    assert_eq!(code(&train), 0);

    let out = sb()
        .args(["collapse", "--model"])
        .arg(out_dir.join("model.sbm"))
        .args(["--fault", "collapse"])
        .output()
        .unwrap();
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("verification failed"));
    assert!(!out_dir.join("collapsed.sbm").exists(), "no model written on failure");
}
