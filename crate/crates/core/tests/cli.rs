use std::fs;
use std::process::{Command, Output};

fn gembml(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gembml")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> Option<i32> {
    o.status.code()
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().display().to_string();
    assert_eq!(code(&gembml(&["theory", "no_such_study", "--out", &out])), Some(2));
    assert_eq!(code(&gembml(&["gradcheck", "--set", "bogus.key=1", "--out", &out])), Some(2));
    assert_eq!(code(&gembml(&["gradcheck", "--config", "/nonexistent.toml", "--out", &out])), Some(2));
    assert_eq!(code(&gembml(&["sine", "--set", "meta.method=reptile", "--out", &out])), Some(2));
    let o = gembml(&["neighborhood", "--set", "neighborhood.checkpoint=\"/nonexistent.json\"", "--out", &out]);
    assert_eq!(code(&o), Some(2));
}

#[test]
fn failed_check_exits_1_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().display().to_string();
    let o = gembml(&["gradcheck", "--out", &out, "--set", "gradcheck.inject_sign_flip=mlp_tanh_3_8_2"]);
    assert_eq!(code(&o), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("mlp_tanh_3_8_2"));
    let manifest = fs::read_to_string(dir.path().join("manifest.json")).unwrap();
    assert!(manifest.contains("mlp_tanh_3_8_2"));
}

#[test]
fn divergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().display().to_string();
    let o = gembml(&[
        "sine",
        "--out",
        &out,
        "--set",
        "meta.iterations=50",
        "--set",
        "meta.inner.learning_rate=1e6",
        "--set",
        "arch.layer_sizes=[1,8,1]",
    ]);
    assert_eq!(code(&o), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn config_file_and_flags_combine() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "seed = 9\n[theory.l2_check]\ncases = 12\n").unwrap();
    let out = dir.path().join("o");
    let o = gembml(&[
        "theory",
        "l2_check",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--seed",
        "4",
    ]);
    assert_eq!(code(&o), Some(0));
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 4);
    assert_eq!(manifest["command"], "theory l2_check");
    let listed: Vec<&str> = manifest["outputs"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    assert_eq!(listed, ["l2_check.csv", "l2_check_summary.json"]);
    assert_eq!(fs::read_to_string(out.join("l2_check.csv")).unwrap().lines().count(), 13);
}

#[test]
fn csv_uses_newline_terminators() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().display().to_string();
    assert_eq!(code(&gembml(&["gradcheck", "--out", &out])), Some(0));
    let bytes = fs::read(dir.path().join("gradcheck.csv")).unwrap();
    assert!(!bytes.contains(&b'\r'));
    assert!(bytes.ends_with(b"\n"));
}
