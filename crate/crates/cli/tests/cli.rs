use std::path::Path;
use std::process::{Command, Output};

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_reverse-rl")).args(args).output().expect("spawn reverse-rl")
}

fn ok(args: &[&str]) -> String {
    let out = cli(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn oracle_prints_reverse_values() {
    let stdout = ok(&["oracle", "--preset", "microdrone"]);
    let json: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    let v: Vec<f64> = serde_json::from_value(json["v_bar"].clone()).unwrap();
    for (got, want) in v.iter().zip([4.5, 6.0, 4.5, 5.94]) {
        assert!((got - want).abs() < 1e-9, "{v:?}");
    }
    assert!(json["spectral_radius_reverse"].as_f64().unwrap() < 1.0);
}

#[test]
fn oracle_policy_flag_changes_values() {
    let a: serde_json::Value = serde_json::from_str(&ok(&["oracle"])).unwrap();
    let b: serde_json::Value = serde_json::from_str(&ok(&["oracle", "--policy", "0.1,0.9"])).unwrap();
    assert_ne!(a["v_bar"], b["v_bar"]);
}

#[test]
fn learn_writes_bundle_and_replays_from_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let first = tmp.path().join("first");
    ok(&["learn", "--seeds", "2", "--steps", "2000", "--eval-every", "500", "--lambda", "0.3", "--out", path(&first)]);
    for name in ["results.csv", "aggregate.csv", "manifest.json"] {
        assert!(first.join(name).exists(), "{name}");
    }
    let second = tmp.path().join("second");
    let manifest = first.join("manifest.json");
    ok(&["learn", "--config", path(&manifest), "--out", path(&second)]);
    assert_eq!(
        std::fs::read(first.join("results.csv")).unwrap(),
        std::fs::read(second.join("results.csv")).unwrap()
    );
}

#[test]
fn off_policy_learn() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&[
        "learn", "--seeds", "1", "--steps", "1000", "--target", "0.1,0.9", "--behavior", "0.5,0.5", "--alpha",
        "0.01", "--out", path(tmp.path()),
    ]);
}

#[test]
fn sweep_and_detect_run() {
    let tmp = tempfile::tempdir().unwrap();
    let sweep = tmp.path().join("sweep");
    ok(&[
        "lambda-sweep", "--seeds", "2", "--lambdas", "0,1", "--alphas", "0.01", "--steps", "1000",
        "--eval-every", "250", "--out", path(&sweep),
    ]);
    assert!(sweep.join("tuning.csv").exists());

    let dist = tmp.path().join("dist");
    ok(&["dist-train", "--seeds", "1", "--steps", "2000", "--quantiles", "20", "--out", path(&dist)]);
    let model = dist.join("models/run_0.csv");
    let detect = tmp.path().join("detect");
    ok(&[
        "detect", "--seeds", "2", "--model", path(&model), "--spec", "none", "--spec", "reward:+2:0.5",
        "--steps", "200", "--delta", "1", "--sigma", "1", "--out", path(&detect),
    ]);
    let shifts = std::fs::read_to_string(detect.join("shifts.csv")).unwrap();
    assert_eq!(shifts.lines().count(), 1 + 2 * 2);
}

#[test]
fn bad_inputs_fail_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("x");
    let r = cli(&["detect", "--spec", "bogus", "--train-steps", "10", "--out", path(&out)]);
    assert!(!r.status.success());
    assert!(String::from_utf8_lossy(&r.stderr).starts_with("error:"));
    assert!(!out.exists());

    let r = cli(&["learn", "--preset", "nowhere", "--out", path(&out)]);
    assert!(!r.status.success());

    let r = cli(&["learn", "--lambda", "2", "--out", path(&out)]);
    assert!(!r.status.success());
    assert!(!out.exists());
}
