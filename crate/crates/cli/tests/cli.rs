use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn murssl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_murssl"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn small_config(dir: &Path) -> String {
    let path = dir.join("cfg.json");
    fs::write(
        &path,
        r#"{"steps": 300, "eval_every": 100, "seeds": [3],
            "lambda1": {"peak": 10.0, "rampup": 100, "rampdown": 100},
            "lambda2": {"peak": 0.05, "rampup": 100, "rampdown": 100},
            "lambda3": {"peak": 4.0, "rampup": 100, "rampdown": 100},
            "lr": {"peak": 0.05, "rampup": 0, "rampdown": 100},
            "mur": {"radius_scale": 1.0},
            "dataset": {"n": 60}}"#,
    )
    .unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn print_config_applies_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = murssl(&[
        "train",
        "--config",
        &cfg,
        "--method",
        "mt",
        "--vbi",
        "on",
        "--mur-solver",
        "pga",
        "--radius",
        "0.3",
        "--seed",
        "9",
        "--print-config",
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["method"], "mt");
    assert_eq!(v["vbi"], true);
    assert_eq!(v["mur"]["solver"], "pga");
    assert_eq!(v["mur"]["radius"], 0.3);
    assert_eq!(v["seeds"], serde_json::json!([9]));
    assert_eq!(v["steps"], 300);
}

#[test]
fn train_writes_artifacts_and_sensitivity_reads_them() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let run = dir.path().join("run");
    let out = murssl(&["train", "--config", &cfg, "--out", run.to_str().unwrap()]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    for f in [
        "config.json",
        "summary.json",
        "seed-3/metrics.csv",
        "seed-3/checkpoint.bin",
        "seed-3/dataset.csv",
    ] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let metrics = fs::read_to_string(run.join("seed-3/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 4);

    let sens = dir.path().join("sens");
    let out = murssl(&[
        "sensitivity",
        "--checkpoint",
        run.join("seed-3/checkpoint.bin").to_str().unwrap(),
        "--dataset",
        run.join("seed-3/dataset.csv").to_str().unwrap(),
        "--out",
        sens.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let values = fs::read_to_string(sens.join("sensitivity.csv")).unwrap();
    assert_eq!(values.lines().count(), 61);
    assert!(sens.join("sensitivity_hist.csv").exists());

    let vp = dir.path().join("vp.csv");
    let out = murssl(&[
        "dump-virtual-points",
        "--checkpoint",
        run.join("seed-3/checkpoint.bin").to_str().unwrap(),
        "--dataset",
        run.join("seed-3/dataset.csv").to_str().unwrap(),
        "--radius",
        "0.2",
        "--out",
        vp.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = fs::read_to_string(&vp).unwrap();
    assert!(text.starts_with("example_id,x0_0,x0_1,xstar_0,xstar_1,entropy_x0,entropy_xstar"));
    assert_eq!(text.lines().count(), 61);
}

#[test]
fn compare_rr_rows_carry_radii() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = murssl(&["compare-rr", "--config", &cfg, "--radii", "0,0.25"]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = String::from_utf8(out.stdout).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 4);
    assert!(rows[0].starts_with("0.0,mur,") && rows[1].starts_with("0.0,rr,"));
    assert!(rows[2].starts_with("0.25,mur,") && rows[3].starts_with("0.25,rr,"));
}

#[test]
fn invalid_config_fails_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    fs::write(&path, r#"{"method": "mut"}"#).unwrap();
    let out = murssl(&["train", "--config", path.to_str().unwrap()]);
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.contains("requires a MUR config"), "{err}");
}

#[test]
fn unknown_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    fs::write(&path, r#"{"stepz": 10}"#).unwrap();
    let out = murssl(&["train", "--config", path.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("stepz"));
}

#[test]
fn radius_without_mur_is_an_error() {
    let out = murssl(&[
        "train",
        "--mur-solver",
        "off",
        "--radius",
        "0.5",
        "--print-config",
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("MUR is off"));
}
