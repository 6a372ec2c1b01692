use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ghostnoise(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ghostnoise")).args(args).arg("--out").arg(dir).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_config(dir: &Path, name: &str, json: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, json).unwrap();
    p.to_str().unwrap().to_owned()
}

const SMALL_BLOBS: &str = r#""dataset": {"kind": "blobs", "n": 400, "dim": 8, "classes": 3, "separation": 3.0, "label_noise": 0.1, "seed": 3},
    "hidden": [16, 12], "batch_size": 32"#;

#[test]
fn verify_passes_and_reports_trials() {
    let dir = tempfile::tempdir().unwrap();
    let o = ghostnoise(dir.path(), &["verify", "--trials", "1"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let text = stdout(&o);
    assert!(text.starts_with("seed 0 ("));
    let csv = fs::read_to_string(dir.path().join("verify.csv")).unwrap();
    let mut rows = csv::Reader::from_reader(csv.as_bytes());
    let records: Vec<csv::StringRecord> = rows.records().map(|r| r.unwrap()).collect();
    assert_eq!(records.len(), 11);
    for r in &records {
        assert_eq!(&r[1], "1", "{r:?}");
        assert_eq!(&r[4], "true", "{r:?}");
    }
    assert!(dir.path().join("verify.txt").exists());
}

#[test]
fn verify_default_trials_pass() {
    let dir = tempfile::tempdir().unwrap();
    let o = ghostnoise(dir.path(), &["verify"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(!stdout(&o).contains("FAIL"));
}

#[test]
fn injected_fault_fails_equivalence_only() {
    let dir = tempfile::tempdir().unwrap();
    let o = ghostnoise(dir.path(), &["verify", "--trials", "20", "--inject-fault", "--format", "json"]);
    assert_eq!(o.status.code(), Some(1));
    let doc: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("verify.json")).unwrap()).unwrap();
    let failed: Vec<&str> =
        doc["invariants"].as_array().unwrap().iter().filter(|r| r["passed"] == false).map(|r| r["invariant"].as_str().unwrap()).collect();
    assert!(failed.contains(&"double_normalization_equivalence"), "{failed:?}");
    assert!(failed.iter().all(|f| f.starts_with("double_normalization") || f.starts_with("deviation")), "{failed:?}");
}

#[test]
fn dist_fully_connected_and_conv() {
    let dir = tempfile::tempdir().unwrap();
    let o = ghostnoise(dir.path(), &["dist", "--seed", "4"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let table = fs::read_to_string(dir.path().join("dist.csv")).unwrap();
    assert!(table.starts_with("quantity,analytical,empirical,rel_error,ks_d,statistic,threshold,passed\n"));
    assert!(table.contains("shift_var,0.03125,"));
    let hist = fs::read_to_string(dir.path().join("histograms.csv")).unwrap();
    assert_eq!(hist.lines().count(), 1 + 2 * 50);

    let cfg = write_config(
        dir.path(),
        "conv.json",
        r#"{"model": {"ghost_size": 8, "spatial": 16, "inter_var": 0.75, "intra_var": 0.25}, "draws": 100000}"#,
    );
    let o = ghostnoise(dir.path(), &["dist", "--config", &cfg, "--format", "json"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let doc: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("dist.json")).unwrap()).unwrap();
    let shift = doc["rows"].as_array().unwrap().iter().find(|r| r["quantity"] == "shift_var").unwrap();
    assert!((shift["analytical"].as_f64().unwrap() - 0.095703125).abs() < 1e-12);
}

#[test]
fn dist_huge_ghost_is_nearly_degenerate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "big.json", r#"{"model": {"ghost_size": 1000000, "spatial": 1, "inter_var": 1.0, "intra_var": 0.0}, "sampling": "analytical", "draws": 20000}"#);
    let o = ghostnoise(dir.path(), &["dist", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let table = fs::read_to_string(dir.path().join("dist.csv")).unwrap();
    let mut rows = csv::Reader::from_reader(table.as_bytes());
    for r in rows.records().map(|r| r.unwrap()) {
        if &r[0] == "shift_ks" || &r[0] == "s2_ks" {
            assert!(r[4].parse::<f64>().unwrap() < 0.02, "{r:?}");
        }
    }
}

#[test]
fn dist_threshold_violation_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tight.json", r#"{"draws": 2000, "thresholds": {"shift_var_rel": 1e-9}}"#);
    let o = ghostnoise(dir.path(), &["dist", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(1));
    assert!(fs::read_to_string(dir.path().join("dist.csv")).unwrap().contains(",false\n"));
}

#[test]
fn train_without_epochs_writes_initial_row() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "t.json", &format!("{{{SMALL_BLOBS}, \"epochs\": 0}}"));
    let o = ghostnoise(dir.path(), &["train", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let metrics = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[1].starts_with("0,0.0,"), "{}", lines[1]);
    assert!(dir.path().join("metrics_final.csv").exists());
}

#[test]
fn sweep_counts_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "s.json",
        &format!(
            r#"{{{SMALL_BLOBS}, "epochs": 1, "warmup_epochs": 0, "injector": {{"kind": "gni", "ghost_size": 16}},
            "sweep": {{"kind": "ghost_size", "values": [16, 256], "seeds": [1, 2, 3]}}}}"#
        ),
    );
    let o = ghostnoise(dir.path(), &["sweep", "--config", &cfg, "--parallel", "2"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let runs = fs::read_to_string(dir.path().join("sweep_runs.csv")).unwrap();
    let mut reader = csv::Reader::from_reader(runs.as_bytes());
    let final_rows = reader.records().map(|r| r.unwrap()).filter(|r| &r[3] == "1").count();
    assert_eq!(final_rows, 6);
    let summary = fs::read_to_string(dir.path().join("sweep_summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 1 + 2);
    for line in summary.lines().skip(1) {
        assert!(line.split(',').all(|v| v.parse::<f64>().unwrap().is_finite()), "{line}");
    }
}

#[test]
fn noise_stats_writes_a_trace_per_layer_epoch_and_kind() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "n.json", &format!(r#"{{{SMALL_BLOBS}, "epochs": 3, "injector": {{"kind": "gni", "ghost_size": 8}}}}"#));
    let o = ghostnoise(dir.path(), &["noise-stats", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let mut names: Vec<String> = fs::read_dir(dir.path().join("traces")).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    assert_eq!(names.len(), 8, "{names:?}");
    assert!(names.contains(&"hidden0_epoch1_shift.csv".to_owned()), "{names:?}");
    assert!(names.iter().any(|n| n.starts_with("hidden1_epoch3_")), "{names:?}");
}

#[test]
fn noise_stats_needs_ghost_noise() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "n.json", &format!("{{{SMALL_BLOBS}, \"epochs\": 1}}"));
    let o = ghostnoise(dir.path(), &["noise-stats", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = write_config(a.path(), "t.json", &format!(r#"{{{SMALL_BLOBS}, "epochs": 2, "injector": {{"kind": "gni", "ghost_size": 8}}}}"#));
    for args in [vec!["verify", "--trials", "5"], vec!["dist", "--seed", "9"], vec!["train", "--config", &cfg, "--seed", "5"]] {
        assert!(ghostnoise(a.path(), &args).status.success());
        assert!(ghostnoise(b.path(), &args).status.success());
    }
    for f in ["verify.csv", "dist.csv", "histograms.csv", "metrics.csv", "metrics_final.csv"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn config_errors_name_the_problem() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.json", r#"{"injector": {"kind": "gni", "ghost_sise": 4}}"#);
    let o = ghostnoise(dir.path(), &["train", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("ghost_sise"));

    let o = ghostnoise(dir.path(), &["train", "--config", "/nonexistent/cfg.json"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("/nonexistent/cfg.json"));

    let cfg = write_config(dir.path(), "idx.json", r#"{"dataset": {"kind": "idx", "images": "missing-images", "labels": "missing-labels"}}"#);
    let o = ghostnoise(dir.path(), &["train", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing-images"));

    let cfg = write_config(dir.path(), "nosweep.json", &format!("{{{SMALL_BLOBS}}}"));
    assert_eq!(ghostnoise(dir.path(), &["sweep", "--config", &cfg]).status.code(), Some(2));
}
