use kdlab::cli::SweepSummary;
use serde_json::{json, Value};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn kdlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kdlab"))
        .args(args)
        .env("KDLAB_WORKERS", "2")
        .output()
        .unwrap()
}

fn tiny_config(dir: &Path, extra: Value) -> PathBuf {
    let mut cfg = json!({
        "output_dir": "out",
        "dataset": {"kind": "blobs", "classes": 4, "dim": 5, "n_per_class": 30, "separation": 3.0, "seed": 1},
        "teacher": {"hidden": [16], "features": 8},
        "student": {"hidden": [8], "features": 4},
        "schedule": {"epochs": 2, "batch_size": 16},
        "seeds": [0, 1],
        "sweep": {"widths": [2, 4], "variants": ["logits-se", "features-se"]},
        "incremental": {
            "tasks": 2, "model": {"hidden": [8], "features": 4}, "seeds": [0, 1],
            "grid": [0.01, 1.0], "grid_fraction": 0.5
        }
    });
    if let (Value::Object(base), Value::Object(extra)) = (&mut cfg, extra) {
        base.extend(extra);
    }
    let path = dir.join("cfg.json");
    std::fs::write(&path, serde_json::to_vec_pretty(&cfg).unwrap()).unwrap();
    path
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn verify_reports_four_passing_checks() {
    let out = kdlab(&["verify", "--seed", "3"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let reports: Vec<Value> = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(reports.len(), 4);
    assert!(reports.iter().all(|r| r["passed"] == json!(true)));
}

#[test]
fn config_errors_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), json!({"schedule": {"epochs": 2, "bach_size": 16}}));
    let out = kdlab(&["distill", "-c", cfg.to_str().unwrap(), "--variant", "vanilla"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("schedule"), "{}", stderr(&out));

    std::fs::write(&cfg, "{\"output_dir\": \"out\",\n  \"seeds\": [1,}").unwrap();
    let out = kdlab(&["distill", "-c", cfg.to_str().unwrap(), "--variant", "vanilla"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("line 2"), "{}", stderr(&out));

    std::fs::write(&cfg, "{}").unwrap();
    let out = kdlab(&["distill", "-c", cfg.to_str().unwrap(), "--variant", "vanilla"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("output_dir"), "{}", stderr(&out));

    let out = kdlab(&["distill", "-c", cfg.to_str().unwrap(), "--variant", "fitnets"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn distill_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), json!({}));
    let csv = dir.path().join("out/distill-logits-se.csv");
    let run = || {
        let out = kdlab(&["distill", "-c", cfg.to_str().unwrap(), "--variant", "logits-se"]);
        assert!(out.status.success(), "{}", stderr(&out));
        std::fs::read(&csv).unwrap()
    };
    let first = run();
    // The second run reuses the saved teacher instead of retraining it.
    let second = run();
    assert_eq!(first, second);
    std::fs::remove_file(dir.path().join("out/teacher.json")).unwrap();
    assert_eq!(run(), first);
    let text = String::from_utf8(first).unwrap();
    assert!(text.starts_with("run_id,variant,width,seed,split,metric,value"));
    assert!(text.contains(",accuracy,"));
}

#[test]
fn mismatched_teacher_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), json!({}));
    let out = kdlab(&["train-teacher", "-c", cfg.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    tiny_config(dir.path(), json!({"teacher": {"hidden": [12], "features": 8}}));
    let out = kdlab(&["distill", "-c", cfg.to_str().unwrap(), "--variant", "hkd"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn incremental_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), json!({}));
    let csv = dir.path().join("out/incremental-ewc.csv");
    let mut runs = Vec::new();
    for _ in 0..2 {
        let out = kdlab(&["incremental", "-c", cfg.to_str().unwrap(), "--method", "ewc"]);
        assert!(out.status.success(), "{}", stderr(&out));
        runs.push(std::fs::read(&csv).unwrap());
    }
    assert_eq!(runs[0], runs[1]);
    let summary: Value = serde_json::from_slice(&std::fs::read(dir.path().join("out/incremental-ewc.json")).unwrap()).unwrap();
    assert_eq!(summary["lambdas"].as_array().unwrap().len(), 2);
}

#[test]
fn report_recomputes_from_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), json!({}));
    let out = kdlab(&["sweep-width", "-c", cfg.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    for m in ["vanilla", "logits-se"] {
        let out = kdlab(&["incremental", "-c", cfg.to_str().unwrap(), "--method", m]);
        assert!(out.status.success(), "{}", stderr(&out));
    }
    let results = dir.path().join("out");
    let summary: SweepSummary =
        serde_json::from_slice(&std::fs::read(results.join("sweep_summary.json")).unwrap()).unwrap();
    let plot_before = std::fs::read(results.join("sweep_plot.csv")).unwrap();
    let inc: Value = serde_json::from_slice(&std::fs::read(results.join("incremental-logits-se.json")).unwrap()).unwrap();

    // Only raw CSVs survive; everything else must be regenerated.
    for name in ["sweep_summary.json", "sweep_plot.csv", "teacher.json", "incremental-logits-se.json"] {
        std::fs::remove_file(results.join(name)).unwrap();
    }
    let out = kdlab(&["report", "--in", results.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report, serde_json::from_slice::<Value>(&std::fs::read(results.join("report.json")).unwrap()).unwrap());
    assert_eq!(std::fs::read(results.join("sweep_plot.csv")).unwrap(), plot_before);

    let cells: Vec<kdlab::compression::RprCell> = serde_json::from_value(report["sweep"]["cells"].clone()).unwrap();
    assert_eq!(cells.len(), summary.cells.len());
    for (a, b) in cells.iter().zip(&summary.cells) {
        assert_eq!((a.width, a.variant, a.base, a.seeds), (b.width, b.variant, b.base, b.seeds));
        let same = |x: f64, y: f64| (x.is_nan() && y.is_nan()) || x == y;
        assert!(same(a.rpr_mean, b.rpr_mean) && same(a.rpr_std, b.rpr_std));
        assert_eq!(a.accuracy_mean, b.accuracy_mean);
    }
    let rec = &report["incremental"]["logits-se"];
    assert_eq!(rec["final_average"], inc["final_average"]);
    assert_eq!(rec["average_mean"], inc["average_mean"]);
    assert!(report["incremental"]["vanilla"].is_object());
}

#[test]
fn interrupted_run_leaves_no_partial_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(
        dir.path(),
        json!({
            "dataset": {"kind": "blobs", "classes": 4, "dim": 5, "n_per_class": 200, "separation": 3.0},
            "schedule": {"epochs": 40, "batch_size": 8},
            "incremental": {"tasks": 2, "seeds": [0, 1, 2, 3], "grid": []}
        }),
    );
    let results = dir.path().join("out");
    for delay_ms in [50, 200, 600] {
        let mut child = Command::new(env!("CARGO_BIN_EXE_kdlab"))
            .args(["incremental", "-c", cfg.to_str().unwrap(), "--method", "l2"])
            .env("KDLAB_WORKERS", "1")
            .stdout(std::process::Stdio::null())
            .spawn()
            .unwrap();
        std::thread::sleep(std::time::Duration::from_millis(delay_ms));
        let _ = child.kill();
        let _ = child.wait();
        let csv = results.join("incremental-l2.csv");
        if csv.exists() {
            // A file that exists must be complete.
            let rows: Vec<kdlab::results::TaskAccuracyRow> = kdlab::results::read_csv(&csv).unwrap();
            assert_eq!(rows.len(), 4 * 3);
        }
        if results.exists() {
            for e in std::fs::read_dir(&results).unwrap() {
                let name = e.unwrap().file_name().into_string().unwrap();
                assert!(!name.ends_with(".csv") || name == "incremental-l2.csv", "{name}");
            }
        }
    }
}

#[test]
fn bad_worker_count_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), json!({}));
    let out = Command::new(env!("CARGO_BIN_EXE_kdlab"))
        .args(["distill", "-c", cfg.to_str().unwrap(), "--variant", "vanilla"])
        .env("KDLAB_WORKERS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("KDLAB_WORKERS"));
}

#[test]
fn readme_config_lists_the_defaults() {
    let readme = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../README.md")).unwrap();
    let start = readme.find("```json\n").expect("json block") + 8;
    let end = start + readme[start..].find("```").unwrap();
    let path = Path::new("cfg.json");
    let documented = kdlab::config::parse_config_str(&readme[start..end], path).unwrap();
    let minimal = kdlab::config::parse_config_str(r#"{"output_dir": "results"}"#, path).unwrap();
    assert_eq!(documented, minimal);
}
