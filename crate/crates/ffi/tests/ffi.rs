use kdlab::nets::{MultiHeadNet, NetSpec};
use kdlab_ffi::*;
use std::ffi::{c_char, CStr, CString};
use std::path::Path;
use std::ptr;

fn last_error() -> String {
    let p = kdlab_last_error_message();
    assert!(!p.is_null(), "expected an error message");
    let s = unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned();
    unsafe { kdlab_string_free(p) };
    s
}

fn take_string(p: *mut c_char) -> String {
    assert!(!p.is_null());
    let s = unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned();
    unsafe { kdlab_string_free(p) };
    s
}

fn cstr(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn blobs(classes: usize, dim: usize, n: usize) -> *mut KdlabDataset {
    let mut ds = ptr::null_mut();
    let st = unsafe { kdlab_dataset_blobs(classes, dim, n, 3.0, 4, &mut ds) };
    assert_eq!(st, KdlabStatus::Ok);
    ds
}

#[test]
fn verify_returns_json_and_pass_flag() {
    let mut json = ptr::null_mut();
    let mut passed = false;
    let st = unsafe { kdlab_verify(1, &mut json, &mut passed) };
    assert_eq!(st, KdlabStatus::Ok);
    assert!(passed);
    let reports: serde_json::Value = serde_json::from_str(&take_string(json)).unwrap();
    assert_eq!(reports.as_array().unwrap().len(), 4);
}

#[test]
fn dataset_handle_accessors_and_copy() {
    let ds = blobs(3, 4, 10);
    unsafe {
        assert_eq!(kdlab_dataset_len(ds), 30);
        assert_eq!(kdlab_dataset_dim(ds), 4);
        assert_eq!(kdlab_dataset_classes(ds), 3);
        let mut x = vec![0.0; 120];
        let mut y = vec![usize::MAX; 30];
        assert_eq!(kdlab_dataset_copy(ds, x.as_mut_ptr(), y.as_mut_ptr()), KdlabStatus::Ok);
        assert!(y.iter().all(|&l| l < 3));
        assert!(x.iter().any(|&v| v != 0.0));
        assert_eq!(kdlab_dataset_copy(ds, ptr::null_mut(), ptr::null_mut()), KdlabStatus::Ok);
        kdlab_dataset_free(ds);
        kdlab_dataset_free(ptr::null_mut());
        assert_eq!(kdlab_dataset_len(ptr::null()), 0);
    }
}

#[test]
fn invalid_blob_spec_reports_error() {
    let mut ds = ptr::null_mut();
    let st = unsafe { kdlab_dataset_blobs(1, 4, 10, 3.0, 0, &mut ds) };
    assert_eq!(st, KdlabStatus::InvalidArgument);
    assert!(ds.is_null());
    assert!(!last_error().is_empty());
}

#[test]
fn null_outputs_are_rejected() {
    let st = unsafe { kdlab_dataset_blobs(3, 4, 10, 3.0, 0, ptr::null_mut()) };
    assert_eq!(st, KdlabStatus::NullPointer);
    assert!(last_error().contains("out"));
    let st = unsafe { kdlab_rpr(0.5, 0.4, 0.9, ptr::null_mut()) };
    assert_eq!(st, KdlabStatus::NullPointer);
}

#[test]
fn success_clears_previous_error() {
    let st = unsafe { kdlab_rpr(0.5, 0.4, 0.9, ptr::null_mut()) };
    assert_eq!(st, KdlabStatus::NullPointer);
    let mut r = 0.0;
    assert_eq!(unsafe { kdlab_rpr(0.5, 0.4, 0.9, &mut r) }, KdlabStatus::Ok);
    assert!(kdlab_last_error_message().is_null());
}

#[test]
fn model_round_trip_predict_and_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    let net = MultiHeadNet::init(&NetSpec {
        widths: vec![4, 8, 5],
        heads: vec![3, 2],
        seed: 9,
    })
    .unwrap();
    net.save(&path).unwrap();

    let mut model = ptr::null_mut();
    assert_eq!(unsafe { kdlab_model_load(cstr(&path).as_ptr(), &mut model) }, KdlabStatus::Ok);
    unsafe {
        assert_eq!(kdlab_model_input_dim(model), 4);
        assert_eq!(kdlab_model_num_heads(model), 2);
    }

    let ds = blobs(3, 4, 10);
    let mut x = vec![0.0; 120];
    unsafe { kdlab_dataset_copy(ds, x.as_mut_ptr(), ptr::null_mut()) };
    let mut labels = vec![usize::MAX; 30];
    let st = unsafe { kdlab_model_predict(model, x.as_ptr(), 30, 4, 0, labels.as_mut_ptr()) };
    assert_eq!(st, KdlabStatus::Ok);
    let xt = kdlab::autodiff::Tensor::matrix(30, 4, x.clone()).unwrap();
    assert_eq!(labels, net.predict(&xt, 0).unwrap());

    let st = unsafe { kdlab_model_predict(model, x.as_ptr(), 30, 4, 2, labels.as_mut_ptr()) };
    assert_eq!(st, KdlabStatus::InvalidArgument);
    let st = unsafe { kdlab_model_predict(model, x.as_ptr(), 40, 3, 0, labels.as_mut_ptr()) };
    assert_eq!(st, KdlabStatus::Shape);

    let mut acc = -1.0;
    assert_eq!(unsafe { kdlab_model_accuracy(model, ds, 0, &mut acc) }, KdlabStatus::Ok);
    let ds_ref = kdlab::data::make_blobs(3, 4, 10, 3.0, 4).unwrap();
    assert_eq!(acc, net.accuracy(&ds_ref.features, &ds_ref.labels, 0).unwrap());

    let copy = dir.path().join("copy.json");
    assert_eq!(unsafe { kdlab_model_save(model, cstr(&copy).as_ptr()) }, KdlabStatus::Ok);
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&copy).unwrap());
    unsafe {
        kdlab_model_free(model);
        kdlab_dataset_free(ds);
    }
}

#[test]
fn model_load_errors_map_to_status() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("none.json");
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { kdlab_model_load(cstr(&missing).as_ptr(), &mut model) }, KdlabStatus::Io);
    let junk = dir.path().join("junk.json");
    std::fs::write(&junk, b"{\"not\": \"a model\"}").unwrap();
    assert_eq!(unsafe { kdlab_model_load(cstr(&junk).as_ptr(), &mut model) }, KdlabStatus::Format);
    assert!(model.is_null());
    assert_eq!(unsafe { kdlab_model_load(ptr::null(), &mut model) }, KdlabStatus::NullPointer);
}

#[test]
fn idx_loading_through_ffi() {
    let dir = tempfile::tempdir().unwrap();
    let (img, lbl) = (dir.path().join("img"), dir.path().join("lbl"));
    let mut images = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2];
    images.extend([0u8, 255, 51, 102, 255, 0, 0, 0]);
    std::fs::write(&img, images).unwrap();
    std::fs::write(&lbl, [0, 0, 8, 1, 0, 0, 0, 2, 7, 1]).unwrap();
    let mut ds = ptr::null_mut();
    let st = unsafe { kdlab_dataset_load_idx(cstr(&img).as_ptr(), cstr(&lbl).as_ptr(), &mut ds) };
    assert_eq!(st, KdlabStatus::Ok, "{}", last_error());
    let mut x = vec![0.0; 8];
    let mut y = vec![0usize; 2];
    unsafe {
        assert_eq!(kdlab_dataset_len(ds), 2);
        assert_eq!(kdlab_dataset_dim(ds), 4);
        kdlab_dataset_copy(ds, x.as_mut_ptr(), y.as_mut_ptr());
        kdlab_dataset_free(ds);
    }
    assert_eq!(x, vec![0.0, 1.0, 0.2, 0.4, 1.0, 0.0, 0.0, 0.0]);
    assert_eq!(y, vec![7, 1]);

    std::fs::write(&lbl, [0, 0, 8, 1, 0, 0, 0, 3, 7, 1, 2]).unwrap();
    let st = unsafe { kdlab_dataset_load_idx(cstr(&img).as_ptr(), cstr(&lbl).as_ptr(), &mut ds) };
    assert_eq!(st, KdlabStatus::Format);
}

#[test]
fn kl_rpr_and_normalization() {
    let p = [0.5, 0.5, 1.0, 0.0];
    let q = [0.5, 0.5, 0.5, 0.5];
    let mut out = -1.0;
    assert_eq!(unsafe { kdlab_kl_divergence(p.as_ptr(), q.as_ptr(), 2, 2, &mut out) }, KdlabStatus::Ok);
    assert!((out - 0.5 * 2f64.ln()).abs() < 1e-12);
    let zero = [1.0, 0.0];
    let st = unsafe { kdlab_kl_divergence([0.5, 0.5].as_ptr(), zero.as_ptr(), 1, 2, &mut out) };
    assert_eq!(st, KdlabStatus::Domain);

    assert_eq!(unsafe { kdlab_rpr(0.85, 0.8, 0.9, &mut out) }, KdlabStatus::Ok);
    assert!((out - 0.5).abs() < 1e-12);
    assert_eq!(unsafe { kdlab_rpr(0.85, 0.8, 0.8, &mut out) }, KdlabStatus::Degenerate);

    let mut w = [1.0, 2.0, 3.0, 10.0];
    let mut clamped = -1.0;
    assert_eq!(unsafe { kdlab_normalize_weight_diag(w.as_mut_ptr(), 4, &mut clamped) }, KdlabStatus::Ok);
    assert!(w.iter().all(|&v| v >= 0.0));
    assert_eq!(clamped, 0.0);
    let mut w = [0.0, 0.0, 0.0, 100.0];
    assert_eq!(unsafe { kdlab_normalize_weight_diag(w.as_mut_ptr(), 4, ptr::null_mut()) }, KdlabStatus::Ok);
    assert!(w.iter().all(|&v| v >= 0.0));
}

#[test]
fn run_experiment_distill_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = serde_json::json!({
        "output_dir": dir.path().join("out"),
        "dataset": {"kind": "blobs", "classes": 4, "dim": 5, "n_per_class": 30, "separation": 3.0, "seed": 1},
        "teacher": {"hidden": [16], "features": 8},
        "student": {"hidden": [8], "features": 4},
        "schedule": {"epochs": 2, "batch_size": 16},
        "seeds": [0, 1]
    });
    let cfg_path = dir.path().join("cfg.json");
    std::fs::write(&cfg_path, serde_json::to_vec(&cfg).unwrap()).unwrap();
    let cfg_c = cstr(&cfg_path);

    let cmd = CString::new("distill").unwrap();
    let arg = CString::new("logits-se").unwrap();
    let mut json = ptr::null_mut();
    let st = unsafe { kdlab_run_experiment(cmd.as_ptr(), cfg_c.as_ptr(), arg.as_ptr(), &mut json) };
    assert_eq!(st, KdlabStatus::Ok, "{}", last_error());
    let summary: serde_json::Value = serde_json::from_str(&take_string(json)).unwrap();
    assert_eq!(summary["variant"], "logits-se");
    assert_eq!(summary["accuracies"].as_array().unwrap().len(), 2);
    assert!(dir.path().join("out/distill-logits-se.csv").exists());

    let bad = CString::new("no-such-variant").unwrap();
    let st = unsafe { kdlab_run_experiment(cmd.as_ptr(), cfg_c.as_ptr(), bad.as_ptr(), &mut json) };
    assert_ne!(st, KdlabStatus::Ok);
    let st = unsafe { kdlab_run_experiment(cmd.as_ptr(), cfg_c.as_ptr(), ptr::null(), &mut json) };
    assert_eq!(st, KdlabStatus::InvalidArgument);

    let report = CString::new("report").unwrap();
    let out_dir = cstr(&dir.path().join("out"));
    let st = unsafe { kdlab_run_experiment(report.as_ptr(), ptr::null(), out_dir.as_ptr(), &mut json) };
    assert_eq!(st, KdlabStatus::Ok, "{}", last_error());
    take_string(json);

    let unknown = CString::new("launch").unwrap();
    let st = unsafe { kdlab_run_experiment(unknown.as_ptr(), cfg_c.as_ptr(), ptr::null(), &mut json) };
    assert_eq!(st, KdlabStatus::InvalidArgument);
    assert!(last_error().contains("launch"));
}

#[test]
fn bad_config_maps_to_config_status() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("cfg.json");
    std::fs::write(&cfg_path, br#"{"output_dir": "out", "schedul": {}}"#).unwrap();
    let cmd = CString::new("sweep-width").unwrap();
    let mut json = ptr::null_mut();
    let st = unsafe { kdlab_run_experiment(cmd.as_ptr(), cstr(&cfg_path).as_ptr(), ptr::null(), &mut json) };
    assert_eq!(st, KdlabStatus::Config);
    assert!(last_error().contains("schedul"));
}

#[test]
fn header_is_valid_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/kdlab.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in [
        "kdlab_verify",
        "kdlab_dataset_blobs",
        "kdlab_model_predict",
        "kdlab_run_experiment",
        "kdlab_last_error_message",
        "KDLAB_STATUS_PANIC",
    ] {
        assert!(text.contains(name), "header lacks {name}");
    }
    let Ok(out) = std::process::Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-x", "c"])
        .arg(&header)
        .output()
    else {
        eprintln!("no C compiler; skipped syntax check");
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
