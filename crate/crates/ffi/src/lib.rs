//! C ABI over `kdlab`.
//!
//! Every fallible function returns a [`KdlabStatus`]; on failure the message
//! is available from [`kdlab_last_error_message`] on the same thread.
//! Datasets and models are opaque handles released with their `_free`
//! function. Strings returned by the library are released with
//! [`kdlab_string_free`].

use kdlab::cli::{self, Experiment};
use kdlab::criteria::{self, KdVariant, WeightSource};
use kdlab::data::{self, Dataset};
use kdlab::incremental::IlMethod;
use kdlab::nets::MultiHeadNet;
use kdlab::{Error, Result};
use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KdlabStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Domain = 4,
    Io = 5,
    Format = 6,
    Config = 7,
    VerificationFailed = 8,
    Degenerate = 9,
    Panic = 10,
}

/// Opaque dataset handle.
pub struct KdlabDataset {
    inner: Dataset,
}

/// Opaque multi-head network handle.
pub struct KdlabModel {
    inner: MultiHeadNet,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> KdlabStatus {
    match e {
        Error::Shape { .. } | Error::NonScalarLoss(_) => KdlabStatus::Shape,
        Error::LabelOutOfRange { .. } | Error::InvalidArgument(_) => KdlabStatus::InvalidArgument,
        Error::Domain(_) => KdlabStatus::Domain,
        Error::DegenerateRpr { .. } => KdlabStatus::Degenerate,
        Error::IdxMagic { .. } | Error::IdxTruncated { .. } | Error::IdxCountMismatch { .. } => KdlabStatus::Format,
        Error::Checkpoint(_) | Error::Json(_) => KdlabStatus::Format,
        Error::Config { .. } => KdlabStatus::Config,
        Error::VerificationFailed(_) => KdlabStatus::VerificationFailed,
        Error::Io(_) => KdlabStatus::Io,
    }
}

struct Null(&'static str);

enum Failure {
    Lib(Error),
    Null(&'static str),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl From<Null> for Failure {
    fn from(n: Null) -> Self {
        Failure::Null(n.0)
    }
}

fn guard<F>(f: F) -> KdlabStatus
where
    F: FnOnce() -> std::result::Result<(), Failure>,
{
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => KdlabStatus::Ok,
        Ok(Err(Failure::Lib(e))) => {
            let s = status_of(&e);
            set_error(e.to_string());
            s
        }
        Ok(Err(Failure::Null(name))) => {
            set_error(format!("`{name}` must not be null"));
            KdlabStatus::NullPointer
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            KdlabStatus::Panic
        }
    }
}

fn nonnull<T>(p: *const T, name: &'static str) -> std::result::Result<(), Null> {
    if p.is_null() {
        Err(Null(name))
    } else {
        Ok(())
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &'static str) -> std::result::Result<&'a str, Failure> {
    nonnull(p, name)?;
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::Lib(Error::InvalidArgument(format!("`{name}` is not valid UTF-8"))))
}

fn into_c_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " ")).expect("nul bytes removed").into_raw()
}

/// Message of the last failed call on this thread, or null. Release with
/// `kdlab_string_free`.
#[no_mangle]
pub extern "C" fn kdlab_last_error_message() -> *mut c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null_mut(), |c| c.clone().into_raw()))
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn kdlab_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Runs the theory checks. `out_json` receives the reports as a JSON array,
/// `out_passed` whether all of them passed.
///
/// # Safety
/// Output pointers must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn kdlab_verify(seed: u64, out_json: *mut *mut c_char, out_passed: *mut bool) -> KdlabStatus {
    guard(|| {
        nonnull(out_json, "out_json")?;
        nonnull(out_passed, "out_passed")?;
        let (reports, ok) = cli::verify(seed)?;
        let json = serde_json::to_string(&reports).map_err(Error::from)?;
        *out_json = into_c_string(json);
        *out_passed = ok;
        Ok(())
    })
}

/// Gaussian-blob dataset with `classes × n_per_class` items.
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn kdlab_dataset_blobs(
    classes: usize,
    dim: usize,
    n_per_class: usize,
    separation: f64,
    seed: u64,
    out: *mut *mut KdlabDataset,
) -> KdlabStatus {
    guard(|| {
        nonnull(out, "out")?;
        let inner = data::make_blobs(classes, dim, n_per_class, separation, seed)?;
        *out = Box::into_raw(Box::new(KdlabDataset { inner }));
        Ok(())
    })
}

/// Loads an uncompressed IDX image/label pair with pixels scaled to [0, 1].
///
/// # Safety
/// Paths must be nul-terminated; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn kdlab_dataset_load_idx(
    images: *const c_char,
    labels: *const c_char,
    out: *mut *mut KdlabDataset,
) -> KdlabStatus {
    guard(|| {
        nonnull(out, "out")?;
        let images = str_arg(images, "images")?;
        let labels = str_arg(labels, "labels")?;
        let inner = data::load_idx(Path::new(images), Path::new(labels))?;
        *out = Box::into_raw(Box::new(KdlabDataset { inner }));
        Ok(())
    })
}

/// Number of items; 0 for null.
///
/// # Safety
/// `ds` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn kdlab_dataset_len(ds: *const KdlabDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.inner.len())
}

/// Feature dimension; 0 for null.
///
/// # Safety
/// `ds` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn kdlab_dataset_dim(ds: *const KdlabDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.inner.dim())
}

/// Class count; 0 for null.
///
/// # Safety
/// `ds` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn kdlab_dataset_classes(ds: *const KdlabDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.inner.classes)
}

/// Copies the row-major features (`len × dim`) and labels (`len`).
/// Either output may be null to skip it.
///
/// # Safety
/// Non-null outputs must hold the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn kdlab_dataset_copy(
    ds: *const KdlabDataset,
    out_features: *mut f64,
    out_labels: *mut usize,
) -> KdlabStatus {
    guard(|| {
        let ds = &ds.as_ref().ok_or(Null("ds"))?.inner;
        if !out_features.is_null() {
            let src = ds.features.data();
            std::ptr::copy_nonoverlapping(src.as_ptr(), out_features, src.len());
        }
        if !out_labels.is_null() {
            std::ptr::copy_nonoverlapping(ds.labels.as_ptr(), out_labels, ds.labels.len());
        }
        Ok(())
    })
}

/// # Safety
/// `ds` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn kdlab_dataset_free(ds: *mut KdlabDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Loads a model checkpoint.
///
/// # Safety
/// `path` must be nul-terminated; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn kdlab_model_load(path: *const c_char, out: *mut *mut KdlabModel) -> KdlabStatus {
    guard(|| {
        nonnull(out, "out")?;
        let path = str_arg(path, "path")?;
        let inner = MultiHeadNet::load(Path::new(path))?;
        *out = Box::into_raw(Box::new(KdlabModel { inner }));
        Ok(())
    })
}

/// Writes a model checkpoint atomically.
///
/// # Safety
/// `model` must be a live handle and `path` nul-terminated.
#[no_mangle]
pub unsafe extern "C" fn kdlab_model_save(model: *const KdlabModel, path: *const c_char) -> KdlabStatus {
    guard(|| {
        let model = model.as_ref().ok_or(Null("model"))?;
        let path = str_arg(path, "path")?;
        model.inner.save(Path::new(path))?;
        Ok(())
    })
}

/// Input dimension; 0 for null.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn kdlab_model_input_dim(model: *const KdlabModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.input_dim())
}

/// Number of output heads; 0 for null.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn kdlab_model_num_heads(model: *const KdlabModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.num_heads())
}

/// Argmax class of `head` for each of `rows` row-major inputs of width
/// `cols`.
///
/// # Safety
/// `x` must hold `rows × cols` values and `out_labels` `rows` slots.
#[no_mangle]
pub unsafe extern "C" fn kdlab_model_predict(
    model: *const KdlabModel,
    x: *const f64,
    rows: usize,
    cols: usize,
    head: usize,
    out_labels: *mut usize,
) -> KdlabStatus {
    guard(|| {
        let model = &model.as_ref().ok_or(Null("model"))?.inner;
        nonnull(x, "x")?;
        nonnull(out_labels, "out_labels")?;
        if head >= model.num_heads() {
            return Err(Error::InvalidArgument(format!("head {head} of {}", model.num_heads())).into());
        }
        let data = std::slice::from_raw_parts(x, rows * cols).to_vec();
        let x = kdlab::autodiff::Tensor::matrix(rows, cols, data)?;
        let pred = model.predict(&x, head)?;
        std::ptr::copy_nonoverlapping(pred.as_ptr(), out_labels, pred.len());
        Ok(())
    })
}

/// Accuracy of `head` on a dataset.
///
/// # Safety
/// Handles must be live; `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn kdlab_model_accuracy(
    model: *const KdlabModel,
    ds: *const KdlabDataset,
    head: usize,
    out: *mut f64,
) -> KdlabStatus {
    guard(|| {
        let model = &model.as_ref().ok_or(Null("model"))?.inner;
        let ds = &ds.as_ref().ok_or(Null("ds"))?.inner;
        nonnull(out, "out")?;
        if head >= model.num_heads() {
            return Err(Error::InvalidArgument(format!("head {head} of {}", model.num_heads())).into());
        }
        *out = model.accuracy(&ds.features, &ds.labels, head)?;
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn kdlab_model_free(model: *mut KdlabModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Batch-mean `KL(p_t ‖ p_s)` over `rows` probability rows of width `k`.
///
/// # Safety
/// Inputs must hold `rows × k` values; `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn kdlab_kl_divergence(
    p_t: *const f64,
    p_s: *const f64,
    rows: usize,
    k: usize,
    out: *mut f64,
) -> KdlabStatus {
    guard(|| {
        nonnull(p_t, "p_t")?;
        nonnull(p_s, "p_s")?;
        nonnull(out, "out")?;
        let n = rows * k;
        *out = criteria::kl_divergence(std::slice::from_raw_parts(p_t, n), std::slice::from_raw_parts(p_s, n), k)?;
        Ok(())
    })
}

/// Recovered performance ratio `(acc_kd − base)/(acc_teacher − base)`.
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn kdlab_rpr(acc_kd: f64, base: f64, acc_teacher: f64, out: *mut f64) -> KdlabStatus {
    guard(|| {
        nonnull(out, "out")?;
        *out = kdlab::compression::rpr(acc_kd, base, acc_teacher)?;
        Ok(())
    })
}

/// Standardizes a weight diagonal in place (mean 1, unit spread) and
/// clamps negatives to zero. `out_clamp_fraction` may be null.
///
/// # Safety
/// `w` must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn kdlab_normalize_weight_diag(w: *mut f64, len: usize, out_clamp_fraction: *mut f64) -> KdlabStatus {
    guard(|| {
        nonnull(w, "w")?;
        let slice = std::slice::from_raw_parts_mut(w, len);
        let diag = criteria::WeightDiag {
            w: slice.to_vec(),
            source: WeightSource::Empirical,
            normalized: false,
            clamp_fraction: 0.0,
        };
        let norm = criteria::normalize_weight_diag(&diag);
        slice.copy_from_slice(&norm.w);
        if !out_clamp_fraction.is_null() {
            *out_clamp_fraction = norm.clamp_fraction;
        }
        Ok(())
    })
}

fn run_command(command: &str, config: Option<&str>, arg: Option<&str>) -> Result<String> {
    let exp = || -> Result<Experiment> {
        Experiment::load(Path::new(config.ok_or_else(|| Error::InvalidArgument("config path required".into()))?))
    };
    let arg = || arg.ok_or_else(|| Error::InvalidArgument(format!("`{command}` needs an argument")));
    let json = match command {
        "train-teacher" => {
            let e = exp()?;
            let splits = e.splits()?;
            serde_json::to_string(&cli::train_teacher(&e, &splits)?.1)?
        }
        "distill" => {
            let v: KdVariant = arg()?.parse()?;
            serde_json::to_string(&cli::distill(&exp()?, v, &cli::worker_pool()?)?)?
        }
        "sweep-width" => serde_json::to_string(&cli::sweep_width(&exp()?, &cli::worker_pool()?)?)?,
        "incremental" => {
            let m: IlMethod = arg()?.parse()?;
            serde_json::to_string(&cli::incremental(&exp()?, m, &cli::worker_pool()?)?)?
        }
        "report" => serde_json::to_string(&cli::report(Path::new(arg()?))?)?,
        other => return Err(Error::InvalidArgument(format!("unknown command `{other}`"))),
    };
    Ok(json)
}

/// Runs an experiment subcommand: `train-teacher`, `distill` (arg = variant),
/// `sweep-width`, `incremental` (arg = method) with a config path, or
/// `report` (arg = results directory, config may be null). The summary is
/// returned as JSON in `out_json`.
///
/// # Safety
/// String arguments must be null or nul-terminated; `out_json` valid for
/// writes.
#[no_mangle]
pub unsafe extern "C" fn kdlab_run_experiment(
    command: *const c_char,
    config_path: *const c_char,
    arg: *const c_char,
    out_json: *mut *mut c_char,
) -> KdlabStatus {
    guard(|| {
        nonnull(out_json, "out_json")?;
        let command = str_arg(command, "command")?;
        let config = if config_path.is_null() { None } else { Some(str_arg(config_path, "config_path")?) };
        let arg = if arg.is_null() { None } else { Some(str_arg(arg, "arg")?) };
        *out_json = into_c_string(run_command(command, config, arg)?);
        Ok(())
    })
}
