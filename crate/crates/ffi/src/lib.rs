//! C ABI over `lesionlab`.
//!
//! Objects are opaque handles created by `*_load`/`*_make`/`*_run` calls and
//! released with the matching `*_free`. Every fallible call returns a
//! `LesionlabStatus`; on failure `lesionlab_last_error()` describes the error
//! for the calling thread. Strings returned through `char **` out-parameters
//! are owned by the caller and released with `lesionlab_string_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use lesionlab::config::RunConfig;
use lesionlab::dataset::{load_manifest, DatasetManifest, LabelCounts, LesionLabel};
use lesionlab::error::{Error, ErrorCategory};
use lesionlab::evaluator::{metrics_from_confusion, render_report, ConfusionMatrix, MetricsReport, Rates};
use lesionlab::phantom::{generate_dataset, PhantomParams};
use lesionlab::runner::{cmd_run, plan_for};
use lesionlab::splits::SplitPlan;
use lesionlab::trainer::class_weights;

/// Result codes. Values 2..=7 match the command-line exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LesionlabStatus {
    Ok = 0,
    /// A required pointer was null or a string was not UTF-8.
    BadArgument = 1,
    Io = 2,
    Data = 3,
    InvalidInput = 4,
    Precondition = 5,
    Checkpoint = 6,
    Training = 7,
    /// An unexpected internal failure.
    Internal = 8,
}

impl From<ErrorCategory> for LesionlabStatus {
    fn from(c: ErrorCategory) -> Self {
        match c {
            ErrorCategory::Io => Self::Io,
            ErrorCategory::Data => Self::Data,
            ErrorCategory::InvalidInput => Self::InvalidInput,
            ErrorCategory::Precondition => Self::Precondition,
            ErrorCategory::Checkpoint => Self::Checkpoint,
            ErrorCategory::Training => Self::Training,
        }
    }
}

/// Percentages, as in the results table.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LesionlabRates {
    pub accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub f1_invasive: f64,
    pub f1_macro: f64,
}

impl From<Rates> for LesionlabRates {
    fn from(r: Rates) -> Self {
        Self {
            accuracy: r.accuracy,
            sensitivity: r.sensitivity,
            specificity: r.specificity,
            f1_invasive: r.f1_invasive,
            f1_macro: r.f1_macro,
        }
    }
}

/// Loaded dataset manifest.
pub struct LesionlabManifest(DatasetManifest);

/// Cross-validation split plan.
pub struct LesionlabSplitPlan(SplitPlan);

/// Parsed run configuration.
pub struct LesionlabRunConfig(RunConfig);

/// Aggregated results of a run.
pub struct LesionlabReport(MetricsReport);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(LesionlabStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(e.category().into(), e.to_string())
    }
}

fn bad(msg: &str) -> Failure {
    Failure(LesionlabStatus::BadArgument, msg.to_string())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> LesionlabStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => LesionlabStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            LesionlabStatus::Internal
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(bad(&format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| bad(&format!("{name} is not valid UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| bad(&format!("{name} is null")))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(bad("output pointer is null"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn put_string(out: *mut *mut c_char, s: String) -> Result<(), Failure> {
    if out.is_null() {
        return Err(bad("output pointer is null"));
    }
    *out = CString::new(s).map_err(|_| bad("string contains nul"))?.into_raw();
    Ok(())
}

unsafe fn free<T>(p: *mut T) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Message for the last failed call on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn lesionlab_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn lesionlab_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `s` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn lesionlab_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Normalized inverse-frequency weights `[benign, invasive]`.
///
/// # Safety
/// `out` must point to two writable doubles.
#[no_mangle]
pub unsafe extern "C" fn lesionlab_class_weights(benign: usize, invasive: usize, out: *mut f64) -> LesionlabStatus {
    guard(|| {
        if out.is_null() {
            return Err(bad("out is null"));
        }
        let w = class_weights(LabelCounts::new(benign, invasive))?;
        *out = w[0];
        *out.add(1) = w[1];
        Ok(())
    })
}

/// Lesion-level rates from confusion counts (invasive is positive).
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lesionlab_metrics_from_confusion(
    tp: u64,
    fp: u64,
    tn: u64,
    fn_: u64,
    out: *mut LesionlabRates,
) -> LesionlabStatus {
    guard(|| {
        if out.is_null() {
            return Err(bad("out is null"));
        }
        let m = metrics_from_confusion(&ConfusionMatrix { tp, fp, tn, fn_ })?;
        *out = m.rates.into();
        Ok(())
    })
}

/// Generates a phantom dataset under `out_dir`. `params_toml` may be null for
/// the default parameters.
///
/// # Safety
/// String arguments must be nul-terminated; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn lesionlab_phantom_generate(
    params_toml: *const c_char,
    n_benign: usize,
    n_invasive: usize,
    out_dir: *const c_char,
    out: *mut *mut LesionlabManifest,
) -> LesionlabStatus {
    guard(|| {
        let params: PhantomParams = if params_toml.is_null() {
            PhantomParams::default()
        } else {
            let text = str_arg(params_toml, "params_toml")?;
            PhantomParams::from_toml_str(text)?
        };
        let dir = PathBuf::from(str_arg(out_dir, "out_dir")?);
        let m = generate_dataset(&params, n_benign, n_invasive, &dir)?;
        put(out, LesionlabManifest(m))
    })
}

/// # Safety
/// `path` must be nul-terminated; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn lesionlab_manifest_load(path: *const c_char, out: *mut *mut LesionlabManifest) -> LesionlabStatus {
    guard(|| {
        let m = load_manifest(&PathBuf::from(str_arg(path, "path")?))?;
        put(out, LesionlabManifest(m))
    })
}

/// Lesion counts per label.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn lesionlab_manifest_counts(
    m: *const LesionlabManifest,
    benign: *mut usize,
    invasive: *mut usize,
) -> LesionlabStatus {
    guard(|| {
        let m = ref_arg(m, "manifest")?;
        if benign.is_null() || invasive.is_null() {
            return Err(bad("output pointer is null"));
        }
        let c = m.0.counts();
        *benign = c.benign;
        *invasive = c.invasive;
        Ok(())
    })
}

/// # Safety
/// `m` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn lesionlab_manifest_free(m: *mut LesionlabManifest) {
    free(m)
}

/// Leave-one-invasive-lesion-out plan; `folds` of 0 means the default count.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn lesionlab_split_make(
    m: *const LesionlabManifest,
    n_val_common: usize,
    seed: u64,
    folds: usize,
    out: *mut *mut LesionlabSplitPlan,
) -> LesionlabStatus {
    guard(|| {
        let m = ref_arg(m, "manifest")?;
        let mut cfg = RunConfig::default();
        cfg.split.rare_label = LesionLabel::Invasive;
        cfg.split.n_val_common = n_val_common;
        cfg.split.seed = seed;
        cfg.split.folds = (folds > 0).then_some(folds);
        let plan = plan_for(&cfg, &m.0)?;
        put(out, LesionlabSplitPlan(plan))
    })
}

/// # Safety
/// `p` must be a valid plan handle.
#[no_mangle]
pub unsafe extern "C" fn lesionlab_split_fold_count(p: *const LesionlabSplitPlan) -> usize {
    p.as_ref().map_or(0, |p| p.0.folds.len())
}

/// The plan as JSON.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn lesionlab_split_to_json(p: *const LesionlabSplitPlan, out: *mut *mut c_char) -> LesionlabStatus {
    guard(|| {
        let p = ref_arg(p, "plan")?;
        put_string(out, p.0.to_json())
    })
}

/// # Safety
/// `p` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn lesionlab_split_free(p: *mut LesionlabSplitPlan) {
    free(p)
}

/// Parses a run configuration file. Relative paths inside it resolve against
/// its directory.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn lesionlab_config_load(path: *const c_char, out: *mut *mut LesionlabRunConfig) -> LesionlabStatus {
    guard(|| {
        let c = RunConfig::load(&PathBuf::from(str_arg(path, "path")?))?;
        put(out, LesionlabRunConfig(c))
    })
}

/// Parses configuration text; relative paths stay relative to the process
/// working directory.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn lesionlab_config_parse(text: *const c_char, out: *mut *mut LesionlabRunConfig) -> LesionlabStatus {
    guard(|| {
        let c = RunConfig::from_toml_str(str_arg(text, "text")?)?;
        put(out, LesionlabRunConfig(c))
    })
}

/// Hex digest identifying the configuration (output directory excluded).
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn lesionlab_config_digest(c: *const LesionlabRunConfig, out: *mut *mut c_char) -> LesionlabStatus {
    guard(|| put_string(out, ref_arg(c, "config")?.0.digest()))
}

/// # Safety
/// `c` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn lesionlab_config_free(c: *mut LesionlabRunConfig) {
    free(c)
}

/// Trains and evaluates every fold (resuming completed ones).
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn lesionlab_run(c: *const LesionlabRunConfig, out: *mut *mut LesionlabReport) -> LesionlabStatus {
    guard(|| {
        let outcome = cmd_run(&ref_arg(c, "config")?.0)?;
        put(out, LesionlabReport(outcome.report))
    })
}

/// Fold-mean rates.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn lesionlab_report_mean(r: *const LesionlabReport, out: *mut LesionlabRates) -> LesionlabStatus {
    guard(|| {
        let r = ref_arg(r, "report")?;
        if out.is_null() {
            return Err(bad("out is null"));
        }
        *out = r.0.mean.into();
        Ok(())
    })
}

/// # Safety
/// `r` must be a valid report handle.
#[no_mangle]
pub unsafe extern "C" fn lesionlab_report_fold_count(r: *const LesionlabReport) -> usize {
    r.as_ref().map_or(0, |r| r.0.per_fold.len())
}

/// Rendered table (header plus one row).
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn lesionlab_report_table(r: *const LesionlabReport, out: *mut *mut c_char) -> LesionlabStatus {
    guard(|| {
        let r = ref_arg(r, "report")?;
        put_string(out, render_report(std::slice::from_ref(&r.0), &[]))
    })
}

/// # Safety
/// `r` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn lesionlab_report_free(r: *mut LesionlabReport) {
    free(r)
}
