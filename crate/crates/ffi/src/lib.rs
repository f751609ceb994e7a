//! C interface. Datasets and models are opaque handles created and freed
//! here; every fallible call returns an `MwStatus` and leaves a message for
//! `mw_last_error` on the calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use meta_wrapper::config::RunConfig;
use meta_wrapper::data::{generate_synthetic, read_instances, Instance, SplitDataset, SyntheticConfig};
use meta_wrapper::eval::{auc, impr};
use meta_wrapper::metawrapper::{train, TrainConfig, Trainer};
use meta_wrapper::model::{load_checkpoint, save_checkpoint, Checkpoint, ParamSet};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MwStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Io = 4,
    Numerical = 5,
    Panic = 6,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MwSplit {
    Train = 0,
    Valid = 1,
    Test = 2,
}

/// A split dataset.
pub struct MwDataset {
    data: SplitDataset,
}

/// Trained parameters together with the configuration that produced them.
pub struct MwModel {
    params: ParamSet,
    cfg: TrainConfig,
    seed: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

struct Fail(MwStatus, String);

fn fail(status: MwStatus, msg: impl std::fmt::Display) -> Fail {
    Fail(status, msg.to_string())
}

/// Run `f`, mapping errors and panics to status codes.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> MwStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            MwStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            MwStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<Option<&'a str>, Fail> {
    if p.is_null() {
        return Ok(None);
    }
    CStr::from_ptr(p).to_str().map(Some).map_err(|_| fail(MwStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| fail(MwStatus::NullPointer, format!("{what} is null")))
}

fn split_of(data: &SplitDataset, split: MwSplit) -> &[Instance] {
    match split {
        MwSplit::Train => &data.train,
        MwSplit::Valid => &data.valid,
        MwSplit::Test => &data.test,
    }
}

fn run_config(toml: Option<&str>) -> Result<RunConfig, Fail> {
    RunConfig::from_toml(toml.unwrap_or("")).map_err(|e| fail(MwStatus::Config, e))
}

/// Message for the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn mw_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn mw_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Generate the synthetic benchmark. `config_toml` holds the fields of the
/// synthetic generator (NULL or "" for defaults).
///
/// # Safety
/// `config_toml` is NULL or a NUL-terminated string; `out` is a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mw_dataset_synthetic(config_toml: *const c_char, seed: u64, out: *mut *mut MwDataset) -> MwStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(MwStatus::NullPointer, "out is null"));
        }
        *out = ptr::null_mut();
        let text = str_arg(config_toml, "config_toml")?.unwrap_or("");
        let cfg: SyntheticConfig = toml::from_str(text).map_err(|e| fail(MwStatus::Config, e))?;
        let data = generate_synthetic(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).map_err(|e| fail(MwStatus::Config, e))?;
        *out = Box::into_raw(Box::new(MwDataset { data }));
        Ok(())
    })
}

/// Read an instance file as written by the `synth` and `prepare` commands.
///
/// # Safety
/// `path` is a NUL-terminated string; `out` is a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mw_dataset_load(path: *const c_char, out: *mut *mut MwDataset) -> MwStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(MwStatus::NullPointer, "out is null"));
        }
        *out = ptr::null_mut();
        let path = str_arg(path, "path")?.ok_or_else(|| fail(MwStatus::NullPointer, "path is null"))?;
        let file = std::fs::File::open(path).map_err(|e| fail(MwStatus::Io, format!("{path}: {e}")))?;
        let data = read_instances(std::io::BufReader::new(file)).map_err(|e| fail(MwStatus::Io, e))?;
        *out = Box::into_raw(Box::new(MwDataset { data }));
        Ok(())
    })
}

/// Number of instances in a split.
///
/// # Safety
/// `dataset` and `out` are valid pointers.
#[no_mangle]
pub unsafe extern "C" fn mw_dataset_len(dataset: *const MwDataset, split: MwSplit, out: *mut usize) -> MwStatus {
    guard(|| {
        let d = ref_arg(dataset, "dataset")?;
        let out = out.as_mut().ok_or_else(|| fail(MwStatus::NullPointer, "out is null"))?;
        *out = split_of(&d.data, split).len();
        Ok(())
    })
}

/// # Safety
/// `dataset` is NULL or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mw_dataset_free(dataset: *mut MwDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Train on `dataset` with the `model` and `train` sections of a run config
/// (NULL or "" for defaults).
///
/// # Safety
/// `dataset` is a live handle, `config_toml` is NULL or NUL-terminated and
/// `out` is a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mw_train(dataset: *const MwDataset, config_toml: *const c_char, out: *mut *mut MwModel) -> MwStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(MwStatus::NullPointer, "out is null"));
        }
        *out = ptr::null_mut();
        let d = ref_arg(dataset, "dataset")?;
        let cfg = run_config(str_arg(config_toml, "config_toml")?)?;
        let tc = cfg.train_config();
        let result = train(&d.data, cfg.dims(&d.data), &tc, |_| {}).map_err(|e| {
            let status = if e.is_numerical() { MwStatus::Numerical } else { MwStatus::Config };
            fail(status, e)
        })?;
        *out = Box::into_raw(Box::new(MwModel { params: result.params, seed: tc.seed, cfg: tc }));
        Ok(())
    })
}

/// Click probabilities for every instance of a split; `len` must equal the
/// split size.
///
/// # Safety
/// `model` and `dataset` are live handles and `out` points to `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn mw_predict(
    model: *const MwModel,
    dataset: *const MwDataset,
    split: MwSplit,
    out: *mut f64,
    len: usize,
) -> MwStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        let d = ref_arg(dataset, "dataset")?;
        if out.is_null() {
            return Err(fail(MwStatus::NullPointer, "out is null"));
        }
        let set = split_of(&d.data, split);
        if set.len() != len {
            return Err(fail(MwStatus::InvalidArgument, format!("split has {} instances, buffer holds {len}", set.len())));
        }
        let t = Trainer::from_params(m.params.clone(), m.cfg.clone()).map_err(|e| fail(MwStatus::Config, e))?;
        let p = t.predict(set).map_err(|e| fail(MwStatus::InvalidArgument, e))?;
        std::slice::from_raw_parts_mut(out, len).copy_from_slice(&p);
        Ok(())
    })
}

/// Mean cross-entropy and AUC of a split. `auc_out` receives NaN when the
/// split holds a single class.
///
/// # Safety
/// `model` and `dataset` are live handles; the outputs are valid pointers.
#[no_mangle]
pub unsafe extern "C" fn mw_evaluate(
    model: *const MwModel,
    dataset: *const MwDataset,
    split: MwSplit,
    loss_out: *mut f64,
    auc_out: *mut f64,
) -> MwStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        let d = ref_arg(dataset, "dataset")?;
        if loss_out.is_null() || auc_out.is_null() {
            return Err(fail(MwStatus::NullPointer, "output is null"));
        }
        let t = Trainer::from_params(m.params.clone(), m.cfg.clone()).map_err(|e| fail(MwStatus::Config, e))?;
        let (loss, a) = t.evaluate(split_of(&d.data, split)).map_err(|e| fail(MwStatus::InvalidArgument, e))?;
        *loss_out = loss;
        *auc_out = a.unwrap_or(f64::NAN);
        Ok(())
    })
}

/// # Safety
/// `model` is a live handle and `path` is NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn mw_model_save(model: *const MwModel, path: *const c_char) -> MwStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        let path = str_arg(path, "path")?.ok_or_else(|| fail(MwStatus::NullPointer, "path is null"))?;
        save_checkpoint(path, &Checkpoint { seed: m.seed, params: m.params.clone() }).map_err(|e| fail(MwStatus::Io, e))
    })
}

/// Load a checkpoint. The run config (NULL or "" for defaults) supplies the
/// method and pooling used for prediction.
///
/// # Safety
/// `path` is NUL-terminated, `config_toml` is NULL or NUL-terminated and
/// `out` is a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mw_model_load(path: *const c_char, config_toml: *const c_char, out: *mut *mut MwModel) -> MwStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(MwStatus::NullPointer, "out is null"));
        }
        *out = ptr::null_mut();
        let path = str_arg(path, "path")?.ok_or_else(|| fail(MwStatus::NullPointer, "path is null"))?;
        let cfg = run_config(str_arg(config_toml, "config_toml")?)?;
        let ckpt = load_checkpoint(path).map_err(|e| fail(MwStatus::Io, e))?;
        *out = Box::into_raw(Box::new(MwModel { params: ckpt.params, seed: ckpt.seed, cfg: cfg.train_config() }));
        Ok(())
    })
}

/// # Safety
/// `model` is NULL or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mw_model_free(model: *mut MwModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Area under the ROC curve; labels are 0 or 1.
///
/// # Safety
/// `scores` and `labels` point to `n` elements; `out` is a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mw_auc(scores: *const f64, labels: *const u8, n: usize, out: *mut f64) -> MwStatus {
    guard(|| {
        if scores.is_null() || labels.is_null() || out.is_null() {
            return Err(fail(MwStatus::NullPointer, "argument is null"));
        }
        let s = std::slice::from_raw_parts(scores, n);
        let y = std::slice::from_raw_parts(labels, n);
        if let Some(bad) = y.iter().find(|&&v| v > 1) {
            return Err(fail(MwStatus::InvalidArgument, format!("label {bad} is not 0 or 1")));
        }
        *out = auc(s, y).map_err(|e| fail(MwStatus::InvalidArgument, e))?;
        Ok(())
    })
}

/// Relative AUC improvement over a base model, in percent.
///
/// # Safety
/// `out` is a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mw_impr(auc_model: f64, auc_base: f64, out: *mut f64) -> MwStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| fail(MwStatus::NullPointer, "out is null"))?;
        *out = impr(auc_model, auc_base).map_err(|e| fail(MwStatus::InvalidArgument, e))?;
        Ok(())
    })
}
