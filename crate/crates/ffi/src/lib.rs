//! C ABI over the splitguard core: model handles, cost accounting, strategy
//! application, the reward and SSIM.
//!
//! Every function returns an [`SpStatus`]; on failure the message is
//! available from [`sp_last_error`] on the same thread. Panics are caught
//! and reported as [`SpStatus::Internal`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use splitguard::compress::{apply_strategy, canonicalize, Knobs};
use splitguard::metrics::ssim::ssim;
use splitguard::metrics::{reward, SsimParams};
use splitguard::model::{build_zoo, load_checkpoint, save_checkpoint, ModelGraph, Strategy};
use splitguard::tensor::{DType, Tensor};
use splitguard::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Config = 3,
    Data = 4,
    Structure = 5,
    Parse = 6,
    Format = 7,
    Degenerate = 8,
    Numeric = 9,
    Dimension = 10,
    Usage = 11,
    Io = 12,
    Internal = 13,
}

/// Opaque model handle.
pub struct SpModel {
    graph: ModelGraph,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SpReward {
    pub r_a: f64,
    pub r_p: f64,
    pub r_s: f64,
    pub r: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> SpStatus {
    match e {
        Error::Config(_) => SpStatus::Config,
        Error::Data(_) => SpStatus::Data,
        Error::Structure(_) => SpStatus::Structure,
        Error::Parse(_) => SpStatus::Parse,
        Error::Format(_) | Error::Json(_) | Error::Csv(_) => SpStatus::Format,
        Error::Degenerate(_) => SpStatus::Degenerate,
        Error::Numeric(_) => SpStatus::Numeric,
        Error::Dimension(_) => SpStatus::Dimension,
        Error::Usage(_) => SpStatus::Usage,
        Error::Io(_) => SpStatus::Io,
    }
}

enum Fail {
    Status(SpStatus, String),
    Core(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Core(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> SpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            SpStatus::Ok
        }
        Ok(Err(Fail::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Ok(Err(Fail::Status(s, msg))) => {
            set_error(msg);
            s
        }
        Err(_) => {
            set_error("internal panic".into());
            SpStatus::Internal
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::Status(SpStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Fail::Status(SpStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn model_arg<'a>(m: *const SpModel) -> Result<&'a SpModel, Fail> {
    m.as_ref().ok_or_else(|| Fail::Status(SpStatus::NullPointer, "model handle is null".into()))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| Fail::Status(SpStatus::NullPointer, format!("{what} is null")))
}

fn boxed(graph: ModelGraph) -> *mut SpModel {
    Box::into_raw(Box::new(SpModel { graph }))
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call on this thread.
#[no_mangle]
pub extern "C" fn sp_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Builds a zoo model (`use_f64` selects double precision).
///
/// # Safety
/// `name` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sp_model_build_zoo(name: *const c_char, seed: u64, use_f64: bool, out: *mut *mut SpModel) -> SpStatus {
    guard(|| {
        let name = str_arg(name, "name")?;
        let out = out_arg(out, "out")?;
        let dtype = if use_f64 { DType::F64 } else { DType::F32 };
        *out = boxed(build_zoo(name, dtype, seed)?);
        Ok(())
    })
}

/// # Safety
/// `dir` must be a NUL-terminated path; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sp_model_load(dir: *const c_char, out: *mut *mut SpModel) -> SpStatus {
    guard(|| {
        let dir = str_arg(dir, "dir")?;
        let out = out_arg(out, "out")?;
        *out = boxed(load_checkpoint(Path::new(dir))?);
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library; `dir` must be a NUL-terminated path.
#[no_mangle]
pub unsafe extern "C" fn sp_model_save(model: *const SpModel, dir: *const c_char) -> SpStatus {
    guard(|| {
        let m = model_arg(model)?;
        let dir = str_arg(dir, "dir")?;
        save_checkpoint(&m.graph, Path::new(dir))?;
        Ok(())
    })
}

/// Releases a handle; null is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sp_model_free(model: *mut SpModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn sp_model_num_layers(model: *const SpModel, out: *mut usize) -> SpStatus {
    guard(|| {
        *out_arg(out, "out")? = model_arg(model)?.graph.len();
        Ok(())
    })
}

fn check_span(g: &ModelGraph, start: usize, end: usize) -> Result<(), Fail> {
    if start > end || end > g.len() {
        return Err(Fail::Status(SpStatus::Dimension, format!("span {start}..{end} outside 0..{}", g.len())));
    }
    Ok(())
}

/// Parameters stored in layers `[start, end)`.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn sp_model_count_params(model: *const SpModel, start: usize, end: usize, out: *mut u64) -> SpStatus {
    guard(|| {
        let g = &model_arg(model)?.graph;
        check_span(g, start, end)?;
        *out_arg(out, "out")? = g.count_params(start..end) as u64;
        Ok(())
    })
}

/// Multiply-accumulates of layers `[start, end)` for one sample.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn sp_model_count_macs(model: *const SpModel, start: usize, end: usize, out: *mut u64) -> SpStatus {
    guard(|| {
        let g = &model_arg(model)?.graph;
        check_span(g, start, end)?;
        *out_arg(out, "out")? = g.count_macs(start..end)?;
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library.
#[no_mangle]
pub unsafe extern "C" fn sp_model_set_partition(model: *mut SpModel, partition: usize) -> SpStatus {
    guard(|| {
        let m = model.as_mut().ok_or_else(|| Fail::Status(SpStatus::NullPointer, "model handle is null".into()))?;
        if !m.graph.is_valid_partition(partition) {
            return Err(Fail::Status(SpStatus::Structure, format!("partition {partition} is not valid")));
        }
        m.graph.partition = partition;
        Ok(())
    })
}

/// Fractions of parameters (`s1`) and MACs (`s2`) outside the encoder.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn sp_model_perf_indicators(model: *const SpModel, s1: *mut f64, s2: *mut f64) -> SpStatus {
    guard(|| {
        let (a, b) = model_arg(model)?.graph.perf_indicators()?;
        *out_arg(s1, "s1")? = a;
        *out_arg(s2, "s2")? = b;
        Ok(())
    })
}

/// Applies a strategy string with default knobs, producing a new handle.
///
/// # Safety
/// Pointers must be valid; `strategy` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn sp_model_apply_strategy(
    model: *const SpModel,
    strategy: *const c_char,
    seed: u64,
    out: *mut *mut SpModel,
) -> SpStatus {
    guard(|| {
        let g = &model_arg(model)?.graph;
        let s = Strategy::parse_for(str_arg(strategy, "strategy")?, g)?;
        let out = out_arg(out, "out")?;
        let (next, _) = apply_strategy(g, &s, &Knobs::default(), seed)?;
        *out = boxed(next);
        Ok(())
    })
}

/// Canonical form of a strategy for this model; free with [`sp_string_free`].
///
/// # Safety
/// Pointers must be valid; `strategy` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn sp_strategy_canonicalize(model: *const SpModel, strategy: *const c_char, out: *mut *mut c_char) -> SpStatus {
    guard(|| {
        let g = &model_arg(model)?.graph;
        let s = Strategy::parse_for(str_arg(strategy, "strategy")?, g)?;
        let text = canonicalize(g, &s).to_string();
        *out_arg(out, "out")? = CString::new(text).expect("strategy strings have no NUL").into_raw();
        Ok(())
    })
}

/// # Safety
/// `s` must come from this library; null is ignored.
#[no_mangle]
pub unsafe extern "C" fn sp_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Reward and its three factors.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sp_reward(a: f64, a_base: f64, p: f64, s: f64, out: *mut SpReward) -> SpStatus {
    guard(|| {
        let b = reward(a, a_base, p, s)?;
        *out_arg(out, "out")? = SpReward { r_a: b.r_a, r_p: b.r_p, r_s: b.r_s, r: b.r };
        Ok(())
    })
}

/// Mean SSIM of two `[n, c, h, w]` batches with the default window and
/// dynamic range 1.
///
/// # Safety
/// `x` and `y` must each point to `n*c*h*w` doubles.
#[no_mangle]
pub unsafe extern "C" fn sp_ssim(
    x: *const f64,
    y: *const f64,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    out: *mut f64,
) -> SpStatus {
    guard(|| {
        if x.is_null() || y.is_null() {
            return Err(Fail::Status(SpStatus::NullPointer, "image pointer is null".into()));
        }
        let len = n * c * h * w;
        let dims = [n, c, h, w];
        let xt = Tensor::new_f64(&dims, std::slice::from_raw_parts(x, len).to_vec())?;
        let yt = Tensor::new_f64(&dims, std::slice::from_raw_parts(y, len).to_vec())?;
        *out_arg(out, "out")? = ssim(&xt, &yt, &SsimParams::default())?;
        Ok(())
    })
}
