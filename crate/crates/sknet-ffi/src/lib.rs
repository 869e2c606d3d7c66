//! C interface to the network toolkit.
//!
//! Models are opaque handles created by `sknet_model_build` or
//! `sknet_model_load` and released with `sknet_model_free`. Every
//! fallible call returns an [`SknetStatus`]; on failure a description
//! is kept per thread and readable through `sknet_last_error` until
//! the next failing call on that thread. Strings returned as
//! `char*` are owned by the caller and must go back through
//! `sknet_string_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use sknet::arch::{self, ArchSpec, Network};
use sknet::cost;
use sknet::{Error, Tensor};

/// An initialized or loaded network behind an opaque pointer.
pub struct SknetModel {
    net: Network,
}

/// Outcome of a call. Anything but `Ok` leaves a message for
/// `sknet_last_error`.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SknetStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument,
    /// A string argument was not valid UTF-8.
    InvalidUtf8,
    /// Tensor or buffer sizes do not line up.
    Shape,
    /// Convolution or pooling geometry cannot be realized.
    Geometry,
    /// Architecture or request rejected at validation.
    Config,
    /// A file or spec failed to decode.
    Decode,
    /// A checkpoint was malformed.
    Checkpoint,
    /// A computation produced NaN or infinity.
    NonFinite,
    /// The underlying file operation failed.
    Io,
    /// A bug: the library panicked and the panic was contained.
    Internal,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let owned = CString::new(msg.replace('\0', " ")).expect("nul bytes replaced");
    LAST_ERROR.with(|slot| *slot.borrow_mut() = owned);
}

fn fail(e: &Error) -> SknetStatus {
    set_error(&e.to_string());
    match e {
        Error::Shape(_) => SknetStatus::Shape,
        Error::Geometry(_) => SknetStatus::Geometry,
        Error::Config(_) => SknetStatus::Config,
        Error::Decode(_) => SknetStatus::Decode,
        Error::Checkpoint(_) => SknetStatus::Checkpoint,
        Error::NonFinite(_) => SknetStatus::NonFinite,
        Error::Io(_) => SknetStatus::Io,
        Error::TapeReplayed => SknetStatus::Internal,
    }
}

/// Runs a closure with panics contained, so no unwind crosses the C
/// boundary.
fn guarded(f: impl FnOnce() -> SknetStatus) -> SknetStatus {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| {
        set_error("internal panic");
        SknetStatus::Internal
    })
}

/// Reads a C string argument; `what` names it in error messages.
///
/// # Safety
/// `p` must be null or point at a nul-terminated string.
unsafe fn read_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, SknetStatus> {
    if p.is_null() {
        set_error(&format!("{what} is null"));
        return Err(SknetStatus::NullArgument);
    }
    match CStr::from_ptr(p).to_str() {
        Ok(s) => Ok(s),
        Err(_) => {
            set_error(&format!("{what} is not valid UTF-8"));
            Err(SknetStatus::InvalidUtf8)
        }
    }
}

/// Hands a Rust string to the caller; release with `sknet_string_free`.
fn give_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " ")).expect("nul bytes replaced").into_raw()
}

/// Library version as a static nul-terminated string. Never fails.
#[no_mangle]
pub extern "C" fn sknet_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Description of the most recent failure on this thread, empty if
/// none. The pointer stays valid until the next failing call on the
/// same thread.
#[no_mangle]
pub extern "C" fn sknet_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Frees a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must be a pointer previously returned by a `sknet_*` call that
/// documents this deallocator, and must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sknet_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// TOML spec of a built-in architecture, or null for an unknown name.
/// Release the result with `sknet_string_free`.
///
/// # Safety
/// `name` must be null or a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn sknet_preset_toml(name: *const c_char) -> *mut c_char {
    let mut result = ptr::null_mut();
    guarded(|| {
        let name = match read_str(name, "preset name") {
            Ok(s) => s,
            Err(status) => return status,
        };
        match arch::preset(name).and_then(|spec| spec.to_toml_string()) {
            Ok(toml) => {
                result = give_string(toml);
                SknetStatus::Ok
            }
            Err(e) => fail(&e),
        }
    });
    result
}

/// Parameter and multiply-add report for a TOML architecture spec at a
/// square input resolution, as a JSON document. Null on failure;
/// release the result with `sknet_string_free`.
///
/// # Safety
/// `spec_toml` must be null or a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn sknet_cost_json(
    spec_toml: *const c_char,
    resolution: usize,
) -> *mut c_char {
    let mut result = ptr::null_mut();
    guarded(|| {
        let text = match read_str(spec_toml, "spec") {
            Ok(s) => s,
            Err(status) => return status,
        };
        let run = ArchSpec::from_toml_str(text).and_then(|spec| cost::count(&spec, resolution));
        match run {
            Ok(report) => {
                result = give_string(report.to_json());
                SknetStatus::Ok
            }
            Err(e) => fail(&e),
        }
    });
    result
}

/// Builds a freshly initialized model from a TOML architecture spec
/// and a weight seed, storing the handle in `out`.
///
/// # Safety
/// `spec_toml` must be null or a nul-terminated string; `out` must be
/// null or point at writable storage for one pointer.
#[no_mangle]
pub unsafe extern "C" fn sknet_model_build(
    spec_toml: *const c_char,
    seed: u64,
    out: *mut *mut SknetModel,
) -> SknetStatus {
    guarded(|| {
        if out.is_null() {
            set_error("out handle is null");
            return SknetStatus::NullArgument;
        }
        let text = match read_str(spec_toml, "spec") {
            Ok(s) => s,
            Err(status) => return status,
        };
        match ArchSpec::from_toml_str(text).and_then(|spec| Network::build(&spec, seed)) {
            Ok(net) => {
                *out = Box::into_raw(Box::new(SknetModel { net }));
                SknetStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Loads a model from a checkpoint file, storing the handle in `out`.
///
/// # Safety
/// `path` must be null or a nul-terminated string; `out` must be null
/// or point at writable storage for one pointer.
#[no_mangle]
pub unsafe extern "C" fn sknet_model_load(
    path: *const c_char,
    out: *mut *mut SknetModel,
) -> SknetStatus {
    guarded(|| {
        if out.is_null() {
            set_error("out handle is null");
            return SknetStatus::NullArgument;
        }
        let path = match read_str(path, "path") {
            Ok(s) => s,
            Err(status) => return status,
        };
        match Network::load(path) {
            Ok(net) => {
                *out = Box::into_raw(Box::new(SknetModel { net }));
                SknetStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Writes the model to a checkpoint file.
///
/// # Safety
/// `model` must be null or a live handle from this library; `path`
/// must be null or a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn sknet_model_save(
    model: *const SknetModel,
    path: *const c_char,
) -> SknetStatus {
    guarded(|| {
        let Some(model) = model.as_ref() else {
            set_error("model handle is null");
            return SknetStatus::NullArgument;
        };
        let path = match read_str(path, "path") {
            Ok(s) => s,
            Err(status) => return status,
        };
        match model.net.save(path) {
            Ok(()) => SknetStatus::Ok,
            Err(e) => fail(&e),
        }
    })
}

/// Releases a model handle. Null is ignored.
///
/// # Safety
/// `model` must be null or a live handle from this library, and must
/// not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sknet_model_free(model: *mut SknetModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of output classes, or zero for a null handle.
///
/// # Safety
/// `model` must be null or a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn sknet_model_class_count(model: *const SknetModel) -> u32 {
    model.as_ref().map_or(0, |m| m.net.spec.classes as u32)
}

/// Number of selective kernel units, or zero for a null handle.
///
/// # Safety
/// `model` must be null or a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn sknet_model_sk_unit_count(model: *const SknetModel) -> u32 {
    model.as_ref().map_or(0, |m| m.net.sk_unit_count() as u32)
}

/// TOML spec of a live model, for inspecting loaded checkpoints. Null
/// on failure; release the result with `sknet_string_free`.
///
/// # Safety
/// `model` must be null or a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn sknet_model_spec_toml(model: *const SknetModel) -> *mut c_char {
    let mut result = ptr::null_mut();
    guarded(|| {
        let Some(model) = model.as_ref() else {
            set_error("model handle is null");
            return SknetStatus::NullArgument;
        };
        match model.net.spec.to_toml_string() {
            Ok(toml) => {
                result = give_string(toml);
                SknetStatus::Ok
            }
            Err(e) => fail(&e),
        }
    });
    result
}

/// Runs inference on a batch laid out as `n * channels * height *
/// width` doubles in NCHW order and writes `n * classes` logits,
/// sample-major, to `logits`. `logits_len` is the capacity of that
/// buffer; it must hold all logits. Batch norm uses running
/// statistics.
///
/// # Safety
/// `model` must be null or a live handle from this library; `data`
/// must be null or point at `n * channels * height * width` readable
/// doubles; `logits` must be null or point at `logits_len` writable
/// doubles.
#[no_mangle]
pub unsafe extern "C" fn sknet_model_forward(
    model: *mut SknetModel,
    data: *const f64,
    n: usize,
    channels: usize,
    height: usize,
    width: usize,
    logits: *mut f64,
    logits_len: usize,
) -> SknetStatus {
    guarded(|| {
        let Some(model) = model.as_mut() else {
            set_error("model handle is null");
            return SknetStatus::NullArgument;
        };
        if data.is_null() || logits.is_null() {
            set_error("data and logits must not be null");
            return SknetStatus::NullArgument;
        }
        let Some(len) = n
            .checked_mul(channels)
            .and_then(|v| v.checked_mul(height))
            .and_then(|v| v.checked_mul(width))
            .filter(|&v| v > 0)
        else {
            set_error("input dimensions are zero or overflow");
            return SknetStatus::Shape;
        };
        let needed = n * model.net.spec.classes;
        if logits_len < needed {
            set_error(&format!("logits buffer holds {logits_len}, need {needed}"));
            return SknetStatus::Shape;
        }
        let input = std::slice::from_raw_parts(data, len).to_vec();
        let batch = match Tensor::new([n, channels, height, width], input) {
            Ok(t) => t,
            Err(e) => return fail(&e),
        };
        match model.net.infer(&batch, None) {
            Ok(out) => {
                std::slice::from_raw_parts_mut(logits, needed).copy_from_slice(out.data());
                SknetStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}
