//! C ABI over the echo cancellation pipeline.
//!
//! Every fallible function returns an `int32_t` status: [`AEC_OK`] on
//! success, a negative value for failures of the binding layer itself, or
//! the positive code of the underlying engine error. The message of the
//! most recent failure on the calling thread is available through
//! [`aec_last_error_message`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use aec_core::evaluate::load_net;
use aec_core::kv::KvMap;
use aec_core::metrics::erle;
use aec_core::pipeline::{Pipeline, PipelineConfig};
use aec_core::signal::AudioClip;
use aec_core::AecError;

pub const AEC_OK: i32 = 0;
/// A required pointer argument was null.
pub const AEC_ERR_NULL: i32 = -1;
/// A string argument was not valid UTF-8.
pub const AEC_ERR_UTF8: i32 = -2;
/// The engine panicked; the handle involved should be freed.
pub const AEC_ERR_PANIC: i32 = -3;

// Engine error codes, mirroring `AecError::code`.
pub const AEC_ERR_INPUT_TOO_SHORT: i32 = 1;
pub const AEC_ERR_INVALID_CONFIG: i32 = 2;
pub const AEC_ERR_SHAPE_MISMATCH: i32 = 3;
pub const AEC_ERR_RATE_MISMATCH: i32 = 4;
pub const AEC_ERR_LENGTH_MISMATCH: i32 = 5;
pub const AEC_ERR_NO_SIGNAL: i32 = 6;
pub const AEC_ERR_NON_FINITE: i32 = 7;
pub const AEC_ERR_DIVERGED: i32 = 8;
pub const AEC_ERR_AUTODIFF: i32 = 9;
pub const AEC_ERR_WAV: i32 = 10;
pub const AEC_ERR_PARSE: i32 = 11;
pub const AEC_ERR_EMPTY_DATASET: i32 = 12;
pub const AEC_ERR_IO: i32 = 13;

/// Opaque pipeline handle.
pub struct AecPipeline {
    inner: Pipeline,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(code: i32, msg: impl Into<String>) -> i32 {
    set_error(msg.into());
    code
}

fn from_core(e: AecError) -> i32 {
    fail(e.code(), e.to_string())
}

/// Runs `f`, converting errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), i32>) -> i32 {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => AEC_OK,
        Ok(Err(code)) => code,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            fail(AEC_ERR_PANIC, msg)
        }
    }
}

unsafe fn opt_str<'a>(p: *const c_char, what: &str) -> Result<Option<&'a str>, i32> {
    if p.is_null() {
        return Ok(None);
    }
    CStr::from_ptr(p)
        .to_str()
        .map(Some)
        .map_err(|_| fail(AEC_ERR_UTF8, format!("{what} is not valid UTF-8")))
}

unsafe fn samples<'a>(p: *const f32, len: usize, what: &str) -> Result<&'a [f32], i32> {
    if p.is_null() {
        return Err(fail(AEC_ERR_NULL, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

fn clip(s: &[f32], sample_rate: u32) -> Result<AudioClip, i32> {
    AudioClip::new(s.to_vec(), sample_rate).map_err(from_core)
}

/// Creates a pipeline.
///
/// `config` is optional `key=value` text (one or more pairs per line).
/// `checkpoint` is an optional post-filter checkpoint path; without it
/// only the linear stage runs. On success `*out` receives a handle that
/// must be released with [`aec_pipeline_free`].
///
/// # Safety
/// `config` and `checkpoint` must be null or NUL-terminated strings;
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn aec_pipeline_new(
    config: *const c_char,
    checkpoint: *const c_char,
    out: *mut *mut AecPipeline,
) -> i32 {
    guard(|| {
        if out.is_null() {
            return Err(fail(AEC_ERR_NULL, "out is null"));
        }
        *out = ptr::null_mut();
        let kv = match opt_str(config, "config")? {
            Some(text) => KvMap::parse_text(text).map_err(from_core)?,
            None => KvMap::new(),
        };
        let cfg = PipelineConfig::from_kv(&kv).map_err(from_core)?;
        let net = match opt_str(checkpoint, "checkpoint")? {
            Some(p) => Some(load_net(Path::new(p), &kv).map_err(from_core)?),
            None => None,
        };
        *out = Box::into_raw(Box::new(AecPipeline {
            inner: Pipeline::new(cfg, net),
        }));
        Ok(())
    })
}

/// Releases a handle from [`aec_pipeline_new`]. Null is ignored.
///
/// # Safety
/// `p` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn aec_pipeline_free(p: *mut AecPipeline) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Returns 1 when the pipeline includes the neural post-filter, 0 when it
/// stops at the linear stage or `p` is null.
///
/// # Safety
/// `p` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn aec_pipeline_has_postfilter(p: *const AecPipeline) -> i32 {
    p.as_ref().map_or(0, |p| p.inner.net.is_some() as i32)
}

/// Processes one recording. `mic`, `reference` and `out` each hold `len`
/// samples; `out` receives the echo-cancelled signal. When `delay_out` is
/// non-null it receives the estimated bulk delay in samples.
///
/// # Safety
/// All buffers must be valid for `len` samples; `out` must not alias the
/// inputs; `p` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn aec_pipeline_process(
    p: *const AecPipeline,
    mic: *const f32,
    reference: *const f32,
    len: usize,
    sample_rate: u32,
    out: *mut f32,
    delay_out: *mut usize,
) -> i32 {
    guard(|| {
        let p = p
            .as_ref()
            .ok_or_else(|| fail(AEC_ERR_NULL, "pipeline is null"))?;
        if out.is_null() {
            return Err(fail(AEC_ERR_NULL, "out is null"));
        }
        let d = clip(samples(mic, len, "mic")?, sample_rate)?;
        let x = clip(samples(reference, len, "reference")?, sample_rate)?;
        let r = p.inner.process(&d, &x).map_err(from_core)?;
        std::slice::from_raw_parts_mut(out, len).copy_from_slice(&r.output.samples);
        if !delay_out.is_null() {
            *delay_out = r.linear.delay.delay;
        }
        Ok(())
    })
}

/// ERLE in dB of residual `e` against microphone `d`, both `len` samples.
///
/// # Safety
/// `d` and `e` must be valid for `len` samples; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn aec_erle(d: *const f32, e: *const f32, len: usize, out: *mut f64) -> i32 {
    guard(|| {
        if out.is_null() {
            return Err(fail(AEC_ERR_NULL, "out is null"));
        }
        let rate = aec_core::signal::DEFAULT_SAMPLE_RATE;
        let d = clip(samples(d, len, "d")?, rate)?;
        let e = clip(samples(e, len, "e")?, rate)?;
        *out = erle(&d, &e, None).map_err(from_core)?;
        Ok(())
    })
}

/// Message of the last failure on this thread, or null if none. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn aec_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn aec_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
