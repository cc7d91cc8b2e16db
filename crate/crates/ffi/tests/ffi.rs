use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use aec_core::AecError;
use aec_ffi::*;

fn last_error() -> String {
    let p = aec_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn new_pipeline(config: &str) -> Result<*mut AecPipeline, i32> {
    let c = CString::new(config).unwrap();
    let mut p = ptr::null_mut();
    let rc = unsafe { aec_pipeline_new(c.as_ptr(), ptr::null(), &mut p) };
    if rc == AEC_OK {
        Ok(p)
    } else {
        assert!(p.is_null());
        Err(rc)
    }
}

fn noise(n: usize, seed: u32) -> Vec<f32> {
    let mut s = seed;
    (0..n)
        .map(|_| {
            s = s.wrapping_mul(1_103_515_245).wrapping_add(12_345);
            (s >> 8) as f32 / 16_777_216.0 - 0.5
        })
        .collect()
}

#[test]
fn processes_echo_and_reports_delay() {
    let n = 96_000;
    let x = noise(n, 3);
    let d: Vec<f32> = (0..n).map(|i| if i >= 1200 { 0.4 * x[i - 1200] } else { 0.0 }).collect();
    let p = new_pipeline("kalman.block=256").unwrap();
    assert_eq!(unsafe { aec_pipeline_has_postfilter(p) }, 0);
    let mut out = vec![0f32; n];
    let mut delay = 0usize;
    let rc = unsafe { aec_pipeline_process(p, d.as_ptr(), x.as_ptr(), n, 48_000, out.as_mut_ptr(), &mut delay) };
    assert_eq!(rc, AEC_OK);
    assert_eq!(delay, 1200);
    let tail = n / 2;
    let mut db = 0.0;
    let rc = unsafe { aec_erle(d[tail..].as_ptr(), out[tail..].as_ptr(), n - tail, &mut db) };
    assert_eq!(rc, AEC_OK);
    assert!(db > 20.0, "{db}");
    unsafe { aec_pipeline_free(p) };
}

#[test]
fn status_codes_and_messages() {
    assert_eq!(new_pipeline("kalman.block=0").unwrap_err(), AEC_ERR_INVALID_CONFIG);
    assert!(last_error().contains("block"));
    assert_eq!(new_pipeline("no_equals_sign").unwrap_err(), AEC_ERR_PARSE);

    let bad = [0xffu8, 0];
    let mut p = ptr::null_mut();
    let rc = unsafe { aec_pipeline_new(bad.as_ptr().cast(), ptr::null(), &mut p) };
    assert_eq!(rc, AEC_ERR_UTF8);
    assert_eq!(unsafe { aec_pipeline_new(ptr::null(), ptr::null(), ptr::null_mut()) }, AEC_ERR_NULL);

    let missing = CString::new("/nonexistent/checkpoint.ckpt").unwrap();
    let rc = unsafe { aec_pipeline_new(ptr::null(), missing.as_ptr(), &mut p) };
    assert_eq!(rc, AEC_ERR_IO);

    let p = new_pipeline("").unwrap();
    let d = noise(100, 1);
    let mut out = vec![0f32; 100];
    let rc = unsafe { aec_pipeline_process(p, d.as_ptr(), ptr::null(), 100, 48_000, out.as_mut_ptr(), ptr::null_mut()) };
    assert_eq!(rc, AEC_ERR_NULL);
    let mut bad = d.clone();
    bad[3] = f32::NAN;
    let rc = unsafe { aec_pipeline_process(p, bad.as_ptr(), d.as_ptr(), 100, 48_000, out.as_mut_ptr(), ptr::null_mut()) };
    assert_eq!(rc, AEC_ERR_NON_FINITE);
    unsafe { aec_pipeline_free(p) };
    unsafe { aec_pipeline_free(ptr::null_mut()) };

    let silent = vec![0f32; 10];
    let mut db = 0.0;
    assert_eq!(unsafe { aec_erle(silent.as_ptr(), silent.as_ptr(), 10, &mut db) }, AEC_ERR_NO_SIGNAL);
}

#[test]
fn exported_codes_match_engine() {
    let cases = [
        (AecError::InvalidConfig(String::new()), AEC_ERR_INVALID_CONFIG),
        (AecError::NoSignal, AEC_ERR_NO_SIGNAL),
        (AecError::NonFinite(""), AEC_ERR_NON_FINITE),
        (AecError::Diverged, AEC_ERR_DIVERGED),
        (AecError::Autodiff(String::new()), AEC_ERR_AUTODIFF),
        (AecError::Parse(String::new()), AEC_ERR_PARSE),
        (AecError::EmptyDataset, AEC_ERR_EMPTY_DATASET),
        (AecError::RateMismatch(1, 2), AEC_ERR_RATE_MISMATCH),
        (AecError::LengthMismatch(1, 2), AEC_ERR_LENGTH_MISMATCH),
    ];
    for (e, code) in cases {
        assert_eq!(e.code(), code, "{e}");
    }
    let header = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/aec_ffi.h")).unwrap();
    for name in [
        "aec_pipeline_new",
        "aec_pipeline_free",
        "aec_pipeline_process",
        "aec_last_error_message",
        "typedef struct AecPipeline AecPipeline",
        "#define AEC_ERR_IO 13",
    ] {
        assert!(header.contains(name), "{name}");
    }
}

/// Path of the static library for the profile this test was built with,
/// building it first when `cargo test` only produced the rlib.
fn static_lib() -> PathBuf {
    // test binaries live in target/<profile>/deps
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().unwrap().parent().unwrap();
    let lib = profile_dir.join("libaec_ffi.a");
    if !lib.is_file() {
        let mut cmd = Command::new(env!("CARGO"));
        cmd.args(["build", "-p", "aec-ffi", "--lib"])
            .arg("--target-dir")
            .arg(profile_dir.parent().unwrap());
        if profile_dir.file_name().is_some_and(|n| n == "release") {
            cmd.arg("--release");
        }
        let st = cmd.status().expect("cargo runs");
        assert!(st.success(), "building the static library failed");
    }
    lib
}

#[test]
fn c_program_links_against_static_library() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR"));
    let lib = static_lib();
    assert!(lib.is_file(), "{}", lib.display());
    let tmp = tempfile::tempdir().unwrap();
    let bin = tmp.path().join("smoke");
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    let st = Command::new(cc)
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(dir.join("include"))
        .arg(dir.join("tests/c_smoke.c"))
        .arg(&lib)
        .args(["-lm", "-lpthread", "-ldl", "-o"])
        .arg(&bin)
        .status()
        .unwrap();
    assert!(st.success());
    let out = Command::new(&bin).output().unwrap();
    assert!(out.status.success(), "{:?}", out.status);
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("ok "));
}
