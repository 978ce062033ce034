//! C ABI over the `erq` quantization engine.
//!
//! Every entry point returns an [`ErqStatus`]; on failure a description is
//! available from [`erq_last_error`] on the same thread. Handles are opaque
//! and must be released with the matching `*_free` function. Matrices are
//! passed row-major as `double` buffers.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use erq::pipeline::{cmd_quantize, quantize_layer, LayerJob, LayerOutcome, RunConfig, Stages};
use erq::quant::{Family, QuantParams};
use erq::wqer::proxy_value;
use erq::ErqError;
use nalgebra::DMatrix;

/// Result of every call. Values 1–3 match the CLI exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErqStatus {
    Ok = 0,
    Validation = 1,
    Numerical = 2,
    Verification = 3,
    NullPointer = 4,
    BufferTooSmall = 5,
    Panic = 6,
}

pub const ERQ_STAGE_AQER: u32 = 1;
pub const ERQ_STAGE_ROUNDING: u32 = 2;
pub const ERQ_STAGE_RIDGE: u32 = 4;
pub const ERQ_STAGE_ALL: u32 = ERQ_STAGE_AQER | ERQ_STAGE_ROUNDING | ERQ_STAGE_RIDGE;

pub const ERQ_ACT_UNIFORM: u32 = 0;
pub const ERQ_ACT_LOG_SQRT2: u32 = 1;

/// Run parameters. Obtain defaults from [`erq_config_default`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErqConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub k: u32,
    pub max_iter: u32,
    /// Bitmask of `ERQ_STAGE_*`.
    pub stages: u32,
    /// Bit-width overrides for manifest runs; 0 keeps the manifest value.
    pub bits_w: u32,
    pub bits_a: u32,
    /// Worker threads; 0 lets the runtime decide.
    pub jobs: u32,
}

/// Layer output MSE at each stage.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ErqMse {
    pub baseline: f64,
    pub after_aqer: f64,
    pub after_wqer: f64,
}

/// A layer's weight and calibration batch.
pub struct ErqLayer {
    weight: DMatrix<f64>,
    calib: DMatrix<f64>,
    act_quant: Family,
    bits_w: u32,
    bits_a: u32,
}

/// Output of quantizing one layer.
pub struct ErqResult {
    outcome: LayerOutcome,
}

struct FfiError {
    status: ErqStatus,
    message: String,
}

impl From<ErqError> for FfiError {
    fn from(e: ErqError) -> Self {
        let status = match e.exit_code() {
            2 => ErqStatus::Numerical,
            3 => ErqStatus::Verification,
            _ => ErqStatus::Validation,
        };
        FfiError {
            status,
            message: e.to_string(),
        }
    }
}

fn fail(status: ErqStatus, message: impl Into<String>) -> FfiError {
    FfiError {
        status,
        message: message.into(),
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: Option<String>) {
    let c = msg.map(|m| CString::new(m.replace('\0', " ")).expect("interior NULs removed"));
    LAST_ERROR.with(|slot| *slot.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> Result<(), FfiError>) -> ErqStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_last_error(None);
            ErqStatus::Ok
        }
        Ok(Err(e)) => {
            set_last_error(Some(e.message));
            e.status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(Some(format!("internal panic: {msg}")));
            ErqStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), FfiError> {
    if p.is_null() {
        Err(fail(ErqStatus::NullPointer, format!("{what} is NULL")))
    } else {
        Ok(())
    }
}

unsafe fn matrix(data: *const f64, rows: usize, cols: usize, what: &str) -> Result<DMatrix<f64>, FfiError> {
    non_null(data, what)?;
    let len = rows
        .checked_mul(cols)
        .ok_or_else(|| fail(ErqStatus::Validation, format!("{what}: size overflow")))?;
    if len == 0 {
        return Err(fail(ErqStatus::Validation, format!("{what} is empty")));
    }
    let slice = std::slice::from_raw_parts(data, len);
    if let Some(i) = slice.iter().position(|v| !v.is_finite()) {
        return Err(fail(ErqStatus::Validation, format!("{what}: non-finite value at index {i}")));
    }
    Ok(DMatrix::from_row_slice(rows, cols, slice))
}

unsafe fn path_arg<'a>(p: *const c_char, what: &str) -> Result<&'a Path, FfiError> {
    non_null(p, what)?;
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(ErqStatus::Validation, format!("{what} is not valid UTF-8")))?;
    Ok(Path::new(s))
}

fn stages_from_mask(mask: u32) -> Result<Stages, FfiError> {
    if mask & !ERQ_STAGE_ALL != 0 {
        return Err(fail(ErqStatus::Validation, format!("unknown stage bits {mask:#x}")));
    }
    Ok(Stages {
        aqer: mask & ERQ_STAGE_AQER != 0,
        wqer_rounding: mask & ERQ_STAGE_ROUNDING != 0,
        wqer_ridge: mask & ERQ_STAGE_RIDGE != 0,
    })
}

unsafe fn run_config(cfg: *const ErqConfig) -> Result<RunConfig, FfiError> {
    let c = if cfg.is_null() { erq_config_default() } else { *cfg };
    let opt = |b: u32| if b == 0 { None } else { Some(b) };
    let run = RunConfig {
        lambda1: c.lambda1,
        lambda2: c.lambda2,
        k: c.k as usize,
        max_iter: c.max_iter as usize,
        stages: stages_from_mask(c.stages)?,
        bits_w: opt(c.bits_w),
        bits_a: opt(c.bits_a),
        jobs: c.jobs as usize,
        ..RunConfig::default()
    };
    run.validate()?;
    Ok(run)
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn erq_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message describing the last failed call on this thread, or NULL. The
/// pointer stays valid until the next `erq_*` call on the same thread.
#[no_mangle]
pub extern "C" fn erq_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Default run parameters: λ₁ = λ₂ = 1e4, k = 1, 100 iterations, all stages.
#[no_mangle]
pub extern "C" fn erq_config_default() -> ErqConfig {
    let d = RunConfig::default();
    ErqConfig {
        lambda1: d.lambda1,
        lambda2: d.lambda2,
        k: d.k as u32,
        max_iter: d.max_iter as u32,
        stages: ERQ_STAGE_ALL,
        bits_w: 0,
        bits_a: 0,
        jobs: 1,
    }
}

/// Copies a `d_out × d_in` weight and an `n × d_in` calibration batch into a
/// new layer handle. `act_family` is one of `ERQ_ACT_*`.
///
/// # Safety
/// `weight` and `calib` must point to buffers of the stated sizes and `out`
/// must be a valid pointer to write the handle to.
#[no_mangle]
pub unsafe extern "C" fn erq_layer_new(
    weight: *const f64,
    d_out: usize,
    d_in: usize,
    calib: *const f64,
    n: usize,
    act_family: u32,
    bits_w: u32,
    bits_a: u32,
    out: *mut *mut ErqLayer,
) -> ErqStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = ptr::null_mut();
        let act_quant = match act_family {
            ERQ_ACT_UNIFORM => Family::Uniform,
            ERQ_ACT_LOG_SQRT2 => Family::LogSqrt2,
            other => return Err(fail(ErqStatus::Validation, format!("unknown activation family {other}"))),
        };
        let weight = matrix(weight, d_out, d_in, "weight")?;
        let calib = matrix(calib, n, d_in, "calib")?;
        if act_quant == Family::LogSqrt2 && calib.iter().any(|&v| v < 0.0) {
            return Err(fail(
                ErqStatus::Validation,
                "log-sqrt2 activations must be non-negative",
            ));
        }
        *out = Box::into_raw(Box::new(ErqLayer {
            weight,
            calib,
            act_quant,
            bits_w,
            bits_a,
        }));
        Ok(())
    })
}

/// Releases a layer handle. NULL is ignored.
///
/// # Safety
/// `layer` must come from [`erq_layer_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn erq_layer_free(layer: *mut ErqLayer) {
    if !layer.is_null() {
        drop(Box::from_raw(layer));
    }
}

/// Quantizes a layer. `cfg` may be NULL for defaults; its bit-width fields
/// override the layer's when non-zero.
///
/// # Safety
/// `layer` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn erq_layer_quantize(
    layer: *const ErqLayer,
    cfg: *const ErqConfig,
    out: *mut *mut ErqResult,
) -> ErqStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = ptr::null_mut();
        non_null(layer, "layer")?;
        let layer = &*layer;
        let run = run_config(cfg)?;
        let job = LayerJob {
            layer_id: "layer".into(),
            weight: &layer.weight,
            calib: &layer.calib,
            eval: None,
            act_quant: layer.act_quant,
            bits_w: run.bits_w.unwrap_or(layer.bits_w),
            bits_a: run.bits_a.unwrap_or(layer.bits_a),
        };
        for (name, b) in [("bits_w", job.bits_w), ("bits_a", job.bits_a)] {
            if !(2..=erq::tensor_store::MAX_BITS).contains(&b) {
                return Err(fail(ErqStatus::Validation, format!("{name}={b} outside [2, 16]")));
            }
        }
        let outcome = erq::pipeline::with_jobs(run.jobs, || quantize_layer(&job, &run))??;
        *out = Box::into_raw(Box::new(ErqResult { outcome }));
        Ok(())
    })
}

/// Releases a result handle. NULL is ignored.
///
/// # Safety
/// `result` must come from [`erq_layer_quantize`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn erq_result_free(result: *mut ErqResult) {
    if !result.is_null() {
        drop(Box::from_raw(result));
    }
}

/// Writes the code matrix shape.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn erq_result_shape(result: *const ErqResult, d_out: *mut usize, d_in: *mut usize) -> ErqStatus {
    guard(|| {
        non_null(result, "result")?;
        non_null(d_out, "d_out")?;
        non_null(d_in, "d_in")?;
        let r = &(*result).outcome.report;
        *d_out = r.d_out;
        *d_in = r.d_in;
        Ok(())
    })
}

/// Copies the row-major integer codes into `buf`, which holds `len` values
/// and must be at least `d_out · d_in` long.
///
/// # Safety
/// `buf` must be writable for `len` elements.
#[no_mangle]
pub unsafe extern "C" fn erq_result_codes(result: *const ErqResult, buf: *mut i32, len: usize) -> ErqStatus {
    guard(|| {
        non_null(result, "result")?;
        non_null(buf, "buf")?;
        let codes = &(*result).outcome.codes;
        if len < codes.len() {
            return Err(fail(
                ErqStatus::BufferTooSmall,
                format!("codes need {} slots, buffer has {len}", codes.len()),
            ));
        }
        ptr::copy_nonoverlapping(codes.as_ptr(), buf, codes.len());
        Ok(())
    })
}

/// Copies each output channel's scale and zero-point; both buffers hold
/// `len ≥ d_out` values.
///
/// # Safety
/// `scales` and `zero_points` must be writable for `len` elements.
#[no_mangle]
pub unsafe extern "C" fn erq_result_scales(
    result: *const ErqResult,
    scales: *mut f64,
    zero_points: *mut i64,
    len: usize,
) -> ErqStatus {
    guard(|| {
        non_null(result, "result")?;
        non_null(scales, "scales")?;
        non_null(zero_points, "zero_points")?;
        let params = &(*result).outcome.report.weight_quant.params;
        if len < params.len() {
            return Err(fail(
                ErqStatus::BufferTooSmall,
                format!("{} channels, buffer has {len}", params.len()),
            ));
        }
        for (i, p) in params.iter().enumerate() {
            let QuantParams::Uniform(u) = p else {
                return Err(fail(ErqStatus::Validation, "weight quantizer is not uniform"));
            };
            *scales.add(i) = u.scale;
            *zero_points.add(i) = u.zero_point;
        }
        Ok(())
    })
}

/// Layer output MSE at baseline, after Aqer and after Wqer.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn erq_result_mse(result: *const ErqResult, out: *mut ErqMse) -> ErqStatus {
    guard(|| {
        non_null(result, "result")?;
        non_null(out, "out")?;
        let r = &(*result).outcome.report;
        *out = ErqMse {
            baseline: r.mse_baseline,
            after_aqer: r.mse_after_aqer,
            after_wqer: r.mse_after_wqer,
        };
        Ok(())
    })
}

/// The layer report as a JSON string; release it with [`erq_string_free`].
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn erq_result_report_json(result: *const ErqResult, out: *mut *mut c_char) -> ErqStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = ptr::null_mut();
        non_null(result, "result")?;
        let text = serde_json::to_string(&(*result).outcome.report).map_err(ErqError::from)?;
        *out = CString::new(text)
            .map_err(|_| fail(ErqStatus::Validation, "report contains NUL"))?
            .into_raw();
        Ok(())
    })
}

/// Releases a string returned by this library. NULL is ignored.
///
/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn erq_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Quantizes every layer of a manifest into `out_dir`, as `erq quantize`
/// does. Returns the status of the first failed layer, if any.
///
/// # Safety
/// `manifest` and `out_dir` must be NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn erq_quantize_manifest(
    manifest: *const c_char,
    out_dir: *const c_char,
    cfg: *const ErqConfig,
) -> ErqStatus {
    guard(|| {
        let manifest = path_arg(manifest, "manifest")?;
        let out_dir = path_arg(out_dir, "out_dir")?;
        let run = run_config(cfg)?;
        let report = cmd_quantize(manifest, &run, out_dir)?;
        match report.failures.first() {
            None => Ok(()),
            Some(f) => Err(fail(
                if f.exit_code == 2 { ErqStatus::Numerical } else { ErqStatus::Validation },
                format!("layer {}: {}", f.layer_id, f.error),
            )),
        }
    })
}

/// `δ M δᵀ` for a length-`d` error vector and a row-major `d × d` matrix.
///
/// # Safety
/// `delta` must hold `d` values, `m` `d·d` values, and `out` be valid.
#[no_mangle]
pub unsafe extern "C" fn erq_proxy_value(delta: *const f64, m: *const f64, d: usize, out: *mut f64) -> ErqStatus {
    guard(|| {
        non_null(out, "out")?;
        non_null(delta, "delta")?;
        let m = matrix(m, d, d, "m")?;
        let delta = std::slice::from_raw_parts(delta, d);
        *out = proxy_value(delta, &m);
        Ok(())
    })
}
