//! C interface to the transfer pipeline.
//!
//! Every fallible call returns an [`HxStatus`]; on failure the message is
//! kept per thread and read with [`hx_last_error_message`]. Objects are
//! opaque handles released with their `_free` function. Strings returned
//! by the library are released with [`hx_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use hairxfer::curation::load_manifest;
use hairxfer::evaluation::psnr;
use hairxfer::features::FeatureExtractor;
use hairxfer::generator::GeneratorBackend;
use hairxfer::image::Image;
use hairxfer::mask_ops::{mask_iou, BinaryMask};
use hairxfer::pipeline::{run_batch, run_transfer, EditMode, PipelineConfig, Portrait, TransferResult, TransferTuple};
use hairxfer::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HxStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Config = 4,
    Shape = 5,
    EmptyRegion = 6,
    Diverged = 7,
    Weights = 8,
    BufferTooSmall = 9,
    Internal = 10,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HxEditMode {
    Full = 0,
    AppearanceOnly = 1,
    ShapeOnly = 2,
}

impl From<HxEditMode> for EditMode {
    fn from(m: HxEditMode) -> Self {
        match m {
            HxEditMode::Full => EditMode::Full,
            HxEditMode::AppearanceOnly => EditMode::AppearanceOnly,
            HxEditMode::ShapeOnly => EditMode::ShapeOnly,
        }
    }
}

/// Parsed pipeline configuration.
pub struct HxConfig(PipelineConfig);

/// Configuration plus the generator and extractor it names.
pub struct HxEngine {
    config: PipelineConfig,
    generator: Box<dyn GeneratorBackend>,
    extractor: Box<dyn FeatureExtractor>,
}

/// Outcome of one transfer job.
pub struct HxResult(TransferResult);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> HxStatus {
    match e {
        Error::Io { .. } | Error::Codec(_) | Error::Manifest { .. } => HxStatus::Io,
        Error::Config(_) | Error::Json(_) => HxStatus::Config,
        Error::Shape(_) | Error::MaskOrder { .. } | Error::Level { .. } => HxStatus::Shape,
        Error::EmptyMask | Error::EmptyRegion(_) | Error::UndefinedIoU | Error::InpaintUnderdetermined => {
            HxStatus::EmptyRegion
        }
        Error::Divergence { .. } => HxStatus::Diverged,
        Error::Weights(_) => HxStatus::Weights,
        _ => HxStatus::InvalidArgument,
    }
}

struct Fail(HxStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

/// Runs `f`, recording any error or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> HxStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            HxStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            HxStatus::Internal
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(HxStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(HxStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Fail> {
    str_arg(p, what).map(PathBuf::from)
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if p.is_null() {
        return if len == 0 { Ok(&[]) } else { Err(null(what)) };
    }
    Ok(std::slice::from_raw_parts(p, len))
}

fn into_c_string(s: String) -> Result<*mut c_char, Fail> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| Fail(HxStatus::Internal, "string contains NUL".into()))
}

/// Message of the last failed call on this thread, or NULL. Valid until
/// the next call on this thread.
#[no_mangle]
pub extern "C" fn hx_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn hx_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `s` is NULL or a string returned by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn hx_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Default configuration (toy backend).
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn hx_config_default(out: *mut *mut HxConfig) -> HxStatus {
    guard(|| {
        *out_arg(out, "out")? = Box::into_raw(Box::new(HxConfig(PipelineConfig::default())));
        Ok(())
    })
}

/// Parses TOML text. Relative weight paths stay relative to the process.
///
/// # Safety
/// `text` is a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn hx_config_from_toml(text: *const c_char, out: *mut *mut HxConfig) -> HxStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let cfg = PipelineConfig::from_toml_str(str_arg(text, "text")?)?;
        *out = Box::into_raw(Box::new(HxConfig(cfg)));
        Ok(())
    })
}

/// Loads a config file; relative weight paths resolve against its directory.
///
/// # Safety
/// `path` is a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn hx_config_load(path: *const c_char, out: *mut *mut HxConfig) -> HxStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let cfg = PipelineConfig::load(path_arg(path, "path")?)?;
        *out = Box::into_raw(Box::new(HxConfig(cfg)));
        Ok(())
    })
}

/// Hex SHA-256 of the canonical config; free with [`hx_string_free`].
///
/// # Safety
/// `config` is a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn hx_config_hash(config: *const HxConfig, out: *mut *mut c_char) -> HxStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let cfg = config.as_ref().ok_or_else(|| null("config"))?;
        *out = into_c_string(cfg.0.hash()?)?;
        Ok(())
    })
}

/// # Safety
/// `config` is NULL or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn hx_config_free(config: *mut HxConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// Builds the generator and extractor named by `config`. The config
/// handle is not consumed.
///
/// # Safety
/// `config` is a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn hx_engine_new(config: *const HxConfig, out: *mut *mut HxEngine) -> HxStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let cfg = &config.as_ref().ok_or_else(|| null("config"))?.0;
        let engine = HxEngine {
            generator: cfg.build_generator()?,
            extractor: cfg.build_extractor()?,
            config: cfg.clone(),
        };
        *out = Box::into_raw(Box::new(engine));
        Ok(())
    })
}

/// # Safety
/// `engine` is NULL or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn hx_engine_free(engine: *mut HxEngine) {
    if !engine.is_null() {
        drop(Box::from_raw(engine));
    }
}

/// Runs one job and writes its artefacts under `out_dir`. Portraits are
/// PNG paths with `.face.png` / `.hair.png` companions; `shape` or
/// `appearance` may be NULL when `mode` does not use it. `tuple_id` (may be
/// NULL, meaning "job") seeds the run.
///
/// # Safety
/// String arguments are NULL or NUL-terminated; `engine` is a live handle
/// and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn hx_transfer(
    engine: *const HxEngine,
    identity: *const c_char,
    shape: *const c_char,
    appearance: *const c_char,
    tuple_id: *const c_char,
    mode: HxEditMode,
    out_dir: *const c_char,
    out: *mut *mut HxResult,
) -> HxStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let engine = engine.as_ref().ok_or_else(|| null("engine"))?;
        let identity = Portrait::load_with_companions(path_arg(identity, "identity")?)?;
        let optional = |p: *const c_char, what: &str, needed: bool| -> Result<Portrait, Fail> {
            if p.is_null() {
                if needed {
                    return Err(null(what));
                }
                return Ok(identity.clone());
            }
            Ok(Portrait::load_with_companions(path_arg(p, what)?)?)
        };
        let tuple = TransferTuple {
            id: if tuple_id.is_null() { "job".into() } else { str_arg(tuple_id, "tuple_id")?.to_owned() },
            shape: optional(shape, "shape", mode != HxEditMode::AppearanceOnly)?,
            appearance: optional(appearance, "appearance", mode != HxEditMode::ShapeOnly)?,
            identity: identity.clone(),
        };
        let result = run_transfer(
            tuple,
            mode.into(),
            engine.generator.as_ref(),
            engine.extractor.as_ref(),
            &engine.config,
            &path_arg(out_dir, "out_dir")?,
        )?;
        *out = Box::into_raw(Box::new(HxResult(result)));
        Ok(())
    })
}

/// Runs every record of a JSONL manifest on `jobs` workers; per-job
/// failures are counted in `failed` rather than failing the call.
///
/// # Safety
/// String arguments are NUL-terminated; `engine` is a live handle and
/// `failed` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn hx_batch(
    engine: *const HxEngine,
    manifest: *const c_char,
    data_dir: *const c_char,
    out_dir: *const c_char,
    jobs: usize,
    mode: HxEditMode,
    failed: *mut usize,
) -> HxStatus {
    guard(|| {
        let failed = out_arg(failed, "failed")?;
        let engine = engine.as_ref().ok_or_else(|| null("engine"))?;
        let records = load_manifest(path_arg(manifest, "manifest")?)?;
        let report = run_batch(
            &records,
            &path_arg(data_dir, "data_dir")?,
            &engine.config,
            engine.generator.as_ref(),
            engine.extractor.as_ref(),
            jobs,
            mode.into(),
            &path_arg(out_dir, "out_dir")?,
        )?;
        *failed = report.failed();
        Ok(())
    })
}

/// Height and width of the composited result.
///
/// # Safety
/// `result` is a live handle; `height` and `width` are valid pointers.
#[no_mangle]
pub unsafe extern "C" fn hx_result_size(result: *const HxResult, height: *mut usize, width: *mut usize) -> HxStatus {
    guard(|| {
        let r = result.as_ref().ok_or_else(|| null("result"))?;
        *out_arg(height, "height")? = r.0.image.height();
        *out_arg(width, "width")? = r.0.image.width();
        Ok(())
    })
}

/// Copies the result as interleaved 8-bit RGB (`height·width·3` bytes).
///
/// # Safety
/// `result` is a live handle and `buf` holds `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn hx_result_rgb8(result: *const HxResult, buf: *mut u8, len: usize) -> HxStatus {
    guard(|| {
        let img = &result.as_ref().ok_or_else(|| null("result"))?.0.image;
        let (h, w) = (img.height(), img.width());
        if len < h * w * 3 {
            return Err(Fail(HxStatus::BufferTooSmall, format!("need {} bytes, got {len}", h * w * 3)));
        }
        if buf.is_null() {
            return Err(null("buf"));
        }
        let out = std::slice::from_raw_parts_mut(buf, h * w * 3);
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    out[(y * w + x) * 3 + c] = (img.get(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8;
                }
            }
        }
        Ok(())
    })
}

/// The job's metrics as JSON; free with [`hx_string_free`].
///
/// # Safety
/// `result` is a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn hx_result_metrics_json(result: *const HxResult, out: *mut *mut c_char) -> HxStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let r = result.as_ref().ok_or_else(|| null("result"))?;
        let text = serde_json::to_string(&r.0.metrics).map_err(|e| Fail(HxStatus::Internal, e.to_string()))?;
        *out = into_c_string(text)?;
        Ok(())
    })
}

/// # Safety
/// `result` is NULL or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn hx_result_free(result: *mut HxResult) {
    if !result.is_null() {
        drop(Box::from_raw(result));
    }
}

/// IoU of two `height·width` masks (nonzero bytes are set).
///
/// # Safety
/// `a` and `b` each hold `height·width` readable bytes; `out` is valid.
#[no_mangle]
pub unsafe extern "C" fn hx_mask_iou(
    a: *const u8,
    b: *const u8,
    height: usize,
    width: usize,
    out: *mut f64,
) -> HxStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let n = height * width;
        let mask = |p: *const u8, what: &str| -> Result<BinaryMask, Fail> {
            let bits = slice_arg(p, n, what)?.iter().map(|&v| v != 0).collect();
            Ok(BinaryMask::from_bits(height, width, bits)?)
        };
        *out = mask_iou(&mask(a, "a")?, &mask(b, "b")?)?;
        Ok(())
    })
}

/// PSNR in dB of two channel-major `channels·height·width` images in
/// [0, 1]; identical images give 100.
///
/// # Safety
/// `a` and `b` each hold `channels·height·width` readable doubles; `out`
/// is valid.
#[no_mangle]
pub unsafe extern "C" fn hx_psnr(
    a: *const f64,
    b: *const f64,
    channels: usize,
    height: usize,
    width: usize,
    out: *mut f64,
) -> HxStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let n = channels * height * width;
        let img = |p: *const f64, what: &str| -> Result<Image, Fail> {
            Ok(Image::from_vec(channels, height, width, slice_arg(p, n, what)?.to_vec())?)
        };
        *out = psnr(&img(a, "a")?, &img(b, "b")?)?;
        Ok(())
    })
}
