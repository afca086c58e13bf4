//! C ABI over the `twincount` library.
//!
//! Every fallible function returns a [`TcStatus`]; on failure a message is
//! kept per thread and read back with [`tc_last_error`]. Objects cross the
//! boundary as opaque handles that the caller frees with the matching
//! `_free` function. Images are row-major `128 × 128` `float` buffers with
//! values in `[0, 1]`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use twincount::baseline::{self, WatershedParams};
use twincount::dataio::Sample;
use twincount::evaluation::{metrics, predict_counts, translate};
use twincount::synthgen::{generate_dataset, GeneratorConfig, Style};
use twincount::twinvae::{load_checkpoint, ModelParams};
use twincount::{Domain, Error, Image};

/// Pixels per image side.
pub const TC_IMAGE_SIZE: usize = 128;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    /// Bad configuration or data file.
    Validation = 3,
    Io = 4,
    Runtime = 5,
    /// A Rust panic was caught at the boundary.
    Panic = 6,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TcDomain {
    Nat = 0,
    Syn = 1,
}

impl From<TcDomain> for Domain {
    fn from(d: TcDomain) -> Self {
        match d {
            TcDomain::Nat => Domain::Nat,
            TcDomain::Syn => Domain::Syn,
        }
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TcStyle {
    SynPc = 0,
    SynBf = 1,
    PseudoNatPc = 2,
    PseudoNatBf = 3,
}

impl From<TcStyle> for Style {
    fn from(s: TcStyle) -> Self {
        match s {
            TcStyle::SynPc => Style::SynPc,
            TcStyle::SynBf => Style::SynBf,
            TcStyle::PseudoNatPc => Style::PseudoNatPc,
            TcStyle::PseudoNatBf => Style::PseudoNatBf,
        }
    }
}

/// Headline count metrics; `mre` is a fraction.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TcMetrics {
    pub n: usize,
    pub mae: f64,
    pub mre: f64,
    pub accuracy: f64,
}

/// Opaque trained model.
pub struct TcModel {
    params: ModelParams<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> TcStatus {
    match e {
        Error::Io(_) | Error::Image(_) => TcStatus::Io,
        e if e.is_validation() => TcStatus::Validation,
        _ => TcStatus::Runtime,
    }
}

struct Fail(TcStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(TcStatus::NullPointer, format!("`{what}` is null"))
}

fn bad(msg: impl Into<String>) -> Fail {
    Fail(TcStatus::InvalidArgument, msg.into())
}

/// Runs `f`, translating errors and panics into a status.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> TcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            TcStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".to_string());
            set_error(format!("panic: {msg}"));
            TcStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| bad(format!("`{what}` is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn images_arg(pixels: *const f32, n_images: usize) -> Result<Vec<Image>, Fail> {
    if pixels.is_null() {
        return Err(null("pixels"));
    }
    let per = TC_IMAGE_SIZE * TC_IMAGE_SIZE;
    let all = std::slice::from_raw_parts(pixels, n_images * per);
    if let Some(i) = all.iter().position(|v| !(0.0..=1.0).contains(v)) {
        return Err(Fail(
            TcStatus::Validation,
            format!("pixel {i} is {}, outside [0, 1]", all[i]),
        ));
    }
    all.chunks(per)
        .map(|c| Image::from_pixels(TC_IMAGE_SIZE, TC_IMAGE_SIZE, c.to_vec()).map_err(Fail::from))
        .collect()
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn tc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn tc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads a checkpoint. On success `*out` owns a new handle.
///
/// # Safety
/// `path` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tc_model_load(path: *const c_char, out: *mut *mut TcModel) -> TcStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = path_arg(path, "path")?;
        let (params, _) = load_checkpoint(&path)?;
        *out = Box::into_raw(Box::new(TcModel { params }));
        Ok(())
    })
}

/// Frees a handle from [`tc_model_load`]. Null is ignored.
///
/// # Safety
/// `model` must be null or a live handle not freed before.
#[no_mangle]
pub unsafe extern "C" fn tc_model_free(model: *mut TcModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Width of the shared latent vector, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn tc_model_latent_dim(model: *const TcModel) -> usize {
    model.as_ref().map_or(0, |m| m.params.config.latent_dim)
}

/// Count estimates for `n_images` images encoded with `domain`'s encoder.
///
/// # Safety
/// `pixels` must hold `n_images · 128 · 128` floats and `out_counts`
/// room for `n_images` doubles.
#[no_mangle]
pub unsafe extern "C" fn tc_model_predict(
    model: *const TcModel,
    pixels: *const f32,
    n_images: usize,
    domain: TcDomain,
    out_counts: *mut f64,
) -> TcStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        if out_counts.is_null() {
            return Err(null("out_counts"));
        }
        let samples: Vec<Sample> = images_arg(pixels, n_images)?
            .into_iter()
            .enumerate()
            .map(|(i, image)| Sample {
                image,
                label: None,
                domain: domain.into(),
                id: i.to_string(),
            })
            .collect();
        let counts = predict_counts(&model.params, &samples)?;
        std::slice::from_raw_parts_mut(out_counts, n_images).copy_from_slice(&counts);
        Ok(())
    })
}

/// Translates one image from `source` to `target`, writing the translated
/// pixels and both count estimates.
///
/// # Safety
/// `pixels` and `out_pixels` must each hold `128 · 128` floats; the
/// estimate pointers may be null.
#[no_mangle]
pub unsafe extern "C" fn tc_model_translate(
    model: *const TcModel,
    pixels: *const f32,
    source: TcDomain,
    target: TcDomain,
    out_pixels: *mut f32,
    out_source_estimate: *mut f64,
    out_translated_estimate: *mut f64,
) -> TcStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        if out_pixels.is_null() {
            return Err(null("out_pixels"));
        }
        let image = images_arg(pixels, 1)?.remove(0);
        let r = translate(&model.params, &image, source.into(), target.into())?;
        std::slice::from_raw_parts_mut(out_pixels, TC_IMAGE_SIZE * TC_IMAGE_SIZE).copy_from_slice(r.translated.pixels());
        if let Some(p) = out_source_estimate.as_mut() {
            *p = r.source_count_estimate;
        }
        if let Some(p) = out_translated_estimate.as_mut() {
            *p = r.translated_count_estimate;
        }
        Ok(())
    })
}

/// Renders `n` labeled images of `style` into `out_dir` with a manifest.
///
/// # Safety
/// `out_dir` must be a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn tc_generate_dataset(style: TcStyle, n: usize, seed: u64, out_dir: *const c_char) -> TcStatus {
    guard(|| {
        let dir = path_arg(out_dir, "out_dir")?;
        generate_dataset(&GeneratorConfig::preset(style.into()), n, seed, &dir)?;
        Ok(())
    })
}

/// Counts cells in one image with the watershed baseline calibrated for
/// `style`.
///
/// # Safety
/// `pixels` must hold `128 · 128` floats and `out_count` be valid.
#[no_mangle]
pub unsafe extern "C" fn tc_baseline_count(pixels: *const f32, style: TcStyle, out_count: *mut usize) -> TcStatus {
    guard(|| {
        if out_count.is_null() {
            return Err(null("out_count"));
        }
        let image = images_arg(pixels, 1)?.remove(0);
        *out_count = baseline::count(&image, &WatershedParams::calibrated(style.into()));
        Ok(())
    })
}

/// MAE, MRE and accuracy of `n` predictions against positive labels.
///
/// # Safety
/// `predictions` and `labels` must hold `n` elements; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn tc_metrics(predictions: *const f64, labels: *const u32, n: usize, out: *mut TcMetrics) -> TcStatus {
    guard(|| {
        if predictions.is_null() {
            return Err(null("predictions"));
        }
        if labels.is_null() {
            return Err(null("labels"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let r = metrics(
            std::slice::from_raw_parts(predictions, n),
            std::slice::from_raw_parts(labels, n),
        )?;
        *out = TcMetrics {
            n: r.n,
            mae: r.mae,
            mre: r.mre,
            accuracy: r.accuracy,
        };
        Ok(())
    })
}
