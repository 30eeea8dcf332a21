//! C ABI for dmfuse.
//!
//! Every fallible function returns a [`DmfStatus`]; on failure a message is
//! available from [`dmf_last_error`] on the same thread. Objects are opaque
//! handles released with their `*_free` function. Images are row-major
//! `double` buffers in `[0, 1]`; color images are interleaved RGB.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use dmfuse::data::{gen_phantom_pair, PhantomSpec, Task};
use dmfuse::diffusion::{NoiseSchedule, TimeStepSet};
use dmfuse::fusionnet::{forward_fuse, FusionWeights};
use dmfuse::imaging::{ColorImage, GrayImage, Plane, SourceImage};
use dmfuse::metrics::{evaluate_pair, METRIC_NAMES};
use dmfuse::pipeline::{compose_output, load_models, FusionConfig};
use dmfuse::reconstructor::ReconstructorWeights;
use dmfuse::Error;

/// Result codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DmfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Io = 4,
    Checkpoint = 5,
    DigestMismatch = 6,
    Shape = 7,
    Data = 8,
    Internal = 9,
}

/// Parsed run configuration.
pub struct DmfConfig {
    inner: FusionConfig,
}

/// A loaded reconstructor and fusion network ready for inference.
pub struct DmfModel {
    recon: ReconstructorWeights,
    fusion: FusionWeights,
    steps: TimeStepSet,
    schedule: NoiseSchedule,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> DmfStatus {
    match e {
        Error::Config(_) => DmfStatus::Config,
        Error::InvalidArgument(_) | Error::StepOutOfRange { .. } => DmfStatus::InvalidArgument,
        Error::Io { .. } | Error::Image { .. } => DmfStatus::Io,
        Error::Checkpoint(_) => DmfStatus::Checkpoint,
        Error::DigestMismatch { .. } => DmfStatus::DigestMismatch,
        Error::Shape(_) => DmfStatus::Shape,
        Error::EmptyDataset(_) | Error::Manifest(_) | Error::NonFinite { .. } => DmfStatus::Data,
    }
}

enum Failure {
    Null(&'static str),
    Arg(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

/// Run `f`, translating errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> DmfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            DmfStatus::Ok
        }
        Ok(Err(Failure::Null(what))) => {
            set_error(&format!("null pointer: {what}"));
            DmfStatus::NullPointer
        }
        Ok(Err(Failure::Arg(msg))) => {
            set_error(&msg);
            DmfStatus::InvalidArgument
        }
        Ok(Err(Failure::Core(e))) => {
            set_error(&e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic");
            DmfStatus::Internal
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::Arg(format!("{what} is not valid UTF-8")))
}

unsafe fn slice_arg<'a>(p: *const f64, n: usize, what: &'static str) -> Result<&'a [f64], Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn slice_out<'a>(
    p: *mut f64,
    n: usize,
    what: &'static str,
) -> Result<&'a mut [f64], Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, n))
}

fn pixels(height: usize, width: usize) -> Result<usize, Failure> {
    if height == 0 || width == 0 {
        return Err(Failure::Arg("image dimensions must be positive".into()));
    }
    height
        .checked_mul(width)
        .filter(|n| n.checked_mul(3).is_some())
        .ok_or_else(|| Failure::Arg("image dimensions overflow".into()))
}

fn gray(height: usize, width: usize, v: &[f64]) -> Result<GrayImage, Failure> {
    Ok(GrayImage::new(height, width, v.to_vec())?)
}

fn color_from_interleaved(height: usize, width: usize, v: &[f64]) -> Result<ColorImage, Failure> {
    let n = height * width;
    let (mut r, mut g, mut b) = (
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
    );
    for px in v.chunks_exact(3) {
        r.push(px[0]);
        g.push(px[1]);
        b.push(px[2]);
    }
    Ok(ColorImage::new(height, width, r, g, b)?)
}

fn write_interleaved(c: &ColorImage, out: &mut [f64]) {
    for (i, px) in out.chunks_exact_mut(3).enumerate() {
        px[0] = c.red()[i];
        px[1] = c.green()[i];
        px[2] = c.blue()[i];
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dmf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread ("" after a success).
/// Valid until the next dmfuse call on the same thread.
#[no_mangle]
pub extern "C" fn dmf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Default configuration.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn dmf_config_default(out: *mut *mut DmfConfig) -> DmfStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        *out = Box::into_raw(Box::new(DmfConfig {
            inner: FusionConfig::default(),
        }));
        Ok(())
    })
}

/// Parse a TOML configuration; missing keys take their defaults.
///
/// # Safety
/// `toml` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dmf_config_from_toml(
    toml: *const c_char,
    out: *mut *mut DmfConfig,
) -> DmfStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let text = str_arg(toml, "toml")?;
        let inner = FusionConfig::from_toml(text)?;
        *out = Box::into_raw(Box::new(DmfConfig { inner }));
        Ok(())
    })
}

/// Release a configuration. Null is ignored.
///
/// # Safety
/// `cfg` must come from a `dmf_config_*` constructor and not be used again.
#[no_mangle]
pub unsafe extern "C" fn dmf_config_free(cfg: *mut DmfConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Load checkpoints written by `train-recon` and `train-fusion`.
///
/// # Safety
/// `cfg` must be a live handle, the paths NUL-terminated strings and `out`
/// writable.
#[no_mangle]
pub unsafe extern "C" fn dmf_model_load(
    cfg: *const DmfConfig,
    recon_path: *const c_char,
    fusion_path: *const c_char,
    out: *mut *mut DmfModel,
) -> DmfStatus {
    guard(|| {
        if cfg.is_null() {
            return Err(Failure::Null("cfg"));
        }
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let cfg = &(*cfg).inner;
        let rp = str_arg(recon_path, "recon_path")?;
        let fp = str_arg(fusion_path, "fusion_path")?;
        let (recon, fusion, header) = load_models(cfg, Path::new(rp), Path::new(fp))?;
        *out = Box::into_raw(Box::new(DmfModel {
            recon,
            fusion,
            steps: header.time_steps,
            schedule: cfg.noise_schedule()?,
        }));
        Ok(())
    })
}

/// Release a model. Null is ignored.
///
/// # Safety
/// `model` must come from `dmf_model_load` and not be used again.
#[no_mangle]
pub unsafe extern "C" fn dmf_model_free(model: *mut DmfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of fusion-network parameters.
///
/// # Safety
/// `model` must be a live handle or null (returns 0).
#[no_mangle]
pub unsafe extern "C" fn dmf_model_param_count(model: *const DmfModel) -> usize {
    if model.is_null() {
        0
    } else {
        (*model).fusion.param_count()
    }
}

unsafe fn fuse_luma(
    model: *const DmfModel,
    a: *const f64,
    b_luma: GrayImage,
    height: usize,
    width: usize,
    noise_seed: u64,
) -> Result<GrayImage, Failure> {
    if model.is_null() {
        return Err(Failure::Null("model"));
    }
    let m = &*model;
    let n = height * width;
    let ia = gray(height, width, slice_arg(a, n, "a")?)?;
    Ok(forward_fuse(
        &m.recon,
        &m.fusion,
        &ia,
        &b_luma,
        &m.steps,
        &m.schedule,
        noise_seed,
    )?)
}

/// Fuse two grayscale images of `height * width` pixels into `out`.
///
/// # Safety
/// `a`, `b` and `out` must each hold `height * width` doubles.
#[no_mangle]
pub unsafe extern "C" fn dmf_fuse_gray(
    model: *const DmfModel,
    a: *const f64,
    b: *const f64,
    height: usize,
    width: usize,
    noise_seed: u64,
    out: *mut f64,
) -> DmfStatus {
    guard(|| {
        let n = pixels(height, width)?;
        let ib = gray(height, width, slice_arg(b, n, "b")?)?;
        let fused = fuse_luma(model, a, ib, height, width, noise_seed)?;
        slice_out(out, n, "out")?.copy_from_slice(fused.values());
        Ok(())
    })
}

/// Fuse a grayscale image with an interleaved RGB image. The network fuses
/// luma; the result carries `b`'s chroma. `out_luma` (optional) receives the
/// network output.
///
/// # Safety
/// `a` must hold `height * width` doubles, `b_rgb` and `out_rgb` three times
/// that, and `out_luma` (if not null) `height * width`.
#[no_mangle]
pub unsafe extern "C" fn dmf_fuse_color(
    model: *const DmfModel,
    a: *const f64,
    b_rgb: *const f64,
    height: usize,
    width: usize,
    noise_seed: u64,
    out_rgb: *mut f64,
    out_luma: *mut f64,
) -> DmfStatus {
    guard(|| {
        let n = pixels(height, width)?;
        let b = SourceImage::Color(color_from_interleaved(
            height,
            width,
            slice_arg(b_rgb, 3 * n, "b_rgb")?,
        )?);
        let fused = fuse_luma(model, a, b.luma(), height, width, noise_seed)?;
        let SourceImage::Color(c) = compose_output(&fused, &b)? else {
            unreachable!("color source yields color output")
        };
        write_interleaved(&c, slice_out(out_rgb, 3 * n, "out_rgb")?);
        if !out_luma.is_null() {
            slice_out(out_luma, n, "out_luma")?.copy_from_slice(fused.values());
        }
        Ok(())
    })
}

/// Number of metrics written by `dmf_evaluate`.
#[no_mangle]
pub extern "C" fn dmf_metric_count() -> usize {
    METRIC_NAMES.len()
}

/// Name of metric `index` as a static string, or null when out of range.
#[no_mangle]
pub extern "C" fn dmf_metric_name(index: usize) -> *const c_char {
    const NAMES: [&str; 9] = [
        "SF\0", "SD\0", "AG\0", "Q_W\0", "SCD\0", "VIFF\0", "Q_AB/F\0", "MSSSIM\0", "FMI_WT\0",
    ];
    NAMES.get(index).map_or(ptr::null(), |s| s.as_ptr().cast())
}

/// Score a fused grayscale image against its two sources. Writes
/// `dmf_metric_count()` values to `out_metrics`.
///
/// # Safety
/// `a`, `b` and `fused` must hold `height * width` doubles; `out_metrics`
/// must hold `dmf_metric_count()` doubles.
#[no_mangle]
pub unsafe extern "C" fn dmf_evaluate(
    a: *const f64,
    b: *const f64,
    fused: *const f64,
    height: usize,
    width: usize,
    out_metrics: *mut f64,
) -> DmfStatus {
    guard(|| {
        let n = pixels(height, width)?;
        let ia = gray(height, width, slice_arg(a, n, "a")?)?;
        let ib = SourceImage::Gray(gray(height, width, slice_arg(b, n, "b")?)?);
        let f = SourceImage::Gray(gray(height, width, slice_arg(fused, n, "fused")?)?);
        let report = evaluate_pair("ffi", &ia, &ib, &f)?;
        slice_out(out_metrics, METRIC_NAMES.len(), "out_metrics")?
            .copy_from_slice(&report.values());
        Ok(())
    })
}

/// Generate a phantom pair. `task`: 0 = MRI-CT, 1 = MRI-PET, 2 = MRI-SPECT.
/// `out_b_rgb` receives B as interleaved RGB (gray B is replicated).
///
/// # Safety
/// `out_a` must hold `size * size` doubles and `out_b_rgb` three times that.
#[no_mangle]
pub unsafe extern "C" fn dmf_phantom_pair(
    seed: u64,
    task: u32,
    size: usize,
    out_a: *mut f64,
    out_b_rgb: *mut f64,
) -> DmfStatus {
    guard(|| {
        let task = *Task::ALL
            .get(task as usize)
            .ok_or_else(|| Failure::Arg(format!("unknown task index {task}")))?;
        let n = pixels(size, size)?;
        let (a, b) = gen_phantom_pair(&PhantomSpec::new(seed, size, task))?;
        slice_out(out_a, n, "out_a")?.copy_from_slice(a.values());
        let out = slice_out(out_b_rgb, 3 * n, "out_b_rgb")?;
        match b {
            SourceImage::Gray(g) => {
                for (px, v) in out.chunks_exact_mut(3).zip(g.values()) {
                    px.fill(*v);
                }
            }
            SourceImage::Color(c) => write_interleaved(&c, out),
        }
        Ok(())
    })
}
