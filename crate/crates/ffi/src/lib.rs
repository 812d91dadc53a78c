//! C ABI over the sketch2face toolkit.
//!
//! Every function returns an `int32_t` status: `S2F_OK` on success, a
//! positive toolkit error code, or a negative ABI error. The message for the
//! last failure on the calling thread is available from
//! `s2f_last_error_message`. Handles are opaque and must be released with the
//! matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::ptr;

use sketch2face::inversion::{Bundle, StopReason};
use sketch2face::pipeline::{self, Config, ASSET_ROOT_ENV};
use sketch2face::{Error, GeneratorHandle, LatentCode};

pub const S2F_OK: i32 = 0;
pub const S2F_ERR_MISSING_FILE: i32 = 1;
pub const S2F_ERR_VERSION_MISMATCH: i32 = 2;
pub const S2F_ERR_CORRUPT_WEIGHTS: i32 = 3;
pub const S2F_ERR_SHAPE_MISMATCH: i32 = 4;
pub const S2F_ERR_NON_FINITE: i32 = 5;
pub const S2F_ERR_PRECONDITION: i32 = 6;
pub const S2F_ERR_DUPLICATE: i32 = 7;
pub const S2F_ERR_UNKNOWN: i32 = 8;
pub const S2F_ERR_WEIGHTS_MISSING: i32 = 9;
pub const S2F_ERR_EXTRACTOR_MISMATCH: i32 = 10;
pub const S2F_ERR_DEGENERATE_IMAGE: i32 = 11;
pub const S2F_ERR_DIVERGENCE: i32 = 12;
pub const S2F_ERR_ORACLE: i32 = 13;
pub const S2F_ERR_DATA: i32 = 14;
pub const S2F_ERR_CONFIG: i32 = 15;
pub const S2F_ERR_IO: i32 = 16;
/// A required pointer argument was null.
pub const S2F_ERR_NULL: i32 = -1;
/// A string argument was not valid UTF-8.
pub const S2F_ERR_UTF8: i32 = -2;
/// A caller buffer had the wrong length.
pub const S2F_ERR_BUFFER: i32 = -3;
/// The library panicked; the handle involved should be considered lost.
pub const S2F_ERR_PANIC: i32 = -4;

/// Loaded generator.
pub struct S2fGenerator {
    gen: GeneratorHandle,
}

/// Generator, mapper, extractors, HOGFD and the configuration they came from.
pub struct S2fBundle {
    bundle: Bundle,
    config: Config,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

enum Fail {
    Lib(Error),
    Abi(i32, String),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> i32 {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            S2F_OK
        }
        Ok(Err(Fail::Lib(e))) => {
            set_error(e.to_string());
            e.code()
        }
        Ok(Err(Fail::Abi(code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("panic inside sketch2face".into());
            S2F_ERR_PANIC
        }
    }
}

fn null(what: &str) -> Fail {
    Fail::Abi(S2F_ERR_NULL, format!("`{what}` is null"))
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| Fail::Abi(S2F_ERR_UTF8, format!("`{what}` is not UTF-8")))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

/// Message for the last failed call on this thread, or null after a
/// success. Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn s2f_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Static, NUL-terminated version string.
#[no_mangle]
pub extern "C" fn s2f_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Seeded toy generator (32×32 output, 18×16 latent).
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn s2f_generator_toy(seed: u64, out: *mut *mut S2fGenerator) -> i32 {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = Box::into_raw(Box::new(S2fGenerator { gen: GeneratorHandle::toy(seed) }));
        Ok(())
    })
}

/// Loads a generator checkpoint. `kind` is `"pretrained"` or `"toy"`.
///
/// # Safety
/// `path` and `kind` must be NUL-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn s2f_generator_load(path: *const c_char, kind: *const c_char, out: *mut *mut S2fGenerator) -> i32 {
    guard(|| {
        let path = path_arg(path, "path")?;
        let kind = path_arg(kind, "kind")?;
        let kind = kind.to_string_lossy().parse()?;
        let out = out_ptr(out, "out")?;
        let gen = sketch2face::generator::load_generator(&path, kind)?;
        *out = Box::into_raw(Box::new(S2fGenerator { gen }));
        Ok(())
    })
}

/// Latent shape (rows, width) and output side length.
///
/// # Safety
/// `g` must be a live generator handle; the out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn s2f_generator_shape(
    g: *const S2fGenerator,
    rows: *mut usize,
    width: *mut usize,
    resolution: *mut usize,
) -> i32 {
    guard(|| {
        let g = g.as_ref().ok_or_else(|| null("g"))?;
        let (r, w) = g.gen.latent_shape();
        *out_ptr(rows, "rows")? = r;
        *out_ptr(width, "width")? = w;
        *out_ptr(resolution, "resolution")? = g.gen.output_resolution();
        Ok(())
    })
}

/// Renders a row-major latent into `pixels`, height × width × 3 in `[0, 1]`.
///
/// # Safety
/// `w` must point to `w_len` doubles and `pixels` to `pixels_len` writable
/// doubles.
#[no_mangle]
pub unsafe extern "C" fn s2f_generator_synthesize(
    g: *const S2fGenerator,
    w: *const f64,
    w_len: usize,
    pixels: *mut f64,
    pixels_len: usize,
) -> i32 {
    guard(|| {
        let g = g.as_ref().ok_or_else(|| null("g"))?;
        if w.is_null() {
            return Err(null("w"));
        }
        if pixels.is_null() {
            return Err(null("pixels"));
        }
        let (r, c) = g.gen.latent_shape();
        if w_len != r * c {
            return Err(Fail::Abi(S2F_ERR_BUFFER, format!("latent has {w_len} values, expected {}", r * c)));
        }
        let res = g.gen.output_resolution();
        if pixels_len != res * res * 3 {
            return Err(Fail::Abi(S2F_ERR_BUFFER, format!("pixel buffer has {pixels_len} values, expected {}", res * res * 3)));
        }
        let rows = ndarray::Array2::from_shape_vec((r, c), std::slice::from_raw_parts(w, w_len).to_vec())
            .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
        let img = g.gen.synthesize(&LatentCode::new(rows)?)?.to_unit()?;
        let dst = std::slice::from_raw_parts_mut(pixels, pixels_len);
        for (d, s) in dst.iter_mut().zip(img.pixels().iter()) {
            *d = *s;
        }
        Ok(())
    })
}

/// # Safety
/// `g` must be null or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn s2f_generator_free(g: *mut S2fGenerator) {
    if !g.is_null() {
        drop(Box::from_raw(g));
    }
}

fn load_config(path: &Path) -> Result<Config, Error> {
    let mut cfg = Config::load(path)?;
    if std::env::var_os(ASSET_ROOT_ENV).is_none_or(|v| v.is_empty()) {
        cfg.rebase(path.parent().unwrap_or(Path::new(".")));
    }
    Ok(cfg)
}

/// Loads every asset named by a TOML configuration. Relative paths resolve
/// against the file's directory unless `SKETCH2FACE_ASSETS` is set.
///
/// # Safety
/// `config_path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn s2f_bundle_load(config_path: *const c_char, out: *mut *mut S2fBundle) -> i32 {
    guard(|| {
        let path = path_arg(config_path, "config_path")?;
        let out = out_ptr(out, "out")?;
        let config = load_config(&path)?;
        let bundle = pipeline::load_bundle(&config)?;
        *out = Box::into_raw(Box::new(S2fBundle { bundle, config }));
        Ok(())
    })
}

/// Inverts the sketch PNG at `sketch_path` and writes the run directory
/// (final.png, losses.csv, snapshots, summary) to `out_dir`.
/// `max_iterations` of 0 keeps the configured value. `final_loss` may be
/// null. A diverged run still writes its directory and returns
/// `S2F_ERR_DIVERGENCE`.
///
/// # Safety
/// `b` must be a live bundle handle; strings must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn s2f_bundle_invert_file(
    b: *const S2fBundle,
    sketch_path: *const c_char,
    out_dir: *const c_char,
    max_iterations: u32,
    final_loss: *mut f64,
) -> i32 {
    guard(|| {
        let b = b.as_ref().ok_or_else(|| null("b"))?;
        let sketch = path_arg(sketch_path, "sketch_path")?;
        let out = path_arg(out_dir, "out_dir")?;
        let mut cfg = b.config.clone();
        if max_iterations > 0 {
            cfg.inversion.max_iterations = max_iterations as usize;
        }
        let run = pipeline::invert_to_dir(&sketch, &b.bundle, &cfg, &out)?;
        if let Some(f) = final_loss.as_mut() {
            *f = run.final_loss.unwrap_or(f64::NAN);
        }
        if run.stop == StopReason::Divergence {
            return Err(Error::Divergence(format!("inversion of {} diverged", sketch.display())).into());
        }
        Ok(())
    })
}

/// # Safety
/// `b` must be null or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn s2f_bundle_free(b: *mut S2fBundle) {
    if !b.is_null() {
        drop(Box::from_raw(b));
    }
}
