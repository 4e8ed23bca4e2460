//! C interface to the compressor pipeline and the damped FIM solver.
//!
//! Every function returns a [`GrassStatus`]; on failure a message is kept
//! per thread and read back with [`grass_last_error`]. Handles are opaque
//! and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use grass::attribution::FimState;
use grass::compressor::{parse_compressor, Compressor};
use grass::{Error, GradientVector};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GrassStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Parse = 3,
    DimensionMismatch = 4,
    Numerical = 5,
    Io = 6,
    FingerprintMismatch = 7,
    Panic = 8,
}

/// Compressor built from a pipeline spec such as
/// `mask:k=512,seed=1+sjlt:k=128,seed=2`.
pub struct GrassCompressor(Compressor);

/// Running FIM sum with a cached damped factorization.
pub struct GrassFim(FimState);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> GrassStatus {
    match e {
        Error::Parse { .. } | Error::Config(_) => GrassStatus::Parse,
        Error::DimensionMismatch { .. } => GrassStatus::DimensionMismatch,
        Error::Numerical(_) | Error::Factorization { .. } | Error::Divergence { .. } => GrassStatus::Numerical,
        Error::Io { .. } | Error::Format { .. } => GrassStatus::Io,
        Error::FingerprintMismatch { .. } => GrassStatus::FingerprintMismatch,
        _ => GrassStatus::InvalidArgument,
    }
}

/// Runs `f`, turning errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), (GrassStatus, String)>) -> GrassStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => GrassStatus::Ok,
        Ok(Err((status, message))) => {
            set_error(message);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            GrassStatus::Panic
        }
    }
}

fn lib<T>(r: grass::Result<T>) -> Result<T, (GrassStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (GrassStatus, String) {
    (GrassStatus::NullPointer, format!("{what} is null"))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], (GrassStatus, String)> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], (GrassStatus, String)> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

fn check_len(expected: usize, got: usize, what: &str) -> Result<(), (GrassStatus, String)> {
    if expected == got {
        Ok(())
    } else {
        Err((
            GrassStatus::DimensionMismatch,
            format!("{what}: expected length {expected}, got {got}"),
        ))
    }
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn grass_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn grass_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Builds a compressor for gradients of length `input_dim`.
///
/// # Safety
/// `spec` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn grass_compressor_new(
    spec: *const c_char,
    input_dim: usize,
    out: *mut *mut GrassCompressor,
) -> GrassStatus {
    guard(|| {
        if spec.is_null() {
            return Err(null("spec"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let text = CStr::from_ptr(spec)
            .to_str()
            .map_err(|_| (GrassStatus::InvalidArgument, "spec is not UTF-8".to_string()))?;
        let compressor = lib(lib(parse_compressor(text))?.build(input_dim, None))?;
        *out = Box::into_raw(Box::new(GrassCompressor(compressor)));
        Ok(())
    })
}

/// # Safety
/// `handle` must come from [`grass_compressor_new`] and not be used again.
#[no_mangle]
pub unsafe extern "C" fn grass_compressor_free(handle: *mut GrassCompressor) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// # Safety
/// `handle` must be a live compressor handle.
#[no_mangle]
pub unsafe extern "C" fn grass_compressor_input_dim(handle: *const GrassCompressor) -> usize {
    handle.as_ref().map_or(0, |h| h.0.input_dim())
}

/// # Safety
/// `handle` must be a live compressor handle.
#[no_mangle]
pub unsafe extern "C" fn grass_compressor_output_dim(handle: *const GrassCompressor) -> usize {
    handle.as_ref().map_or(0, |h| h.0.output_dim())
}

/// Copies the 32-byte fingerprint into `out`.
///
/// # Safety
/// `out` must point to 32 writable bytes.
#[no_mangle]
pub unsafe extern "C" fn grass_compressor_fingerprint(handle: *const GrassCompressor, out: *mut u8) -> GrassStatus {
    guard(|| {
        let h = handle.as_ref().ok_or_else(|| null("handle"))?;
        slice_mut(out, 32, "out")?.copy_from_slice(&h.0.fingerprint());
        Ok(())
    })
}

/// Compresses a dense f32 gradient of length `len` into `out`, which must
/// hold `out_len == output_dim` values.
///
/// # Safety
/// `g` and `out` must be valid for `len` and `out_len` elements.
#[no_mangle]
pub unsafe extern "C" fn grass_compressor_compress_f32(
    handle: *const GrassCompressor,
    g: *const f32,
    len: usize,
    out: *mut f32,
    out_len: usize,
) -> GrassStatus {
    guard(|| {
        let h = handle.as_ref().ok_or_else(|| null("handle"))?;
        let g = slice(g, len, "g")?;
        check_len(h.0.output_dim(), out_len, "out")?;
        let out = slice_mut(out, out_len, "out")?;
        let v = lib(h.0.compress(&GradientVector::Dense(g.to_vec())))?;
        out.copy_from_slice(&v);
        Ok(())
    })
}

/// f64 variant of [`grass_compressor_compress_f32`].
///
/// # Safety
/// As for the f32 variant.
#[no_mangle]
pub unsafe extern "C" fn grass_compressor_compress_f64(
    handle: *const GrassCompressor,
    g: *const f64,
    len: usize,
    out: *mut f64,
    out_len: usize,
) -> GrassStatus {
    guard(|| {
        let h = handle.as_ref().ok_or_else(|| null("handle"))?;
        let g = slice(g, len, "g")?;
        check_len(h.0.output_dim(), out_len, "out")?;
        let out = slice_mut(out, out_len, "out")?;
        let v = lib(h.0.compress(&GradientVector::Dense(g.to_vec())))?;
        out.copy_from_slice(&v);
        Ok(())
    })
}

/// Empty `k x k` FIM accumulator.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn grass_fim_new(k: usize, out: *mut *mut GrassFim) -> GrassStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        if k == 0 {
            return Err((GrassStatus::InvalidArgument, "k must be positive".into()));
        }
        *out = Box::into_raw(Box::new(GrassFim(FimState::new(k))));
        Ok(())
    })
}

/// # Safety
/// `handle` must come from [`grass_fim_new`] and not be used again.
#[no_mangle]
pub unsafe extern "C" fn grass_fim_free(handle: *mut GrassFim) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Number of accumulated gradients.
///
/// # Safety
/// `handle` must be a live FIM handle.
#[no_mangle]
pub unsafe extern "C" fn grass_fim_count(handle: *const GrassFim) -> u64 {
    handle.as_ref().map_or(0, |h| h.0.count())
}

/// Adds `g g^T`; invalidates any cached factorization.
///
/// # Safety
/// `g` must be valid for `len` elements.
#[no_mangle]
pub unsafe extern "C" fn grass_fim_accumulate_f32(handle: *mut GrassFim, g: *const f32, len: usize) -> GrassStatus {
    guard(|| {
        let h = handle.as_mut().ok_or_else(|| null("handle"))?;
        lib(h.0.accumulate(slice(g, len, "g")?))
    })
}

/// Factorizes `F + damping I`, with `F` the mean of the accumulated
/// outer products.
///
/// # Safety
/// `handle` must be a live FIM handle.
#[no_mangle]
pub unsafe extern "C" fn grass_fim_factorize(handle: *mut GrassFim, damping: f64) -> GrassStatus {
    guard(|| {
        let h = handle.as_mut().ok_or_else(|| null("handle"))?;
        lib(h.0.factorize(damping))
    })
}

/// Solves `(F + damping I) x = g` with the cached factorization; `damping`
/// must match the last [`grass_fim_factorize`] call.
///
/// # Safety
/// `g` and `out` must be valid for `len` elements each.
#[no_mangle]
pub unsafe extern "C" fn grass_fim_ifvp(
    handle: *const GrassFim,
    damping: f64,
    g: *const f64,
    len: usize,
    out: *mut f64,
) -> GrassStatus {
    guard(|| {
        let h = handle.as_ref().ok_or_else(|| null("handle"))?;
        check_len(h.0.dim(), len, "g")?;
        let x = lib(h.0.ifvp(damping, slice(g, len, "g")?))?;
        slice_mut(out, len, "out")?.copy_from_slice(&x);
        Ok(())
    })
}
