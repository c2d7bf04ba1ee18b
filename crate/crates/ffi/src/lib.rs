//! C interface to `bdiff`.
//!
//! Objects are handed out as opaque pointers and released with the matching
//! `*_free`. Every fallible call returns a [`BdStatus`]; on failure the
//! message is available from [`bd_last_error`] on the same thread until the
//! next failing call. Images are planar `[c,h,w]` arrays of `double`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use bdiff::degrade::{apply, DegradationSpec};
use bdiff::kernels::{make_isotropic, BlurKernel};
use bdiff::mcformer::ModelBundle;
use bdiff::metrics::psnr;
use bdiff::sample::{sample, SamplerConfig};
use bdiff::{Error, RngHandle, Tensor};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BdStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Io = 4,
    Format = 5,
    Numeric = 6,
    Panic = 7,
}

/// Opaque blur kernel.
pub struct BdKernel(BlurKernel);

/// Opaque trained model with its schedule and kernel basis.
pub struct BdModel(ModelBundle);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let clean = msg.replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(clean).expect("no interior nul"));
}

fn status_of(e: &Error) -> BdStatus {
    match e {
        Error::Shape(_) | Error::Broadcast { .. } => BdStatus::Shape,
        Error::InvalidArgument(_) | Error::Config(_) => BdStatus::InvalidArgument,
        Error::NonFinite(_) | Error::NonScalarRoot(_) | Error::TapeConsumed | Error::Check(_) => BdStatus::Numeric,
        Error::Format(_) => BdStatus::Format,
        Error::Io(_) => BdStatus::Io,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (BdStatus, String)>) -> BdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => BdStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            BdStatus::Panic
        }
    }
}

trait OrStatus<T> {
    fn or_status(self) -> Result<T, (BdStatus, String)>;
}

impl<T> OrStatus<T> for bdiff::Result<T> {
    fn or_status(self) -> Result<T, (BdStatus, String)> {
        self.map_err(|e| (status_of(&e), e.to_string()))
    }
}

fn null(what: &str) -> (BdStatus, String) {
    (BdStatus::NullPointer, format!("{what} is null"))
}

unsafe fn path_arg(p: *const c_char) -> Result<String, (BdStatus, String)> {
    if p.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(str::to_owned)
        .map_err(|_| (BdStatus::InvalidArgument, "path is not valid UTF-8".into()))
}

unsafe fn image_arg(data: *const f64, c: usize, h: usize, w: usize) -> Result<Tensor, (BdStatus, String)> {
    if data.is_null() {
        return Err(null("image"));
    }
    let n = c * h * w;
    Tensor::new(&[c, h, w], std::slice::from_raw_parts(data, n).to_vec()).or_status()
}

unsafe fn copy_out(src: &[f64], out: *mut f64, out_len: usize) -> Result<(), (BdStatus, String)> {
    if out.is_null() {
        return Err(null("output buffer"));
    }
    if out_len != src.len() {
        return Err((
            BdStatus::Shape,
            format!("output buffer holds {out_len} values, result has {}", src.len()),
        ));
    }
    std::slice::from_raw_parts_mut(out, out_len).copy_from_slice(src);
    Ok(())
}

/// Message of the last failed call on this thread; empty if none. The
/// pointer stays valid until the next failing call on this thread.
#[no_mangle]
pub extern "C" fn bd_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn bd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Isotropic Gaussian kernel of odd `size` and width `sigma`.
///
/// # Safety
/// `out` must be a valid pointer to write a handle into.
#[no_mangle]
pub unsafe extern "C" fn bd_kernel_isotropic(size: usize, sigma: f64, out: *mut *mut BdKernel) -> BdStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let k = make_isotropic(size, sigma).or_status()?;
        *out = Box::into_raw(Box::new(BdKernel(k)));
        Ok(())
    })
}

/// Reads a BDK1 kernel file.
///
/// # Safety
/// `path` must be a nul-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn bd_kernel_load(path: *const c_char, out: *mut *mut BdKernel) -> BdStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let k = BlurKernel::load(path_arg(path)?).or_status()?;
        *out = Box::into_raw(Box::new(BdKernel(k)));
        Ok(())
    })
}

/// # Safety
/// `kernel` must come from this library; `path` must be nul-terminated.
#[no_mangle]
pub unsafe extern "C" fn bd_kernel_save(kernel: *const BdKernel, path: *const c_char) -> BdStatus {
    guard(|| {
        let k = kernel.as_ref().ok_or_else(|| null("kernel"))?;
        k.0.save(path_arg(path)?).or_status()
    })
}

/// Side length of the kernel, or 0 for a null handle.
///
/// # Safety
/// `kernel` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn bd_kernel_size(kernel: *const BdKernel) -> usize {
    kernel.as_ref().map_or(0, |k| k.0.size())
}

/// Copies the `size*size` row-major weights into `out`.
///
/// # Safety
/// `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn bd_kernel_weights(kernel: *const BdKernel, out: *mut f64, len: usize) -> BdStatus {
    guard(|| {
        let k = kernel.as_ref().ok_or_else(|| null("kernel"))?;
        copy_out(k.0.weights(), out, len)
    })
}

/// # Safety
/// `kernel` must be null or come from this library, and not be used again.
#[no_mangle]
pub unsafe extern "C" fn bd_kernel_free(kernel: *mut BdKernel) {
    if !kernel.is_null() {
        drop(Box::from_raw(kernel));
    }
}

/// `y = (k ⊗ x)↓s + n` with `n ~ N(0, noise_sigma²)` seeded by `seed`.
/// `out` receives `c*(h/s)*(w/s)` values.
///
/// # Safety
/// `x` must hold `c*h*w` doubles and `out` `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn bd_degrade(
    x: *const f64,
    c: usize,
    h: usize,
    w: usize,
    kernel: *const BdKernel,
    scale: usize,
    noise_sigma: f64,
    seed: u64,
    out: *mut f64,
    out_len: usize,
) -> BdStatus {
    guard(|| {
        let k = kernel.as_ref().ok_or_else(|| null("kernel"))?;
        let img = image_arg(x, c, h, w)?;
        let spec = DegradationSpec::new(k.0.clone(), scale, noise_sigma).or_status()?;
        let y = apply(&spec, &img, &mut RngHandle::new(seed)).or_status()?;
        copy_out(y.data(), out, out_len)
    })
}

/// PSNR in dB of two arrays of `len` values, capped at 100.
///
/// # Safety
/// `a` and `b` must hold `len` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bd_psnr(a: *const f64, b: *const f64, len: usize, peak: f64, out: *mut f64) -> BdStatus {
    guard(|| {
        if a.is_null() || b.is_null() || out.is_null() {
            return Err(null("argument"));
        }
        let ta = Tensor::new(&[len], std::slice::from_raw_parts(a, len).to_vec()).or_status()?;
        let tb = Tensor::new(&[len], std::slice::from_raw_parts(b, len).to_vec()).or_status()?;
        *out = psnr(&ta, &tb, peak).or_status()?;
        Ok(())
    })
}

/// Loads a model checkpoint written by `bdiff train`.
///
/// # Safety
/// `path` must be nul-terminated and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn bd_model_load(path: *const c_char, out: *mut *mut BdModel) -> BdStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let bundle = ModelBundle::load(path_arg(path)?).or_status()?;
        *out = Box::into_raw(Box::new(BdModel(bundle)));
        Ok(())
    })
}

/// # Safety
/// `model` must be null or come from this library, and not be used again.
#[no_mangle]
pub unsafe extern "C" fn bd_model_free(model: *mut BdModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Restores an LR image `y [c,h,w]` at scale `s` with guidance weight
/// `lambda`. `out_x` receives `c*(h*s)*(w*s)` values; when `out_kernel`
/// is non-null it receives a new kernel handle.
///
/// # Safety
/// Buffers must have the stated sizes; `model` must come from this library.
#[no_mangle]
pub unsafe extern "C" fn bd_restore(
    model: *const BdModel,
    y: *const f64,
    c: usize,
    h: usize,
    w: usize,
    scale: usize,
    lambda: f64,
    seed: u64,
    out_x: *mut f64,
    out_len: usize,
    out_kernel: *mut *mut BdKernel,
) -> BdStatus {
    guard(|| {
        let m = &model.as_ref().ok_or_else(|| null("model"))?.0;
        let img = image_arg(y, c, h, w)?;
        let cfg = SamplerConfig::with_lambda(lambda, seed);
        let res = sample(&m.model, &m.schedule, &img, scale, &m.pca, &cfg).or_status()?;
        copy_out(res.x0.data(), out_x, out_len)?;
        if !out_kernel.is_null() {
            *out_kernel = Box::into_raw(Box::new(BdKernel(res.kernel)));
        }
        Ok(())
    })
}
