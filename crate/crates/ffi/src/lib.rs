//! C ABI over the `dcelanm` network.
//!
//! Every function returns a [`DcmStatus`]. On failure a message is kept per
//! thread and can be read with [`dcm_last_error`]. Networks are opaque
//! handles owned by the caller and released with [`dcm_network_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use dcelanm::error::{Error, ErrorClass};
use dcelanm::objective::{metrics, tversky_loss, TverskyParams};
use dcelanm::train::{Checkpoint, RunConfig, Trainer};
use dcelanm::Tensor;

/// Result of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DcmStatus {
    Ok = 0,
    /// Bad argument, shape or configuration.
    Usage = 1,
    /// Unreadable or malformed input data.
    Data = 2,
    /// Checkpoint missing, corrupt or incompatible.
    Checkpoint = 3,
    NullPointer = 4,
    /// A Rust panic was caught at the boundary.
    Internal = 5,
}

/// Opaque network handle.
pub struct DcmNetwork {
    trainer: Trainer,
}

/// Mean scores over the samples of one call.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DcmMetrics {
    pub dice: f64,
    pub iou: f64,
    pub precision: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

fn fail(e: Error) -> DcmStatus {
    set_error(e.to_string());
    match e.class() {
        ErrorClass::Usage => DcmStatus::Usage,
        ErrorClass::Data => DcmStatus::Data,
        ErrorClass::Checkpoint => DcmStatus::Checkpoint,
    }
}

fn null(what: &str) -> DcmStatus {
    set_error(format!("{what} is null"));
    DcmStatus::NullPointer
}

/// Runs `f`, turning errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), DcmStatus>) -> DcmStatus {
    set_error("");
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DcmStatus::Ok,
        Ok(Err(s)) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal error: {msg}"));
            DcmStatus::Internal
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, DcmStatus> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| {
        set_error(format!("{what} is not valid UTF-8"));
        DcmStatus::Usage
    })
}

unsafe fn net_ref<'a>(p: *const DcmNetwork) -> Result<&'a DcmNetwork, DcmStatus> {
    p.as_ref().ok_or_else(|| null("network"))
}

unsafe fn slice<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], DcmStatus> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn mask_tensor(p: *const u8, n: usize, what: &str) -> Result<Tensor<f32>, DcmStatus> {
    let v: Vec<f32> = slice(p, n, what)?.iter().map(|&b| f32::from(u8::from(b != 0))).collect();
    Tensor::from_vec(v, &[1, n]).map_err(fail)
}

fn usage(msg: &str) -> DcmStatus {
    set_error(msg);
    DcmStatus::Usage
}

/// Message for the last failed call on this thread, empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn dcm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dcm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Builds a freshly initialised network. `config` holds `key = value`
/// lines and may be null for the defaults.
///
/// # Safety
/// `config` must be null or a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dcm_network_create(config: *const c_char, out: *mut *mut DcmNetwork) -> DcmStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = if config.is_null() {
            RunConfig::default()
        } else {
            RunConfig::from_text(str_arg(config, "config")?).map_err(fail)?
        };
        let trainer = Trainer::new(cfg).map_err(fail)?;
        *out = Box::into_raw(Box::new(DcmNetwork { trainer }));
        Ok(())
    })
}

/// Loads a network from a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dcm_network_load(path: *const c_char, out: *mut *mut DcmNetwork) -> DcmStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let ck = Checkpoint::load(&PathBuf::from(str_arg(path, "path")?)).map_err(fail)?;
        let trainer = Trainer::resume(&ck).map_err(fail)?;
        *out = Box::into_raw(Box::new(DcmNetwork { trainer }));
        Ok(())
    })
}

/// Writes the network and its training state to `path`.
///
/// # Safety
/// `net` must come from this library; `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn dcm_network_save(net: *const DcmNetwork, path: *const c_char) -> DcmStatus {
    guard(|| {
        let net = net_ref(net)?;
        let path = PathBuf::from(str_arg(path, "path")?);
        net.trainer.checkpoint().and_then(|c| c.save(&path)).map_err(fail)
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `net` must be null or a live handle from this library, freed only once.
#[no_mangle]
pub unsafe extern "C" fn dcm_network_free(net: *mut DcmNetwork) {
    if !net.is_null() {
        drop(Box::from_raw(net));
    }
}

/// Number of trainable scalars.
///
/// # Safety
/// `net` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dcm_network_param_count(net: *const DcmNetwork, out: *mut u64) -> DcmStatus {
    guard(|| {
        let net = net_ref(net)?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = net.trainer.net.param_count() as u64;
        Ok(())
    })
}

/// Side length the network resizes inputs to.
///
/// # Safety
/// `net` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dcm_network_input_side(net: *const DcmNetwork, out: *mut usize) -> DcmStatus {
    guard(|| {
        let net = net_ref(net)?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = net.trainer.cfg.net.input_side;
        Ok(())
    })
}

/// Segments one image. `image` is planar RGB, `3·height·width` floats in
/// `[0, 1]`; `mask` receives `height·width` bytes, 1 for lesion and 0 for
/// background, at the input resolution.
///
/// # Safety
/// Buffers must hold the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn dcm_predict(
    net: *const DcmNetwork,
    image: *const f32,
    height: usize,
    width: usize,
    mask: *mut u8,
) -> DcmStatus {
    guard(|| {
        let net = net_ref(net)?;
        if height == 0 || width == 0 {
            return Err(usage("image must be non-empty"));
        }
        let n = height * width;
        let pixels = slice(image, 3 * n, "image")?.to_vec();
        if mask.is_null() {
            return Err(null("mask"));
        }
        let img = Tensor::from_vec(pixels, &[3, height, width]).map_err(fail)?;
        let pred = net.trainer.predict_image(&img).map_err(fail)?;
        let out = std::slice::from_raw_parts_mut(mask, n);
        for (o, p) in out.iter_mut().zip(pred.data().iter()) {
            *o = u8::from(*p > 0.5);
        }
        Ok(())
    })
}

/// Hard Dice, IoU and precision of `count` masks of `len` bytes each,
/// averaged over masks. Nonzero bytes are foreground.
///
/// # Safety
/// `pred` and `target` must hold `count·len` bytes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dcm_metrics(
    pred: *const u8,
    target: *const u8,
    count: usize,
    len: usize,
    out: *mut DcmMetrics,
) -> DcmStatus {
    guard(|| {
        if count == 0 || len == 0 {
            return Err(usage("count and len must be positive"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let p = mask_tensor(pred, count * len, "pred")?.reshape(&[count, len]).map_err(fail)?;
        let t = mask_tensor(target, count * len, "target")?.reshape(&[count, len]).map_err(fail)?;
        let r = metrics(&p, &t, 0.5, &[]).map_err(fail)?;
        *out = DcmMetrics {
            dice: r.m_dice(),
            iou: r.m_iou(),
            precision: r.m_pre(),
        };
        Ok(())
    })
}

/// Soft Tversky loss `1 − T` of one probability map against a binary mask.
///
/// # Safety
/// `prob` and `target` must hold `len` elements; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dcm_tversky_loss(
    prob: *const f32,
    target: *const u8,
    len: usize,
    alpha: f64,
    beta: f64,
    smooth: f64,
    out: *mut f64,
) -> DcmStatus {
    guard(|| {
        if len == 0 {
            return Err(usage("len must be positive"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let p = Tensor::from_vec(slice(prob, len, "prob")?.to_vec(), &[1, len]).map_err(fail)?;
        let t = mask_tensor(target, len, "target")?;
        let loss = tversky_loss(&p, &t, TverskyParams { alpha, beta, smooth }, None).map_err(fail)?;
        *out = f64::from(loss.item());
        Ok(())
    })
}
