//! C ABI over the `csrda` library.
//!
//! Every function returns a [`CsrdaStatus`]. On failure the calling thread's
//! message is available from [`csrda_last_error`] until the next failing
//! call on that thread. Models are opaque handles created by
//! `csrda_model_new` / `csrda_model_load` and released with
//! `csrda_model_free`. Images are CHW `float` buffers in `[0, 1]`; masks and
//! probability maps are row-major `H·W` buffers.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use csrda::backbone::{forward, Checkpoint, ModelState, SegModel, UNet, UNetConfig};
use csrda::data::ImageTensor;
use csrda::losses::{es_loss, ESConfig};
use csrda::metrics::evaluate_image;
use csrda::stage_a::ema_update;
use csrda::stage_b::{filter_pseudo_label, small_loss_selection};
use csrda::tensor::Plane;
use csrda::Error;

/// Result code of every exported function.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CsrdaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    Io = 4,
    Checkpoint = 5,
    Config = 6,
    NonFinite = 7,
    Internal = 8,
    Panic = 9,
}

/// Opaque model: a U-Net and one parameter set.
pub struct CsrdaModel {
    net: UNet,
    state: ModelState<f32>,
}

/// Metrics of one image. Mirrors the library's per-image report.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CsrdaMetrics {
    pub s_alpha: f64,
    pub f_beta_w: f64,
    pub e_ad: f64,
    pub e_mn: f64,
    pub e_mx: f64,
    pub f_ad: f64,
    pub f_mn: f64,
    pub f_mx: f64,
    pub mae: f64,
}

/// Loss values of the edge-aware saliency-weighted consistency.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CsrdaEsLoss {
    pub ea: f64,
    pub sw: f64,
    pub es: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).expect("nul bytes removed"));
}

struct Failure(CsrdaStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::ShapeMismatch { .. } => CsrdaStatus::ShapeMismatch,
            Error::Io { .. } | Error::MissingDirectory(_) | Error::Image { .. } => CsrdaStatus::Io,
            Error::Checkpoint(_) | Error::Architecture { .. } => CsrdaStatus::Checkpoint,
            Error::Config(_) => CsrdaStatus::Config,
            Error::NonFiniteParameter(_)
            | Error::NonFiniteGradient(_)
            | Error::NonFiniteLoss { .. } => CsrdaStatus::NonFinite,
            Error::OutOfRange { .. } | Error::InvalidMask(_) => CsrdaStatus::InvalidArgument,
            _ => CsrdaStatus::Internal,
        };
        Failure(status, e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(CsrdaStatus::InvalidArgument, msg.into())
}

fn null(name: &str) -> Failure {
    Failure(CsrdaStatus::NullPointer, format!("`{name}` is null"))
}

/// Runs `f`, converting errors and panics into a status plus message.
fn guarded(f: impl FnOnce() -> Result<(), Failure>) -> CsrdaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CsrdaStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {msg}"));
            CsrdaStatus::Panic
        }
    }
}

/// # Safety
/// `ptr` must be null or valid for `len` reads.
unsafe fn slice<'a, T>(ptr: *const T, len: usize, name: &str) -> Result<&'a [T], Failure> {
    if ptr.is_null() {
        return Err(null(name));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

/// # Safety
/// `ptr` must be null or valid for `len` writes.
unsafe fn slice_mut<'a, T>(ptr: *mut T, len: usize, name: &str) -> Result<&'a mut [T], Failure> {
    if ptr.is_null() {
        return Err(null(name));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, len))
}

fn area(height: usize, width: usize) -> Result<usize, Failure> {
    if height == 0 || width == 0 {
        return Err(invalid("height and width must be positive"));
    }
    height
        .checked_mul(width)
        .ok_or_else(|| invalid("height·width overflows"))
}

/// Message of the calling thread's most recent failure; empty if none.
/// The pointer stays valid until the next failing call on this thread.
#[no_mangle]
pub extern "C" fn csrda_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Freshly initialized model.
///
/// # Safety
/// `widths` must point to `n_widths` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn csrda_model_new(
    in_channels: usize,
    widths: *const usize,
    n_widths: usize,
    gn_groups: usize,
    seed: u64,
    out: *mut *mut CsrdaModel,
) -> CsrdaStatus {
    guarded(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let widths = slice(widths, n_widths, "widths")?.to_vec();
        let net = UNet::new(UNetConfig {
            in_channels,
            widths,
            gn_groups,
        })?;
        let state = net.init_state(seed);
        *out = Box::into_raw(Box::new(CsrdaModel { net, state }));
        Ok(())
    })
}

/// Model from a checkpoint file: the teacher when `use_student` is 0, else
/// the student.
///
/// # Safety
/// `path` must be a NUL-terminated UTF-8 string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn csrda_model_load(
    path: *const c_char,
    use_student: i32,
    out: *mut *mut CsrdaModel,
) -> CsrdaStatus {
    guarded(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| invalid("path is not UTF-8"))?;
        let ckpt = Checkpoint::load(Path::new(path))?;
        let state = if use_student != 0 {
            ckpt.student
        } else {
            ckpt.teacher
        };
        let net = UNet::new(UNetConfig::from_architecture_id(&state.architecture_id)?)?;
        net.layout()
            .as_ref()
            .eq(state.layout.as_ref())
            .then_some(())
            .ok_or_else(|| {
                Failure(
                    CsrdaStatus::Checkpoint,
                    "checkpoint layout does not match its architecture".into(),
                )
            })?;
        *out = Box::into_raw(Box::new(CsrdaModel { net, state }));
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn csrda_model_free(model: *mut CsrdaModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn csrda_model_param_count(
    model: *const CsrdaModel,
    out: *mut usize,
) -> CsrdaStatus {
    guarded(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        *out.as_mut().ok_or_else(|| null("out"))? = model.state.param_count();
        Ok(())
    })
}

/// Foreground probabilities for one image.
///
/// # Safety
/// `image` must hold `3·height·width` values and `probabilities`
/// `height·width` writable values.
#[no_mangle]
pub unsafe extern "C" fn csrda_model_predict(
    model: *const CsrdaModel,
    image: *const f32,
    height: usize,
    width: usize,
    probabilities: *mut f32,
) -> CsrdaStatus {
    guarded(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let n = area(height, width)?;
        let pixels = slice(image, 3 * n, "image")?.to_vec();
        let out = slice_mut(probabilities, n, "probabilities")?;
        let image = ImageTensor::new(height, width, pixels)?;
        let pred = forward(&model.net, &model.state, &image)?;
        out.copy_from_slice(&pred.probabilities.data);
        Ok(())
    })
}

/// `teacher ← λ·teacher + (1−λ)·student`, in place. Both handles must share
/// one architecture.
///
/// # Safety
/// Both handles must be live and distinct.
#[no_mangle]
pub unsafe extern "C" fn csrda_ema_update(
    teacher: *mut CsrdaModel,
    student: *const CsrdaModel,
    lambda: f64,
) -> CsrdaStatus {
    guarded(|| {
        if std::ptr::eq(teacher, student) {
            return Err(invalid("teacher and student must be distinct handles"));
        }
        let student = student.as_ref().ok_or_else(|| null("student"))?;
        let teacher = teacher.as_mut().ok_or_else(|| null("teacher"))?;
        teacher.state = ema_update(&teacher.state, &student.state, lambda)?;
        Ok(())
    })
}

/// Full metric suite for one prediction. `gt` is binarized at 0.5.
///
/// # Safety
/// `pred` and `gt` must hold `height·width` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn csrda_evaluate(
    pred: *const f64,
    gt: *const f64,
    height: usize,
    width: usize,
    out: *mut CsrdaMetrics,
) -> CsrdaStatus {
    guarded(|| {
        let n = area(height, width)?;
        let pred = Plane::from_vec(height, width, slice(pred, n, "pred")?.to_vec());
        let gt = Plane::from_vec(height, width, slice(gt, n, "gt")?.to_vec()).map(|v| {
            if v >= 0.5 {
                1.0
            } else {
                0.0
            }
        });
        let m = evaluate_image(&pred, &gt)?;
        *out.as_mut().ok_or_else(|| null("out"))? = CsrdaMetrics {
            s_alpha: m.s_alpha,
            f_beta_w: m.f_beta_w,
            e_ad: m.e_ad,
            e_mn: m.e_mn,
            e_mx: m.e_mx,
            f_ad: m.f_ad,
            f_mn: m.f_mn,
            f_mx: m.f_mx,
            mae: m.mae,
        };
        Ok(())
    })
}

/// Consistency loss between a student and a teacher probability map.
/// `grad` may be null; otherwise it receives `∂es/∂student`.
///
/// # Safety
/// `student` and `teacher` must hold `height·width` values, as must `grad`
/// when non-null; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn csrda_es_loss(
    student: *const f64,
    teacher: *const f64,
    height: usize,
    width: usize,
    alpha: f64,
    beta: f64,
    delta: f64,
    out: *mut CsrdaEsLoss,
    grad: *mut f64,
) -> CsrdaStatus {
    guarded(|| {
        let n = area(height, width)?;
        let s = Plane::from_vec(height, width, slice(student, n, "student")?.to_vec());
        let t = Plane::from_vec(height, width, slice(teacher, n, "teacher")?.to_vec());
        let terms = es_loss(&s, &t, &ESConfig { alpha, beta, delta })?;
        if !grad.is_null() {
            slice_mut(grad, n, "grad")?.copy_from_slice(&terms.grad.data);
        }
        *out.as_mut().ok_or_else(|| null("out"))? = CsrdaEsLoss {
            ea: terms.ea,
            sw: terms.sw,
            es: terms.es,
        };
        Ok(())
    })
}

/// Small-loss selection: `keep[i] = 1` iff `scores[i] ≤ mu · mean(scores)`.
/// `threshold` may be null.
///
/// # Safety
/// `scores` must hold `n` values and `keep` `n` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn csrda_cls_select(
    scores: *const f64,
    n: usize,
    mu: f64,
    keep: *mut u8,
    threshold: *mut f64,
) -> CsrdaStatus {
    guarded(|| {
        if !(mu > 0.0) {
            return Err(invalid("mu must be positive"));
        }
        let scores = slice(scores, n, "scores")?;
        if scores.iter().any(|v| !v.is_finite()) {
            return Err(Failure(
                CsrdaStatus::NonFinite,
                "scores must be finite".into(),
            ));
        }
        let keep = slice_mut(keep, n, "keep")?;
        let (_, t, mask) = small_loss_selection(scores, mu);
        for (k, m) in keep.iter_mut().zip(mask) {
            *k = m as u8;
        }
        if let Some(t_out) = threshold.as_mut() {
            *t_out = t;
        }
        Ok(())
    })
}

/// Pixel filter of a pseudo label: values below `tau` become 0. Writes the
/// filtered map and, through `keep_sample`, whether the sample survives
/// (surviving pixels exist and average at least `tau`).
///
/// # Safety
/// `probabilities` and `filtered` must hold `n` values; `keep_sample` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn csrda_cls_filter(
    probabilities: *const f32,
    n: usize,
    tau: f64,
    filtered: *mut f32,
    keep_sample: *mut u8,
) -> CsrdaStatus {
    guarded(|| {
        if !(0.0..=1.0).contains(&tau) {
            return Err(invalid("tau must lie in [0, 1]"));
        }
        let p = Plane::from_vec(1, n, slice(probabilities, n, "probabilities")?.to_vec());
        let f = filter_pseudo_label(&p, tau);
        let keep = csrda::stage_b::surviving_confidence(&f, tau).is_some_and(|c| c >= tau);
        slice_mut(filtered, n, "filtered")?.copy_from_slice(&f.data);
        *keep_sample.as_mut().ok_or_else(|| null("keep_sample"))? = keep as u8;
        Ok(())
    })
}
