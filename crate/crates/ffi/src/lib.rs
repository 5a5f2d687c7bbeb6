//! C interface to kdmtl.
//!
//! Every function returns a [`KdStatus`]. On failure the thread's last
//! error message is set; read it with [`kd_last_error_message`]. Handles
//! are opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use kdmtl::balancers::frank_wolfe_min_norm;
use kdmtl::data::{gen_scale_clash, load_dataset, save_dataset, MultiTaskDataset, ScaleClashParams};
use kdmtl::losses::distill_loss_value;
use kdmtl::models::{load_checkpoint, ModelBundle};
use kdmtl::pipeline::evaluate;
use kdmtl::tensor::Tensor;
use kdmtl::Error;

/// Bytes needed for a dataset hash: 64 hex digits and a terminating NUL.
pub const KD_HASH_LEN: usize = 65;

/// Iteration cap of [`kd_min_norm`].
pub const KD_MIN_NORM_MAX_ITER: usize = 1000;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KdStatus {
    Ok = 0,
    /// A required pointer was NULL.
    Null = 1,
    InvalidArgument = 2,
    Io = 3,
    /// Malformed dataset or checkpoint file.
    Format = 4,
    Shape = 5,
    /// A feature with (near) zero norm reached the distillation loss.
    Degenerate = 6,
    Divergence = 7,
    Config = 8,
    /// A bug: an unexpected panic or error.
    Internal = 9,
}

/// Dataset handle.
pub struct KdDataset(MultiTaskDataset);

/// Model checkpoint handle.
pub struct KdModel(ModelBundle);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> KdStatus {
    match e {
        Error::Io(_) => KdStatus::Io,
        Error::Format(_) => KdStatus::Format,
        Error::Shape(_) => KdStatus::Shape,
        Error::DegenerateNorm { .. } => KdStatus::Degenerate,
        Error::Divergence(_) => KdStatus::Divergence,
        Error::Config(_) => KdStatus::Config,
        Error::InvalidArgument(_)
        | Error::NonFinite(_)
        | Error::UnknownTask(_)
        | Error::LabelOutOfRange { .. }
        | Error::MissingTeacher(_) => KdStatus::InvalidArgument,
        Error::Frozen | Error::NoAdaptor => KdStatus::Internal,
    }
}

struct Fail(KdStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(KdStatus::Null, format!("`{what}` is NULL"))
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(KdStatus::InvalidArgument, msg.into())
}

/// Runs `f`, turning errors and panics into a status and a message.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> KdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            KdStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal error: {msg}"));
            KdStatus::Internal
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("`{what}` is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

/// Message of the last failed call on this thread, or NULL after a
/// successful one. Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn kd_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Generates the scale-clash dataset with default noise and scale.
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn kd_scale_clash_generate(n: usize, d: usize, seed: u64, out: *mut *mut KdDataset) -> KdStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let ds = gen_scale_clash(&ScaleClashParams::new(n, d, seed))?;
        *out = Box::into_raw(Box::new(KdDataset(ds)));
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn kd_dataset_load(path: *const c_char, out: *mut *mut KdDataset) -> KdStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        let out = out_arg(out, "out")?;
        let ds = load_dataset(&path)?;
        *out = Box::into_raw(Box::new(KdDataset(ds)));
        Ok(())
    })
}

/// # Safety
/// `ds` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn kd_dataset_save(ds: *const KdDataset, path: *const c_char) -> KdStatus {
    guard(|| {
        let ds = ref_arg(ds, "ds")?;
        let path = path_arg(path, "path")?;
        save_dataset(&ds.0, &path)?;
        Ok(())
    })
}

/// # Safety
/// `ds` must be a live handle; `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn kd_dataset_len(ds: *const KdDataset, out: *mut usize) -> KdStatus {
    guard(|| {
        let ds = ref_arg(ds, "ds")?;
        *out_arg(out, "out")? = ds.0.len();
        Ok(())
    })
}

/// Writes the SHA-256 content hash as NUL-terminated hex into `buf`, which
/// must hold at least [`KD_HASH_LEN`] bytes.
///
/// # Safety
/// `ds` must be a live handle; `buf` valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn kd_dataset_hash(ds: *const KdDataset, buf: *mut c_char, len: usize) -> KdStatus {
    guard(|| {
        let ds = ref_arg(ds, "ds")?;
        if buf.is_null() {
            return Err(null("buf"));
        }
        if len < KD_HASH_LEN {
            return Err(invalid(format!("hash buffer of {len} bytes, need {KD_HASH_LEN}")));
        }
        let hex = ds.0.hash();
        let dst = std::slice::from_raw_parts_mut(buf as *mut u8, KD_HASH_LEN);
        dst[..64].copy_from_slice(hex.as_bytes());
        dst[64] = 0;
        Ok(())
    })
}

/// Releases a dataset. NULL is ignored.
///
/// # Safety
/// `ds` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn kd_dataset_free(ds: *mut KdDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn kd_model_load(path: *const c_char, out: *mut *mut KdModel) -> KdStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        let out = out_arg(out, "out")?;
        let m = load_checkpoint(&path)?;
        *out = Box::into_raw(Box::new(KdModel(m)));
        Ok(())
    })
}

/// Releases a model. NULL is ignored.
///
/// # Safety
/// `model` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn kd_model_free(model: *mut KdModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle; `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn kd_model_num_params(model: *const KdModel, out: *mut usize) -> KdStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        *out_arg(out, "out")? = m.0.param_count();
        Ok(())
    })
}

/// Metric of `task` on `ds`: accuracy for classification, mean absolute
/// error for L1 tasks, mean `1 - cos` for cosine tasks.
///
/// # Safety
/// Handles must be live; `task` a NUL-terminated string; `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn kd_model_evaluate(
    model: *const KdModel,
    ds: *const KdDataset,
    task: *const c_char,
    out: *mut f64,
) -> KdStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        let ds = ref_arg(ds, "ds")?;
        let task = path_arg(task, "task")?;
        let task = task.to_string_lossy();
        let out = out_arg(out, "out")?;
        m.0.task(&task)?;
        let metrics = evaluate(&m.0, &ds.0)?;
        *out = *metrics
            .get(task.as_ref())
            .ok_or_else(|| invalid(format!("dataset has no samples for task `{task}`")))?;
        Ok(())
    })
}

/// Distillation loss between `batch` student and teacher feature maps of
/// `features` values each: the batch mean of `||a/|a| - b/|b|||^2`.
///
/// # Safety
/// `student` and `teacher` must each hold `batch * features` values.
#[no_mangle]
pub unsafe extern "C" fn kd_distill_loss(
    student: *const f64,
    teacher: *const f64,
    batch: usize,
    features: usize,
    out: *mut f64,
) -> KdStatus {
    guard(|| {
        let len = batch
            .checked_mul(features)
            .filter(|&l| l > 0)
            .ok_or_else(|| invalid("batch and features must be positive"))?;
        let a = slice_arg(student, len, "student")?;
        let b = slice_arg(teacher, len, "teacher")?;
        let out = out_arg(out, "out")?;
        let ta = Tensor::new(vec![batch, features, 1, 1], a.to_vec(), false)?;
        let tb = Tensor::new(vec![batch, features, 1, 1], b.to_vec(), false)?;
        *out = distill_loss_value(&ta, &tb)?;
        Ok(())
    })
}

/// Minimum-norm point in the convex hull of `tasks` gradients of `dim`
/// values each, stored row by row. Writes the `tasks` simplex weights and,
/// when `objective` is not NULL, the squared norm of the combination.
///
/// # Safety
/// `grads` must hold `tasks * dim` values and `weights` room for `tasks`.
#[no_mangle]
pub unsafe extern "C" fn kd_min_norm(
    grads: *const f64,
    tasks: usize,
    dim: usize,
    tol: f64,
    weights: *mut f64,
    objective: *mut f64,
) -> KdStatus {
    guard(|| {
        if tasks == 0 || dim == 0 {
            return Err(invalid("tasks and dim must be positive"));
        }
        if !(tol >= 0.0 && tol.is_finite()) {
            return Err(invalid(format!("tolerance {tol} must be finite and >= 0")));
        }
        let len = tasks.checked_mul(dim).ok_or_else(|| invalid("tasks * dim overflows"))?;
        let g = slice_arg(grads, len, "grads")?;
        if weights.is_null() {
            return Err(null("weights"));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(invalid("gradients must be finite"));
        }
        let rows: Vec<Vec<f64>> = g.chunks(dim).map(<[f64]>::to_vec).collect();
        let sol = frank_wolfe_min_norm(&rows, KD_MIN_NORM_MAX_ITER, tol)?;
        std::slice::from_raw_parts_mut(weights, tasks).copy_from_slice(&sol.weights);
        if let Some(o) = objective.as_mut() {
            *o = sol.objective.last().copied().unwrap_or(f64::NAN);
        }
        Ok(())
    })
}
