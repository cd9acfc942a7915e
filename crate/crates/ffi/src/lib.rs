//! C ABI for actspot.
//!
//! Every fallible function returns an [`ActspotStatus`]. On failure the
//! calling thread's last-error message describes what went wrong and stays
//! available through [`actspot_last_error_message`] until the next failing
//! call on that thread. Handles returned through out-pointers are owned by
//! the caller and must be released with the matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use actspot::data::{ClassVocabulary, FeatureSequence};
use actspot::eval::{average_map, default_deltas, load_eval_inputs};
use actspot::model::{load_checkpoint, SpottingModel};
use actspot::numerics::Matrix;
use actspot::pooling::{netvlad_forward_efficient, ClusterParams};
use actspot::spotting::{dense_actionness, nms, Spot};
use actspot::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActspotStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    Format = 4,
    Io = 5,
    Numeric = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

/// Loaded model plus its class vocabulary.
pub struct ActspotModel {
    model: SpottingModel,
    class_names: Vec<CString>,
}

/// Spots produced by [`actspot_spot_video`].
pub struct ActspotSpotList {
    spots: Vec<Spot>,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActspotModelInfo {
    /// Feature dimension expected per frame.
    pub input_dim: usize,
    /// Frames in one classification window.
    pub window_frames: usize,
    pub action_classes: usize,
    /// Length of the score vector from [`actspot_model_predict_chunk`],
    /// including the background unit when present.
    pub output_classes: usize,
    pub frame_rate: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActspotSpot {
    pub class_index: usize,
    pub position_ms: u64,
    pub confidence: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActspotEvalSummary {
    pub average_map: f64,
    pub visible_average_map: f64,
    pub unshown_average_map: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> ActspotStatus {
    match e {
        Error::Shape { .. } => ActspotStatus::ShapeMismatch,
        Error::NonFinite(_) | Error::NonFiniteLoss { .. } => ActspotStatus::Numeric,
        Error::Format(_) | Error::Json { .. } => ActspotStatus::Format,
        Error::Io { .. } => ActspotStatus::Io,
        _ => ActspotStatus::InvalidArgument,
    }
}

struct Failure(ActspotStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn fail<T>(status: ActspotStatus, message: impl Into<String>) -> Result<T, Failure> {
    Err(Failure(status, message.into()))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> ActspotStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => ActspotStatus::Ok,
        Ok(Err(Failure(status, message))) => {
            set_last_error(message);
            status
        }
        Err(panic) => {
            let message = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("internal panic: {message}"));
            ActspotStatus::Panic
        }
    }
}

fn non_null<'a, T>(ptr: *const T, name: &str) -> Result<&'a T, Failure> {
    // SAFETY: the caller guarantees that a non-null pointer is valid for reads.
    unsafe { ptr.as_ref() }.ok_or_else(|| Failure(ActspotStatus::NullPointer, format!("{name} is null")))
}

fn out_ptr<'a, T>(ptr: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    // SAFETY: the caller guarantees that a non-null pointer is valid for writes.
    unsafe { ptr.as_mut() }.ok_or_else(|| Failure(ActspotStatus::NullPointer, format!("{name} is null")))
}

fn slice<'a>(ptr: *const f64, len: usize, name: &str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return fail(ActspotStatus::NullPointer, format!("{name} is null"));
    }
    // SAFETY: the caller guarantees `len` readable values behind `ptr`.
    Ok(unsafe { std::slice::from_raw_parts(ptr, len) })
}

fn slice_mut<'a>(ptr: *mut f64, len: usize, name: &str) -> Result<&'a mut [f64], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if ptr.is_null() {
        return fail(ActspotStatus::NullPointer, format!("{name} is null"));
    }
    // SAFETY: the caller guarantees `len` writable values behind `ptr`.
    Ok(unsafe { std::slice::from_raw_parts_mut(ptr, len) })
}

fn path_arg(ptr: *const c_char, name: &str) -> Result<PathBuf, Failure> {
    if ptr.is_null() {
        return fail(ActspotStatus::NullPointer, format!("{name} is null"));
    }
    // SAFETY: the caller guarantees a NUL-terminated string.
    let s = unsafe { CStr::from_ptr(ptr) };
    match s.to_str() {
        Ok(s) => Ok(PathBuf::from(s)),
        Err(_) => fail(ActspotStatus::InvalidArgument, format!("{name} is not valid UTF-8")),
    }
}

fn matrix(ptr: *const f64, rows: usize, cols: usize, name: &str) -> Result<Matrix, Failure> {
    let len = rows
        .checked_mul(cols)
        .ok_or_else(|| Failure(ActspotStatus::InvalidArgument, format!("{name}: {rows}x{cols} overflows")))?;
    Ok(Matrix::from_vec(rows, cols, slice(ptr, len, name)?.to_vec())?)
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn actspot_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failure on this thread, or NULL if there was none.
/// The pointer stays valid until the next failing call on this thread or
/// [`actspot_clear_last_error`].
#[no_mangle]
pub extern "C" fn actspot_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

#[no_mangle]
pub extern "C" fn actspot_clear_last_error() {
    LAST_ERROR.with(|slot| *slot.borrow_mut() = None);
}

/// Loads a checkpoint written by `actspot train`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn actspot_model_load(path: *const c_char, out: *mut *mut ActspotModel) -> ActspotStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = std::ptr::null_mut();
        let (model, meta) = load_checkpoint(&path_arg(path, "path")?)?;
        let class_names = meta
            .class_names
            .into_iter()
            .map(|n| CString::new(n).map_err(|_| Failure(ActspotStatus::Format, "class name contains NUL".into())))
            .collect::<Result<_, _>>()?;
        *out = Box::into_raw(Box::new(ActspotModel { model, class_names }));
        Ok(())
    })
}

/// Releases a model. NULL is ignored.
///
/// # Safety
/// `model` must come from [`actspot_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn actspot_model_free(model: *mut ActspotModel) {
    if !model.is_null() {
        // SAFETY: ownership returns from the caller.
        drop(unsafe { Box::from_raw(model) });
    }
}

/// # Safety
/// `model` must be a live handle and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn actspot_model_info(model: *const ActspotModel, out: *mut ActspotModelInfo) -> ActspotStatus {
    guard(|| {
        let config = non_null(model, "model")?.model.config();
        *out_ptr(out, "out")? = ActspotModelInfo {
            input_dim: config.input_dim,
            window_frames: config.window_frames(),
            action_classes: config.action_classes,
            output_classes: config.class_count(),
            frame_rate: config.window.frame_rate,
        };
        Ok(())
    })
}

/// Name of action class `index`, owned by the model handle. NULL when the
/// handle is NULL or the index is out of range.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn actspot_model_class_name(model: *const ActspotModel, index: usize) -> *const c_char {
    // SAFETY: see the function contract.
    match unsafe { model.as_ref() } {
        Some(m) => m.class_names.get(index).map_or(std::ptr::null(), |c| c.as_ptr()),
        None => std::ptr::null(),
    }
}

/// Scores one window of `frames x dim` row-major features into `scores`,
/// which must hold `output_classes` values.
///
/// # Safety
/// `frames` must point to `frames_len * dim` readable values and `scores` to
/// `scores_len` writable values.
#[no_mangle]
pub unsafe extern "C" fn actspot_model_predict_chunk(
    model: *const ActspotModel,
    frames: *const f64,
    frames_len: usize,
    dim: usize,
    scores: *mut f64,
    scores_len: usize,
) -> ActspotStatus {
    guard(|| {
        let model = &non_null(model, "model")?.model;
        let needed = model.config().class_count();
        if scores_len < needed {
            return fail(ActspotStatus::BufferTooSmall, format!("scores needs {needed} values, got {scores_len}"));
        }
        let chunk = matrix(frames, frames_len, dim, "frames")?;
        let prediction = model.predict(&chunk)?;
        slice_mut(scores, scores_len, "scores")?[..needed].copy_from_slice(&prediction.scores);
        Ok(())
    })
}

/// Dense inference plus NMS over a whole video of `frames x dim` features.
/// A NaN `threshold` keeps every spot.
///
/// # Safety
/// `features` must point to `frames * dim` readable values and `out` must be
/// a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn actspot_spot_video(
    model: *const ActspotModel,
    features: *const f64,
    frames: usize,
    dim: usize,
    frame_rate: f64,
    nms_window_s: f64,
    threshold: f64,
    out: *mut *mut ActspotSpotList,
) -> ActspotStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = std::ptr::null_mut();
        let model = &non_null(model, "model")?.model;
        let seq = FeatureSequence::new("video", frame_rate, matrix(features, frames, dim, "features")?)?;
        let curve = dense_actionness(model, &seq)?;
        let spots = nms(&curve, nms_window_s, (!threshold.is_nan()).then_some(threshold))?;
        *out = Box::into_raw(Box::new(ActspotSpotList { spots }));
        Ok(())
    })
}

/// Number of spots; 0 for NULL.
///
/// # Safety
/// `list` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn actspot_spot_list_len(list: *const ActspotSpotList) -> usize {
    // SAFETY: see the function contract.
    unsafe { list.as_ref() }.map_or(0, |l| l.spots.len())
}

/// # Safety
/// `list` must be a live handle and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn actspot_spot_list_get(
    list: *const ActspotSpotList,
    index: usize,
    out: *mut ActspotSpot,
) -> ActspotStatus {
    guard(|| {
        let list = non_null(list, "list")?;
        let Some(s) = list.spots.get(index) else {
            return fail(ActspotStatus::InvalidArgument, format!("index {index} out of range for {} spots", list.spots.len()));
        };
        *out_ptr(out, "out")? =
            ActspotSpot { class_index: s.class_index, position_ms: s.position_ms, confidence: s.confidence };
        Ok(())
    })
}

/// Releases a spot list. NULL is ignored.
///
/// # Safety
/// `list` must come from [`actspot_spot_video`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn actspot_spot_list_free(list: *mut ActspotSpotList) {
    if !list.is_null() {
        // SAFETY: ownership returns from the caller.
        drop(unsafe { Box::from_raw(list) });
    }
}

/// Normalized NetVLAD descriptor of `frames x dim` features with `clusters`
/// clusters. `weights` and `centers` are `clusters x dim`, `biases` has
/// `clusters` values; a NULL `centers` gives NetRVLAD. `out` receives
/// `clusters * dim` values.
///
/// # Safety
/// Every non-NULL pointer must reference the stated number of values.
#[no_mangle]
pub unsafe extern "C" fn actspot_netvlad_pool(
    x: *const f64,
    frames: usize,
    dim: usize,
    weights: *const f64,
    biases: *const f64,
    centers: *const f64,
    clusters: usize,
    out: *mut f64,
    out_len: usize,
) -> ActspotStatus {
    guard(|| {
        let needed = clusters * dim;
        if out_len < needed {
            return fail(ActspotStatus::BufferTooSmall, format!("out needs {needed} values, got {out_len}"));
        }
        let x = matrix(x, frames, dim, "x")?;
        let centers = if centers.is_null() { None } else { Some(matrix(centers, clusters, dim, "centers")?) };
        let params = ClusterParams::new(
            matrix(weights, clusters, dim, "weights")?,
            slice(biases, clusters, "biases")?.to_vec(),
            centers,
        )?;
        let pooled = netvlad_forward_efficient(&x, &params)?;
        slice_mut(out, out_len, "out")?[..needed].copy_from_slice(&pooled.vector);
        Ok(())
    })
}

/// Scores predictions against ground truth over the standard 5..60 s
/// tolerances. `predictions` is a prediction file, a JSON array of such
/// files, or a directory of them; `truth_dir` holds `.labels.json` files.
/// A NULL `classes_json` means `classes.json` next to `truth_dir`.
///
/// # Safety
/// String arguments must be NULL or NUL-terminated, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn actspot_eval_files(
    predictions: *const c_char,
    truth_dir: *const c_char,
    classes_json: *const c_char,
    out: *mut ActspotEvalSummary,
) -> ActspotStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let pred = path_arg(predictions, "predictions")?;
        let truth = path_arg(truth_dir, "truth_dir")?;
        let classes_path = if classes_json.is_null() {
            let truth = truth.canonicalize().map_err(|e| Failure(ActspotStatus::Io, format!("{}: {e}", truth.display())))?;
            truth.parent().unwrap_or(&truth).join(actspot::data::CLASSES_FILE)
        } else {
            path_arg(classes_json, "classes_json")?
        };
        let classes = ClassVocabulary::load(&classes_path)?;
        let videos = load_eval_inputs(&pred, &truth, &classes)?;
        let report = average_map(&videos, &classes, &default_deltas())?;
        *out = ActspotEvalSummary {
            average_map: report.average_map,
            visible_average_map: report.visible.average_map,
            unshown_average_map: report.unshown.average_map,
        };
        Ok(())
    })
}
