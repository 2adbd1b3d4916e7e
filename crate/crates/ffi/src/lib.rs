//! C interface to slefno: dataset access, trained-run inference and the
//! accuracy/forgetting metrics.
//!
//! Every function returns a [`SlefnoStatus`]. On failure a message is kept
//! per thread and can be copied out with [`slefno_last_error`]. Objects are
//! opaque handles released by their `_free` function; passing null to a
//! `_free` function is a no-op.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use slefno::bench::Predictor;
use slefno::metrics::{accuracy_r, rel_l2, EvalMatrix, MetricConfig};
use slefno::ood::Route;
use slefno::taskgen::{Sample, TaskDataset};
use slefno::tensor::GridField;
use slefno::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SlefnoStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Shape = 5,
    Numeric = 6,
    Panic = 7,
    Internal = 8,
}

/// Which half of a dataset to address.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SlefnoSplit {
    Train = 0,
    Test = 1,
}

/// Task argument of [`slefno_predictor_run`] that asks the run's router to
/// pick the task.
pub const SLEFNO_ROUTE: i64 = -1;

/// Written to `routed_task` when the router flags the input as unlike any
/// known task; the prediction then comes from the nearest task.
pub const SLEFNO_NOVEL: i64 = -2;

pub struct SlefnoDataset(TaskDataset);

pub struct SlefnoPredictor(Predictor);

pub struct SlefnoEvalMatrix(EvalMatrix);

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> SlefnoStatus {
    match e {
        Error::Io(_) => SlefnoStatus::Io,
        Error::Version { .. }
        | Error::Checksum { .. }
        | Error::Format(_)
        | Error::Json(_)
        | Error::ResumeMismatch(_) => SlefnoStatus::Format,
        Error::Shape(_) | Error::NotScalar(_) => SlefnoStatus::Shape,
        Error::NonFinite(_) | Error::ZeroNorm(_) => SlefnoStatus::Numeric,
        Error::InvalidArgument(_)
        | Error::UnknownParam(_)
        | Error::EmptyDataset
        | Error::MissingEntries(_)
        | Error::EmptyRouter => SlefnoStatus::InvalidArgument,
        Error::TapeConsumed => SlefnoStatus::Internal,
    }
}

enum Fail {
    Null(&'static str),
    Lib(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail::Lib(Error::InvalidArgument(msg.into()))
}

/// Run `body`, translating errors and panics into a status code.
fn guard(body: impl FnOnce() -> Result<(), Fail>) -> SlefnoStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => SlefnoStatus::Ok,
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("null pointer passed as `{what}`"));
            SlefnoStatus::NullPointer
        }
        Ok(Err(Fail::Lib(e))) => {
            set_error(format!("{}: {e}", e.kind()));
            status_of(&e)
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            SlefnoStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or(Fail::Null(what))
}

unsafe fn out<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or(Fail::Null(what))
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &'static str) -> Result<&'a [f64], Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a>(
    p: *mut f64,
    len: usize,
    what: &'static str,
) -> Result<&'a mut [f64], Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn path(p: *const c_char, what: &'static str) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("`{what}` is not valid UTF-8")))?;
    Ok(PathBuf::from(s))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn slefno_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copy the calling thread's last error message into `buf` (truncated and
/// always NUL-terminated when `len > 0`). Returns the length needed to hold
/// the whole message including the terminator.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn slefno_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        bytes.len() + 1
    })
}

// ------------------------------------------------------------------ metrics

/// Relative L2 error `‖pred − target‖ / ‖target‖` of two arrays of `len` values.
///
/// # Safety
/// `pred` and `target` must point to `len` readable values, `result` to one
/// writable value.
#[no_mangle]
pub unsafe extern "C" fn slefno_rel_l2(
    pred: *const f64,
    target: *const f64,
    len: usize,
    result: *mut f64,
) -> SlefnoStatus {
    guard(|| {
        let p = slice(pred, len, "pred")?;
        let t = slice(target, len, "target")?;
        let r = out(result, "result")?;
        *r = rel_l2(p, t)?;
        Ok(())
    })
}

/// Accuracy `exp(−alpha·rel/l_max)` of a relative error.
///
/// # Safety
/// `result` must point to one writable value.
#[no_mangle]
pub unsafe extern "C" fn slefno_accuracy(
    rel: f64,
    alpha: f64,
    l_max: f64,
    result: *mut f64,
) -> SlefnoStatus {
    guard(|| {
        let r = out(result, "result")?;
        let cfg = MetricConfig {
            alpha,
            l_max,
            ..MetricConfig::default()
        };
        cfg.validate()?;
        if !(rel >= 0.0 && rel.is_finite()) {
            return Err(invalid("relative error must be finite and nonnegative"));
        }
        *r = accuracy_r(rel, &cfg);
        Ok(())
    })
}

/// Empty stage-by-task accuracy matrix for `tasks` tasks.
///
/// # Safety
/// `handle` must point to writable storage for one pointer.
#[no_mangle]
pub unsafe extern "C" fn slefno_eval_matrix_new(
    tasks: usize,
    handle: *mut *mut SlefnoEvalMatrix,
) -> SlefnoStatus {
    guard(|| {
        let h = out(handle, "handle")?;
        if tasks == 0 {
            return Err(invalid("an evaluation matrix needs at least one task"));
        }
        let labels = (0..tasks).map(|i| i.to_string()).collect();
        *h = Box::into_raw(Box::new(SlefnoEvalMatrix(EvalMatrix::new(labels))));
        Ok(())
    })
}

/// Record the accuracy on `task` after training stage `stage` (`task ≤ stage`).
///
/// # Safety
/// `matrix` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn slefno_eval_matrix_set(
    matrix: *mut SlefnoEvalMatrix,
    stage: usize,
    task: usize,
    value: f64,
) -> SlefnoStatus {
    guard(|| {
        out(matrix, "matrix")?.0.set(stage, task, value)?;
        Ok(())
    })
}

/// Mean accuracy over the tasks seen up to `stage`.
///
/// # Safety
/// `matrix` must be a live handle, `result` writable.
#[no_mangle]
pub unsafe extern "C" fn slefno_eval_matrix_avg_accuracy(
    matrix: *const SlefnoEvalMatrix,
    stage: usize,
    result: *mut f64,
) -> SlefnoStatus {
    guard(|| {
        let m = deref(matrix, "matrix")?;
        *out(result, "result")? = m.0.avg_accuracy(stage)?;
        Ok(())
    })
}

/// Forgetting of each earlier task after `stage` (`stage` values written to
/// `per_task`, which must hold at least `stage` entries) and their mean.
///
/// # Safety
/// `matrix` must be a live handle; `per_task` must point to `capacity`
/// writable values and `mean` to one.
#[no_mangle]
pub unsafe extern "C" fn slefno_eval_matrix_forgetting(
    matrix: *const SlefnoEvalMatrix,
    stage: usize,
    per_task: *mut f64,
    capacity: usize,
    mean: *mut f64,
) -> SlefnoStatus {
    guard(|| {
        let m = deref(matrix, "matrix")?;
        let (f, avg) = m.0.forgetting(stage)?;
        if capacity < f.len() {
            return Err(invalid(format!(
                "per_task holds {capacity} values, {} needed",
                f.len()
            )));
        }
        slice_mut(per_task, capacity, "per_task")?[..f.len()].copy_from_slice(&f);
        *out(mean, "mean")? = avg;
        Ok(())
    })
}

/// # Safety
/// `matrix` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn slefno_eval_matrix_free(matrix: *mut SlefnoEvalMatrix) {
    if !matrix.is_null() {
        drop(Box::from_raw(matrix));
    }
}

// ------------------------------------------------------------------ datasets

/// Load a dataset file written by `slefno taskgen`.
///
/// # Safety
/// `file` must be a NUL-terminated string, `handle` writable.
#[no_mangle]
pub unsafe extern "C" fn slefno_dataset_open(
    file: *const c_char,
    handle: *mut *mut SlefnoDataset,
) -> SlefnoStatus {
    guard(|| {
        let h = out(handle, "handle")?;
        let ds = TaskDataset::load(&path(file, "file")?)?;
        *h = Box::into_raw(Box::new(SlefnoDataset(ds)));
        Ok(())
    })
}

fn split_of(ds: &TaskDataset, split: SlefnoSplit) -> &[Sample] {
    match split {
        SlefnoSplit::Train => &ds.train,
        SlefnoSplit::Test => &ds.test,
    }
}

/// Number of samples in one split.
///
/// # Safety
/// `dataset` must be a live handle, `count` writable.
#[no_mangle]
pub unsafe extern "C" fn slefno_dataset_len(
    dataset: *const SlefnoDataset,
    split: SlefnoSplit,
    count: *mut usize,
) -> SlefnoStatus {
    guard(|| {
        let ds = deref(dataset, "dataset")?;
        *out(count, "count")? = split_of(&ds.0, split).len();
        Ok(())
    })
}

/// Channel counts and grid size shared by every sample.
///
/// # Safety
/// `dataset` must be a live handle; the four outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn slefno_dataset_shape(
    dataset: *const SlefnoDataset,
    input_channels: *mut usize,
    target_channels: *mut usize,
    height: *mut usize,
    width: *mut usize,
) -> SlefnoStatus {
    guard(|| {
        let ds = &deref(dataset, "dataset")?.0;
        let s = ds
            .train
            .first()
            .or(ds.test.first())
            .ok_or(Fail::Lib(Error::EmptyDataset))?;
        *out(input_channels, "input_channels")? = s.input.channels();
        *out(target_channels, "target_channels")? = s.target.channels();
        *out(height, "height")? = s.input.height();
        *out(width, "width")? = s.input.width();
        Ok(())
    })
}

/// Copy sample `index` of `split` into caller buffers (channel-major,
/// row-major planes). Buffer lengths must match the sample exactly.
///
/// # Safety
/// `dataset` must be a live handle; `input` and `target` must point to
/// `input_len` and `target_len` writable values.
#[no_mangle]
pub unsafe extern "C" fn slefno_dataset_sample(
    dataset: *const SlefnoDataset,
    split: SlefnoSplit,
    index: usize,
    input: *mut f64,
    input_len: usize,
    target: *mut f64,
    target_len: usize,
) -> SlefnoStatus {
    guard(|| {
        let samples = split_of(&deref(dataset, "dataset")?.0, split);
        let s = samples.get(index).ok_or_else(|| {
            invalid(format!(
                "sample {index} out of range ({} samples)",
                samples.len()
            ))
        })?;
        if input_len != s.input.data().len() || target_len != s.target.data().len() {
            return Err(Fail::Lib(Error::Shape(format!(
                "buffers hold {input_len}/{target_len} values, sample has {}/{}",
                s.input.data().len(),
                s.target.data().len()
            ))));
        }
        slice_mut(input, input_len, "input")?.copy_from_slice(s.input.data());
        slice_mut(target, target_len, "target")?.copy_from_slice(s.target.data());
        Ok(())
    })
}

/// # Safety
/// `dataset` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn slefno_dataset_free(dataset: *mut SlefnoDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

// ------------------------------------------------------------------ inference

/// Open the latest checkpoint of a run directory.
///
/// # Safety
/// `run_dir` must be a NUL-terminated string, `handle` writable.
#[no_mangle]
pub unsafe extern "C" fn slefno_predictor_open(
    run_dir: *const c_char,
    handle: *mut *mut SlefnoPredictor,
) -> SlefnoStatus {
    guard(|| {
        let h = out(handle, "handle")?;
        let p = Predictor::open(&path(run_dir, "run_dir")?)?;
        *h = Box::into_raw(Box::new(SlefnoPredictor(p)));
        Ok(())
    })
}

/// Index of the last trained stage and the model's input/output channels.
///
/// # Safety
/// `predictor` must be a live handle; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn slefno_predictor_info(
    predictor: *const SlefnoPredictor,
    last_stage: *mut usize,
    input_channels: *mut usize,
    output_channels: *mut usize,
) -> SlefnoStatus {
    guard(|| {
        let p = &deref(predictor, "predictor")?.0;
        *out(last_stage, "last_stage")? = p.stage;
        *out(input_channels, "input_channels")? = p.model.config.in_channels;
        *out(output_channels, "output_channels")? = p.model.config.out_channels;
        Ok(())
    })
}

/// Predict the output field for one `[channels, height, width]` input.
/// `task` selects the task for task-aware methods; [`SLEFNO_ROUTE`] lets a
/// routed run choose. The task actually used is written to `routed_task`
/// (or [`SLEFNO_NOVEL`] when the router rejected the input).
///
/// # Safety
/// `predictor` must be a live handle; `input` must point to `input_len`
/// readable values, `output` to `output_len` writable values; `routed_task`
/// may be null.
#[no_mangle]
pub unsafe extern "C" fn slefno_predictor_run(
    predictor: *const SlefnoPredictor,
    input: *const f64,
    input_len: usize,
    height: usize,
    width: usize,
    task: i64,
    output: *mut f64,
    output_len: usize,
    routed_task: *mut i64,
) -> SlefnoStatus {
    guard(|| {
        let p = &deref(predictor, "predictor")?.0;
        let data = slice(input, input_len, "input")?;
        let ci = p.model.config.in_channels;
        if height == 0 || width == 0 || input_len != ci * height * width {
            return Err(Fail::Lib(Error::Shape(format!(
                "input of {input_len} values is not {ci}x{height}x{width}"
            ))));
        }
        let expected = p.model.config.out_channels * height * width;
        if output_len != expected {
            return Err(Fail::Lib(Error::Shape(format!(
                "output buffer holds {output_len} values, {expected} needed"
            ))));
        }
        let task = match task {
            SLEFNO_ROUTE => None,
            t if t >= 0 => Some(t as usize),
            t => return Err(invalid(format!("task index {t} is negative"))),
        };
        let x = GridField::new(ci, height, width, data.to_vec())?;
        let (pred, route) = p.predict(&x, task)?;
        slice_mut(output, output_len, "output")?.copy_from_slice(pred.data());
        if let Some(rt) = routed_task.as_mut() {
            *rt = match (route, task) {
                (Some(Route::Task(t)), _) => t as i64,
                (Some(Route::Novel { .. }), _) => SLEFNO_NOVEL,
                (None, Some(t)) => t as i64,
                (None, None) => SLEFNO_ROUTE,
            };
        }
        Ok(())
    })
}

/// # Safety
/// `predictor` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn slefno_predictor_free(predictor: *mut SlefnoPredictor) {
    if !predictor.is_null() {
        drop(Box::from_raw(predictor));
    }
}
