//! C interface to the anchornet crate.
//!
//! Every function returns an [`AnStatus`]. On failure the message is kept per
//! thread and can be copied out with [`an_last_error`]. Handles are opaque and
//! must be released with their matching `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use anchornet::io::weights::{load_anchornet, load_downstream};
use anchornet::model::{AnchorNetModel, DownstreamModel};
use anchornet::pipeline::{Pipeline, ThresholdSchedule};
use anchornet::rf::{PatchBox, RfState};
use anchornet::select::{iou, select_patches, Cam, SelectionConfig};
use anchornet::{Error, Shape, Tensor};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    RfConstraint = 4,
    OutOfGrid = 5,
    BufferTooSmall = 6,
    Format = 7,
    Io = 8,
    Thresholds = 9,
    InfeasibleBudget = 10,
    Internal = 11,
    Panic = 12,
}

impl From<&Error> for AnStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Shape(_) => AnStatus::ShapeMismatch,
            Error::RfConstraint { .. } => AnStatus::RfConstraint,
            Error::OutOfGrid { .. } | Error::BoxOutOfBounds(_) => AnStatus::OutOfGrid,
            Error::Invalid(_) => AnStatus::InvalidArgument,
            Error::Thresholds { .. } => AnStatus::Thresholds,
            Error::InfeasibleBudget { .. } => AnStatus::InfeasibleBudget,
            Error::Format { .. } => AnStatus::Format,
            Error::Io { .. } => AnStatus::Io,
            _ => AnStatus::Internal,
        }
    }
}

/// A box in pixel coordinates.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AnBox {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl From<PatchBox> for AnBox {
    fn from(b: PatchBox) -> Self {
        AnBox {
            top: b.top,
            left: b.left,
            height: b.height,
            width: b.width,
        }
    }
}

impl From<AnBox> for PatchBox {
    fn from(b: AnBox) -> Self {
        PatchBox::new(b.top, b.left, b.height, b.width)
    }
}

/// Outcome of one sequential inference.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AnTrace {
    pub exit_stage: usize,
    pub predicted_class: usize,
    pub confidence: f64,
    pub flops_spent: u64,
}

pub struct AnRfState(RfState);
pub struct AnAnchorNet(AnchorNetModel);
pub struct AnDownstream(DownstreamModel);
pub struct AnPipeline(Pipeline);

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

struct Fail(AnStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(AnStatus::from(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(AnStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> AnStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            AnStatus::Ok
        }
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("panic inside anchornet".into());
            AnStatus::Panic
        }
    }
}

unsafe fn get<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn put<T>(out: *mut T, value: T, what: &str) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null(what));
    }
    out.write(value);
    Ok(())
}

unsafe fn path<'a>(p: *const c_char) -> Result<&'a Path, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(Path::new)
        .map_err(|_| Fail(AnStatus::InvalidArgument, "path is not valid UTF-8".into()))
}

unsafe fn image(pixels: *const f32, height: usize, width: usize) -> Result<Tensor<f32>, Fail> {
    let data = slice(pixels, 3 * height * width, "pixels")?;
    Ok(Tensor::from_vec(Shape::new(1, 3, height, width), data.to_vec())?)
}

unsafe fn write_probs(probs: &[f64], out: *mut f64, capacity: usize) -> Result<(), Fail> {
    if capacity < probs.len() {
        return Err(Fail(
            AnStatus::BufferTooSmall,
            format!("{} classes need a larger buffer than {capacity}", probs.len()),
        ));
    }
    if out.is_null() {
        return Err(null("probabilities"));
    }
    ptr::copy_nonoverlapping(probs.as_ptr(), out, probs.len());
    Ok(())
}

/// Copies the last error message of this thread into `buf` as a NUL
/// terminated string, truncating if needed. Returns the full message length.
///
/// # Safety
/// `buf` must be null or point to at least `capacity` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn an_last_error(buf: *mut c_char, capacity: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && capacity > 0 {
            let n = msg.len().min(capacity - 1);
            ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Builds the receptive-field state of a stack of padding-free layers.
///
/// # Safety
/// `kernels` and `strides` must each hold `count` values; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn an_rf_new(
    kernels: *const usize,
    strides: *const usize,
    count: usize,
    out: *mut *mut AnRfState,
) -> AnStatus {
    guard(|| {
        let k = slice(kernels, count, "kernels")?;
        let s = slice(strides, count, "strides")?;
        let layers: Vec<(usize, usize)> = k.iter().copied().zip(s.iter().copied()).collect();
        let state = RfState::from_layers(&layers)?;
        put(out, Box::into_raw(Box::new(AnRfState(state))), "out")
    })
}

/// # Safety
/// `state` must come from [`an_rf_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn an_rf_free(state: *mut AnRfState) {
    if !state.is_null() {
        drop(Box::from_raw(state));
    }
}

/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn an_rf_get(state: *const AnRfState, rf: *mut usize, stride: *mut usize) -> AnStatus {
    guard(|| {
        let st = &get(state, "state")?.0;
        put(rf, st.rf(), "rf")?;
        put(stride, st.stride(), "stride")
    })
}

/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn an_rf_num_locations(
    state: *const AnRfState,
    height: usize,
    width: usize,
    rows: *mut usize,
    cols: *mut usize,
) -> AnStatus {
    guard(|| {
        let (r, c) = get(state, "state")?.0.num_locations((height, width))?;
        put(rows, r, "rows")?;
        put(cols, c, "cols")
    })
}

/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn an_rf_map_location(
    state: *const AnRfState,
    row: usize,
    col: usize,
    height: usize,
    width: usize,
    out: *mut AnBox,
) -> AnStatus {
    guard(|| {
        let b = get(state, "state")?.0.map_location((row, col), (height, width))?;
        put(out, b.into(), "out")
    })
}

/// Intersection over union of two boxes; 0 when either pointer is null.
///
/// # Safety
/// Non-null pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn an_iou(a: *const AnBox, b: *const AnBox) -> f64 {
    match (a.as_ref(), b.as_ref()) {
        (Some(a), Some(b)) => iou(&(*a).into(), &(*b).into()),
        _ => 0.0,
    }
}

/// Greedy patch selection on a row-major `rows` x `cols` activation map.
/// Writes at most `capacity` boxes and stores how many were chosen in `count`.
///
/// # Safety
/// `cam` must hold `rows * cols` values and `out` room for `capacity` boxes.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn an_select_patches(
    cam: *const f64,
    rows: usize,
    cols: usize,
    state: *const AnRfState,
    height: usize,
    width: usize,
    iou_threshold: f64,
    max_patches: usize,
    out: *mut AnBox,
    capacity: usize,
    count: *mut usize,
) -> AnStatus {
    guard(|| {
        let values = slice(cam, rows * cols, "cam")?.to_vec();
        let cam = Cam::new(values, rows, cols, 0)?;
        let cfg = SelectionConfig {
            iou_threshold,
            max_patches,
        };
        let chosen = select_patches(&cam, &get(state, "state")?.0, (height, width), &cfg)?;
        if chosen.len() > capacity {
            return Err(Fail(AnStatus::BufferTooSmall, format!("{} boxes chosen, room for {capacity}", chosen.len())));
        }
        for (i, p) in chosen.iter().enumerate() {
            put(out.add(i), p.patch.into(), "out")?;
        }
        put(count, chosen.len(), "count")
    })
}

/// Loads a proposal network from a weight file.
///
/// # Safety
/// `path` must be a NUL terminated string and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn an_anchornet_load(path_: *const c_char, out: *mut *mut AnAnchorNet) -> AnStatus {
    guard(|| {
        let m = load_anchornet(path(path_)?)?;
        put(out, Box::into_raw(Box::new(AnAnchorNet(m))), "out")
    })
}

/// # Safety
/// `model` must come from [`an_anchornet_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn an_anchornet_free(model: *mut AnAnchorNet) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn an_anchornet_num_classes(model: *const AnAnchorNet, out: *mut usize) -> AnStatus {
    guard(|| put(out, get(model, "model")?.0.num_classes(), "out"))
}

/// Class probabilities for one planar RGB image with values in [0, 1].
///
/// # Safety
/// `pixels` must hold `3 * height * width` floats and `probs` `capacity` doubles.
#[no_mangle]
pub unsafe extern "C" fn an_anchornet_classify(
    model: *const AnAnchorNet,
    pixels: *const f32,
    height: usize,
    width: usize,
    probs: *mut f64,
    capacity: usize,
) -> AnStatus {
    guard(|| {
        let m = &get(model, "model")?.0;
        let p = m.classify(&image(pixels, height, width)?)?;
        write_probs(&p[0], probs, capacity)
    })
}

/// Loads a downstream classifier from a weight file.
///
/// # Safety
/// `path` must be a NUL terminated string and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn an_downstream_load(path_: *const c_char, out: *mut *mut AnDownstream) -> AnStatus {
    guard(|| {
        let m = load_downstream(path(path_)?)?;
        put(out, Box::into_raw(Box::new(AnDownstream(m))), "out")
    })
}

/// # Safety
/// `model` must come from [`an_downstream_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn an_downstream_free(model: *mut AnDownstream) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// Same contract as [`an_anchornet_classify`].
#[no_mangle]
pub unsafe extern "C" fn an_downstream_classify(
    model: *const AnDownstream,
    pixels: *const f32,
    height: usize,
    width: usize,
    probs: *mut f64,
    capacity: usize,
) -> AnStatus {
    guard(|| {
        let m = &get(model, "model")?.0;
        let p = m.classify(&image(pixels, height, width)?)?;
        write_probs(&p[0], probs, capacity)
    })
}

/// Loads the three networks of a sequential pipeline.
///
/// # Safety
/// Paths must be NUL terminated strings and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn an_pipeline_load(
    anchornet: *const c_char,
    global: *const c_char,
    local: *const c_char,
    iou_threshold: f64,
    max_patches: usize,
    out: *mut *mut AnPipeline,
) -> AnStatus {
    guard(|| {
        let selection = SelectionConfig {
            iou_threshold,
            max_patches,
        };
        selection.validate()?;
        let p = Pipeline {
            anchornet: load_anchornet(path(anchornet)?)?,
            f_global: load_downstream(path(global)?)?,
            f_local: load_downstream(path(local)?)?,
            selection,
        };
        put(out, Box::into_raw(Box::new(AnPipeline(p))), "out")
    })
}

/// # Safety
/// `pipeline` must come from [`an_pipeline_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn an_pipeline_free(pipeline: *mut AnPipeline) {
    if !pipeline.is_null() {
        drop(Box::from_raw(pipeline));
    }
}

/// Maximum sequence length, which is also the number of thresholds needed
/// minus one.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn an_pipeline_stages(pipeline: *const AnPipeline, out: *mut usize) -> AnStatus {
    guard(|| put(out, get(pipeline, "pipeline")?.0.stages(), "out"))
}

/// Sequential inference with early exit. `thresholds` holds one value per
/// stage except the last.
///
/// # Safety
/// `pixels` must hold `3 * height * width` floats, `thresholds` `count`
/// doubles, and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn an_pipeline_infer(
    pipeline: *const AnPipeline,
    pixels: *const f32,
    height: usize,
    width: usize,
    thresholds: *const f64,
    count: usize,
    out: *mut AnTrace,
) -> AnStatus {
    guard(|| {
        let p = &get(pipeline, "pipeline")?.0;
        let th = ThresholdSchedule::new(slice(thresholds, count, "thresholds")?.to_vec());
        let trace = p.infer(&image(pixels, height, width)?, &th)?;
        let confidence = trace.confidences.last().copied().unwrap_or(0.0);
        let result = AnTrace {
            exit_stage: trace.exit_stage,
            predicted_class: trace.predicted_class,
            confidence,
            flops_spent: trace.flops_spent,
        };
        put(out, result, "out")
    })
}
