//! C ABI over the eventdiff library.
//!
//! Conventions: opaque handles created/freed by paired functions, status
//! codes for every fallible call, caller-allocated output buffers with
//! explicit lengths, and a thread-local message for the last error
//! (retrieve with [`ed_last_error_message`]).

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::path::Path;

use ndarray::Array3;

use eventdiff::error::Error;
use eventdiff::event::{io as event_io, scer, split_events, voxelize, Event, EventStream, SplitPolicy};
use eventdiff::train::infer::{deblur, interpolate};
use eventdiff::train::metrics::{psnr, ssim};
use eventdiff::train::{load_stage2_checkpoint, Stage2Model};

/// Status codes returned by every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdStatus {
    EdOk = 0,
    /// An argument violated a documented precondition.
    EdErrDomain = 1,
    /// Configuration mismatch (e.g. wrong checkpoint kind).
    EdErrConfig = 2,
    /// Malformed serialized container.
    EdErrFormat = 3,
    EdErrIo = 4,
    EdErrNullPointer = 5,
    EdErrUtf8 = 6,
    /// Output buffer has the wrong length.
    EdErrBufferSize = 7,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_from(err: &Error) -> EdStatus {
    set_error(err.to_string());
    match err {
        Error::Domain(_) => EdStatus::EdErrDomain,
        Error::Config(_) => EdStatus::EdErrConfig,
        Error::Format(_) => EdStatus::EdErrFormat,
        Error::Io(_) => EdStatus::EdErrIo,
    }
}

/// Copy the last error message (NUL-terminated, truncated to `len`).
///
/// # Safety
/// `buf` must point to at least `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn ed_last_error_message(buf: *mut c_char, len: usize) {
    if buf.is_null() || len == 0 {
        return;
    }
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        let n = bytes.len().min(len - 1);
        std::ptr::copy_nonoverlapping(bytes.as_ptr(), buf as *mut u8, n);
        *buf.add(n) = 0;
    });
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ed_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

unsafe fn path_from(ptr: *const c_char) -> Result<&'static Path, EdStatus> {
    if ptr.is_null() {
        set_error("null path");
        return Err(EdStatus::EdErrNullPointer);
    }
    match CStr::from_ptr(ptr).to_str() {
        Ok(s) => Ok(Path::new(s)),
        Err(_) => {
            set_error("path is not valid utf-8");
            Err(EdStatus::EdErrUtf8)
        }
    }
}

// ---------------------------------------------------------------------------
// Event streams
// ---------------------------------------------------------------------------

/// Opaque event-stream handle.
pub struct EdEventStream {
    inner: EventStream,
}

/// Build a stream from columnar arrays (each `count` long). Events must be
/// sorted by timestamp and lie inside the window and sensor bounds.
///
/// # Safety
/// The four array pointers must each reference `count` readable elements;
/// `out` must be a valid destination pointer.
#[no_mangle]
pub unsafe extern "C" fn ed_stream_create(
    xs: *const u16,
    ys: *const u16,
    polarities: *const i8,
    timestamps: *const f64,
    count: usize,
    width: u16,
    height: u16,
    t_start: f64,
    t_end: f64,
    out: *mut *mut EdEventStream,
) -> EdStatus {
    if out.is_null() || (count > 0 && (xs.is_null() || ys.is_null() || polarities.is_null() || timestamps.is_null())) {
        set_error("null pointer argument");
        return EdStatus::EdErrNullPointer;
    }
    let events: Vec<Event> = (0..count)
        .map(|i| Event {
            x: *xs.add(i),
            y: *ys.add(i),
            polarity: *polarities.add(i),
            t: *timestamps.add(i),
        })
        .collect();
    match EventStream::new(events, t_start, t_end, width, height) {
        Ok(stream) => {
            *out = Box::into_raw(Box::new(EdEventStream { inner: stream }));
            EdStatus::EdOk
        }
        Err(e) => status_from(&e),
    }
}

/// # Safety
/// `stream` must be a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ed_stream_free(stream: *mut EdEventStream) {
    if !stream.is_null() {
        drop(Box::from_raw(stream));
    }
}

/// # Safety
/// `stream` must be a valid handle.
#[no_mangle]
pub unsafe extern "C" fn ed_stream_len(stream: *const EdEventStream) -> usize {
    if stream.is_null() {
        return 0;
    }
    (*stream).inner.len()
}

/// Split at time `t`: events strictly before keep their polarity, events
/// strictly after are negated; ties are dropped.
///
/// # Safety
/// `stream` must be valid; `out_before`/`out_after` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ed_stream_split(
    stream: *const EdEventStream,
    t: f64,
    out_before: *mut *mut EdEventStream,
    out_after: *mut *mut EdEventStream,
) -> EdStatus {
    if stream.is_null() || out_before.is_null() || out_after.is_null() {
        set_error("null pointer argument");
        return EdStatus::EdErrNullPointer;
    }
    match split_events(&(*stream).inner, t, SplitPolicy::Drop) {
        Ok((a, b)) => {
            *out_before = Box::into_raw(Box::new(EdEventStream { inner: a }));
            *out_after = Box::into_raw(Box::new(EdEventStream { inner: b }));
            EdStatus::EdOk
        }
        Err(e) => status_from(&e),
    }
}

/// Write the stream to the columnar container format.
///
/// # Safety
/// `stream` must be valid; `path` a NUL-terminated UTF-8 string.
#[no_mangle]
pub unsafe extern "C" fn ed_stream_save(
    stream: *const EdEventStream,
    path: *const c_char,
) -> EdStatus {
    if stream.is_null() {
        set_error("null stream");
        return EdStatus::EdErrNullPointer;
    }
    let path = match path_from(path) {
        Ok(p) => p,
        Err(s) => return s,
    };
    match event_io::save_stream(path, &(*stream).inner) {
        Ok(()) => EdStatus::EdOk,
        Err(e) => status_from(&e),
    }
}

/// # Safety
/// `path` must be a NUL-terminated UTF-8 string; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ed_stream_load(
    path: *const c_char,
    out: *mut *mut EdEventStream,
) -> EdStatus {
    if out.is_null() {
        set_error("null output pointer");
        return EdStatus::EdErrNullPointer;
    }
    let path = match path_from(path) {
        Ok(p) => p,
        Err(s) => return s,
    };
    match event_io::load_stream(path) {
        Ok(stream) => {
            *out = Box::into_raw(Box::new(EdEventStream { inner: stream }));
            EdStatus::EdOk
        }
        Err(e) => status_from(&e),
    }
}

fn write_grid(
    grid: eventdiff::event::VoxelGrid,
    out: *mut f32,
    out_len: usize,
) -> EdStatus {
    let data = grid.data.as_slice().unwrap();
    if out_len != data.len() {
        set_error(format!(
            "output buffer holds {out_len} floats, grid needs {}",
            data.len()
        ));
        return EdStatus::EdErrBufferSize;
    }
    unsafe { std::ptr::copy_nonoverlapping(data.as_ptr(), out, data.len()) };
    EdStatus::EdOk
}

/// Rasterize into a standard voxel grid `(bins, 2, h, w)`, row-major into
/// `out` (`out_len` must equal `bins*2*h*w`).
///
/// # Safety
/// `stream` must be valid; `out` must reference `out_len` writable floats.
#[no_mangle]
pub unsafe extern "C" fn ed_voxelize(
    stream: *const EdEventStream,
    bins: usize,
    h: usize,
    w: usize,
    out: *mut f32,
    out_len: usize,
) -> EdStatus {
    if stream.is_null() || out.is_null() {
        set_error("null pointer argument");
        return EdStatus::EdErrNullPointer;
    }
    match voxelize(&(*stream).inner, bins, h, w) {
        Ok(grid) => write_grid(grid, out, out_len),
        Err(e) => status_from(&e),
    }
}

/// Rasterize into the symmetric cumulative representation (odd `bins`).
///
/// # Safety
/// Same contract as [`ed_voxelize`].
#[no_mangle]
pub unsafe extern "C" fn ed_scer(
    stream: *const EdEventStream,
    bins: usize,
    h: usize,
    w: usize,
    out: *mut f32,
    out_len: usize,
) -> EdStatus {
    if stream.is_null() || out.is_null() {
        set_error("null pointer argument");
        return EdStatus::EdErrNullPointer;
    }
    match scer(&(*stream).inner, bins, h, w) {
        Ok(grid) => write_grid(grid, out, out_len),
        Err(e) => status_from(&e),
    }
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

unsafe fn image_from(ptr: *const f32, c: usize, h: usize, w: usize) -> Option<Array3<f32>> {
    if ptr.is_null() {
        return None;
    }
    let data = std::slice::from_raw_parts(ptr, c * h * w);
    Array3::from_shape_vec((c, h, w), data.to_vec()).ok()
}

/// PSNR in dB between two CHW f32 images in [0, 1]; identical images yield
/// +infinity.
///
/// # Safety
/// `a` and `b` must reference `c*h*w` readable floats; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ed_psnr(
    a: *const f32,
    b: *const f32,
    c: usize,
    h: usize,
    w: usize,
    out: *mut f64,
) -> EdStatus {
    let (Some(ia), Some(ib)) = (image_from(a, c, h, w), image_from(b, c, h, w)) else {
        set_error("null image pointer");
        return EdStatus::EdErrNullPointer;
    };
    if out.is_null() {
        set_error("null output pointer");
        return EdStatus::EdErrNullPointer;
    }
    match psnr(&ia, &ib) {
        Ok(v) => {
            *out = v;
            EdStatus::EdOk
        }
        Err(e) => status_from(&e),
    }
}

/// Single-scale SSIM between two CHW f32 images in [0, 1].
///
/// # Safety
/// Same contract as [`ed_psnr`].
#[no_mangle]
pub unsafe extern "C" fn ed_ssim(
    a: *const f32,
    b: *const f32,
    c: usize,
    h: usize,
    w: usize,
    out: *mut f64,
) -> EdStatus {
    let (Some(ia), Some(ib)) = (image_from(a, c, h, w), image_from(b, c, h, w)) else {
        set_error("null image pointer");
        return EdStatus::EdErrNullPointer;
    };
    if out.is_null() {
        set_error("null output pointer");
        return EdStatus::EdErrNullPointer;
    }
    match ssim(&ia, &ib) {
        Ok(v) => {
            *out = v;
            EdStatus::EdOk
        }
        Err(e) => status_from(&e),
    }
}

// ---------------------------------------------------------------------------
// Checkpoint inference
// ---------------------------------------------------------------------------

/// Opaque handle over a loaded stage-2 checkpoint.
pub struct EdModel {
    inner: Stage2Model,
    task: String,
}

/// Load a stage-2 checkpoint for inference.
///
/// # Safety
/// `path` must be a NUL-terminated UTF-8 string; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ed_model_load(path: *const c_char, out: *mut *mut EdModel) -> EdStatus {
    if out.is_null() {
        set_error("null output pointer");
        return EdStatus::EdErrNullPointer;
    }
    let path = match path_from(path) {
        Ok(p) => p,
        Err(s) => return s,
    };
    match load_stage2_checkpoint(path) {
        Ok((model, meta)) => {
            *out = Box::into_raw(Box::new(EdModel {
                inner: model,
                task: meta.task,
            }));
            EdStatus::EdOk
        }
        Err(e) => status_from(&e),
    }
}

/// # Safety
/// `model` must be a handle from [`ed_model_load`], not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ed_model_free(model: *mut EdModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Interpolate the frame at normalized `t` in (0, 1) between two boundary
/// frames, conditioning on the event stream. `steps_override` of 0 keeps the
/// checkpoint's schedule. Output is CHW into `out_image` (`c*h*w` floats).
///
/// # Safety
/// Pointers must reference buffers of the documented sizes.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn ed_interpolate(
    model: *const EdModel,
    i0: *const f32,
    i1: *const f32,
    c: usize,
    h: usize,
    w: usize,
    stream: *const EdEventStream,
    t: f64,
    seed: u64,
    steps_override: usize,
    out_image: *mut f32,
) -> EdStatus {
    if model.is_null() || stream.is_null() || out_image.is_null() {
        set_error("null pointer argument");
        return EdStatus::EdErrNullPointer;
    }
    let (Some(a), Some(b)) = (image_from(i0, c, h, w), image_from(i1, c, h, w)) else {
        set_error("null image pointer");
        return EdStatus::EdErrNullPointer;
    };
    let m = &*model;
    if m.task != "vfi" {
        set_error(format!("checkpoint task is {}, not vfi", m.task));
        return EdStatus::EdErrConfig;
    }
    let steps = if steps_override == 0 {
        None
    } else {
        Some(steps_override)
    };
    match interpolate(&m.inner, &a, &b, &(*stream).inner, t, steps, seed) {
        Ok(img) => {
            let data = img.as_slice().unwrap();
            std::ptr::copy_nonoverlapping(data.as_ptr(), out_image, data.len());
            EdStatus::EdOk
        }
        Err(e) => status_from(&e),
    }
}

/// Deblur a frame from its event window (SCER rasterization inside).
///
/// # Safety
/// Pointers must reference buffers of the documented sizes.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn ed_deblur(
    model: *const EdModel,
    blur: *const f32,
    c: usize,
    h: usize,
    w: usize,
    stream: *const EdEventStream,
    seed: u64,
    steps_override: usize,
    out_image: *mut f32,
) -> EdStatus {
    if model.is_null() || stream.is_null() || out_image.is_null() {
        set_error("null pointer argument");
        return EdStatus::EdErrNullPointer;
    }
    let Some(a) = image_from(blur, c, h, w) else {
        set_error("null image pointer");
        return EdStatus::EdErrNullPointer;
    };
    let m = &*model;
    if m.task != "deblur" {
        set_error(format!("checkpoint task is {}, not deblur", m.task));
        return EdStatus::EdErrConfig;
    }
    let steps = if steps_override == 0 {
        None
    } else {
        Some(steps_override)
    };
    match deblur(&m.inner, &a, &(*stream).inner, steps, seed) {
        Ok(img) => {
            let data = img.as_slice().unwrap();
            std::ptr::copy_nonoverlapping(data.as_ptr(), out_image, data.len());
            EdStatus::EdOk
        }
        Err(e) => status_from(&e),
    }
}
