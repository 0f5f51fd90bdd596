//! C ABI over the mtunet model.
//!
//! Every fallible function returns an [`MtunetStatus`]; on failure the
//! message is available from [`mtunet_last_error`] on the same thread.
//! Handles are opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use mtunet::matcher::classify_query;
use mtunet::{Checkpoint, Error, Mtunet, Pcg32, Tensor};

/// Result codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MtunetStatus {
    Ok = 0,
    NullPointer = 1,
    Usage = 2,
    Dimension = 3,
    Load = 4,
    Io = 5,
    NonFinite = 6,
    Parse = 7,
    BufferTooSmall = 8,
    InvalidUtf8 = 9,
    Panic = 10,
}

/// A loaded model.
pub struct MtunetModel {
    model: Mtunet,
}

/// A PCG32 generator.
pub struct MtunetRng {
    rng: Pcg32,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> MtunetStatus {
    match e {
        Error::Dimension(_) => MtunetStatus::Dimension,
        Error::Usage(_) => MtunetStatus::Usage,
        Error::NonFinite(_) => MtunetStatus::NonFinite,
        Error::Load { .. } => MtunetStatus::Load,
        Error::Parse { .. } => MtunetStatus::Parse,
        Error::Io { .. } => MtunetStatus::Io,
    }
}

fn fail(status: MtunetStatus, msg: &str) -> MtunetStatus {
    set_error(msg);
    status
}

/// Runs `f`, turning errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), MtunetStatus>) -> MtunetStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            MtunetStatus::Ok
        }
        Ok(Err(s)) => s,
        Err(_) => fail(MtunetStatus::Panic, "internal panic"),
    }
}

fn check(r: mtunet::Result<()>) -> Result<(), MtunetStatus> {
    r.map_err(|e| fail(status_of(&e), &e.to_string()))
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), MtunetStatus> {
    if p.is_null() {
        Err(fail(MtunetStatus::NullPointer, &format!("{what} is null")))
    } else {
        Ok(())
    }
}

/// # Safety
/// `p` must be null or point to `len` readable values.
unsafe fn slice<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], MtunetStatus> {
    non_null(p, what)?;
    Ok(std::slice::from_raw_parts(p, len))
}

/// Message of the last failure on this thread; empty after a success.
/// The pointer stays valid until the next call into this library on the
/// same thread.
#[no_mangle]
pub extern "C" fn mtunet_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mtunet_version() -> *const c_char {
    static VERSION: &[u8] = concat!("v", env!("CARGO_PKG_VERSION"), "\0").as_bytes();
    VERSION.as_ptr().cast()
}

/// Loads a trained checkpoint. `iterations` is the attention round count
/// used at training time.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn mtunet_model_load(path: *const c_char, iterations: u32, out: *mut *mut MtunetModel) -> MtunetStatus {
    guard(|| {
        non_null(path, "path")?;
        non_null(out, "out")?;
        *out = ptr::null_mut();
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| fail(MtunetStatus::InvalidUtf8, "path is not valid UTF-8"))?;
        if iterations == 0 {
            return Err(fail(MtunetStatus::Usage, "iterations must be at least 1"));
        }
        let mut loaded = None;
        check(Checkpoint::load(Path::new(path)).and_then(|c| {
            loaded = Some(Mtunet::from_checkpoint(&c, iterations as usize)?);
            Ok(())
        }))?;
        let model = loaded.expect("set on success");
        *out = Box::into_raw(Box::new(MtunetModel { model }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`mtunet_model_load`] and not be used again.
#[no_mangle]
pub unsafe extern "C" fn mtunet_model_free(model: *mut MtunetModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Feature channels c (length of a representation); 0 for null.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mtunet_model_channels(model: *const MtunetModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.pe.config.channels)
}

/// Pattern count z; 0 for null.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mtunet_model_slots(model: *const MtunetModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.pe.config.slots)
}

/// Representation of a `channels×height×width` image (channel-major,
/// values in [0, 1]). Writes c values to `v_out`. When `attention_out` is
/// not null, also writes the z×l attention (l = feature-map positions)
/// and stores l in `positions_out` if that is not null.
///
/// # Safety
/// Pointers must be valid for the stated capacities.
#[no_mangle]
pub unsafe extern "C" fn mtunet_model_represent(
    model: *const MtunetModel,
    pixels: *const f64,
    channels: usize,
    height: usize,
    width: usize,
    v_out: *mut f64,
    v_capacity: usize,
    attention_out: *mut f64,
    attention_capacity: usize,
    positions_out: *mut usize,
) -> MtunetStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(v_out, "v_out")?;
        let m = &(*model).model;
        let data = slice(pixels, channels * height * width, "pixels")?.to_vec();
        let mut rep = None;
        check(Tensor::new(vec![channels, height, width], data).and_then(|img| {
            rep = Some(m.represent(&img)?);
            Ok(())
        }))?;
        let rep = rep.expect("set on success");
        if v_capacity < rep.v.len() {
            return Err(fail(
                MtunetStatus::BufferTooSmall,
                &format!("v_out holds {v_capacity} values, {} needed", rep.v.len()),
            ));
        }
        ptr::copy_nonoverlapping(rep.v.as_ptr(), v_out, rep.v.len());
        if !attention_out.is_null() {
            let a = rep.attention.data();
            if attention_capacity < a.len() {
                return Err(fail(
                    MtunetStatus::BufferTooSmall,
                    &format!("attention_out holds {attention_capacity} values, {} needed", a.len()),
                ));
            }
            ptr::copy_nonoverlapping(a.as_ptr(), attention_out, a.len());
        }
        if !positions_out.is_null() {
            *positions_out = rep.grid.0 * rep.grid.1;
        }
        Ok(())
    })
}

/// Membership probability of a query representation for a support
/// centroid, both of length `len`.
///
/// # Safety
/// Pointers must be valid for `len` values; `score_out` writable.
#[no_mangle]
pub unsafe extern "C" fn mtunet_model_match_score(
    model: *const MtunetModel,
    query: *const f64,
    centroid: *const f64,
    len: usize,
    score_out: *mut f64,
) -> MtunetStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(score_out, "score_out")?;
        let q = slice(query, len, "query")?;
        let c = slice(centroid, len, "centroid")?;
        let mut s = 0.0;
        check((*model).model.matcher.match_score(q, c).map(|v| s = v))?;
        *score_out = s;
        Ok(())
    })
}

/// Index of the best of `way` centroids (row-major, `way×len`) for one
/// query; ties go to the lowest index.
///
/// # Safety
/// Pointers must be valid for the stated sizes; `index_out` writable.
#[no_mangle]
pub unsafe extern "C" fn mtunet_model_classify(
    model: *const MtunetModel,
    query: *const f64,
    centroids: *const f64,
    way: usize,
    len: usize,
    index_out: *mut usize,
) -> MtunetStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(index_out, "index_out")?;
        if way == 0 {
            return Err(fail(MtunetStatus::Usage, "way must be at least 1"));
        }
        let q = slice(query, len, "query")?.to_vec();
        let cs: Vec<Vec<f64>> = slice(centroids, way * len, "centroids")?.chunks(len).map(<[f64]>::to_vec).collect();
        let mut scores = Vec::new();
        check((*model).model.matcher.scores(&[q], &cs).map(|s| scores = s))?;
        *index_out = classify_query(&scores[0]);
        Ok(())
    })
}

/// New PCG32 generator for `(seed, stream)`; null only on allocation
/// failure.
#[no_mangle]
pub extern "C" fn mtunet_rng_new(seed: u64, stream: u64) -> *mut MtunetRng {
    Box::into_raw(Box::new(MtunetRng {
        rng: Pcg32::new(seed, stream),
    }))
}

/// # Safety
/// `rng` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn mtunet_rng_next_u32(rng: *mut MtunetRng, out: *mut u32) -> MtunetStatus {
    guard(|| {
        non_null(rng, "rng")?;
        non_null(out, "out")?;
        *out = (*rng).rng.next_u32();
        Ok(())
    })
}

/// # Safety
/// `rng` must come from [`mtunet_rng_new`] and not be used again.
#[no_mangle]
pub unsafe extern "C" fn mtunet_rng_free(rng: *mut MtunetRng) {
    if !rng.is_null() {
        drop(Box::from_raw(rng));
    }
}
