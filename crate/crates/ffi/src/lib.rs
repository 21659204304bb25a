//! C ABI over `ssm-prune`: opaque model and forward-record handles, integer status codes
//! and a per-thread last-error message.
//!
//! Every function returns an [`SsmStatus`]; outputs go through pointer arguments. Handles
//! are released with their `*_free` function. Panics are caught at the boundary and
//! reported as [`SsmStatus::Internal`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use ssm_prune::model::{forward_dense, forward_pruned, PruneConfig, PruneRequest};
use ssm_prune::pruning::{influence_from_params, linear_schedule};
use ssm_prune::{Aggregator, Criterion, Error, ForwardRecord, Model, ModelConfig, ScanParams};

/// Result of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SsmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Checkpoint = 4,
    Config = 5,
    Shape = 6,
    OutOfRange = 7,
    NonFinite = 8,
    BufferTooSmall = 9,
    Internal = 10,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SsmCriterion {
    Influence = 0,
    Uniform = 1,
    Random = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SsmAggregator {
    Max = 0,
    L2 = 1,
}

/// Opaque model handle.
pub struct SsmModel(Model);

/// Opaque result of one forward pass.
pub struct SsmRecord(ForwardRecord);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> SsmStatus {
    match e {
        Error::File { .. } | Error::Io(_) => SsmStatus::Io,
        Error::Checkpoint(_) | Error::Json(_) => SsmStatus::Checkpoint,
        Error::Config(_) | Error::NoInput(_) => SsmStatus::Config,
        Error::Shape(_) => SsmStatus::Shape,
        Error::OutOfRange { .. } => SsmStatus::OutOfRange,
        Error::NonFinite { .. } | Error::Degenerate(_) => SsmStatus::NonFinite,
        _ => SsmStatus::InvalidArgument,
    }
}

struct Fail(SsmStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn fail<T>(status: SsmStatus, msg: impl Into<String>) -> Result<T, Fail> {
    Err(Fail(status, msg.into()))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> SsmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SsmStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            SsmStatus::Internal
        }
    }
}

unsafe fn non_null<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().map_or_else(
        || fail(SsmStatus::NullPointer, format!("{what} is null")),
        Ok,
    )
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return fail(SsmStatus::NullPointer, format!("{what} is null"));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn as_path<'a>(p: *const c_char) -> Result<&'a Path, Fail> {
    if p.is_null() {
        return fail(SsmStatus::NullPointer, "path is null");
    }
    CStr::from_ptr(p)
        .to_str()
        .map(Path::new)
        .or_else(|_| fail(SsmStatus::InvalidArgument, "path is not UTF-8"))
}

/// Copies `src` into `dst[..cap]` and reports the length; too small buffers get nothing.
unsafe fn copy_out<T: Copy>(
    src: &[T],
    dst: *mut T,
    cap: usize,
    out_len: *mut usize,
) -> Result<(), Fail> {
    if !out_len.is_null() {
        *out_len = src.len();
    }
    if src.len() > cap {
        return fail(
            SsmStatus::BufferTooSmall,
            format!("buffer holds {cap} values, {} needed", src.len()),
        );
    }
    if !src.is_empty() {
        if dst.is_null() {
            return fail(SsmStatus::NullPointer, "output buffer is null");
        }
        ptr::copy_nonoverlapping(src.as_ptr(), dst, src.len());
    }
    Ok(())
}

/// Message of the last failed call on this thread, or null. Valid until the next failing
/// call on the same thread.
#[no_mangle]
pub extern "C" fn ssm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads a checkpoint.
///
/// # Safety
/// `path` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ssm_model_load(path: *const c_char, out: *mut *mut SsmModel) -> SsmStatus {
    guard(|| {
        if out.is_null() {
            return fail(SsmStatus::NullPointer, "out is null");
        }
        let model = Model::load(as_path(path)?)?;
        *out = Box::into_raw(Box::new(SsmModel(model)));
        Ok(())
    })
}

/// Randomly initialized model; `dt_rank = 0` picks `ceil(d_model / 16)`.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn ssm_model_init(
    n_layers: usize,
    d_model: usize,
    expand: usize,
    d_state: usize,
    d_conv: usize,
    vocab_size: usize,
    dt_rank: usize,
    seed: u64,
    out: *mut *mut SsmModel,
) -> SsmStatus {
    guard(|| {
        if out.is_null() {
            return fail(SsmStatus::NullPointer, "out is null");
        }
        let config = ModelConfig {
            n_layers,
            d_model,
            expand,
            d_state,
            d_conv,
            vocab_size,
            dt_rank,
        };
        *out = Box::into_raw(Box::new(SsmModel(Model::init(config, seed)?)));
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library; `path` must be nul-terminated.
#[no_mangle]
pub unsafe extern "C" fn ssm_model_save(model: *const SsmModel, path: *const c_char) -> SsmStatus {
    guard(|| {
        let m = non_null(model, "model")?;
        m.0.save(as_path(path)?)?;
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn ssm_model_free(model: *mut SsmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Writes `n_layers, d_model, d_inner, d_state, d_conv, vocab_size` to `out[0..6]`.
///
/// # Safety
/// `out` must hold 6 values.
#[no_mangle]
pub unsafe extern "C" fn ssm_model_dims(model: *const SsmModel, out: *mut usize) -> SsmStatus {
    guard(|| {
        let c = &non_null(model, "model")?.0.config;
        let dims = [
            c.n_layers,
            c.d_model,
            c.d_inner(),
            c.d_state,
            c.d_conv,
            c.vocab_size,
        ];
        copy_out(&dims, out, dims.len(), ptr::null_mut())
    })
}

/// Keep counts of the linear schedule, one per layer, into `out[..cap]`.
///
/// # Safety
/// `out` must hold `cap` values; `out_len` may be null.
#[no_mangle]
pub unsafe extern "C" fn ssm_linear_schedule(
    seq_len: usize,
    n_layers: usize,
    ratio: f64,
    protected_count: usize,
    out: *mut usize,
    cap: usize,
    out_len: *mut usize,
) -> SsmStatus {
    guard(|| {
        let s = linear_schedule(seq_len, n_layers, ratio, protected_count)?;
        copy_out(&s.keep, out, cap, out_len)
    })
}

fn criterion(c: u32) -> Result<Criterion, Fail> {
    match c {
        c if c == SsmCriterion::Influence as u32 => Ok(Criterion::Influence),
        c if c == SsmCriterion::Uniform as u32 => Ok(Criterion::Uniform),
        c if c == SsmCriterion::Random as u32 => Ok(Criterion::Random),
        _ => fail(SsmStatus::InvalidArgument, format!("unknown criterion {c}")),
    }
}

fn aggregator(a: u32) -> Result<Aggregator, Fail> {
    match a {
        a if a == SsmAggregator::Max as u32 => Ok(Aggregator::Max),
        a if a == SsmAggregator::L2 as u32 => Ok(Aggregator::L2),
        _ => fail(
            SsmStatus::InvalidArgument,
            format!("unknown aggregator {a}"),
        ),
    }
}

/// Forward pass with a linear schedule ending at `ratio` (`1.0` runs the dense path).
/// `crit` and `agg` take `SsmCriterion` and `SsmAggregator` values.
/// The last position is the score target and always survives.
///
/// # Safety
/// `ids` must hold `len` values and `out` must be a valid pointer.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn ssm_forward(
    model: *const SsmModel,
    ids: *const u32,
    len: usize,
    crit: u32,
    agg: u32,
    ratio: f64,
    seed: u64,
    out: *mut *mut SsmRecord,
) -> SsmStatus {
    guard(|| {
        let m = &non_null(model, "model")?.0;
        let ids = slice(ids, len, "ids")?;
        let (crit, agg) = (criterion(crit)?, aggregator(agg)?);
        if out.is_null() {
            return fail(SsmStatus::NullPointer, "out is null");
        }
        let record = if ratio == 1.0 {
            forward_dense(m, ids)?
        } else {
            if len == 0 {
                return fail(SsmStatus::InvalidArgument, "empty token sequence");
            }
            let schedule = linear_schedule(len, m.config.n_layers, ratio, 1)?;
            let config = PruneConfig {
                criterion: crit,
                aggregator: agg,
                exclude_bias: true,
                seed,
            };
            forward_pruned(
                m,
                ids,
                &PruneRequest {
                    schedule: &schedule,
                    config: &config,
                    protected: &[],
                    target: None,
                    record: false,
                },
            )?
        };
        *out = Box::into_raw(Box::new(SsmRecord(record)));
        Ok(())
    })
}

/// # Safety
/// `record` must come from this library and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn ssm_record_free(record: *mut SsmRecord) {
    if !record.is_null() {
        drop(Box::from_raw(record));
    }
}

/// Original positions entering block `layer` (`layer == n_layers` gives those reaching
/// the head).
///
/// # Safety
/// `out` must hold `cap` values; `out_len` may be null.
#[no_mangle]
pub unsafe extern "C" fn ssm_record_active(
    record: *const SsmRecord,
    layer: usize,
    out: *mut usize,
    cap: usize,
    out_len: *mut usize,
) -> SsmStatus {
    guard(|| {
        let r = &non_null(record, "record")?.0;
        let set = r.active.get(layer).ok_or(Error::OutOfRange {
            index: layer,
            len: r.active.len(),
        })?;
        copy_out(&set.positions, out, cap, out_len)
    })
}

/// Logits at original position `pos`, `vocab_size` values.
///
/// # Safety
/// `out` must hold `cap` values; `out_len` may be null.
#[no_mangle]
pub unsafe extern "C" fn ssm_record_logits(
    record: *const SsmRecord,
    pos: usize,
    out: *mut f32,
    cap: usize,
    out_len: *mut usize,
) -> SsmStatus {
    guard(|| {
        let r = &non_null(record, "record")?.0;
        let logits = r.logits_at(pos).map_or_else(
            || {
                fail(
                    SsmStatus::OutOfRange,
                    format!("position {pos} did not reach the head"),
                )
            },
            Ok,
        )?;
        copy_out(logits, out, cap, out_len)
    })
}

/// Final residual at original position `pos`, `d_model` values.
///
/// # Safety
/// `out` must hold `cap` values; `out_len` may be null.
#[no_mangle]
pub unsafe extern "C" fn ssm_record_hidden(
    record: *const SsmRecord,
    pos: usize,
    out: *mut f32,
    cap: usize,
    out_len: *mut usize,
) -> SsmStatus {
    guard(|| {
        let r = &non_null(record, "record")?.0;
        let h = r.hidden_at(pos).map_or_else(
            || {
                fail(
                    SsmStatus::OutOfRange,
                    format!("position {pos} did not reach the head"),
                )
            },
            Ok,
        )?;
        copy_out(h, out, cap, out_len)
    })
}

/// Influence of every position `0..=target` on the scan output at `target`, in f64.
/// Shapes: `a_log [d_inner x d_state]`, `delta` and `x` `[len x d_inner]`, `b` and `c`
/// `[len x d_state]`, `out [target + 1]`.
///
/// # Safety
/// Every array must hold the number of values given by its shape.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn ssm_influence_scores(
    d_inner: usize,
    d_state: usize,
    len: usize,
    a_log: *const f64,
    delta: *const f64,
    b: *const f64,
    c: *const f64,
    x: *const f64,
    target: usize,
    agg: u32,
    out: *mut f64,
) -> SsmStatus {
    guard(|| {
        let params = ScanParams {
            d_inner,
            d_state,
            a_log: slice(a_log, d_inner * d_state, "a_log")?.to_vec(),
            delta: slice(delta, len * d_inner, "delta")?.to_vec(),
            b: slice(b, len * d_state, "b")?.to_vec(),
            c: slice(c, len * d_state, "c")?.to_vec(),
            x: slice(x, len * d_inner, "x")?.to_vec(),
        };
        let s = influence_from_params(&params, None, Some(target), aggregator(agg)?)?;
        copy_out(&s.scores, out, s.scores.len(), ptr::null_mut())
    })
}
