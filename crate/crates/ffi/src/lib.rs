//! C ABI over `cdr-core`: load frozen backbones and trained adapters or
//! mappings, transfer cold-start users and score items.
//!
//! Every function returns a [`CdrStatus`]. On failure the message is kept in
//! a thread-local slot and can be copied out with
//! [`cdr_last_error_message`]. Handles are opaque and must be released with
//! the matching `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;
use std::slice;

use cdr_core::adapter::{self, AdapterParams, Hop, Side};
use cdr_core::baseline::MappingParams;
use cdr_core::dataset::Direction;
use cdr_core::eval;
use cdr_core::pretrain::EmbeddingTable;
use cdr_core::Error;

pub const CDR_SIDE_X: u32 = 0;
pub const CDR_SIDE_Y: u32 = 1;

/// Result code of every exported function.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CdrStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    DimMismatch = 5,
    OutOfRange = 6,
    BufferTooSmall = 7,
    Panic = 8,
    Other = 9,
}

/// A frozen embedding table.
pub struct CdrTable(EmbeddingTable);

/// A trained adapter between two domains.
pub struct CdrAdapter(AdapterParams);

/// A trained one-direction mapping.
pub struct CdrMapping(MappingParams);

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

struct Failure(CdrStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io(_) => CdrStatus::Io,
            Error::Format(_) | Error::Json(_) => CdrStatus::Format,
            Error::DimMismatch { .. } => CdrStatus::DimMismatch,
            Error::OutOfRange { .. } | Error::UnknownUser(_) => CdrStatus::OutOfRange,
            Error::InvalidConfig(_) | Error::InvalidCutoff | Error::CandidateCount { .. } => CdrStatus::InvalidArgument,
            _ => CdrStatus::Other,
        };
        Failure(status, e.to_string())
    }
}

fn fail(status: CdrStatus, msg: impl Into<String>) -> Failure {
    Failure(status, msg.into())
}

/// Runs `f`, records any error and turns panics into [`CdrStatus::Panic`].
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> CdrStatus {
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<&str>()
            .map(|s| s.to_string())
            .or_else(|| p.downcast_ref::<String>().cloned())
            .unwrap_or_else(|| "panic".into());
        Err(fail(CdrStatus::Panic, msg))
    });
    match outcome {
        Ok(()) => {
            LAST_ERROR.with(|e| e.borrow_mut().clear());
            CdrStatus::Ok
        }
        Err(Failure(status, msg)) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = msg);
            status
        }
    }
}

unsafe fn path_arg(path: *const c_char) -> Result<PathBuf, Failure> {
    if path.is_null() {
        return Err(fail(CdrStatus::NullPointer, "path is null"));
    }
    let s = CStr::from_ptr(path).to_str().map_err(|_| fail(CdrStatus::InvalidArgument, "path is not UTF-8"))?;
    Ok(PathBuf::from(s))
}

unsafe fn bytes_arg<'a>(data: *const u8, len: usize) -> Result<&'a [u8], Failure> {
    if data.is_null() {
        return Err(fail(CdrStatus::NullPointer, "buffer is null"));
    }
    Ok(slice::from_raw_parts(data, len))
}

unsafe fn vec_arg<'a>(data: *const f64, len: usize) -> Result<&'a [f64], Failure> {
    if data.is_null() && len > 0 {
        return Err(fail(CdrStatus::NullPointer, "vector is null"));
    }
    Ok(if len == 0 { &[] } else { slice::from_raw_parts(data, len) })
}

unsafe fn handle<'a, T>(h: *const T) -> Result<&'a T, Failure> {
    h.as_ref().ok_or_else(|| fail(CdrStatus::NullPointer, "handle is null"))
}

unsafe fn out_ref<'a, T>(p: *mut T) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| fail(CdrStatus::NullPointer, "output pointer is null"))
}

unsafe fn write_vec(values: &[f64], out: *mut f64, out_len: usize) -> Result<(), Failure> {
    if out.is_null() {
        return Err(fail(CdrStatus::NullPointer, "output buffer is null"));
    }
    if out_len < values.len() {
        return Err(fail(CdrStatus::BufferTooSmall, format!("need {} values, buffer holds {out_len}", values.len())));
    }
    ptr::copy_nonoverlapping(values.as_ptr(), out, values.len());
    Ok(())
}

fn side(code: u32) -> Result<Side, Failure> {
    match code {
        CDR_SIDE_X => Ok(Side::X),
        CDR_SIDE_Y => Ok(Side::Y),
        c => Err(fail(CdrStatus::InvalidArgument, format!("unknown side {c}"))),
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cdr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf` (truncated,
/// always NUL-terminated when `len > 0`) and returns its full length in
/// bytes, excluding the terminator. Returns 0 if the last call succeeded.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn cdr_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr().cast(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

// ---- embedding tables ----

/// Loads a table written by `cdr pretrain`. The table is frozen.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cdr_table_load(path: *const c_char, out: *mut *mut CdrTable) -> CdrStatus {
    guard(|| {
        let out = out_ref(out)?;
        let t = EmbeddingTable::load(path_arg(path)?)?;
        *out = Box::into_raw(Box::new(CdrTable(t)));
        Ok(())
    })
}

/// # Safety
/// `data` must point to `len` readable bytes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cdr_table_from_bytes(data: *const u8, len: usize, out: *mut *mut CdrTable) -> CdrStatus {
    guard(|| {
        let out = out_ref(out)?;
        let t = EmbeddingTable::from_bytes(bytes_arg(data, len)?)?;
        *out = Box::into_raw(Box::new(CdrTable(t)));
        Ok(())
    })
}

/// # Safety
/// `table` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cdr_table_free(table: *mut CdrTable) {
    if !table.is_null() {
        drop(Box::from_raw(table));
    }
}

/// Embedding dimension, user count and item count.
///
/// # Safety
/// `table` must be a live handle; the outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn cdr_table_shape(
    table: *const CdrTable,
    dim: *mut usize,
    num_users: *mut usize,
    num_items: *mut usize,
) -> CdrStatus {
    guard(|| {
        let t = &handle(table)?.0;
        *out_ref(dim)? = t.dim();
        *out_ref(num_users)? = t.num_users();
        *out_ref(num_items)? = t.num_items();
        Ok(())
    })
}

/// Copies user `user`'s embedding into `out`.
///
/// # Safety
/// `table` must be a live handle; `out` must hold `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn cdr_table_user(table: *const CdrTable, user: usize, out: *mut f64, out_len: usize) -> CdrStatus {
    guard(|| {
        let v = handle(table)?.0.user_f64(user)?;
        write_vec(&v, out, out_len)
    })
}

/// Inner product of `vec` with item `item`'s embedding.
///
/// # Safety
/// `table` must be a live handle; `vec` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn cdr_table_score(
    table: *const CdrTable,
    vec: *const f64,
    len: usize,
    item: usize,
    out: *mut f64,
) -> CdrStatus {
    guard(|| {
        let s = handle(table)?.0.score_vector(vec_arg(vec, len)?, item)?;
        *out_ref(out)? = s;
        Ok(())
    })
}

/// 1-based rank of `positive` among `positive` and `negatives` when scored
/// with `vec`; ties go to the lower item index.
///
/// # Safety
/// `table` must be a live handle; `vec` must hold `len` doubles and
/// `negatives` `num_negatives` indices.
#[no_mangle]
pub unsafe extern "C" fn cdr_rank_positive(
    table: *const CdrTable,
    vec: *const f64,
    len: usize,
    positive: usize,
    negatives: *const usize,
    num_negatives: usize,
    rank: *mut usize,
) -> CdrStatus {
    guard(|| {
        let t = &handle(table)?.0;
        let negs: &[usize] = if num_negatives == 0 {
            &[]
        } else if negatives.is_null() {
            return Err(fail(CdrStatus::NullPointer, "negatives is null"));
        } else {
            slice::from_raw_parts(negatives, num_negatives)
        };
        *out_ref(rank)? = eval::positive_rank(vec_arg(vec, len)?, t, positive, negs)?;
        Ok(())
    })
}

/// HR@k, NDCG@k and reciprocal rank of a single 1-based rank.
///
/// # Safety
/// The outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn cdr_rank_metrics(rank: usize, k: usize, hr: *mut f64, ndcg: *mut f64, rr: *mut f64) -> CdrStatus {
    guard(|| {
        *out_ref(hr)? = eval::hr_at_k(rank, k)?;
        *out_ref(ndcg)? = eval::ndcg_at_k(rank, k)?;
        *out_ref(rr)? = eval::mrr(rank)?;
        Ok(())
    })
}

// ---- adapters ----

/// Loads an adapter written by `cdr train --method adapter`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cdr_adapter_load(path: *const c_char, out: *mut *mut CdrAdapter) -> CdrStatus {
    guard(|| {
        let out = out_ref(out)?;
        let a = AdapterParams::load(path_arg(path)?)?;
        *out = Box::into_raw(Box::new(CdrAdapter(a)));
        Ok(())
    })
}

/// # Safety
/// `data` must point to `len` readable bytes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cdr_adapter_from_bytes(data: *const u8, len: usize, out: *mut *mut CdrAdapter) -> CdrStatus {
    guard(|| {
        let out = out_ref(out)?;
        let a = AdapterParams::from_bytes(bytes_arg(data, len)?)?;
        *out = Box::into_raw(Box::new(CdrAdapter(a)));
        Ok(())
    })
}

/// An adapter whose priors and decoders are identity maps.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cdr_adapter_identity(dim: usize, out: *mut *mut CdrAdapter) -> CdrStatus {
    guard(|| {
        let out = out_ref(out)?;
        if dim == 0 {
            return Err(fail(CdrStatus::InvalidArgument, "dim must be positive"));
        }
        *out = Box::into_raw(Box::new(CdrAdapter(adapter::identity_adapter(dim))));
        Ok(())
    })
}

/// # Safety
/// `adapter` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cdr_adapter_free(adapter: *mut CdrAdapter) {
    if !adapter.is_null() {
        drop(Box::from_raw(adapter));
    }
}

/// # Safety
/// `adapter` must be a live handle; `dim` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cdr_adapter_dim(adapter: *const CdrAdapter, dim: *mut usize) -> CdrStatus {
    guard(|| {
        *out_ref(dim)? = handle(adapter)?.0.dim();
        Ok(())
    })
}

/// Transfers a source-side backbone vector to the target side
/// (`CDR_SIDE_X` or `CDR_SIDE_Y`).
///
/// # Safety
/// `adapter` must be a live handle; `vec` must hold `len` doubles and `out`
/// `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn cdr_adapter_transfer(
    adapter: *const CdrAdapter,
    src: u32,
    tgt: u32,
    vec: *const f64,
    len: usize,
    out: *mut f64,
    out_len: usize,
) -> CdrStatus {
    guard(|| {
        let a = &handle(adapter)?.0;
        let v = a.transfer_vector(vec_arg(vec, len)?, side(src)?, side(tgt)?)?;
        write_vec(&v, out, out_len)
    })
}

/// Applies `num_hops` adapters in sequence; hop `i` maps `sides[2i]` to
/// `sides[2i + 1]` of `adapters[i]`.
///
/// # Safety
/// `adapters` must hold `num_hops` live handles, `sides` `2 * num_hops`
/// codes, `vec` `len` doubles and `out` `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn cdr_cascade(
    adapters: *const *const CdrAdapter,
    sides: *const u32,
    num_hops: usize,
    vec: *const f64,
    len: usize,
    out: *mut f64,
    out_len: usize,
) -> CdrStatus {
    guard(|| {
        if num_hops == 0 {
            return Err(fail(CdrStatus::InvalidArgument, "a cascade needs at least one hop"));
        }
        if adapters.is_null() || sides.is_null() {
            return Err(fail(CdrStatus::NullPointer, "adapters or sides is null"));
        }
        let handles = slice::from_raw_parts(adapters, num_hops);
        let codes = slice::from_raw_parts(sides, 2 * num_hops);
        let hops = handles
            .iter()
            .zip(codes.chunks_exact(2))
            .map(|(&h, s)| Ok(Hop { params: &handle(h)?.0, from: side(s[0])?, to: side(s[1])? }))
            .collect::<Result<Vec<_>, Failure>>()?;
        let v = adapter::cascade(&hops, vec_arg(vec, len)?)?;
        write_vec(&v, out, out_len)
    })
}

// ---- mappings ----

/// Loads a mapping written by `cdr train --method emcdr`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cdr_mapping_load(path: *const c_char, out: *mut *mut CdrMapping) -> CdrStatus {
    guard(|| {
        let out = out_ref(out)?;
        let m = MappingParams::load(path_arg(path)?)?;
        *out = Box::into_raw(Box::new(CdrMapping(m)));
        Ok(())
    })
}

/// # Safety
/// `mapping` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cdr_mapping_free(mapping: *mut CdrMapping) {
    if !mapping.is_null() {
        drop(Box::from_raw(mapping));
    }
}

/// Source side of the mapping (`CDR_SIDE_X` maps X to Y).
///
/// # Safety
/// `mapping` must be a live handle; `src` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cdr_mapping_source(mapping: *const CdrMapping, src: *mut u32) -> CdrStatus {
    guard(|| {
        *out_ref(src)? = match handle(mapping)?.0.direction {
            Direction::XToY => CDR_SIDE_X,
            Direction::YToX => CDR_SIDE_Y,
        };
        Ok(())
    })
}

/// # Safety
/// `mapping` must be a live handle; `vec` must hold `len` doubles and `out`
/// `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn cdr_mapping_apply(
    mapping: *const CdrMapping,
    vec: *const f64,
    len: usize,
    out: *mut f64,
    out_len: usize,
) -> CdrStatus {
    guard(|| {
        let v = handle(mapping)?.0.apply(vec_arg(vec, len)?)?;
        write_vec(&v, out, out_len)
    })
}
