//! C ABI over the claimbench scoring, parsing and retrieval primitives.
//!
//! Every fallible function returns a `CbStatus`. On failure, a message for
//! the calling thread is available from `cb_last_error` until the next call
//! on that thread. Strings returned through out-pointers are owned by the
//! caller and must be released with `cb_string_free`. Handles are opaque and
//! released with their matching `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use claimbench::metrics::{score_case, score_structure, KindScore, Meteor};
use claimbench::registry::{classify, RegistrySet, ValidityReport};
use claimbench::retrieval::{IndexMetadata, VectorIndex};

/// Result of an FFI call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CbStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Io = 4,
    Data = 5,
    Panic = 6,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CbKindScore {
    pub precision: f64,
    pub recall: f64,
    pub full_match: bool,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CbCaseScore {
    pub icd10: CbKindScore,
    pub cpt: CbKindScore,
    pub modifier: CbKindScore,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CbStructureScore {
    pub rouge_l: f64,
    pub rouge_l_sum: f64,
    pub meteor: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CbValidityReport {
    pub valid_count: u64,
    pub fabricated_count: u64,
    pub valid_pct: f64,
    pub fabricated_pct: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CbCodeValidity {
    pub icd10: CbValidityReport,
    pub cpt: CbValidityReport,
}

/// Opaque set of per-year code registries.
pub struct CbRegistrySet(RegistrySet);

/// Opaque flat vector index.
pub struct CbIndex(VectorIndex);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: impl Into<String>) {
    let mut bytes = message.into().into_bytes();
    bytes.retain(|b| *b != 0);
    let msg = CString::new(bytes).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

struct Failure(CbStatus, String);

impl Failure {
    fn new(status: CbStatus, message: impl ToString) -> Self {
        Failure(status, message.to_string())
    }
}

/// Runs `body`, converting errors and panics into a status plus message.
fn guard(body: impl FnOnce() -> Result<(), Failure>) -> CbStatus {
    set_error("");
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => CbStatus::Ok,
        Ok(Err(Failure(status, message))) => {
            set_error(message);
            status
        }
        Err(_) => {
            set_error("internal panic");
            CbStatus::Panic
        }
    }
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::new(CbStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|e| Failure::new(CbStatus::InvalidUtf8, format!("{what}: {e}")))
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut()
        .ok_or_else(|| Failure::new(CbStatus::NullPointer, format!("{what} is null")))
}

fn into_c_string(s: String) -> Result<*mut c_char, Failure> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|e| Failure::new(CbStatus::Data, e))
}

impl From<KindScore> for CbKindScore {
    fn from(k: KindScore) -> Self {
        CbKindScore { precision: k.precision, recall: k.recall, full_match: k.full_match }
    }
}

impl From<ValidityReport> for CbValidityReport {
    fn from(v: ValidityReport) -> Self {
        CbValidityReport {
            valid_count: v.valid_count,
            fabricated_count: v.fabricated_count,
            valid_pct: v.valid_pct,
            fabricated_pct: v.fabricated_pct,
        }
    }
}

/// Library version as a static NUL-terminated string. Do not free.
#[no_mangle]
pub extern "C" fn cb_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failed call on this thread, or an empty string.
/// Valid until the next `cb_*` call on the same thread. Do not free.
#[no_mangle]
pub extern "C" fn cb_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must be null or a pointer previously returned by this library and not
/// yet freed.
#[no_mangle]
pub unsafe extern "C" fn cb_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Parses free-form model output and writes the extracted code sets as JSON
/// (`{"icd10": [...], "cpt": [...], "modifier_pairs": [[cpt, mod], ...]}`).
///
/// # Safety
/// `text` must be a valid NUL-terminated string; `out_json` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cb_parse_claim_json(text_ptr: *const c_char, out_json: *mut *mut c_char) -> CbStatus {
    guard(|| {
        let input = text(text_ptr, "text")?;
        let slot = out(out_json, "out_json")?;
        let codes = claimbench::parse_claim(input).codes;
        let json = serde_json::to_string(&codes).map_err(|e| Failure::new(CbStatus::Data, e))?;
        *slot = into_c_string(json)?;
        Ok(())
    })
}

/// Parses both texts and scores the generated codes against the reference.
///
/// # Safety
/// Both strings must be valid NUL-terminated strings; `out_score` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cb_score_case(
    generated: *const c_char,
    reference: *const c_char,
    out_score: *mut CbCaseScore,
) -> CbStatus {
    guard(|| {
        let g = claimbench::parse_claim(text(generated, "generated")?).codes;
        let r = claimbench::parse_claim(text(reference, "reference")?).codes;
        let slot = out(out_score, "out_score")?;
        let s = score_case(&g, &r);
        *slot = CbCaseScore { icd10: s.icd10.into(), cpt: s.cpt.into(), modifier: s.modifier.into() };
        Ok(())
    })
}

/// ROUGE-L, ROUGE-L-Sum (0-100) and METEOR (0-1) of `output` against `reference`.
///
/// # Safety
/// Both strings must be valid NUL-terminated strings; `out_score` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cb_structure_score(
    output: *const c_char,
    reference: *const c_char,
    out_score: *mut CbStructureScore,
) -> CbStatus {
    guard(|| {
        let o = text(output, "output")?;
        let r = text(reference, "reference")?;
        let slot = out(out_score, "out_score")?;
        let s = score_structure(&Meteor::default(), o, r);
        *slot = CbStructureScore { rouge_l: s.rouge_l, rouge_l_sum: s.rouge_l_sum, meteor: s.meteor };
        Ok(())
    })
}

/// Loads every `{year}.csv` registry in a directory.
///
/// # Safety
/// `dir` must be a valid NUL-terminated string; `out_registry` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cb_registry_load_dir(dir: *const c_char, out_registry: *mut *mut CbRegistrySet) -> CbStatus {
    guard(|| {
        let path = text(dir, "dir")?;
        let slot = out(out_registry, "out_registry")?;
        let set = RegistrySet::load_dir(Path::new(path)).map_err(|e| {
            let status = match e {
                claimbench::registry::RegistryError::Io { .. } => CbStatus::Io,
                _ => CbStatus::Data,
            };
            Failure::new(status, e)
        })?;
        *slot = Box::into_raw(Box::new(CbRegistrySet(set)));
        Ok(())
    })
}

/// # Safety
/// `registry` must be null or a handle from `cb_registry_load_dir` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cb_registry_free(registry: *mut CbRegistrySet) {
    if !registry.is_null() {
        drop(Box::from_raw(registry));
    }
}

/// Parses `generated` and counts valid and fabricated codes against the
/// registry for `year`.
///
/// # Safety
/// `registry` must be a live handle, `generated` a valid NUL-terminated
/// string, and `out_validity` writable.
#[no_mangle]
pub unsafe extern "C" fn cb_registry_classify(
    registry: *const CbRegistrySet,
    year: i32,
    generated: *const c_char,
    out_validity: *mut CbCodeValidity,
) -> CbStatus {
    guard(|| {
        let set = registry
            .as_ref()
            .ok_or_else(|| Failure::new(CbStatus::NullPointer, "registry is null"))?;
        let codes = claimbench::parse_claim(text(generated, "generated")?).codes;
        let slot = out(out_validity, "out_validity")?;
        let reg = set.0.get(year).map_err(|e| Failure::new(CbStatus::InvalidArgument, e))?;
        let v = classify(&codes, reg);
        *slot = CbCodeValidity { icd10: v.icd10.into(), cpt: v.cpt.into() };
        Ok(())
    })
}

/// Builds an index from `rows * dim` row-major floats. Row `i` gets the
/// encounter id `"i"` and an empty claim.
///
/// # Safety
/// `data` must point to `rows * dim` readable floats; `out_index` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cb_index_build(
    data: *const f32,
    rows: usize,
    dim: usize,
    out_index: *mut *mut CbIndex,
) -> CbStatus {
    guard(|| {
        if data.is_null() {
            return Err(Failure::new(CbStatus::NullPointer, "data is null"));
        }
        if dim == 0 {
            return Err(Failure::new(CbStatus::InvalidArgument, "dim must be positive"));
        }
        let len = rows
            .checked_mul(dim)
            .ok_or_else(|| Failure::new(CbStatus::InvalidArgument, "rows * dim overflows"))?;
        let slot = out(out_index, "out_index")?;
        let flat = std::slice::from_raw_parts(data, len);
        let items = flat
            .chunks_exact(dim)
            .enumerate()
            .map(|(i, v)| (v.to_vec(), IndexMetadata { encounter_id: i.to_string(), claim_text: String::new() }))
            .collect();
        let index = VectorIndex::build(items, dim).map_err(|e| Failure::new(CbStatus::InvalidArgument, e))?;
        *slot = Box::into_raw(Box::new(CbIndex(index)));
        Ok(())
    })
}

/// Loads an index saved by the `index` command.
///
/// # Safety
/// `dir` must be a valid NUL-terminated string; `out_index` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cb_index_load(dir: *const c_char, out_index: *mut *mut CbIndex) -> CbStatus {
    guard(|| {
        let path = text(dir, "dir")?;
        let slot = out(out_index, "out_index")?;
        let index = VectorIndex::load(Path::new(path)).map_err(|e| {
            let status = match e {
                claimbench::retrieval::IndexError::Io { .. } => CbStatus::Io,
                _ => CbStatus::Data,
            };
            Failure::new(status, e)
        })?;
        *slot = Box::into_raw(Box::new(CbIndex(index)));
        Ok(())
    })
}

/// # Safety
/// `index` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cb_index_free(index: *mut CbIndex) {
    if !index.is_null() {
        drop(Box::from_raw(index));
    }
}

/// Number of rows, or 0 for a null handle.
///
/// # Safety
/// `index` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cb_index_len(index: *const CbIndex) -> usize {
    index.as_ref().map_or(0, |i| i.0.len())
}

/// Vector dimension, or 0 for a null handle.
///
/// # Safety
/// `index` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cb_index_dim(index: *const CbIndex) -> usize {
    index.as_ref().map_or(0, |i| i.0.dim())
}

/// Exact k-nearest-neighbour search by squared Euclidean distance. Writes `k`
/// row ids and distances, nearest first; ties keep the lower row id.
///
/// # Safety
/// `index` must be a live handle, `query` must point to `dim` floats, and
/// `out_rows` and `out_distances` must each have room for `k` elements.
#[no_mangle]
pub unsafe extern "C" fn cb_index_search(
    index: *const CbIndex,
    query: *const f32,
    dim: usize,
    k: usize,
    out_rows: *mut usize,
    out_distances: *mut f64,
) -> CbStatus {
    guard(|| {
        let idx = index
            .as_ref()
            .ok_or_else(|| Failure::new(CbStatus::NullPointer, "index is null"))?;
        if query.is_null() || out_rows.is_null() || out_distances.is_null() {
            return Err(Failure::new(CbStatus::NullPointer, "query or output buffer is null"));
        }
        let q = std::slice::from_raw_parts(query, dim);
        let hits = idx.0.search(q, k).map_err(|e| Failure::new(CbStatus::InvalidArgument, e))?;
        let rows = std::slice::from_raw_parts_mut(out_rows, k);
        let dists = std::slice::from_raw_parts_mut(out_distances, k);
        for (i, h) in hits.iter().enumerate() {
            rows[i] = h.row;
            dists[i] = h.distance;
        }
        Ok(())
    })
}

/// Claim text stored with row `row` of a loaded index, or null if out of
/// range. Free with `cb_string_free`.
///
/// # Safety
/// `index` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cb_index_claim(index: *const CbIndex, row: usize) -> *mut c_char {
    let Some(idx) = index.as_ref() else { return ptr::null_mut() };
    if row >= idx.0.len() {
        return ptr::null_mut();
    }
    into_c_string(idx.0.metadata(row).claim_text.clone()).unwrap_or(ptr::null_mut())
}
