//! C ABI over recap-core.
//!
//! Every fallible call returns a [`RecapStatus`]; on failure the message is
//! kept per thread and read back with [`recap_last_error_message`]. Handles
//! are opaque and must be released with their matching `_free` function.
//! Panics never cross the boundary.

use std::cell::RefCell;
use std::collections::BTreeSet;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use recap_core::backends::HashBagEmbedder;
use recap_core::evaluation::{f1, per_target_at5};
use recap_core::labeling::{fleiss_kappa, load_annotations};
use recap_core::line2note::overlap_rate;
use recap_core::ranking::{all_candidates, closest_k, rank_by_embedding, select, RankOptions, SelectionPolicy};
use recap_core::snippet::{read_instances, TargetInstance, NUM_CANDIDATES};
use recap_core::supervised::class_weights;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecapStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Io = 4,
    Parse = 5,
    OutOfRange = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecapPolicy {
    Top5 = 0,
    FreeThreshold = 1,
    Closest5 = 2,
}

/// Loaded target instances.
pub struct RecapInstanceSet {
    instances: Vec<TargetInstance>,
}

/// Hashed bag-of-words embedder.
pub struct RecapEmbedder {
    inner: HashBagEmbedder,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn fail(status: RecapStatus, msg: impl Into<String>) -> RecapStatus {
    set_error(msg);
    status
}

fn guard(f: impl FnOnce() -> RecapStatus) -> RecapStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => {
            if s == RecapStatus::Ok {
                set_error("");
            }
            s
        }
        Err(_) => fail(RecapStatus::Panic, "internal panic"),
    }
}

unsafe fn path_arg<'a>(p: *const c_char) -> Result<&'a str, RecapStatus> {
    if p.is_null() {
        return Err(fail(RecapStatus::NullPointer, "path is null"));
    }
    CStr::from_ptr(p).to_str().map_err(|_| fail(RecapStatus::InvalidUtf8, "path is not UTF-8"))
}

unsafe fn write_indices(src: &[usize], out: *mut usize, cap: usize, out_len: *mut usize) -> RecapStatus {
    if out_len.is_null() {
        return fail(RecapStatus::NullPointer, "out_len is null");
    }
    *out_len = src.len();
    if src.len() > cap {
        return fail(RecapStatus::BufferTooSmall, format!("need {} slots, have {cap}", src.len()));
    }
    if !src.is_empty() {
        if out.is_null() {
            return fail(RecapStatus::NullPointer, "out is null");
        }
        std::ptr::copy_nonoverlapping(src.as_ptr(), out, src.len());
    }
    RecapStatus::Ok
}

unsafe fn slice_arg<'a, T>(p: *const T, n: usize) -> Result<&'a [T], RecapStatus> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(RecapStatus::NullPointer, "array is null"));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

/// Copies the calling thread's last error into `buf` (NUL-terminated,
/// truncated to `cap`). Returns the full message length in bytes.
///
/// # Safety
/// `buf` must be null or valid for `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn recap_last_error_message(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && cap > 0 {
            let n = msg.len().min(cap - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Library version, static NUL-terminated string.
#[no_mangle]
pub extern "C" fn recap_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Loads instance JSONL.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn recap_instances_load(path: *const c_char, out: *mut *mut RecapInstanceSet) -> RecapStatus {
    guard(|| {
        if out.is_null() {
            return fail(RecapStatus::NullPointer, "out is null");
        }
        let p = match path_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match read_instances(Path::new(p)) {
            Ok(instances) => {
                *out = Box::into_raw(Box::new(RecapInstanceSet { instances }));
                RecapStatus::Ok
            }
            Err(recap_core::snippet::InstanceIoError::Io(e)) => fail(RecapStatus::Io, e.to_string()),
            Err(e) => fail(RecapStatus::Parse, e.to_string()),
        }
    })
}

/// # Safety
/// `set` must come from [`recap_instances_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn recap_instances_free(set: *mut RecapInstanceSet) {
    if !set.is_null() {
        drop(Box::from_raw(set));
    }
}

/// Number of instances; 0 for a null handle.
///
/// # Safety
/// `set` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn recap_instances_len(set: *const RecapInstanceSet) -> usize {
    set.as_ref().map_or(0, |s| s.instances.len())
}

unsafe fn instance_at<'a>(set: *const RecapInstanceSet, index: usize) -> Result<&'a TargetInstance, RecapStatus> {
    let s = set.as_ref().ok_or_else(|| fail(RecapStatus::NullPointer, "instance set is null"))?;
    s.instances.get(index).ok_or_else(|| fail(RecapStatus::OutOfRange, format!("index {index} of {}", s.instances.len())))
}

/// Gold candidate indices of one instance.
///
/// # Safety
/// `set` live; `out` valid for `cap` entries; `out_len` writable.
#[no_mangle]
pub unsafe extern "C" fn recap_instance_gold(
    set: *const RecapInstanceSet,
    index: usize,
    out: *mut usize,
    cap: usize,
    out_len: *mut usize,
) -> RecapStatus {
    guard(|| {
        let inst = match instance_at(set, index) {
            Ok(i) => i,
            Err(s) => return s,
        };
        match inst.gold() {
            Some(g) => write_indices(&g.into_iter().collect::<Vec<_>>(), out, cap, out_len),
            None => fail(RecapStatus::InvalidArgument, "instance has no labels"),
        }
    })
}

/// The `k` nearest candidates of one instance.
///
/// # Safety
/// As [`recap_instance_gold`].
#[no_mangle]
pub unsafe extern "C" fn recap_closest_k(
    set: *const RecapInstanceSet,
    index: usize,
    k: usize,
    out: *mut usize,
    cap: usize,
    out_len: *mut usize,
) -> RecapStatus {
    guard(|| {
        let inst = match instance_at(set, index) {
            Ok(i) => i,
            Err(s) => return s,
        };
        write_indices(&closest_k(inst, k).selected, out, cap, out_len)
    })
}

/// Selection from 60 scores. `-inf` marks inadmissible candidates.
/// `threshold` is read only for the free-threshold policy.
///
/// # Safety
/// `scores` valid for `n` doubles; `out` valid for `cap` entries.
#[no_mangle]
pub unsafe extern "C" fn recap_select(
    scores: *const f64,
    n: usize,
    policy: RecapPolicy,
    threshold: f64,
    out: *mut usize,
    cap: usize,
    out_len: *mut usize,
) -> RecapStatus {
    guard(|| {
        let s = match slice_arg(scores, n) {
            Ok(s) => s,
            Err(e) => return e,
        };
        if n != NUM_CANDIDATES {
            return fail(RecapStatus::InvalidArgument, format!("expected {NUM_CANDIDATES} scores, got {n}"));
        }
        if s.iter().any(|v| v.is_nan()) {
            return fail(RecapStatus::InvalidArgument, "scores contain NaN");
        }
        let (p, t) = match policy {
            RecapPolicy::Top5 => (SelectionPolicy::Top5, None),
            RecapPolicy::FreeThreshold => (SelectionPolicy::FreeThreshold, Some(threshold)),
            RecapPolicy::Closest5 => (SelectionPolicy::Closest5, None),
        };
        match select(s, p, t) {
            Ok(sel) => write_indices(&sel, out, cap, out_len),
            Err(e) => fail(RecapStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// Ranks one instance with a hashed bag-of-words embedder and writes the top 5.
///
/// # Safety
/// Handles live; buffers as in [`recap_instance_gold`].
#[no_mangle]
pub unsafe extern "C" fn recap_rank_hashbag(
    set: *const RecapInstanceSet,
    index: usize,
    embedder: *const RecapEmbedder,
    out: *mut usize,
    cap: usize,
    out_len: *mut usize,
) -> RecapStatus {
    guard(|| {
        let inst = match instance_at(set, index) {
            Ok(i) => i,
            Err(s) => return s,
        };
        let Some(e) = embedder.as_ref() else { return fail(RecapStatus::NullPointer, "embedder is null") };
        match rank_by_embedding(inst, &e.inner, &all_candidates(), &RankOptions::default()) {
            Ok(p) => write_indices(&p.selected, out, cap, out_len),
            Err(err) => fail(RecapStatus::InvalidArgument, err.to_string()),
        }
    })
}

/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn recap_hashbag_new(dim: usize, out: *mut *mut RecapEmbedder) -> RecapStatus {
    guard(|| {
        if out.is_null() {
            return fail(RecapStatus::NullPointer, "out is null");
        }
        if dim == 0 {
            return fail(RecapStatus::InvalidArgument, "dim must be positive");
        }
        *out = Box::into_raw(Box::new(RecapEmbedder { inner: HashBagEmbedder::new(dim) }));
        RecapStatus::Ok
    })
}

/// # Safety
/// `e` must come from [`recap_hashbag_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn recap_hashbag_free(e: *mut RecapEmbedder) {
    if !e.is_null() {
        drop(Box::from_raw(e));
    }
}

/// Per-target R@5 and P@5 in percent.
///
/// # Safety
/// Arrays valid for their lengths; outputs writable.
#[no_mangle]
pub unsafe extern "C" fn recap_at5(
    selected: *const usize,
    n_selected: usize,
    gold: *const usize,
    n_gold: usize,
    out_recall: *mut f64,
    out_precision: *mut f64,
) -> RecapStatus {
    guard(|| {
        let (s, g) = match (slice_arg(selected, n_selected), slice_arg(gold, n_gold)) {
            (Ok(s), Ok(g)) => (s, g),
            (Err(e), _) | (_, Err(e)) => return e,
        };
        if out_recall.is_null() || out_precision.is_null() {
            return fail(RecapStatus::NullPointer, "output is null");
        }
        if g.is_empty() {
            return fail(RecapStatus::InvalidArgument, "gold set is empty");
        }
        let (r, p) = per_target_at5(&s.iter().copied().collect::<BTreeSet<_>>(), &g.iter().copied().collect());
        *out_recall = r;
        *out_precision = p;
        RecapStatus::Ok
    })
}

/// Harmonic mean; 0 when both inputs are 0.
#[no_mangle]
pub extern "C" fn recap_f1(recall: f64, precision: f64) -> f64 {
    f1(recall, precision)
}

/// Class weights for counts (or rates) `n0`, `n1` and exponent `alpha`.
///
/// # Safety
/// Outputs writable.
#[no_mangle]
pub unsafe extern "C" fn recap_class_weights(n0: f64, n1: f64, alpha: f64, out_w0: *mut f64, out_w1: *mut f64) -> RecapStatus {
    guard(|| {
        if out_w0.is_null() || out_w1.is_null() {
            return fail(RecapStatus::NullPointer, "output is null");
        }
        match class_weights(n0, n1, alpha) {
            Ok(w) => {
                *out_w0 = w.weight_0;
                *out_w1 = w.weight_1;
                RecapStatus::Ok
            }
            Err(e) => fail(RecapStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// Overlap of two inclusive spans over the shorter one.
#[no_mangle]
pub extern "C" fn recap_overlap_rate(a_start: usize, a_end: usize, b_start: usize, b_end: usize) -> f64 {
    overlap_rate((a_start, a_end), (b_start, b_end))
}

/// Fleiss' kappa of an annotation file (CSV or JSONL).
///
/// # Safety
/// `path` NUL-terminated; `out_kappa` writable.
#[no_mangle]
pub unsafe extern "C" fn recap_fleiss_kappa_file(path: *const c_char, out_kappa: *mut f64) -> RecapStatus {
    guard(|| {
        if out_kappa.is_null() {
            return fail(RecapStatus::NullPointer, "out_kappa is null");
        }
        let p = match path_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        let records = match load_annotations(Path::new(p)) {
            Ok(r) => r,
            Err(recap_core::labeling::LabelError::Io(e)) => return fail(RecapStatus::Io, e.to_string()),
            Err(e) => return fail(RecapStatus::Parse, e.to_string()),
        };
        match fleiss_kappa(&records) {
            Ok(k) => {
                *out_kappa = k.kappa;
                RecapStatus::Ok
            }
            Err(e) => fail(RecapStatus::InvalidArgument, e.to_string()),
        }
    })
}
