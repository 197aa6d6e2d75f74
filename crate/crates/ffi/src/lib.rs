//! C ABI over a trained spkxl checkpoint.
//!
//! Every fallible function returns a [`SpkxlStatus`]; on failure the message
//! is available from [`spkxl_last_error`] on the same thread. Handles come
//! from [`spkxl_model_load`] and are released with [`spkxl_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use spkxl::attention::relative_index;
use spkxl::checkpoint;
use spkxl::encoding::{EncodedInput, Vocab, CLS, CLS_ID, PAD, SEP_ID};
use spkxl::gradcheck::audit_model;
use spkxl::{Error, ModelParams};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpkxlStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Checkpoint = 4,
    OutOfRange = 5,
    Runtime = 6,
    Panic = 7,
}

/// A loaded model. Opaque to C.
pub struct SpkxlModel {
    params: ModelParams,
    vocab: Option<Vocab>,
    label_names: Vec<CString>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: impl Into<String>) {
    let text = message.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).unwrap_or_default());
}

fn status_of(e: &Error) -> SpkxlStatus {
    match e {
        Error::Io { .. } => SpkxlStatus::Io,
        Error::Checkpoint(_) | Error::Json(_) => SpkxlStatus::Checkpoint,
        Error::IndexOutOfRange { .. } | Error::Overlength { .. } => SpkxlStatus::OutOfRange,
        Error::Config(_) | Error::ShapeMismatch { .. } | Error::InvalidShape { .. } => SpkxlStatus::InvalidArgument,
        _ => SpkxlStatus::Runtime,
    }
}

/// Runs `body`, recording any error or panic as the thread's last error.
fn guard(body: impl FnOnce() -> Result<(), (SpkxlStatus, String)>) -> SpkxlStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => {
            set_error("");
            SpkxlStatus::Ok
        }
        Ok(Err((status, message))) => {
            set_error(message);
            status
        }
        Err(_) => {
            set_error("panic inside spkxl");
            SpkxlStatus::Panic
        }
    }
}

fn fail(e: Error) -> (SpkxlStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (SpkxlStatus, String) {
    (SpkxlStatus::NullPointer, format!("`{what}` is null"))
}

unsafe fn model_ref<'a>(model: *const SpkxlModel) -> Result<&'a SpkxlModel, (SpkxlStatus, String)> {
    model.as_ref().ok_or_else(|| null("model"))
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn spkxl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn spkxl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint written by `spkxl train` into `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn spkxl_model_load(path: *const c_char, out: *mut *mut SpkxlModel) -> SpkxlStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        if path.is_null() {
            return Err(null("path"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| (SpkxlStatus::InvalidArgument, "path is not UTF-8".to_string()))?;
        let (params, meta) = checkpoint::load(path).map_err(fail)?;
        let vocab: Option<Vocab> = meta.get("vocab").and_then(|v| serde_json::from_value(v.clone()).ok());
        let label_names = match &vocab {
            Some(v) => v.labels().to_vec(),
            None => (0..params.config.n_labels).map(|i| format!("label{i}")).collect(),
        };
        let label_names = label_names
            .into_iter()
            .map(|l| CString::new(l).unwrap_or_default())
            .collect();
        *out = Box::into_raw(Box::new(SpkxlModel {
            params,
            vocab,
            label_names,
        }));
        Ok(())
    })
}

/// Releases a handle from [`spkxl_model_load`]. Null is ignored.
///
/// # Safety
/// `model` must come from [`spkxl_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn spkxl_model_free(model: *mut SpkxlModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn spkxl_model_num_labels(model: *const SpkxlModel, out: *mut usize) -> SpkxlStatus {
    guard(|| {
        let m = model_ref(model)?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = m.label_names.len();
        Ok(())
    })
}

/// Name of label `index`; the string lives as long as the model.
///
/// # Safety
/// `model` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn spkxl_model_label_name(
    model: *const SpkxlModel,
    index: usize,
    out: *mut *const c_char,
) -> SpkxlStatus {
    guard(|| {
        let m = model_ref(model)?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let name = m.label_names.get(index).ok_or_else(|| {
            (
                SpkxlStatus::OutOfRange,
                format!("label {index} out of range for {} labels", m.label_names.len()),
            )
        })?;
        *out = name.as_ptr();
        Ok(())
    })
}

/// Vocabulary id of `token` (the unknown-token id when absent).
///
/// # Safety
/// `model` and `out` must be valid pointers; `token` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn spkxl_model_token_id(
    model: *const SpkxlModel,
    token: *const c_char,
    out: *mut u32,
) -> SpkxlStatus {
    guard(|| {
        let m = model_ref(model)?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        if token.is_null() {
            return Err(null("token"));
        }
        let vocab = m
            .vocab
            .as_ref()
            .ok_or_else(|| (SpkxlStatus::Checkpoint, "checkpoint carries no vocabulary".to_string()))?;
        let token = CStr::from_ptr(token).to_string_lossy();
        *out = vocab.id(&token) as u32;
        Ok(())
    })
}

/// Classification logits for one encoded sequence of `len` positions.
///
/// The sequence is laid out as produced by `spkxl encode`; the last `[CLS]`
/// id marks the read-out position. `out_logits` must hold `out_len` values,
/// at least the number of labels.
///
/// # Safety
/// The three id arrays must hold `len` values and `out_logits` `out_len`.
#[no_mangle]
pub unsafe extern "C" fn spkxl_model_logits(
    model: *const SpkxlModel,
    token_ids: *const u32,
    segment_ids: *const u32,
    speaker_ids: *const u32,
    len: usize,
    out_logits: *mut f64,
    out_len: usize,
) -> SpkxlStatus {
    guard(|| {
        let m = model_ref(model)?;
        if token_ids.is_null() || segment_ids.is_null() || speaker_ids.is_null() {
            return Err(null("id array"));
        }
        if out_logits.is_null() {
            return Err(null("out_logits"));
        }
        if len == 0 {
            return Err((SpkxlStatus::InvalidArgument, "empty sequence".into()));
        }
        let n_labels = m.params.config.n_labels;
        if out_len < n_labels {
            return Err((
                SpkxlStatus::InvalidArgument,
                format!("output holds {out_len} values, model has {n_labels} labels"),
            ));
        }
        let widen = |p: *const u32| {
            std::slice::from_raw_parts(p, len)
                .iter()
                .map(|&v| v as usize)
                .collect::<Vec<_>>()
        };
        let input = raw_input(
            widen(token_ids),
            widen(segment_ids),
            widen(speaker_ids),
            m.params.config.vocab_size,
        )?;
        let logits = m.params.logits(&input).map_err(fail)?;
        std::slice::from_raw_parts_mut(out_logits, n_labels).copy_from_slice(&logits);
        Ok(())
    })
}

fn raw_input(
    token_ids: Vec<usize>,
    segment_ids: Vec<usize>,
    speaker_ids: Vec<usize>,
    vocab_size: usize,
) -> Result<EncodedInput, (SpkxlStatus, String)> {
    if let Some(&bad) = token_ids.iter().find(|&&t| t >= vocab_size) {
        return Err(fail(Error::IndexOutOfRange {
            id: bad,
            size: vocab_size,
        }));
    }
    let cls_position = token_ids
        .iter()
        .rposition(|&t| t == CLS_ID)
        .ok_or_else(|| (SpkxlStatus::InvalidArgument, format!("sequence has no {CLS} id")))?;
    let seps: Vec<usize> = token_ids
        .iter()
        .enumerate()
        .filter(|(_, &t)| t == SEP_ID)
        .map(|(i, _)| i)
        .collect();
    let sep_positions = [
        seps.first().copied().unwrap_or(cls_position),
        seps.last().copied().unwrap_or(cls_position),
    ];
    let len = token_ids.len();
    Ok(EncodedInput {
        padding: vec![false; len],
        gold: Vec::new(),
        tokens: vec![PAD.to_string(); len],
        sep_positions,
        cls_position,
        token_ids,
        segment_ids,
        speaker_ids,
    })
}

/// Same-speaker indicator of two speaker ids: 1 when equal, 0 otherwise.
#[no_mangle]
pub extern "C" fn spkxl_relative_index(a: u32, b: u32) -> u32 {
    relative_index(a as usize, b as usize) as u32
}

/// Runs the full-model finite-difference audit for `seed` and stores the
/// largest relative error in `*out`.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn spkxl_gradcheck(seed: u64, out: *mut f64) -> SpkxlStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = audit_model(seed).map_err(fail)?.max_rel_error();
        Ok(())
    })
}
