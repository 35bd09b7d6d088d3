//! C ABI over `ragmeta`.
//!
//! Every fallible call returns a [`RagStatus`]; on failure the message is
//! available from [`rag_last_error`] on the same thread. Objects are opaque
//! handles created by `*_open`/`*_load`/`*_new` and released by the matching
//! `*_free`. Handles may be read from several threads at once but must not be
//! freed while in use. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::ptr;

use ndarray::ArrayView2;
use ragmeta::cli::{load_checkpoint, load_knowledge_base, prototypes_from};
use ragmeta::corpus::{tokenize, Vocabulary};
use ragmeta::fusion::pool_scores;
use ragmeta::meta::{predict_proba, score_query, Context, Dataset, KnowledgeBase, Model};
use ragmeta::retriever::PassageIndex;
use ragmeta::{Error, Pooling, TrainConfig};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RagStatus {
    Ok = 0,
    /// A required pointer argument was NULL.
    NullArgument = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    /// The output buffer is smaller than the result; the needed size was written.
    BufferTooSmall = 4,
    Io = 5,
    /// A file or record could not be parsed.
    Parse = 6,
    Config = 7,
    Shape = 8,
    /// A Rust panic was caught at the boundary.
    Panic = 9,
    Internal = 10,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RagPooling {
    Mean = 0,
    Max = 1,
}

/// A passage index file opened for top-m search.
pub struct RagIndex(PassageIndex);

/// Labeled support sentences. Class `i` is the `i`-th distinct label in
/// byte-wise sorted order.
pub struct RagSupport {
    dataset: Dataset,
    labels: Vec<CString>,
}

/// A trained checkpoint together with its vocabulary and retriever.
pub struct RagClassifier {
    model: Model,
    cfg: TrainConfig,
    vocab: Vocabulary,
    kb: KnowledgeBase,
}

struct Failure(RagStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = status_of(&e);
        Failure(status, e.to_string())
    }
}

fn status_of(e: &Error) -> RagStatus {
    match e {
        Error::Io { .. } => RagStatus::Io,
        Error::Parse { .. } | Error::Format(_) | Error::DuplicateDoc(_) | Error::EmptyTitle(_) => {
            RagStatus::Parse
        }
        Error::Config(_) => RagStatus::Config,
        Error::Shape(_) => RagStatus::Shape,
        Error::QueryTooLong { .. } | Error::EmptyQuery | Error::Sampling(_) => {
            RagStatus::InvalidArgument
        }
        Error::AtStep { source, .. } => status_of(source),
        Error::NonFinite => RagStatus::Internal,
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let msg = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(msg));
}

fn guard<F>(f: F) -> RagStatus
where
    F: FnOnce() -> Result<(), Failure>,
{
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => RagStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".to_string());
            set_last_error(format!("panic: {msg}"));
            RagStatus::Panic
        }
    }
}

fn null(name: &str) -> Failure {
    Failure(RagStatus::NullArgument, format!("{name} is NULL"))
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(name));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(RagStatus::InvalidUtf8, format!("{name} is not valid UTF-8")))
}

unsafe fn handle<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(name))
}

fn out_ptr<T>(p: *mut T, name: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(null(name))
    } else {
        Ok(())
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn rag_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or NULL if none failed.
/// Valid until the next failing call on this thread.
#[no_mangle]
pub extern "C" fn rag_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Opens an index file written by `build-index`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn rag_index_load(path: *const c_char, out: *mut *mut RagIndex) -> RagStatus {
    guard(|| {
        out_ptr(out, "out")?;
        *out = ptr::null_mut();
        let path = str_arg(path, "path")?;
        let index = PassageIndex::load(Path::new(path))?;
        *out = Box::into_raw(Box::new(RagIndex(index)));
        Ok(())
    })
}

/// Number of indexed passages; 0 for NULL.
///
/// # Safety
/// `index` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rag_index_len(index: *const RagIndex) -> usize {
    index.as_ref().map_or(0, |i| i.0.len())
}

/// Vector width; 0 for NULL.
///
/// # Safety
/// `index` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rag_index_dim(index: *const RagIndex) -> usize {
    index.as_ref().map_or(0, |i| i.0.dim())
}

/// Top-`m` passages by inner product with `query`, best first, ties broken
/// by lower passage id. `out_ids` and `out_scores` must hold `m` entries;
/// the number written goes to `out_count`.
///
/// # Safety
/// `query` must point to `dim` doubles; the output arrays to `m` slots each.
#[no_mangle]
pub unsafe extern "C" fn rag_index_top_m(
    index: *const RagIndex,
    query: *const f64,
    dim: usize,
    m: usize,
    out_ids: *mut u64,
    out_scores: *mut f64,
    out_count: *mut usize,
) -> RagStatus {
    guard(|| {
        let index = &handle(index, "index")?.0;
        out_ptr(out_count, "out_count")?;
        *out_count = 0;
        if query.is_null() {
            return Err(null("query"));
        }
        if dim != index.dim() {
            return Err(Failure(
                RagStatus::Shape,
                format!(
                    "query has {dim} entries but the index is {} wide",
                    index.dim()
                ),
            ));
        }
        let q = ndarray::ArrayView1::from(std::slice::from_raw_parts(query, dim));
        let hits = index.top_m(q, m);
        if !hits.is_empty() {
            out_ptr(out_ids, "out_ids")?;
            out_ptr(out_scores, "out_scores")?;
        }
        for (k, h) in hits.iter().enumerate() {
            *out_ids.add(k) = h.passage_id;
            *out_scores.add(k) = h.score;
        }
        *out_count = hits.len();
        Ok(())
    })
}

/// # Safety
/// `index` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rag_index_free(index: *mut RagIndex) {
    if !index.is_null() {
        drop(Box::from_raw(index));
    }
}

/// Builds a support set from `count` parallel label and text strings.
///
/// # Safety
/// `labels` and `texts` must each point to `count` NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn rag_support_new(
    labels: *const *const c_char,
    texts: *const *const c_char,
    count: usize,
    out: *mut *mut RagSupport,
) -> RagStatus {
    guard(|| {
        out_ptr(out, "out")?;
        *out = ptr::null_mut();
        if count == 0 {
            return Err(Failure(
                RagStatus::InvalidArgument,
                "support set is empty".into(),
            ));
        }
        if labels.is_null() {
            return Err(null("labels"));
        }
        if texts.is_null() {
            return Err(null("texts"));
        }
        let mut pairs = Vec::with_capacity(count);
        for k in 0..count {
            let label = str_arg(*labels.add(k), &format!("labels[{k}]"))?;
            let text = str_arg(*texts.add(k), &format!("texts[{k}]"))?;
            pairs.push((label, text));
        }
        let dataset = Dataset::from_pairs(pairs)?;
        let labels = dataset
            .label_names
            .iter()
            .map(|l| CString::new(l.as_str()).expect("labels came from C strings"))
            .collect();
        *out = Box::into_raw(Box::new(RagSupport { dataset, labels }));
        Ok(())
    })
}

/// Number of distinct labels; 0 for NULL.
///
/// # Safety
/// `support` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rag_support_num_classes(support: *const RagSupport) -> usize {
    support.as_ref().map_or(0, |s| s.labels.len())
}

/// Label of class `class`, owned by the handle; NULL when out of range.
///
/// # Safety
/// `support` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rag_support_label(
    support: *const RagSupport,
    class: usize,
) -> *const c_char {
    support
        .as_ref()
        .and_then(|s| s.labels.get(class))
        .map_or(ptr::null(), |l| l.as_ptr())
}

/// # Safety
/// `support` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rag_support_free(support: *mut RagSupport) {
    if !support.is_null() {
        drop(Box::from_raw(support));
    }
}

/// Opens a work directory prepared by `ingest` and `build-index` together
/// with a checkpoint written by `train`. A NULL `model_dir` means
/// `<work_dir>/model-fusion`.
///
/// # Safety
/// String arguments must be NUL-terminated (`model_dir` may be NULL);
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rag_classifier_open(
    work_dir: *const c_char,
    model_dir: *const c_char,
    out: *mut *mut RagClassifier,
) -> RagStatus {
    guard(|| {
        out_ptr(out, "out")?;
        *out = ptr::null_mut();
        let work = PathBuf::from(str_arg(work_dir, "work_dir")?);
        let model_dir = if model_dir.is_null() {
            work.join("model-fusion")
        } else {
            PathBuf::from(str_arg(model_dir, "model_dir")?)
        };
        let (model, cfg) = load_checkpoint(&model_dir)?;
        let (vocab, kb) = load_knowledge_base(&work, cfg.cache_retrieval)?;
        *out = Box::into_raw(Box::new(RagClassifier {
            model,
            cfg,
            vocab,
            kb,
        }));
        Ok(())
    })
}

/// Passages retrieved per query; 0 for NULL.
///
/// # Safety
/// `classifier` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rag_classifier_passages(classifier: *const RagClassifier) -> usize {
    classifier.as_ref().map_or(0, |c| c.cfg.m)
}

/// Class probabilities of `query` against the prototypes of `support`, in
/// support class order. Writes the class count to `out_num_classes` and
/// fails with `BufferTooSmall` when `capacity` is below it.
///
/// # Safety
/// `query` must be NUL-terminated; `out_probs` must hold `capacity` doubles.
#[no_mangle]
pub unsafe extern "C" fn rag_classify(
    classifier: *const RagClassifier,
    support: *const RagSupport,
    query: *const c_char,
    out_probs: *mut f64,
    capacity: usize,
    out_num_classes: *mut usize,
) -> RagStatus {
    guard(|| {
        let cls = handle(classifier, "classifier")?;
        let support = handle(support, "support")?;
        out_ptr(out_num_classes, "out_num_classes")?;
        let classes = support.labels.len();
        *out_num_classes = classes;
        if capacity < classes {
            return Err(Failure(
                RagStatus::BufferTooSmall,
                format!("{classes} classes need {classes} slots, got {capacity}"),
            ));
        }
        out_ptr(out_probs, "out_probs")?;
        let tokens = tokenize(str_arg(query, "query")?);
        if tokens.is_empty() {
            return Err(Error::EmptyQuery.into());
        }
        let protos = prototypes_from(&cls.model, &cls.vocab, &support.dataset, usize::MAX)?;
        let ctx = Context::new(&cls.vocab, &cls.kb, &cls.cfg);
        let scores = score_query(&cls.model, &ctx, &protos, &tokens)?;
        let probs = predict_proba(scores.view());
        std::slice::from_raw_parts_mut(out_probs, classes)
            .copy_from_slice(probs.as_slice().expect("contiguous"));
        Ok(())
    })
}

/// # Safety
/// `classifier` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rag_classifier_free(classifier: *mut RagClassifier) {
    if !classifier.is_null() {
        drop(Box::from_raw(classifier));
    }
}

/// Pools a row-major `views x classes` score matrix into `classes` scores.
///
/// # Safety
/// `scores` must hold `views * classes` doubles and `out` `classes`.
#[no_mangle]
pub unsafe extern "C" fn rag_pool_scores(
    scores: *const f64,
    views: usize,
    classes: usize,
    strategy: RagPooling,
    out: *mut f64,
) -> RagStatus {
    guard(|| {
        if views == 0 || classes == 0 {
            return Err(Failure(
                RagStatus::InvalidArgument,
                "need at least one view and one class".into(),
            ));
        }
        if scores.is_null() {
            return Err(null("scores"));
        }
        out_ptr(out, "out")?;
        let len = views.checked_mul(classes).ok_or_else(|| {
            Failure(
                RagStatus::InvalidArgument,
                "views * classes overflows".into(),
            )
        })?;
        let s = ArrayView2::from_shape((views, classes), std::slice::from_raw_parts(scores, len))
            .map_err(|e| Failure(RagStatus::Shape, e.to_string()))?;
        let strategy = match strategy {
            RagPooling::Mean => Pooling::Mean,
            RagPooling::Max => Pooling::Max,
        };
        let pooled = pool_scores(s, strategy);
        std::slice::from_raw_parts_mut(out, classes)
            .copy_from_slice(pooled.as_slice().expect("contiguous"));
        Ok(())
    })
}
