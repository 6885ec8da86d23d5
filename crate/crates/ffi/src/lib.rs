//! C ABI over the aicl library.
//!
//! Fallible calls return an [`AiclStatus`] and write results through out
//! pointers. After a non-`Ok` status, `aicl_last_error` describes the failure
//! on the calling thread. Objects are opaque handles released with their
//! matching `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, UnwindSafe};
use std::path::PathBuf;
use std::ptr;

use aicl::dataset::TaskConfig;
use aicl::eval::{macro_prf, mcnemar_counts};
use aicl::gateway::{extract_posterior, BackendKind, GenerationResponse, PosteriorSource, TokenLogprob};
use aicl::index::{cosine, EmbeddingIndex, EmbeddingVector, IndexError, Neighborhood};
use aicl::predictor::{predict_k, FeatureVector, Heuristic, KPredictorModel, PredictorError};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AiclStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    DimensionMismatch = 5,
    NotFound = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AiclHeuristic {
    MaxConfidence = 0,
    SmallestIndex = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AiclPosteriorSource {
    Logprobs = 0,
    SurfaceMatch = 1,
    NoVerbaliserMatch = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AiclMcNemar {
    pub b: u64,
    pub c: u64,
    pub statistic: f64,
    pub p_value: f64,
    pub exact: bool,
    pub significant: bool,
}

pub struct AiclIndex(EmbeddingIndex);

pub struct AiclNeighborhood {
    inner: Neighborhood,
    ids: Vec<CString>,
}

pub struct AiclModel(KPredictorModel);

pub struct AiclTask(TaskConfig);

struct Failure(AiclStatus, String);

impl From<IndexError> for Failure {
    fn from(e: IndexError) -> Self {
        let status = match e {
            IndexError::Io { .. } => AiclStatus::Io,
            IndexError::CorruptFile(_) | IndexError::UnknownVersion => AiclStatus::Format,
            IndexError::DimensionMismatch(_) => AiclStatus::DimensionMismatch,
            IndexError::MissingId(_) => AiclStatus::NotFound,
            _ => AiclStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

impl From<PredictorError> for Failure {
    fn from(e: PredictorError) -> Self {
        let status = match e {
            PredictorError::Io { .. } => AiclStatus::Io,
            PredictorError::Format { .. } => AiclStatus::Format,
            PredictorError::DimensionMismatch { .. } => AiclStatus::DimensionMismatch,
            _ => AiclStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(AiclStatus::InvalidArgument, msg.into())
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure> + UnwindSafe) -> AiclStatus {
    match catch_unwind(f) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            AiclStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            AiclStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, name: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(Failure(AiclStatus::NullPointer, format!("{name} is null")))
    } else {
        Ok(())
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    non_null(p, name)?;
    CStr::from_ptr(p).to_str().map_err(|_| invalid(format!("{name} is not valid UTF-8")))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, name: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    non_null(p, name)?;
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn put<T>(out: *mut T, value: T, name: &str) -> Result<(), Failure> {
    non_null(out, name)?;
    out.write(value);
    Ok(())
}

/// Message for the last failed call on this thread, or NULL. Valid until the
/// next call into the library from the same thread.
#[no_mangle]
pub extern "C" fn aicl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

#[no_mangle]
pub extern "C" fn aicl_version() -> *const c_char {
    static VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    VERSION.as_ptr().cast()
}

/// Cosine similarity of two vectors of length `dim`.
///
/// # Safety
/// `a` and `b` must point to `dim` floats; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn aicl_cosine(a: *const f32, b: *const f32, dim: usize, out: *mut f64) -> AiclStatus {
    guard(|| {
        let a = EmbeddingVector::new(slice_arg(a, dim, "a")?.to_vec())?;
        let b = EmbeddingVector::new(slice_arg(b, dim, "b")?.to_vec())?;
        put(out, cosine(&a, &b)?, "out")
    })
}

/// Loads an embedding file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn aicl_index_load(path: *const c_char, out: *mut *mut AiclIndex) -> AiclStatus {
    guard(|| {
        let path = PathBuf::from(str_arg(path, "path")?);
        let index = EmbeddingIndex::load(&path)?;
        put(out, Box::into_raw(Box::new(AiclIndex(index))), "out")
    })
}

/// Builds an index from `n` ids and an `n x dim` row-major matrix.
///
/// # Safety
/// `ids` must hold `n` NUL-terminated strings and `data` `n * dim` floats.
#[no_mangle]
pub unsafe extern "C" fn aicl_index_from_vectors(
    ids: *const *const c_char,
    data: *const f32,
    n: usize,
    dim: usize,
    out: *mut *mut AiclIndex,
) -> AiclStatus {
    guard(|| {
        if dim == 0 {
            return Err(invalid("dim must be positive"));
        }
        let ids = slice_arg(ids, n, "ids")?;
        let data = slice_arg(data, n * dim, "data")?;
        let pairs = ids
            .iter()
            .zip(data.chunks(dim))
            .map(|(&id, row)| Ok((str_arg(id, "id")?.to_string(), EmbeddingVector::new(row.to_vec())?)))
            .collect::<Result<Vec<_>, Failure>>()?;
        let index = EmbeddingIndex::from_pairs(pairs)?;
        put(out, Box::into_raw(Box::new(AiclIndex(index))), "out")
    })
}

/// # Safety
/// `index` must come from `aicl_index_load` or `aicl_index_from_vectors`.
#[no_mangle]
pub unsafe extern "C" fn aicl_index_len(index: *const AiclIndex) -> usize {
    index.as_ref().map_or(0, |i| i.0.len())
}

/// # Safety
/// As for [`aicl_index_len`].
#[no_mangle]
pub unsafe extern "C" fn aicl_index_dim(index: *const AiclIndex) -> usize {
    index.as_ref().map_or(0, |i| i.0.dim())
}

/// The `m` stored vectors most similar to `query`, most similar first, ties
/// broken by id. `exclude` may be NULL.
///
/// # Safety
/// `index` must be a live handle, `query` must point to `dim` floats and
/// `exclude` must be NULL or NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn aicl_index_top_m(
    index: *const AiclIndex,
    query: *const f32,
    dim: usize,
    m: usize,
    exclude: *const c_char,
    out: *mut *mut AiclNeighborhood,
) -> AiclStatus {
    guard(|| {
        non_null(index, "index")?;
        let query = EmbeddingVector::new(slice_arg(query, dim, "query")?.to_vec())?;
        let exclude = if exclude.is_null() { None } else { Some(str_arg(exclude, "exclude")?) };
        let inner = (*index).0.top_m(&query, m, exclude)?;
        let ids =
            inner.entries.iter().map(|n| CString::new(n.id.as_str()).map_err(|_| invalid("id contains NUL"))).collect::<Result<_, _>>()?;
        put(out, Box::into_raw(Box::new(AiclNeighborhood { inner, ids })), "out")
    })
}

/// # Safety
/// `index` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn aicl_index_free(index: *mut AiclIndex) {
    if !index.is_null() {
        drop(Box::from_raw(index));
    }
}

/// # Safety
/// `nb` must be a live neighborhood handle.
#[no_mangle]
pub unsafe extern "C" fn aicl_neighborhood_len(nb: *const AiclNeighborhood) -> usize {
    nb.as_ref().map_or(0, |n| n.inner.len())
}

/// Id of entry `i`, or NULL when out of range. Owned by the neighborhood.
///
/// # Safety
/// `nb` must be a live neighborhood handle.
#[no_mangle]
pub unsafe extern "C" fn aicl_neighborhood_id(nb: *const AiclNeighborhood, i: usize) -> *const c_char {
    nb.as_ref().and_then(|n| n.ids.get(i)).map_or(ptr::null(), |c| c.as_ptr())
}

/// Similarity of entry `i`, or NaN when out of range.
///
/// # Safety
/// `nb` must be a live neighborhood handle.
#[no_mangle]
pub unsafe extern "C" fn aicl_neighborhood_similarity(nb: *const AiclNeighborhood, i: usize) -> f64 {
    nb.as_ref().and_then(|n| n.inner.entries.get(i)).map_or(f64::NAN, |e| e.similarity)
}

/// # Safety
/// `nb` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn aicl_neighborhood_free(nb: *mut AiclNeighborhood) {
    if !nb.is_null() {
        drop(Box::from_raw(nb));
    }
}

/// Loads a trained shot-count predictor.
///
/// # Safety
/// `path` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn aicl_model_load(path: *const c_char, out: *mut *mut AiclModel) -> AiclStatus {
    guard(|| {
        let model = KPredictorModel::load(&PathBuf::from(str_arg(path, "path")?))?;
        put(out, Box::into_raw(Box::new(AiclModel(model))), "out")
    })
}

/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn aicl_model_input_dim(model: *const AiclModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.input_dim)
}

/// Number of shot counts scored, `M + 1`.
///
/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn aicl_model_output_dim(model: *const AiclModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.output_dim)
}

/// Chooses a shot count for one feature vector. `posteriors` may be NULL;
/// otherwise it receives `aicl_model_output_dim` values.
///
/// # Safety
/// `features` must point to `len` doubles and `posteriors`, when non-NULL,
/// must have room for the model's output dimension.
#[no_mangle]
pub unsafe extern "C" fn aicl_predict_k(
    model: *const AiclModel,
    features: *const f64,
    len: usize,
    heuristic: AiclHeuristic,
    out_k: *mut usize,
    posteriors: *mut f64,
) -> AiclStatus {
    guard(|| {
        non_null(model, "model")?;
        let x = FeatureVector(slice_arg(features, len, "features")?.to_vec());
        let h = match heuristic {
            AiclHeuristic::MaxConfidence => Heuristic::MaxConfidence,
            AiclHeuristic::SmallestIndex => Heuristic::SmallestIndex,
        };
        let sel = predict_k(&(*model).0, &x, h)?;
        if !posteriors.is_null() {
            ptr::copy_nonoverlapping(sel.posteriors.as_ptr(), posteriors, sel.posteriors.len());
        }
        put(out_k, sel.chosen_k, "out_k")
    })
}

/// # Safety
/// `model` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn aicl_model_free(model: *mut AiclModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Loads and validates a task definition (TOML).
///
/// # Safety
/// `path` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn aicl_task_load(path: *const c_char, out: *mut *mut AiclTask) -> AiclStatus {
    guard(|| {
        let task = TaskConfig::load(&PathBuf::from(str_arg(path, "path")?)).map_err(|e| Failure(AiclStatus::Format, e.to_string()))?;
        put(out, Box::into_raw(Box::new(AiclTask(task))), "out")
    })
}

/// # Safety
/// `task` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn aicl_task_num_classes(task: *const AiclTask) -> usize {
    task.as_ref().map_or(0, |t| t.0.num_classes())
}

/// # Safety
/// `task` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn aicl_task_free(task: *mut AiclTask) {
    if !task.is_null() {
        drop(Box::from_raw(task));
    }
}

/// Class posterior for a generation: `n_tokens` first-token candidates with
/// their log-probabilities (may be zero), plus the generated text as a
/// fallback. Writes `aicl_task_num_classes` probabilities to `out_probs`.
///
/// # Safety
/// `text` must be NUL-terminated, `tokens` and `logprobs` must hold
/// `n_tokens` entries, `out_probs` must have room for every class.
#[no_mangle]
pub unsafe extern "C" fn aicl_extract_posterior(
    task: *const AiclTask,
    text: *const c_char,
    tokens: *const *const c_char,
    logprobs: *const f64,
    n_tokens: usize,
    out_probs: *mut f64,
    out_source: *mut AiclPosteriorSource,
) -> AiclStatus {
    guard(|| {
        non_null(task, "task")?;
        non_null(out_probs, "out_probs")?;
        let task = &(*task).0;
        let tokens = slice_arg(tokens, n_tokens, "tokens")?;
        let logprobs = slice_arg(logprobs, n_tokens, "logprobs")?;
        let candidates = tokens
            .iter()
            .zip(logprobs)
            .map(|(&t, &l)| Ok(TokenLogprob { token: str_arg(t, "token")?.to_string(), logprob: l }))
            .collect::<Result<Vec<_>, Failure>>()?;
        let resp = GenerationResponse {
            text: str_arg(text, "text")?.to_string(),
            token_logprobs: (!candidates.is_empty()).then_some(candidates),
            backend: BackendKind::Http,
            cached: false,
        };
        let ex = extract_posterior(&resp, task);
        let probs = ex.posterior.probs();
        ptr::copy_nonoverlapping(probs.as_ptr(), out_probs, probs.len());
        if !out_source.is_null() {
            out_source.write(match ex.source {
                PosteriorSource::Logprobs => AiclPosteriorSource::Logprobs,
                PosteriorSource::SurfaceMatch => AiclPosteriorSource::SurfaceMatch,
                PosteriorSource::NoVerbaliserMatch => AiclPosteriorSource::NoVerbaliserMatch,
            });
        }
        Ok(())
    })
}

/// McNemar's test from the discordant counts.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn aicl_mcnemar(b: u64, c: u64, out: *mut AiclMcNemar) -> AiclStatus {
    guard(|| {
        let r = mcnemar_counts(b, c);
        put(
            out,
            AiclMcNemar { b: r.b, c: r.c, statistic: r.statistic, p_value: r.p_value, exact: r.exact, significant: r.significant },
            "out",
        )
    })
}

/// Macro-averaged precision, recall and F1 over `num_classes` classes.
/// Class ids outside `0..num_classes` in `pred` mark failed predictions.
///
/// # Safety
/// `gold` and `pred` must hold `n` entries; the out pointers must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn aicl_macro_f1(
    gold: *const u32,
    pred: *const u32,
    n: usize,
    num_classes: usize,
    out_precision: *mut f64,
    out_recall: *mut f64,
    out_f1: *mut f64,
) -> AiclStatus {
    guard(|| {
        if n == 0 || num_classes == 0 {
            return Err(invalid("need at least one prediction and one class"));
        }
        let gold: Vec<usize> = slice_arg(gold, n, "gold")?.iter().map(|&g| g as usize).collect();
        if let Some(g) = gold.iter().find(|&&g| g >= num_classes) {
            return Err(invalid(format!("gold class {g} out of range")));
        }
        let pred: Vec<usize> = slice_arg(pred, n, "pred")?.iter().map(|&p| (p as usize).min(num_classes)).collect();
        let (p, r, f) = macro_prf(&gold, &pred, num_classes);
        put(out_precision, p, "out_precision")?;
        put(out_recall, r, "out_recall")?;
        put(out_f1, f, "out_f1")
    })
}
