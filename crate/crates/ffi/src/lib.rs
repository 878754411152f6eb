//! C ABI over `gridattn`: grid CRF inference and trained-model prediction.
//!
//! Handles are opaque and owned by the caller, who releases them with the matching
//! `*_free`. Every fallible call returns a [`GaStatus`]; on failure the message is
//! available from [`ga_last_error`] on the same thread until the next failing call.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use gridattn::crf::{exact_inference, mean_field_free_energy, Beliefs, GridGraph, PotentialTable};
use gridattn::inference::{lbp_infer, mean_field_infer, InferenceConfig, Schedule};
use gridattn::kv::KeyValues;
use gridattn::model::Model;
use gridattn::shapes::{pad_tokens, tokenize, Query};
use gridattn::{Error, Tensor};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Capacity = 4,
    Grammar = 5,
    Degenerate = 6,
    Numerical = 7,
    Format = 8,
    Io = 9,
    Panic = 10,
}

/// Grid graph with fixed unary and pairwise potentials.
pub struct GaCrf {
    graph: GridGraph,
    potentials: PotentialTable,
}

/// A trained model loaded from a checkpoint.
pub struct GaModel {
    model: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> GaStatus {
    match e {
        Error::Shape { .. } => GaStatus::Shape,
        Error::Config(_) => GaStatus::InvalidArgument,
        Error::Capacity(_) => GaStatus::Capacity,
        Error::Grammar(_) | Error::UnknownWord(_) => GaStatus::Grammar,
        Error::DegenerateAttention(_) => GaStatus::Degenerate,
        Error::Numerical(_) => GaStatus::Numerical,
        Error::Format(_) => GaStatus::Format,
        Error::Io(_) => GaStatus::Io,
    }
}

struct Fail(GaStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(GaStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> GaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => GaStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            GaStatus::Panic
        }
    }
}

/// # Safety
/// `ptr` must be null or valid for `len` reads.
unsafe fn slice<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

/// # Safety
/// `ptr` must be null or valid for `len` writes.
unsafe fn slice_mut<'a, T>(ptr: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, len))
}

fn write_marginals(b: &Beliefs, out: &mut [f64]) {
    for (o, row) in out.iter_mut().zip(&b.0) {
        *o = row[1];
    }
}

/// Message of the last failing call on this thread; empty if none. Valid until the next failure.
#[no_mangle]
pub extern "C" fn ga_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ga_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Builds a `height × width` grid CRF. `unary_one` holds `p(z_i = 1)` in `(0, 1)` for each
/// node in row-major order; `pairwise` holds 4 strictly positive entries per canonical edge
/// (right neighbor before down neighbor, indexed `z_i * 2 + z_j`).
///
/// # Safety
/// `unary_one` must hold `height * width` doubles and `pairwise` 4 per edge, where the edge
/// count is `height * (width - 1) + (height - 1) * width`. `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ga_crf_new(
    height: usize,
    width: usize,
    unary_one: *const f64,
    pairwise: *const f64,
    out: *mut *mut GaCrf,
) -> GaStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = std::ptr::null_mut();
        let graph = GridGraph::new(height, width)?;
        let u = slice(unary_one, graph.num_nodes(), "unary_one")?;
        let p = slice(pairwise, 4 * graph.num_edges(), "pairwise")?;
        if !u.iter().all(|&v| v > 0.0 && v < 1.0) {
            return Err(Fail(GaStatus::InvalidArgument, "unary probabilities must lie in (0, 1)".into()));
        }
        let unary = u.iter().map(|&v| [1.0 - v, v]).collect();
        let pair = p.chunks(4).map(|c| [c[0], c[1], c[2], c[3]]).collect();
        let potentials = PotentialTable::new(unary, pair);
        potentials.check(&graph)?;
        *out = Box::into_raw(Box::new(GaCrf { graph, potentials }));
        Ok(())
    })
}

/// # Safety
/// `crf` must be null or a handle from [`ga_crf_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ga_crf_free(crf: *mut GaCrf) {
    if !crf.is_null() {
        drop(Box::from_raw(crf));
    }
}

/// # Safety
/// `crf` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ga_crf_num_nodes(crf: *const GaCrf) -> usize {
    crf.as_ref().map_or(0, |c| c.graph.num_nodes())
}

/// # Safety
/// `crf` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ga_crf_num_edges(crf: *const GaCrf) -> usize {
    crf.as_ref().map_or(0, |c| c.graph.num_edges())
}

/// Exact marginals `p(z_i = 1)` by enumeration; `log_z` may be null.
///
/// # Safety
/// `crf` must be a live handle; `marginals` must hold one double per node.
#[no_mangle]
pub unsafe extern "C" fn ga_crf_exact(crf: *const GaCrf, marginals: *mut f64, log_z: *mut f64) -> GaStatus {
    guard(|| {
        let c = crf.as_ref().ok_or_else(|| null("crf"))?;
        let out = slice_mut(marginals, c.graph.num_nodes(), "marginals")?;
        let r = exact_inference(&c.graph, &c.potentials)?;
        write_marginals(&r.beliefs, out);
        if !log_z.is_null() {
            *log_z = r.log_z;
        }
        Ok(())
    })
}

/// `steps` mean-field sweeps from the unary; `sequential` nonzero selects in-place updates.
///
/// # Safety
/// `crf` must be a live handle; `marginals` must hold one double per node.
#[no_mangle]
pub unsafe extern "C" fn ga_crf_mean_field(
    crf: *const GaCrf,
    steps: usize,
    sequential: i32,
    marginals: *mut f64,
) -> GaStatus {
    guard(|| {
        let c = crf.as_ref().ok_or_else(|| null("crf"))?;
        let out = slice_mut(marginals, c.graph.num_nodes(), "marginals")?;
        let cfg = InferenceConfig {
            steps,
            schedule: if sequential != 0 { Schedule::Sequential } else { Schedule::Parallel },
            damping: 0.0,
        };
        let r = mean_field_infer(&c.graph, &c.potentials.unary, &c.potentials.log_pairwise, &cfg)?;
        write_marginals(&r.beliefs, out);
        Ok(())
    })
}

/// `steps` synchronous loopy BP iterations with message damping in `[0, 1)`.
///
/// # Safety
/// `crf` must be a live handle; `marginals` must hold one double per node.
#[no_mangle]
pub unsafe extern "C" fn ga_crf_lbp(crf: *const GaCrf, steps: usize, damping: f64, marginals: *mut f64) -> GaStatus {
    guard(|| {
        let c = crf.as_ref().ok_or_else(|| null("crf"))?;
        let out = slice_mut(marginals, c.graph.num_nodes(), "marginals")?;
        let cfg = InferenceConfig {
            steps,
            schedule: Schedule::Parallel,
            damping,
        };
        let r = lbp_infer(&c.graph, &c.potentials, &cfg)?;
        write_marginals(&r.beliefs, out);
        Ok(())
    })
}

/// Mean-field free energy of the factorized distribution with the given `p(z_i = 1)`.
///
/// # Safety
/// `crf` must be a live handle; `marginals` must hold one double per node; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ga_crf_free_energy(crf: *const GaCrf, marginals: *const f64, out: *mut f64) -> GaStatus {
    guard(|| {
        let c = crf.as_ref().ok_or_else(|| null("crf"))?;
        let m = slice(marginals, c.graph.num_nodes(), "marginals")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let b = Beliefs(m.iter().map(|&v| [1.0 - v, v]).collect());
        *out = mean_field_free_energy(&c.graph, &c.potentials, &b)?;
        Ok(())
    })
}

/// Loads a checkpoint and its sidecar configuration.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ga_model_load(path: *const c_char, out: *mut *mut GaModel) -> GaStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = std::ptr::null_mut();
        if path.is_null() {
            return Err(null("path"));
        }
        let p = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Fail(GaStatus::InvalidArgument, "path is not UTF-8".into()))?;
        let model = Model::load(Path::new(p), &KeyValues::new())?;
        *out = Box::into_raw(Box::new(GaModel { model }));
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle from [`ga_model_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ga_model_free(model: *mut GaModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Expected image length: `3 * size * size` doubles, channel-major.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ga_model_image_len(model: *const GaModel) -> usize {
    model.as_ref().map_or(0, |m| 3 * m.model.config.image_size * m.model.config.image_size)
}

/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ga_model_num_regions(model: *const GaModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.config.num_regions())
}

/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ga_model_num_answers(model: *const GaModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.config.answers)
}

/// Answers `query` about `image`. `answer` receives the class index (0 = no, 1 = yes);
/// `probabilities` (one per answer) and `attention` (first glimpse, one per region) may be null.
///
/// # Safety
/// `model` must be a live handle, `image` must hold `image_len` doubles, `query` must be a
/// NUL-terminated string, and the output pointers must be null or large enough.
#[no_mangle]
pub unsafe extern "C" fn ga_model_predict(
    model: *const GaModel,
    image: *const f64,
    image_len: usize,
    query: *const c_char,
    answer: *mut usize,
    probabilities: *mut f64,
    attention: *mut f64,
) -> GaStatus {
    guard(|| {
        let m = &model.as_ref().ok_or_else(|| null("model"))?.model;
        let size = m.config.image_size;
        if image_len != 3 * size * size {
            return Err(Error::Shape {
                op: "ga_model_predict",
                left: vec![image_len],
                right: vec![3 * size * size],
            }
            .into());
        }
        let pixels = slice(image, image_len, "image")?;
        if query.is_null() {
            return Err(null("query"));
        }
        let text = CStr::from_ptr(query)
            .to_str()
            .map_err(|_| Fail(GaStatus::Grammar, "query is not UTF-8".into()))?;
        Query::parse(text)?;
        let tokens = pad_tokens(tokenize(text)?);
        let tensor = Tensor::new(&[3, size, size], pixels.to_vec())?;
        let p = m.predict(&tensor, &tokens)?;
        if answer.is_null() {
            return Err(null("answer"));
        }
        *answer = p.answer;
        if !probabilities.is_null() {
            slice_mut(probabilities, p.probabilities.len(), "probabilities")?.copy_from_slice(&p.probabilities);
        }
        if !attention.is_null() {
            let map = &p.artifacts.glimpses[0].map;
            slice_mut(attention, map.len(), "attention")?.copy_from_slice(map);
        }
        Ok(())
    })
}
