//! C ABI over a trained model: load a checkpoint, embed queries and gallery
//! images from raw patch latents, and rank.
//!
//! Every fallible call returns an [`AfStatus`]. On failure the message is
//! available from [`af_last_error`] on the same thread until the next call.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;

use anchorfocus::encoders::{PatchEmbeddings, TextEmbedding};
use anchorfocus::eval::rank_gallery;
use anchorfocus::geometry::BBox;
use anchorfocus::model::{load_checkpoint, query_representation, target_representation, BetaSource, ModelParams, QueryInput, QueryView};
use anchorfocus::numerics::Tensor;
use anchorfocus::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AfStatus {
    Ok = 0,
    /// A required pointer was null.
    NullArgument = 1,
    /// A string argument was not UTF-8.
    InvalidUtf8 = 2,
    Config = 3,
    Data = 4,
    Io = 5,
    /// Buffer lengths or shapes disagree with the model.
    Dimension = 6,
    /// Inputs violate a precondition (degenerate box, empty gallery, ...).
    InvalidInput = 7,
    /// A Rust panic was caught at the boundary.
    Internal = 8,
}

/// How the query branch sets its attention bias.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AfBetaMode {
    /// Predicted per query by the modulator.
    Adaptive = 0,
    /// The `fixed_beta` argument for every query.
    Fixed = 1,
    /// No bias: the box is ignored.
    Off = 2,
}

/// Opaque handle to a loaded model.
pub struct AfModel {
    params: ModelParams,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> AfStatus {
    match e {
        Error::Config(_) => AfStatus::Config,
        Error::Data { .. } => AfStatus::Data,
        Error::Io { .. } => AfStatus::Io,
        Error::Dimension(_) | Error::Alignment { .. } => AfStatus::Dimension,
        _ => AfStatus::InvalidInput,
    }
}

struct Fail(AfStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(AfStatus::NullArgument, format!("{what} is null"))
}

fn dim(msg: String) -> Fail {
    Fail(AfStatus::Dimension, msg)
}

/// Runs `f`, records any failure, and never unwinds across the boundary.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> AfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => AfStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            AfStatus::Internal
        }
    }
}

unsafe fn slice<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn slice_mut<'a, T>(ptr: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, len))
}

unsafe fn model<'a>(m: *const AfModel) -> Result<&'a AfModel, Fail> {
    m.as_ref().ok_or_else(|| null("model"))
}

fn patches(params: &ModelParams, latents: &[f64], grid_h: usize, grid_w: usize) -> Result<PatchEmbeddings, Fail> {
    let d = params.encoder.d_latent();
    let n = grid_h * grid_w;
    if n == 0 || latents.len() != n * d {
        return Err(dim(format!("expected {n} patches of {d} latents ({} values), got {}", n * d, latents.len())));
    }
    let t = Tensor::from_vec(n, d, latents.to_vec())?;
    Ok(PatchEmbeddings {
        grid: (grid_h, grid_w),
        tokens: t.matmul(&params.encoder.image_proj)?,
    })
}

fn copy_out(v: &[f64], out: &mut [f64]) -> Result<(), Fail> {
    if out.len() != v.len() {
        return Err(dim(format!("output buffer holds {} values, embedding has {}", out.len(), v.len())));
    }
    out.copy_from_slice(v);
    Ok(())
}

/// Message of the last failure on this thread, or null. The pointer stays
/// valid until the next call into this library from the same thread.
#[no_mangle]
pub extern "C" fn af_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn af_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint written by `anchorfocus train`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn af_model_load(path: *const c_char, out: *mut *mut AfModel) -> AfStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let p = CStr::from_ptr(path).to_str().map_err(|e| Fail(AfStatus::InvalidUtf8, format!("path: {e}")))?;
        let ck = load_checkpoint(Path::new(p))?;
        *out = Box::into_raw(Box::new(AfModel { params: ck.params }));
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `m` must come from [`af_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn af_model_free(m: *mut AfModel) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Width of the embeddings the model produces, or 0 for a null handle.
///
/// # Safety
/// `m` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn af_model_embed_dim(m: *const AfModel) -> usize {
    m.as_ref().map_or(0, |m| m.params.config.d_embed)
}

/// Width of one patch latent (and of a text context), or 0 for a null handle.
///
/// # Safety
/// `m` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn af_model_latent_dim(m: *const AfModel) -> usize {
    m.as_ref().map_or(0, |m| m.params.encoder.d_latent())
}

/// Embeds a gallery image given `grid_h * grid_w` patch latents in raster
/// order. Writes `af_model_embed_dim` values to `out`.
///
/// # Safety
/// Pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn af_embed_target(
    m: *const AfModel,
    latents: *const f64,
    latents_len: usize,
    grid_h: usize,
    grid_w: usize,
    out: *mut f64,
    out_len: usize,
) -> AfStatus {
    guard(|| {
        let m = model(m)?;
        let p = patches(&m.params, slice(latents, latents_len, "latents")?, grid_h, grid_w)?;
        let e = target_representation(&m.params, &p)?;
        copy_out(&e, slice_mut(out, out_len, "out")?)
    })
}

/// Embeds a query: reference patch latents, the anchored box as
/// `[x0, y0, x1, y1]` in unit coordinates, and the target context latent.
/// When `beta_out` is non-null it receives the bias used (0 when off).
///
/// # Safety
/// Pointers must be valid for the stated lengths; `bbox` holds 4 values.
#[no_mangle]
pub unsafe extern "C" fn af_embed_query(
    m: *const AfModel,
    latents: *const f64,
    latents_len: usize,
    grid_h: usize,
    grid_w: usize,
    bbox: *const f64,
    context: *const f64,
    context_len: usize,
    mode: AfBetaMode,
    fixed_beta: f64,
    out: *mut f64,
    out_len: usize,
    beta_out: *mut f64,
) -> AfStatus {
    guard(|| {
        let m = model(m)?;
        let p = patches(&m.params, slice(latents, latents_len, "latents")?, grid_h, grid_w)?;
        let b = slice(bbox, 4, "bbox")?;
        let bbox = BBox::new(b[0], b[1], b[2], b[3])?;
        let ctx = slice(context, context_len, "context")?;
        if ctx.len() != m.params.encoder.d_latent() {
            return Err(dim(format!("context has {} values, model expects {}", ctx.len(), m.params.encoder.d_latent())));
        }
        let text: TextEmbedding = m.params.encoder.embed_text(ctx)?;
        let source = match mode {
            AfBetaMode::Adaptive => BetaSource::Adaptive,
            AfBetaMode::Fixed => BetaSource::Fixed { beta: fixed_beta },
            AfBetaMode::Off => BetaSource::Off,
        };
        let q = QueryInput {
            patches: Arc::new(p),
            text: Arc::new(text),
            bbox,
        };
        let e = query_representation(&m.params, &q, source, QueryView::Full)?;
        copy_out(&e.embedding, slice_mut(out, out_len, "out")?)?;
        if !beta_out.is_null() {
            *beta_out = e.beta.unwrap_or(0.0);
        }
        Ok(())
    })
}

/// Ranks `n` gallery embeddings (row-major, `n * width` values) by descending
/// dot product with `query`; ties keep gallery order. Writes `n` indices.
///
/// # Safety
/// Pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn af_rank(query: *const f64, width: usize, gallery: *const f64, n: usize, order_out: *mut u32) -> AfStatus {
    guard(|| {
        if width == 0 {
            return Err(dim("embedding width must be positive".into()));
        }
        let q = slice(query, width, "query")?;
        let g = slice(gallery, n * width, "gallery")?;
        let out = slice_mut(order_out, n, "order_out")?;
        let rows: Vec<Vec<f64>> = g.chunks(width).map(<[f64]>::to_vec).collect();
        let order = rank_gallery(q, &rows)?;
        for (o, i) in out.iter_mut().zip(order) {
            *o = i as u32;
        }
        Ok(())
    })
}
