//! C ABI over the scalecl core: checkpointed model inference, the
//! contrastive loss with its gradient, label downsampling and mIoU.
//!
//! Every fallible call returns a [`ScaleclStatus`]; on failure the message is
//! available from [`scalecl_last_error`] on the same thread. Panics are caught
//! at the boundary and reported as `SCALECL_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use scalecl::autodiff::{Tape, Tensor};
use scalecl::harness::Checkpoint;
use scalecl::labels::{downsample_labels, LabelMap};
use scalecl::losses::info_nce;
use scalecl::sampler::AnchorSet;
use scalecl::segnet::{argmax_channels, miou, SegModel, IMAGE_CHANNELS};
use scalecl::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScaleclStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    NoPositivePairs = 4,
    NonFinite = 5,
    Checkpoint = 6,
    Io = 7,
    Panic = 8,
    Internal = 9,
}

impl From<&Error> for ScaleclStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Shape { .. } => Self::ShapeMismatch,
            Error::InvalidArgument(_) | Error::Config(_) | Error::AllIgnored | Error::EmptyPool => {
                Self::InvalidArgument
            }
            Error::NoPositivePairs | Error::NoCrossScalePositives => Self::NoPositivePairs,
            Error::NonFinite(_) => Self::NonFinite,
            Error::Checkpoint(_) => Self::Checkpoint,
            Error::Io(_) => Self::Io,
            _ => Self::Internal,
        }
    }
}

/// A segmentation model restored from a checkpoint.
pub struct ScaleclModel {
    model: SegModel,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg).unwrap_or_else(|e| {
        let mut bytes = e.into_vec();
        bytes.retain(|&b| b != 0);
        CString::new(bytes).expect("nul bytes removed")
    });
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

struct Fail(ScaleclStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail((&e).into(), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(ScaleclStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(ScaleclStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> ScaleclStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => ScaleclStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_last_error(format!("panic: {msg}"));
            ScaleclStatus::Panic
        }
    }
}

fn checked_len(dims: &[usize]) -> Result<usize, Fail> {
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| invalid("dimensions overflow"))
}

unsafe fn slice_in<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_out<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

/// Message of the most recent failure on this thread, or NULL if none. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn scalecl_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads a model from a checkpoint file. On success `*out` owns a handle that
/// must be released with [`scalecl_model_free`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn scalecl_model_load(path: *const c_char, out: *mut *mut ScaleclModel) -> ScaleclStatus {
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
            .map_err(|_| invalid("path is not UTF-8"))?;
        let model = Checkpoint::load(std::path::Path::new(path))?.model()?;
        *out = Box::into_raw(Box::new(ScaleclModel { model }));
        Ok(())
    })
}

/// # Safety
/// `model` must be NULL or a handle from [`scalecl_model_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn scalecl_model_free(model: *mut ScaleclModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of output classes, or 0 for a NULL handle.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn scalecl_model_num_classes(model: *const ScaleclModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.n_classes())
}

unsafe fn run_logits(
    model: *const ScaleclModel,
    images: *const f64,
    batch: usize,
    height: usize,
    width: usize,
) -> Result<Tensor, Fail> {
    let m = model.as_ref().ok_or_else(|| null("model"))?;
    let n = checked_len(&[batch, IMAGE_CHANNELS, height, width])?;
    if n == 0 {
        return Err(invalid("empty image batch"));
    }
    let data = slice_in(images, n, "images")?.to_vec();
    let t = Tensor::new(vec![batch, IMAGE_CHANNELS, height, width], data)?;
    Ok(m.model.predict_logits(&t)?)
}

/// Fused logits for `batch x 3 x height x width` images (NCHW, row-major) in
/// evaluation mode. `logits_out` receives `batch x classes x height x width`
/// values; `logits_len` must equal that count.
///
/// # Safety
/// `images` must hold `batch*3*height*width` doubles and `logits_out`
/// `logits_len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn scalecl_model_logits(
    model: *const ScaleclModel,
    images: *const f64,
    batch: usize,
    height: usize,
    width: usize,
    logits_out: *mut f64,
    logits_len: usize,
) -> ScaleclStatus {
    guard(|| {
        let logits = run_logits(model, images, batch, height, width)?;
        if logits_len != logits.numel() {
            return Err(invalid(format!("logits_len is {logits_len}, need {}", logits.numel())));
        }
        slice_out(logits_out, logits_len, "logits_out")?.copy_from_slice(logits.data());
        Ok(())
    })
}

/// Per-pixel argmax class of the fused logits. `labels_out` receives
/// `batch*height*width` class ids.
///
/// # Safety
/// `images` must hold `batch*3*height*width` doubles and `labels_out`
/// `labels_len` writable `uint32_t`s.
#[no_mangle]
pub unsafe extern "C" fn scalecl_model_predict(
    model: *const ScaleclModel,
    images: *const f64,
    batch: usize,
    height: usize,
    width: usize,
    labels_out: *mut u32,
    labels_len: usize,
) -> ScaleclStatus {
    guard(|| {
        let need = checked_len(&[batch, height, width])?;
        if labels_len != need {
            return Err(invalid(format!("labels_len is {labels_len}, need {need}")));
        }
        let logits = run_logits(model, images, batch, height, width)?;
        let pred = argmax_channels(&logits, u32::MAX)?;
        slice_out(labels_out, labels_len, "labels_out")?.copy_from_slice(pred.data());
        Ok(())
    })
}

/// Supervised InfoNCE over `n` rows of `dim` embeddings with class ids.
/// Rows are L2-normalized first when `normalize` is true. `grad_out` may be
/// NULL; otherwise it receives `n*dim` values of dloss/dembeddings.
///
/// # Safety
/// `embeddings` must hold `n*dim` doubles, `classes` `n` ids, `loss_out` one
/// writable double and `grad_out`, when not NULL, `n*dim` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn scalecl_info_nce(
    embeddings: *const f64,
    classes: *const u32,
    n: usize,
    dim: usize,
    tau: f64,
    normalize: bool,
    loss_out: *mut f64,
    grad_out: *mut f64,
) -> ScaleclStatus {
    guard(|| {
        if loss_out.is_null() {
            return Err(null("loss_out"));
        }
        if n == 0 || dim == 0 {
            return Err(invalid("need at least one row and one column"));
        }
        let len = checked_len(&[n, dim])?;
        let z = Tensor::new(vec![n, dim], slice_in(embeddings, len, "embeddings")?.to_vec())?;
        let class_ids = slice_in(classes, n, "classes")?.to_vec();
        let tape = Tape::new();
        let leaf = tape.leaf(z, !grad_out.is_null());
        let rows = if normalize { leaf.l2_normalize_rows()? } else { leaf };
        let provenance = (0..n).map(|i| (0, i, 0)).collect();
        let set = AnchorSet::from_parts(rows, class_ids, 1, provenance)?;
        let loss = info_nce(&set, tau)?;
        *loss_out = loss.item();
        if !grad_out.is_null() {
            tape.backward(loss)?;
            let g = leaf.grad().unwrap_or_else(|| Tensor::zeros(&[n, dim]));
            slice_out(grad_out, len, "grad_out")?.copy_from_slice(g.data());
        }
        Ok(())
    })
}

/// Majority-vote downsampling of a `batch x height x width` label map by
/// `stride`, ignoring `ignore_index`. `out` receives
/// `batch*(height/stride)*(width/stride)` labels.
///
/// # Safety
/// `labels` must hold `batch*height*width` ids and `out` `out_len` writable ids.
#[no_mangle]
pub unsafe extern "C" fn scalecl_downsample_labels(
    labels: *const u32,
    batch: usize,
    height: usize,
    width: usize,
    ignore_index: u32,
    stride: usize,
    out: *mut u32,
    out_len: usize,
) -> ScaleclStatus {
    guard(|| {
        let len = checked_len(&[batch, height, width])?;
        let map = LabelMap::new(
            batch,
            height,
            width,
            slice_in(labels, len, "labels")?.to_vec(),
            ignore_index,
        )?;
        let down = downsample_labels(&map, stride)?;
        if out_len != down.data().len() {
            return Err(invalid(format!("out_len is {out_len}, need {}", down.data().len())));
        }
        slice_out(out, out_len, "out")?.copy_from_slice(down.data());
        Ok(())
    })
}

/// Mean IoU of `len` predicted labels against ground truth. Pixels where
/// either label equals `ignore_index` are skipped. `per_class_out`, when not
/// NULL, receives `n_classes` IoUs with NaN for classes absent from both.
/// `*miou_out` is NaN when no class is present.
///
/// # Safety
/// `pred` and `gt` must hold `len` ids; `miou_out` must be writable and
/// `per_class_out`, when not NULL, hold `n_classes` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn scalecl_miou(
    pred: *const u32,
    gt: *const u32,
    len: usize,
    n_classes: usize,
    ignore_index: u32,
    miou_out: *mut f64,
    per_class_out: *mut f64,
) -> ScaleclStatus {
    guard(|| {
        if miou_out.is_null() {
            return Err(null("miou_out"));
        }
        let p = LabelMap::new(1, 1, len, slice_in(pred, len, "pred")?.to_vec(), ignore_index)?;
        let g = LabelMap::new(1, 1, len, slice_in(gt, len, "gt")?.to_vec(), ignore_index)?;
        let report = miou(&p, &g, n_classes, &[])?;
        *miou_out = report.miou.unwrap_or(f64::NAN);
        if !per_class_out.is_null() {
            let dst = slice_out(per_class_out, n_classes, "per_class_out")?;
            for (d, v) in dst.iter_mut().zip(&report.per_class) {
                *d = v.unwrap_or(f64::NAN);
            }
        }
        Ok(())
    })
}
