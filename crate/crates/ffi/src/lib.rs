//! C interface to cgz: trained-model inference, synthetic datasets, losses
//! and metrics.
//!
//! Every fallible function returns a [`CgzStatus`]. On failure a message is
//! kept per thread and can be read with [`cgz_last_error`]. Handles are
//! opaque and must be released with their `_free` function. Panics never
//! cross the boundary: they become [`CgzStatus::Panic`].

use std::any::Any;
use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::{ptr, slice};

use cgz::checkpoint::{load_checkpoint, Checkpoint, Stage};
use cgz::data::{read_dataset, write_dataset, GazeSample, Generator};
use cgz::losses::{contrastive_loss, huber_loss, mean_angular_error, HyperParams, LossVariant};
use cgz::{Error, Graph, Tensor};

/// Images per forward pass inside the inference calls.
const CHUNK: usize = 64;

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CgzStatus {
    Ok = 0,
    /// Bad sizes, shapes, hyper-parameters or checkpoint stage.
    InvalidArgument = 1,
    /// The file could not be opened, read or written.
    Io = 2,
    /// A computation produced NaN or infinity.
    Numerical = 3,
    /// The file exists but is not a valid, supported cgz file.
    Format = 4,
    /// A required pointer was null.
    NullPointer = 5,
    /// Internal panic. The handle arguments should be treated as unusable.
    Panic = 6,
}

/// Terms of the contrastive objective, for [`cgz_contrastive_loss`].
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CgzLossVariant {
    Combined = 0,
    NtxentOnly = 1,
    RedundancyOnly = 2,
}

/// Image geometry, channels first.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CgzImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

/// What a loaded checkpoint expects and produces.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CgzModelInfo {
    pub input: CgzImageShape,
    pub latent_dim: usize,
    /// False for a contrastive-pretraining checkpoint, whose regressor is untrained.
    pub finetuned: bool,
}

/// A checkpoint loaded for inference.
pub struct CgzModel {
    ckpt: Checkpoint,
}

/// Gaze samples held in memory.
pub struct CgzDataset {
    samples: Vec<GazeSample>,
}

struct Failure {
    status: CgzStatus,
    message: String,
}

impl Failure {
    fn new(status: CgzStatus, message: impl Into<String>) -> Self {
        Failure {
            status,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::Io(_) => CgzStatus::Io,
            Error::Corrupt(_) | Error::Version { .. } => CgzStatus::Format,
            Error::NonFinite { .. } | Error::Gradcheck(_) => CgzStatus::Numerical,
            _ => CgzStatus::InvalidArgument,
        };
        Failure::new(status, e.to_string())
    }
}

type Outcome = Result<(), Failure>;

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn panic_message(payload: &(dyn Any + Send)) -> String {
    if let Some(s) = payload.downcast_ref::<&str>() {
        s.to_string()
    } else if let Some(s) = payload.downcast_ref::<String>() {
        s.clone()
    } else {
        "unknown panic".into()
    }
}

fn guard(f: impl FnOnce() -> Outcome) -> CgzStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CgzStatus::Ok,
        Ok(Err(failure)) => {
            set_last_error(failure.message);
            failure.status
        }
        Err(payload) => {
            set_last_error(format!("internal panic: {}", panic_message(payload.as_ref())));
            CgzStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure::new(CgzStatus::NullPointer, format!("{what} is null"))
}

fn invalid(message: impl Into<String>) -> Failure {
    Failure::new(CgzStatus::InvalidArgument, message)
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| invalid("path is not valid UTF-8"))?;
    Ok(PathBuf::from(s))
}

unsafe fn input<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn output<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts_mut(p, len))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

fn product(dims: &[usize]) -> Result<usize, Failure> {
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| invalid(format!("size {dims:?} overflows")))
}

/// Copies the current thread's last error message into `buf` as a
/// NUL-terminated string, truncating to `len` bytes including the NUL.
///
/// Returns the buffer size needed for the whole message, or 0 when no call
/// on this thread has failed yet. Passing a null `buf` only queries the size.
///
/// # Safety
/// `buf` is null or points to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn cgz_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let Some(msg) = e.as_ref() else { return 0 };
        let bytes = msg.as_bytes_with_nul();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len) - 1;
            ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Loads a checkpoint written by `cgz pretrain` or `cgz finetune`.
/// `*out` is set to null on failure.
///
/// # Safety
/// `path` is a NUL-terminated string; `out` points to writable storage.
#[no_mangle]
pub unsafe extern "C" fn cgz_model_load(path: *const c_char, out: *mut *mut CgzModel) -> CgzStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        let ckpt = load_checkpoint(path_arg(path)?)?;
        *out = Box::into_raw(Box::new(CgzModel { ckpt }));
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` is null or a handle from [`cgz_model_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cgz_model_free(model: *mut CgzModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Input geometry, latent width and stage of a model.
///
/// # Safety
/// `model` is a live handle; `out` points to writable storage.
#[no_mangle]
pub unsafe extern "C" fn cgz_model_info(model: *const CgzModel, out: *mut CgzModelInfo) -> CgzStatus {
    guard(|| {
        let model = handle(model, "model")?;
        let out = out_ptr(out, "out")?;
        let cfg = model.ckpt.params.config();
        *out = CgzModelInfo {
            input: CgzImageShape {
                channels: cfg.in_channels,
                height: cfg.height,
                width: cfg.width,
            },
            latent_dim: cfg.latent_dim,
            finetuned: model.ckpt.stage == Stage::Finetuned,
        };
        Ok(())
    })
}

/// Runs `f` over `n` images in chunks and writes `width` outputs per image.
unsafe fn per_image(
    model: *const CgzModel,
    images: *const f32,
    n: usize,
    out: *mut f32,
    width: impl Fn(&CgzModel) -> usize,
    f: impl Fn(&CgzModel, &Tensor<f32>) -> cgz::Result<Tensor<f32>>,
) -> Outcome {
    let model = handle(model, "model")?;
    let cfg = model.ckpt.params.config();
    let (c, h, w) = (cfg.in_channels, cfg.height, cfg.width);
    let per = product(&[c, h, w])?;
    let images = input(images, product(&[n, per])?, "images")?;
    let width = width(model);
    let out = output(out, product(&[n, width])?, "out")?;
    for (start, chunk) in (0..n).step_by(CHUNK).zip(images.chunks(CHUNK * per)) {
        let rows = chunk.len() / per;
        let x = Tensor::new([rows, c, h, w], chunk.to_vec())?;
        let y = f(model, &x)?;
        out[start * width..(start + rows) * width].copy_from_slice(y.data());
    }
    Ok(())
}

/// Latent vectors for `n` images.
///
/// `images` holds `n` images of the model's input shape, channels first,
/// values in [0, 1]. `out` receives `n * latent_dim` floats.
///
/// # Safety
/// `model` is a live handle; `images` and `out` point to buffers of the sizes above.
#[no_mangle]
pub unsafe extern "C" fn cgz_model_embed(model: *const CgzModel, images: *const f32, n: usize, out: *mut f32) -> CgzStatus {
    guard(|| per_image(model, images, n, out, |m| m.ckpt.params.config().latent_dim, |m, x| m.ckpt.params.embed(x)))
}

/// Gaze predictions for `n` images as (pitch, yaw) pairs in radians.
///
/// Requires a fine-tuned checkpoint. `images` is laid out as for
/// [`cgz_model_embed`]; `out` receives `2 * n` floats.
///
/// # Safety
/// `model` is a live handle; `images` and `out` point to buffers of the sizes above.
#[no_mangle]
pub unsafe extern "C" fn cgz_model_predict(model: *const CgzModel, images: *const f32, n: usize, out: *mut f32) -> CgzStatus {
    guard(|| {
        handle(model, "model")?.ckpt.expect_stage(Stage::Finetuned)?;
        per_image(model, images, n, out, |_| 2, |m, x| {
            let p = &m.ckpt.params;
            p.regress(&p.embed(x)?)
        })
    })
}

fn boxed_dataset(samples: Vec<GazeSample>, out: &mut *mut CgzDataset) {
    *out = Box::into_raw(Box::new(CgzDataset { samples }));
}

/// Loads a `.cgzd` dataset file. `*out` is set to null on failure.
///
/// # Safety
/// `path` is a NUL-terminated string; `out` points to writable storage.
#[no_mangle]
pub unsafe extern "C" fn cgz_dataset_load(path: *const c_char, out: *mut *mut CgzDataset) -> CgzStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        let samples = read_dataset(path_arg(path)?)?;
        boxed_dataset(samples, out);
        Ok(())
    })
}

/// Renders `count` synthetic samples of `size x size` pixels. The same
/// arguments always give the same dataset. `*out` is set to null on failure.
///
/// # Safety
/// `out` points to writable storage.
#[no_mangle]
pub unsafe extern "C" fn cgz_dataset_generate(
    count: usize,
    seed: u64,
    size: usize,
    jitter: bool,
    out: *mut *mut CgzDataset,
) -> CgzStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        if size < 4 {
            return Err(invalid(format!("size must be >= 4, got {size}")));
        }
        product(&[count, 3, size, size])?;
        boxed_dataset(Generator { jitter, size }.dataset(count, seed), out);
        Ok(())
    })
}

/// Writes a dataset to a `.cgzd` file.
///
/// # Safety
/// `dataset` is a live handle; `path` is a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn cgz_dataset_save(dataset: *const CgzDataset, path: *const c_char) -> CgzStatus {
    guard(|| {
        let dataset = handle(dataset, "dataset")?;
        write_dataset(path_arg(path)?, &dataset.samples)?;
        Ok(())
    })
}

/// Number of samples, or 0 for a null handle.
///
/// # Safety
/// `dataset` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cgz_dataset_len(dataset: *const CgzDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.samples.len())
}

/// Shape of the images in a non-empty dataset.
///
/// # Safety
/// `dataset` is a live handle; `out` points to writable storage.
#[no_mangle]
pub unsafe extern "C" fn cgz_dataset_image_shape(dataset: *const CgzDataset, out: *mut CgzImageShape) -> CgzStatus {
    guard(|| {
        let dataset = handle(dataset, "dataset")?;
        let out = out_ptr(out, "out")?;
        let first = dataset.samples.first().ok_or_else(|| invalid("dataset is empty"))?;
        let s = first.image.shape();
        *out = CgzImageShape {
            channels: s[0],
            height: s[1],
            width: s[2],
        };
        Ok(())
    })
}

/// Copies sample `index`. `image` receives channels x height x width floats
/// and may be null to fetch only the label. `pitch` and `yaw` are radians.
///
/// # Safety
/// `dataset` is a live handle; `image` is null or large enough; `pitch` and
/// `yaw` point to writable storage.
#[no_mangle]
pub unsafe extern "C" fn cgz_dataset_get(
    dataset: *const CgzDataset,
    index: usize,
    image: *mut f32,
    pitch: *mut f32,
    yaw: *mut f32,
) -> CgzStatus {
    guard(|| {
        let dataset = handle(dataset, "dataset")?;
        let (pitch, yaw) = (out_ptr(pitch, "pitch")?, out_ptr(yaw, "yaw")?);
        let sample = dataset
            .samples
            .get(index)
            .ok_or_else(|| invalid(format!("index {index} out of range for {} samples", dataset.samples.len())))?;
        if !image.is_null() {
            output(image, sample.image.numel(), "image")?.copy_from_slice(sample.image.data());
        }
        *pitch = sample.pitch;
        *yaw = sample.yaw;
        Ok(())
    })
}

/// Releases a dataset. Null is ignored.
///
/// # Safety
/// `dataset` is null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cgz_dataset_free(dataset: *mut CgzDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Mean angular error in degrees between `n` predicted and true
/// (pitch, yaw) pairs in radians. `n` must be positive.
///
/// # Safety
/// `pred` and `truth` point to `2 * n` floats; `out` to writable storage.
#[no_mangle]
pub unsafe extern "C" fn cgz_mean_angular_error(pred: *const f32, truth: *const f32, n: usize, out: *mut f64) -> CgzStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let len = product(&[n, 2])?;
        let p = Tensor::new([n, 2], input(pred, len, "pred")?.to_vec())?;
        let t = Tensor::new([n, 2], input(truth, len, "truth")?.to_vec())?;
        *out = mean_angular_error(&p, &t)?;
        Ok(())
    })
}

/// Contrastive objective of two `batch x dim` projection matrices, row `i`
/// of each being the two views of sample `i`. `variant` is a
/// [`CgzLossVariant`] value.
///
/// # Safety
/// `p1` and `p2` point to `batch * dim` doubles; `out` to writable storage.
#[no_mangle]
pub unsafe extern "C" fn cgz_contrastive_loss(
    p1: *const f64,
    p2: *const f64,
    batch: usize,
    dim: usize,
    tau: f64,
    gamma: f64,
    variant: u32,
    out: *mut f64,
) -> CgzStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let loss_variant = match variant {
            0 => LossVariant::Combined,
            1 => LossVariant::NtxentOnly,
            2 => LossVariant::RedundancyOnly,
            v => return Err(invalid(format!("unknown loss variant {v}"))),
        };
        if dim == 0 {
            return Err(invalid("dim must be positive"));
        }
        let hp = HyperParams {
            tau,
            gamma,
            batch_size: batch,
            loss_variant,
            ..HyperParams::default()
        };
        hp.validate()?;
        let len = product(&[batch, dim])?;
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::new([batch, dim], input(p1, len, "p1")?.to_vec())?);
        let b = g.constant(Tensor::new([batch, dim], input(p2, len, "p2")?.to_vec())?);
        let loss = contrastive_loss(&mut g, a, b, &hp)?;
        *out = g.value(loss).data()[0];
        Ok(())
    })
}

/// Mean elementwise Huber penalty of `pred - target` with threshold `delta`.
///
/// # Safety
/// `pred` and `target` point to `len` doubles; `out` to writable storage.
#[no_mangle]
pub unsafe extern "C" fn cgz_huber_loss(pred: *const f64, target: *const f64, len: usize, delta: f64, out: *mut f64) -> CgzStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        if len == 0 {
            return Err(invalid("len must be positive"));
        }
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(invalid(format!("delta must be > 0, got {delta}")));
        }
        let mut g = Graph::<f64>::new();
        let p = g.constant(Tensor::new([len], input(pred, len, "pred")?.to_vec())?);
        let t = g.constant(Tensor::new([len], input(target, len, "target")?.to_vec())?);
        let loss = huber_loss(&mut g, p, t, delta)?;
        *out = g.value(loss).data()[0];
        Ok(())
    })
}
