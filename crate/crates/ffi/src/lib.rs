//! C ABI for scoring image-report pairs with a trained matcher and for
//! classifying images (plus CAM heatmaps) with a fine-tuned model.
//!
//! Every entry point returns a [`TimnetStatus`]. On failure the message is
//! kept per thread and read with [`timnet_last_error`]. Images are 8-bit
//! grayscale, row-major, `height * width` bytes each.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::ptr;

use timnet::cam::compute_cam;
use timnet::datagen::{gray_to_tensor, GrayImage, Vocabulary};
use timnet::downstream::DownstreamModel;
use timnet::encoders::leaf_batch;
use timnet::harness::RunConfig;
use timnet::layers::Mode;
use timnet::matcher::{match_probabilities, TimNet};
use timnet::tensor::{Tape, Tensor};
use timnet::weights::WeightFile;
use timnet::Error;

/// Result code of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimnetStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Shape = 5,
    Config = 6,
    Data = 7,
    Internal = 8,
}

fn status_of(e: &Error) -> TimnetStatus {
    match e {
        Error::Io { .. } => TimnetStatus::Io,
        Error::BadMagic(_)
        | Error::BadVersion(_)
        | Error::Truncated(_)
        | Error::MalformedWeights(_)
        | Error::Parse { .. }
        | Error::Json(_)
        | Error::Csv(_) => TimnetStatus::Format,
        Error::Dimension { .. } | Error::Shape { .. } | Error::ShapeConflict { .. } | Error::MissingTensor(_) => TimnetStatus::Shape,
        Error::Config { .. } => TimnetStatus::Config,
        Error::TargetOutOfRange { .. } | Error::Vocabulary { .. } => TimnetStatus::InvalidArgument,
        _ => TimnetStatus::Data,
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(TimnetStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn fail(status: TimnetStatus, msg: impl Into<String>) -> Failure {
    Failure(status, msg.into())
}

/// Runs `f`, records any error or panic, and maps it to a status.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> TimnetStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => TimnetStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal error: {msg}"));
            TimnetStatus::Internal
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(fail(TimnetStatus::NullPointer, format!("{what} is null")));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(TimnetStatus::InvalidArgument, format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn config_arg(p: *const c_char) -> Result<RunConfig, Failure> {
    let cfg = if p.is_null() {
        RunConfig::default()
    } else {
        RunConfig::load(&path_arg(p, "config path")?)?
    };
    cfg.validate()?;
    Ok(cfg)
}

unsafe fn image_arg(pixels: *const u8, height: usize, width: usize) -> Result<Tensor<f32>, Failure> {
    if pixels.is_null() {
        return Err(fail(TimnetStatus::NullPointer, "pixels is null"));
    }
    if height == 0 || width == 0 {
        return Err(fail(TimnetStatus::InvalidArgument, "image has a zero dimension"));
    }
    let bytes = std::slice::from_raw_parts(pixels, height * width).to_vec();
    Ok(gray_to_tensor(&GrayImage::new(width, height, bytes)))
}

fn out_arg<T>(out: *mut T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(fail(TimnetStatus::NullPointer, "output pointer is null"));
    }
    Ok(())
}

/// Trained matching network with its vocabulary.
pub struct TimnetMatcher {
    net: TimNet<f32>,
    vocab: Vocabulary,
    max_len: usize,
}

/// Fine-tuned binary or multi-label image classifier.
pub struct TimnetClassifier {
    model: DownstreamModel<f32>,
}

fn read_vocab(path: &Path) -> Result<Vocabulary, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| fail(TimnetStatus::Io, format!("{}: {e}", path.display())))?;
    Ok(Vocabulary::from_tsv(&text, path)?)
}

/// Message of the last failed call on this thread, or NULL. The pointer
/// stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn timnet_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Static, NUL-terminated crate version.
#[no_mangle]
pub extern "C" fn timnet_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a matcher. `config_path` (JSON run config) may be NULL for the
/// defaults; it must describe the architecture the weights were saved from.
///
/// # Safety
/// String arguments are NULL or NUL-terminated; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn timnet_matcher_load(
    config_path: *const c_char,
    weights_path: *const c_char,
    vocab_path: *const c_char,
    out: *mut *mut TimnetMatcher,
) -> TimnetStatus {
    guard(|| {
        out_arg(out)?;
        let cfg = config_arg(config_path)?;
        let weights = WeightFile::load(&path_arg(weights_path, "weights path")?)?;
        let vocab = read_vocab(&path_arg(vocab_path, "vocab path")?)?;
        let mut net = TimNet::new(&cfg.timnet(), cfg.seed)?;
        weights.apply(&mut net.store, |_| true, true)?;
        let h = TimnetMatcher {
            net,
            vocab,
            max_len: cfg.text.max_len,
        };
        *out = Box::into_raw(Box::new(h));
        Ok(())
    })
}

/// Probability that `report` describes the image.
///
/// # Safety
/// `handle` comes from [`timnet_matcher_load`]; `report` is NUL-terminated;
/// `pixels` holds `height * width` bytes; `out_prob` is writable.
#[no_mangle]
pub unsafe extern "C" fn timnet_matcher_score(
    handle: *const TimnetMatcher,
    report: *const c_char,
    pixels: *const u8,
    height: usize,
    width: usize,
    out_prob: *mut f64,
) -> TimnetStatus {
    guard(|| {
        out_arg(out_prob)?;
        let h = handle.as_ref().ok_or_else(|| fail(TimnetStatus::NullPointer, "handle is null"))?;
        if report.is_null() {
            return Err(fail(TimnetStatus::NullPointer, "report is null"));
        }
        let text = CStr::from_ptr(report).to_string_lossy();
        let ids = h.vocab.tokenize(&text, h.max_len);
        let x = image_arg(pixels, height, width)?;
        let mut tape = Tape::new();
        let xv = leaf_batch(&mut tape, &x)?;
        let logits = h.net.match_forward(&mut tape, &ids, xv, Mode::Eval)?;
        *out_prob = match_probabilities(tape.value(logits))[0];
        Ok(())
    })
}

/// Releases a matcher. NULL is ignored.
///
/// # Safety
/// `handle` is NULL or from [`timnet_matcher_load`] and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn timnet_matcher_free(handle: *mut TimnetMatcher) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Loads a downstream classifier; the config's `task` selects binary or
/// multi-label outputs.
///
/// # Safety
/// String arguments are NULL or NUL-terminated; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn timnet_classifier_load(
    config_path: *const c_char,
    weights_path: *const c_char,
    out: *mut *mut TimnetClassifier,
) -> TimnetStatus {
    guard(|| {
        out_arg(out)?;
        let cfg = config_arg(config_path)?;
        let weights = WeightFile::load(&path_arg(weights_path, "weights path")?)?;
        let mut model = DownstreamModel::new(&cfg.downstream(), cfg.seed);
        weights.apply(&mut model.store, |_| true, true)?;
        *out = Box::into_raw(Box::new(TimnetClassifier { model }));
        Ok(())
    })
}

/// Probabilities per image: 1 (binary, class 1) or `num_classes`.
///
/// # Safety
/// `handle` is valid or NULL.
#[no_mangle]
pub unsafe extern "C" fn timnet_classifier_outputs_per_image(handle: *const TimnetClassifier) -> usize {
    handle.as_ref().map_or(0, |h| match h.model.config.task {
        timnet::downstream::Task::Binary => 1,
        timnet::downstream::Task::Multilabel => h.model.config.num_classes,
    })
}

/// Classifies `count` images stored back to back. Writes
/// `count * timnet_classifier_outputs_per_image` values to `out_probs`,
/// whose capacity is `out_len`.
///
/// # Safety
/// `pixels` holds `count * height * width` bytes; `out_probs` holds `out_len`
/// doubles.
#[no_mangle]
pub unsafe extern "C" fn timnet_classifier_predict(
    handle: *const TimnetClassifier,
    pixels: *const u8,
    count: usize,
    height: usize,
    width: usize,
    out_probs: *mut f64,
    out_len: usize,
) -> TimnetStatus {
    guard(|| {
        out_arg(out_probs)?;
        let h = handle.as_ref().ok_or_else(|| fail(TimnetStatus::NullPointer, "handle is null"))?;
        let per = timnet_classifier_outputs_per_image(handle);
        if out_len < count * per {
            return Err(fail(TimnetStatus::InvalidArgument, format!("output holds {out_len} values, need {}", count * per)));
        }
        let plane = height * width;
        let images = (0..count)
            .map(|i| image_arg(pixels.add(i * plane), height, width))
            .collect::<Result<Vec<_>, _>>()?;
        let refs: Vec<&Tensor<f32>> = images.iter().collect();
        let probs = h.model.predict(&refs, 64)?;
        ptr::copy_nonoverlapping(probs.as_ptr(), out_probs, probs.len());
        Ok(())
    })
}

/// CAM heatmap of `class` for one image, normalized to `[0,1]`, written as
/// `height * width` doubles.
///
/// # Safety
/// `pixels` holds `height * width` bytes; `out_heat` holds `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn timnet_classifier_cam(
    handle: *const TimnetClassifier,
    pixels: *const u8,
    height: usize,
    width: usize,
    class: usize,
    out_heat: *mut f64,
    out_len: usize,
) -> TimnetStatus {
    guard(|| {
        out_arg(out_heat)?;
        let h = handle.as_ref().ok_or_else(|| fail(TimnetStatus::NullPointer, "handle is null"))?;
        if out_len < height * width {
            return Err(fail(TimnetStatus::InvalidArgument, format!("output holds {out_len} values, need {}", height * width)));
        }
        let heat = compute_cam(&h.model, &image_arg(pixels, height, width)?, class)?;
        ptr::copy_nonoverlapping(heat.values.as_ptr(), out_heat, heat.values.len());
        Ok(())
    })
}

/// Releases a classifier. NULL is ignored.
///
/// # Safety
/// `handle` is NULL or from [`timnet_classifier_load`] and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn timnet_classifier_free(handle: *mut TimnetClassifier) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}
