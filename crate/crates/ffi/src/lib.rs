//! C ABI over the `noisecal` library.
//!
//! Every entry point returns a [`NoisecalStatus`]. On failure a message is
//! available from [`noisecal_last_error`] on the same thread until the next
//! call. Models are opaque heap handles released with
//! [`noisecal_model_free`]. Array arguments are `(pointer, length)` pairs; a
//! null pointer is accepted only when the length is zero.

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::os::raw::c_char;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;

use noisecal::experiment::{evaluate_set, pretrain_noise, EvalSet, Phase, PhaseConfig, TrainLog};
use noisecal::metrics::{class_bias, ece, reliability, roc_auroc, Prediction};
use noisecal::nn::{
    build_model, read_checkpoint, write_checkpoint, ArchSpec, InitSpec, LearningRule, Model,
    OutputKind,
};
use noisecal::optim::OptimState;
use noisecal::stats::{rank_sum_test, signed_rank_test, TestResult};
use noisecal::{Error, RngStream, Tensor};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoisecalStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeError = 3,
    InvalidState = 4,
    StaleTrace = 5,
    NonFiniteGradient = 6,
    FormatError = 7,
    CorruptData = 8,
    Diverged = 9,
    ConfigError = 10,
    IoError = 11,
    JsonError = 12,
    Panic = 13,
}

impl NoisecalStatus {
    fn from_code(code: i32) -> Option<Self> {
        use NoisecalStatus::*;
        [
            Ok,
            NullPointer,
            InvalidArgument,
            ShapeError,
            InvalidState,
            StaleTrace,
            NonFiniteGradient,
            FormatError,
            CorruptData,
            Diverged,
            ConfigError,
            IoError,
            JsonError,
            Panic,
        ]
        .into_iter()
        .find(|s| *s as i32 == code)
    }

    fn name(self) -> &'static CStr {
        use NoisecalStatus::*;
        match self {
            Ok => c"ok",
            NullPointer => c"null-pointer",
            InvalidArgument => c"invalid-argument",
            ShapeError => c"shape-error",
            InvalidState => c"invalid-state",
            StaleTrace => c"stale-trace",
            NonFiniteGradient => c"non-finite-gradient",
            FormatError => c"format-error",
            CorruptData => c"corrupt-data",
            Diverged => c"diverged",
            ConfigError => c"config-error",
            IoError => c"io-error",
            JsonError => c"json-error",
            Panic => c"panic",
        }
    }
}

/// Readout of a model. Stored as `uint32_t` in `NoisecalArch`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoisecalOutput {
    Softmax = 0,
    Sigmoid = 1,
}

/// Network shape: `depth` hidden Linear, BatchNorm, ReLU blocks of
/// `hidden_width` units and a linear head with `num_classes` outputs.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NoisecalArch {
    pub input_dim: usize,
    pub hidden_width: usize,
    pub depth: usize,
    pub num_classes: usize,
    /// A `NoisecalOutput` value.
    pub output: u32,
}

impl NoisecalArch {
    fn to_spec(self) -> Result<ArchSpec, Failure> {
        let output = match self.output {
            0 => OutputKind::Softmax,
            1 => OutputKind::Sigmoid,
            other => {
                return Err(Failure::Argument(format!("unknown output kind {other}")));
            }
        };
        let spec = ArchSpec {
            input_dim: self.input_dim,
            hidden_width: self.hidden_width,
            depth: self.depth,
            num_classes: self.num_classes,
            output,
        };
        spec.validate()?;
        Ok(spec)
    }

    fn from_spec(spec: &ArchSpec) -> Self {
        Self {
            input_dim: spec.input_dim,
            hidden_width: spec.hidden_width,
            depth: spec.depth,
            num_classes: spec.num_classes,
            output: match spec.output {
                OutputKind::Softmax => NoisecalOutput::Softmax as u32,
                OutputKind::Sigmoid => NoisecalOutput::Sigmoid as u32,
            },
        }
    }
}

/// Settings for `noisecal_model_pretrain_noise`. Runs exactly `epochs`
/// epochs with no early stopping.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoisecalNoiseOptions {
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Propagate errors through the model's fixed feedback matrices.
    pub feedback_alignment: bool,
    pub seed: u64,
}

/// Calibration summary of a model on a labelled set.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct NoisecalMetrics {
    pub loss: f64,
    pub ece: f64,
    pub mean_confidence: f64,
    pub accuracy: f64,
    /// `mean_confidence - accuracy`.
    pub gap: f64,
    pub class_bias: f64,
}

/// Outcome of a rank test.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct NoisecalTestResult {
    /// `U` of the first sample (rank-sum) or `W+` (signed-rank).
    pub statistic: f64,
    pub p_value: f64,
    /// Exact null distribution rather than the normal approximation.
    pub exact: bool,
}

impl From<TestResult> for NoisecalTestResult {
    fn from(r: TestResult) -> Self {
        Self {
            statistic: r.statistic,
            p_value: r.p_value,
            exact: r.exact,
        }
    }
}

/// Opaque model handle.
pub struct NoisecalModel {
    model: Model,
}

enum Failure {
    Null(&'static str),
    Argument(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    fn status(&self) -> NoisecalStatus {
        match self {
            Failure::Null(_) => NoisecalStatus::NullPointer,
            Failure::Argument(_) => NoisecalStatus::InvalidArgument,
            Failure::Core(e) => match e {
                Error::InvalidArgument(_) => NoisecalStatus::InvalidArgument,
                Error::Shape(_) => NoisecalStatus::ShapeError,
                Error::InvalidState(_) => NoisecalStatus::InvalidState,
                Error::StaleTrace { .. } => NoisecalStatus::StaleTrace,
                Error::NonFiniteGradient(_) => NoisecalStatus::NonFiniteGradient,
                Error::Format { .. } => NoisecalStatus::FormatError,
                Error::CorruptData { .. } => NoisecalStatus::CorruptData,
                Error::Diverged { .. } => NoisecalStatus::Diverged,
                Error::Config { .. } => NoisecalStatus::ConfigError,
                Error::Io { .. } => NoisecalStatus::IoError,
                Error::Json(_) => NoisecalStatus::JsonError,
            },
        }
    }

    fn message(&self) -> String {
        match self {
            Failure::Null(what) => format!("`{what}` is null"),
            Failure::Argument(m) => format!("invalid argument: {m}"),
            Failure::Core(e) => e.to_string(),
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(message: String) {
    // interior NULs would truncate the C string, so drop them
    let bytes: Vec<u8> = message
        .into_bytes()
        .into_iter()
        .filter(|&b| b != 0)
        .collect();
    let message = CString::new(bytes).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = message);
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> NoisecalStatus {
    set_last_error(String::new());
    match panic::catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => NoisecalStatus::Ok,
        Ok(Err(e)) => {
            set_last_error(e.message());
            e.status()
        }
        Err(payload) => {
            let what = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("panic: {what}"));
            NoisecalStatus::Panic
        }
    }
}

unsafe fn input<'a, T>(ptr: *const T, len: usize, what: &'static str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn output<'a, T>(ptr: *mut T, what: &'static str) -> Result<&'a mut T, Failure> {
    ptr.as_mut().ok_or(Failure::Null(what))
}

unsafe fn handle<'a>(ptr: *const NoisecalModel) -> Result<&'a Model, Failure> {
    ptr.as_ref().map(|h| &h.model).ok_or(Failure::Null("model"))
}

unsafe fn path<'a>(ptr: *const c_char) -> Result<&'a Path, Failure> {
    if ptr.is_null() {
        return Err(Failure::Null("path"));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map(Path::new)
        .map_err(|_| Failure::Argument("path is not valid UTF-8".into()))
}

fn input_tensor(model: &Model, inputs: &[f64], rows: usize) -> Result<Tensor, Failure> {
    let dim = model.arch().input_dim;
    if rows.checked_mul(dim) != Some(inputs.len()) {
        return Err(Failure::Argument(format!(
            "{} inputs for {rows} rows of {dim}",
            inputs.len()
        )));
    }
    Ok(Tensor::new(vec![rows, dim], inputs.to_vec())?)
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn noisecal_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or an empty string.
/// The pointer stays valid until the next call into this library on the
/// same thread.
#[no_mangle]
pub extern "C" fn noisecal_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Stable kebab-case name of a status code, or null for unknown codes.
#[no_mangle]
pub extern "C" fn noisecal_status_name(status: i32) -> *const c_char {
    NoisecalStatus::from_code(status).map_or(std::ptr::null(), |s| s.name().as_ptr())
}

/// Default noise-pretraining settings: 50 epochs of 100 batches of 128,
/// learning rate 1e-4, backprop, seed 0.
#[no_mangle]
pub extern "C" fn noisecal_noise_options_default() -> NoisecalNoiseOptions {
    let phase = PhaseConfig::noise_default();
    NoisecalNoiseOptions {
        epochs: phase.epochs,
        batches_per_epoch: phase.batches_per_epoch,
        batch_size: phase.batch_size,
        learning_rate: phase.optim.learning_rate,
        feedback_alignment: false,
        seed: 0,
    }
}

/// Creates a He-initialised model. With `with_feedback`, fixed random
/// feedback matrices are drawn after the forward weights.
///
/// # Safety
/// `arch` must point to a valid `NoisecalArch` and `out` to writable storage
/// for one handle pointer.
#[no_mangle]
pub unsafe extern "C" fn noisecal_model_new(
    arch: *const NoisecalArch,
    with_feedback: bool,
    seed: u64,
    out: *mut *mut NoisecalModel,
) -> NoisecalStatus {
    guard(|| {
        let out = output(out, "out")?;
        let spec = arch.as_ref().ok_or(Failure::Null("arch"))?.to_spec()?;
        let mut rng = RngStream::new(seed).child("init");
        let model = build_model(spec, InitSpec::default(), with_feedback, &mut rng)?;
        *out = Box::into_raw(Box::new(NoisecalModel { model }));
        Ok(())
    })
}

/// Reads a checkpoint written by this library or the `noisecal` CLI.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable storage for one
/// handle pointer.
#[no_mangle]
pub unsafe extern "C" fn noisecal_model_load(
    path: *const c_char,
    out: *mut *mut NoisecalModel,
) -> NoisecalStatus {
    guard(|| {
        let out = output(out, "out")?;
        let model = read_checkpoint(self::path(path)?)?;
        *out = Box::into_raw(Box::new(NoisecalModel { model }));
        Ok(())
    })
}

/// Writes the model as a checkpoint file.
///
/// # Safety
/// `model` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn noisecal_model_save(
    model: *const NoisecalModel,
    path: *const c_char,
) -> NoisecalStatus {
    guard(|| Ok(write_checkpoint(handle(model)?, self::path(path)?)?))
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn noisecal_model_free(model: *mut NoisecalModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Copies the model's shape into `out`.
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn noisecal_model_arch(
    model: *const NoisecalModel,
    out: *mut NoisecalArch,
) -> NoisecalStatus {
    guard(|| {
        let out = output(out, "out")?;
        *out = NoisecalArch::from_spec(handle(model)?.arch());
        Ok(())
    })
}

/// Number of trainable scalars.
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn noisecal_model_parameter_count(
    model: *const NoisecalModel,
    out: *mut usize,
) -> NoisecalStatus {
    guard(|| {
        let out = output(out, "out")?;
        *out = handle(model)?.parameter_count();
        Ok(())
    })
}

/// Eval-mode class probabilities for `rows` row-major samples. `out` must
/// hold `rows * num_classes` values.
///
/// # Safety
/// `model` must be a live handle, `inputs` must hold `rows * input_dim`
/// values and `out` must hold `out_len` writable values.
#[no_mangle]
pub unsafe extern "C" fn noisecal_model_predict_proba(
    model: *const NoisecalModel,
    inputs: *const f64,
    rows: usize,
    out: *mut f64,
    out_len: usize,
) -> NoisecalStatus {
    guard(|| {
        let model = handle(model)?;
        let len = rows.saturating_mul(model.arch().input_dim);
        let x = input_tensor(model, input(inputs, len, "inputs")?, rows)?;
        let k = model.arch().num_classes;
        if rows.checked_mul(k) != Some(out_len) {
            return Err(Failure::Argument(format!(
                "output buffer holds {out_len} values, need {rows} x {k}"
            )));
        }
        if out_len > 0 && out.is_null() {
            return Err(Failure::Null("out"));
        }
        let probs = model.predict_proba(&x)?;
        if out_len > 0 {
            std::slice::from_raw_parts_mut(out, out_len).copy_from_slice(probs.data());
        }
        Ok(())
    })
}

/// Loss and calibration metrics on labelled samples, with `num_bins`
/// equal-width reliability bins.
///
/// # Safety
/// `model` must be a live handle, `inputs` must hold `rows * input_dim`
/// values, `labels` must hold `rows` values and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn noisecal_model_evaluate(
    model: *const NoisecalModel,
    inputs: *const f64,
    labels: *const u32,
    rows: usize,
    num_bins: usize,
    out: *mut NoisecalMetrics,
) -> NoisecalStatus {
    guard(|| {
        let out = output(out, "out")?;
        let model = handle(model)?;
        let len = rows.saturating_mul(model.arch().input_dim);
        let x = input_tensor(model, input(inputs, len, "inputs")?, rows)?;
        let k = model.arch().num_classes;
        let labels = input(labels, rows, "labels")?;
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= k) {
            return Err(Failure::Argument(format!("label {bad} >= {k} classes")));
        }
        let set = EvalSet::new("ffi", x, labels.iter().map(|&l| l as usize).collect())?;
        let ev = evaluate_set(model, &set, num_bins)?;
        *out = NoisecalMetrics {
            loss: ev.loss,
            ece: ev.metrics.ece,
            mean_confidence: ev.metrics.mean_confidence,
            accuracy: ev.metrics.accuracy,
            gap: ev.metrics.gap,
            class_bias: ev.metrics.class_bias,
        };
        Ok(())
    })
}

/// Trains on Gaussian noise inputs with uniform random labels. Writes the
/// final loss on a fixed held-out noise set to `final_loss` when it is not
/// null. The optimizer starts fresh on every call.
///
/// # Safety
/// `model` must be a live handle not used concurrently, `options` must point
/// to a valid `NoisecalNoiseOptions` and `final_loss` must be null or
/// writable.
#[no_mangle]
pub unsafe extern "C" fn noisecal_model_pretrain_noise(
    model: *mut NoisecalModel,
    options: *const NoisecalNoiseOptions,
    final_loss: *mut f64,
) -> NoisecalStatus {
    guard(|| {
        let model = &mut model.as_mut().ok_or(Failure::Null("model"))?.model;
        let opts = *options.as_ref().ok_or(Failure::Null("options"))?;
        let mut phase = PhaseConfig {
            epochs: opts.epochs,
            batches_per_epoch: opts.batches_per_epoch,
            batch_size: opts.batch_size,
            convergence: None,
            learning_rule: if opts.feedback_alignment {
                LearningRule::FeedbackAlignment
            } else {
                LearningRule::Backprop
            },
            ..PhaseConfig::noise_default()
        };
        phase.optim.learning_rate = opts.learning_rate;
        let mut state = OptimState::new();
        let mut log = TrainLog::default();
        let rng = RngStream::new(opts.seed).child("noise");
        pretrain_noise(model, &mut state, &phase, &[], 10, &rng, &mut log)?;
        if let Some(slot) = final_loss.as_mut() {
            *slot = log
                .last(Phase::NoisePretrain, "noise")
                .map_or(f64::NAN, |row| row.train_loss);
        }
        Ok(())
    })
}

/// Expected calibration error of `n` predictions with `num_bins`
/// equal-width bins. `correct[i]` is nonzero when prediction `i` is right.
///
/// # Safety
/// `confidence` and `correct` must hold `n` values and `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn noisecal_ece(
    confidence: *const f64,
    correct: *const u8,
    n: usize,
    num_bins: usize,
    out: *mut f64,
) -> NoisecalStatus {
    guard(|| {
        let out = output(out, "out")?;
        let conf = input(confidence, n, "confidence")?;
        let correct = input(correct, n, "correct")?;
        if let Some(c) = conf.iter().find(|c| !(0.0..=1.0).contains(*c)) {
            return Err(Failure::Argument(format!("confidence {c} outside [0, 1]")));
        }
        let preds: Vec<Prediction> = conf
            .iter()
            .zip(correct)
            .map(|(&confidence, &ok)| Prediction {
                predicted_label: 0,
                confidence,
                true_label: Some(usize::from(ok == 0)),
            })
            .collect();
        *out = ece(&reliability(&preds, num_bins)?);
        Ok(())
    })
}

/// Population standard deviation of per-class prediction shares.
///
/// # Safety
/// `predicted` must hold `n` values and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn noisecal_class_bias(
    predicted: *const u32,
    n: usize,
    num_classes: usize,
    out: *mut f64,
) -> NoisecalStatus {
    guard(|| {
        let out = output(out, "out")?;
        let preds: Vec<Prediction> = input(predicted, n, "predicted")?
            .iter()
            .map(|&l| Prediction {
                predicted_label: l as usize,
                confidence: 0.0,
                true_label: None,
            })
            .collect();
        *out = class_bias(&preds, num_classes)?.bias;
        Ok(())
    })
}

/// Area under the ROC curve for separating in-distribution scores (positive)
/// from out-of-distribution scores by thresholding.
///
/// # Safety
/// `id` must hold `n_id` values, `ood` must hold `n_ood` values and `out`
/// must be writable.
#[no_mangle]
pub unsafe extern "C" fn noisecal_auroc(
    id: *const f64,
    n_id: usize,
    ood: *const f64,
    n_ood: usize,
    out: *mut f64,
) -> NoisecalStatus {
    guard(|| {
        let out = output(out, "out")?;
        *out = roc_auroc(input(id, n_id, "id")?, input(ood, n_ood, "ood")?)?.auroc;
        Ok(())
    })
}

/// Wilcoxon rank-sum test of `a` against `b`. The one-sided alternative is
/// that `a` tends to be larger.
///
/// # Safety
/// `a` must hold `n_a` values, `b` must hold `n_b` values and `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn noisecal_rank_sum_test(
    a: *const f64,
    n_a: usize,
    b: *const f64,
    n_b: usize,
    two_sided: bool,
    out: *mut NoisecalTestResult,
) -> NoisecalStatus {
    guard(|| {
        let out = output(out, "out")?;
        *out = rank_sum_test(input(a, n_a, "a")?, input(b, n_b, "b")?, two_sided)?.into();
        Ok(())
    })
}

/// Wilcoxon signed-rank test of paired differences. Zero differences are
/// dropped. The one-sided alternative is that differences tend to be
/// positive.
///
/// # Safety
/// `diffs` must hold `n` values and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn noisecal_signed_rank_test(
    diffs: *const f64,
    n: usize,
    two_sided: bool,
    out: *mut NoisecalTestResult,
) -> NoisecalStatus {
    guard(|| {
        let out = output(out, "out")?;
        *out = signed_rank_test(input(diffs, n, "diffs")?, two_sided)?.into();
        Ok(())
    })
}
