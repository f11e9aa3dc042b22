//! Training phases, probe logging and the experiments built on them.

mod ood;
mod pipeline;
mod toy;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{data_batches, noise_batches, normalize, Dataset, NoiseSpec, NormStats};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, predictions_from_probs, MetricsReport};
use crate::nn::{LearningRule, Mode, Model, OutputKind};
use crate::optim::{adam_step, OptimConfig, OptimState};
use crate::rng::RngStream;
use crate::tensor::{gaussian_tensor, one_hot, uniform_labels, Tensor};

pub use ood::{gaussian_ood_set, run_ood, OodReport};
pub use pipeline::{
    accuracy_matched_epochs, cell_rng, prepare_data, run_logged, run_pair, run_single, run_sweep,
    PairOutcome, PreparedData, RunOutcome, RunPlan, SweepAxes, SweepCell,
};
pub use toy::{
    confidence_map, grid_coordinate, grid_inputs, run_toy, ConfidenceMap, MapSummary, ToyConfig,
    ToyReport, ToyRun,
};

/// Held-out noise samples used to report noise-phase loss and accuracy.
pub const NOISE_EVAL_SAMPLES: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    NoisePretrain,
    DataTrain,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::NoisePretrain => "noise-pretrain",
            Phase::DataTrain => "data-train",
        }
    }
}

/// Stop once the mean confidence on the first probe set has moved by less
/// than `tolerance` over the last `window` probes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Convergence {
    pub window: usize,
    pub tolerance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseConfig {
    pub phase: Phase,
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default)]
    pub learning_rule: LearningRule,
    #[serde(default = "default_one")]
    pub probe_every: usize,
    /// Noise phase only: batches that make up one epoch.
    #[serde(default = "default_batches_per_epoch")]
    pub batches_per_epoch: usize,
    #[serde(default)]
    pub convergence: Option<Convergence>,
    /// Clear Adam moments before this phase starts.
    #[serde(default = "default_true")]
    pub reset_optimizer: bool,
}

fn default_batch_size() -> usize {
    128
}
fn default_one() -> usize {
    1
}
fn default_batches_per_epoch() -> usize {
    100
}
fn default_true() -> bool {
    true
}

impl PhaseConfig {
    /// 50 noise epochs of 100 batches, stopping early once probe confidence
    /// settles (change below 0.002 over 5 probes).
    pub fn noise_default() -> Self {
        Self {
            phase: Phase::NoisePretrain,
            epochs: 50,
            batch_size: default_batch_size(),
            optim: OptimConfig::default(),
            learning_rule: LearningRule::Backprop,
            probe_every: 1,
            batches_per_epoch: default_batches_per_epoch(),
            convergence: Some(Convergence {
                window: 5,
                tolerance: 0.002,
            }),
            reset_optimizer: true,
        }
    }

    pub fn data_default() -> Self {
        Self {
            phase: Phase::DataTrain,
            epochs: 50,
            convergence: None,
            ..Self::noise_default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::InvalidArgument(format!(
                "batch_size must be ≥ 2, got {}",
                self.batch_size
            )));
        }
        if self.probe_every == 0 || self.batches_per_epoch == 0 {
            return Err(Error::InvalidArgument(
                "probe_every and batches_per_epoch must be positive".into(),
            ));
        }
        if let Some(c) = self.convergence {
            if c.window < 2 || !(c.tolerance >= 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "invalid convergence rule {c:?}"
                )));
            }
        }
        self.optim.validate()
    }

    fn noise_spec(&self, dim: usize, num_classes: usize) -> NoiseSpec {
        NoiseSpec {
            batch_size: self.batch_size,
            batches_per_epoch: self.batches_per_epoch,
            ..NoiseSpec::standard(dim, num_classes)
        }
    }
}

/// Standardized inputs with integer labels, ready for evaluation or training.
#[derive(Debug, Clone)]
pub struct EvalSet {
    pub name: String,
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl EvalSet {
    pub fn new(name: impl Into<String>, inputs: Tensor, labels: Vec<usize>) -> Result<Self> {
        if inputs.shape().len() != 2 || inputs.rows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} labels for inputs of shape {:?}",
                labels.len(),
                inputs.shape()
            )));
        }
        Ok(Self {
            name: name.into(),
            inputs,
            labels,
        })
    }

    pub fn from_dataset(ds: &Dataset, stats: &NormStats) -> Result<Self> {
        Self::new(ds.name.clone(), normalize(ds, stats)?, ds.labels_usize())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Loss plus calibration metrics of a model on one labelled set.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub metrics: MetricsReport,
}

/// Eval-mode loss and metrics. The model is borrowed immutably, so probing
/// cannot change it.
pub fn evaluate_set(model: &Model, set: &EvalSet, num_bins: usize) -> Result<Evaluation> {
    const CHUNK: usize = 1024;
    if set.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "evaluation set `{}` is empty",
            set.name
        )));
    }
    let k = model.arch().num_classes;
    let n = set.len();
    let mut probs = Vec::with_capacity(n * k);
    let mut loss_sum = 0.0;
    let mut start = 0;
    while start < n {
        let end = (start + CHUNK).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let trace = model.forward_eval(&set.inputs.select_rows(&idx))?;
        let targets = one_hot(&set.labels[start..end], k)?;
        loss_sum += model.loss(&trace, &targets)? * (end - start) as f64;
        let mut out = trace.outputs.into_data();
        if model.arch().output == OutputKind::Sigmoid {
            for row in out.chunks_mut(k) {
                let s: f64 = row.iter().sum();
                row.iter_mut().for_each(|v| *v /= s);
            }
        }
        probs.extend(out);
        start = end;
    }
    let probs = Tensor::from_parts(vec![n, k], probs);
    let preds = predictions_from_probs(&probs, Some(&set.labels))?;
    Ok(Evaluation {
        loss: loss_sum / n as f64,
        metrics: evaluate(&preds, k, num_bins)?,
    })
}

/// One probe row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub phase: Phase,
    pub epoch: usize,
    pub dataset: String,
    pub train_loss: f64,
    pub test_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub mean_conf: f64,
    pub ece: f64,
}

/// Probe history across phases.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

pub const LOG_HEADER: &str =
    "phase,epoch,dataset,train_loss,test_loss,train_acc,test_acc,mean_conf,ece";

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(LOG_HEADER);
        s.push('\n');
        for r in &self.rows {
            writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                r.phase.as_str(),
                r.epoch,
                r.dataset,
                r.train_loss,
                r.test_loss,
                r.train_acc,
                r.test_acc,
                r.mean_conf,
                r.ece
            )
            .unwrap();
        }
        s
    }

    /// Rows of one phase and probe dataset, in epoch order.
    pub fn series<'a>(
        &'a self,
        phase: Phase,
        dataset: &'a str,
    ) -> impl Iterator<Item = &'a LogRow> + 'a {
        self.rows
            .iter()
            .filter(move |r| r.phase == phase && r.dataset == dataset)
    }

    pub fn last(&self, phase: Phase, dataset: &str) -> Option<&LogRow> {
        self.rows
            .iter()
            .rev()
            .find(|r| r.phase == phase && r.dataset == dataset)
    }

    pub fn extend(&mut self, other: TrainLog) {
        self.rows.extend(other.rows);
    }
}

fn should_probe(epoch: usize, every: usize, last: usize) -> bool {
    epoch % every == 0 || epoch == last
}

fn check_loss(phase: Phase, epoch: usize, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged {
            phase: phase.as_str().into(),
            epoch,
            loss,
        })
    }
}

fn train_step(
    model: &mut Model,
    x: &Tensor,
    targets: &Tensor,
    phase: &PhaseConfig,
    state: &mut OptimState,
    epoch: usize,
) -> Result<()> {
    let trace = model.forward(x, Mode::Train)?;
    let loss = model.loss(&trace, targets)?;
    check_loss(phase.phase, epoch, loss)?;
    let grads = model.backward(&trace, targets, phase.learning_rule)?;
    if !grads.is_finite() {
        return Err(Error::Diverged {
            phase: phase.phase.as_str().into(),
            epoch,
            loss,
        });
    }
    adam_step(model, &grads, state, &phase.optim)
}

/// Noise pretraining: every step draws fresh Gaussian inputs and independent
/// uniform labels.
///
/// Probe rows are appended to `log` at epoch 0 (before any update), every
/// `probe_every` epochs and after the last epoch. The `noise` row reports a
/// fixed held-out noise set; every other row reports one probe set, with the
/// held-out noise loss/accuracy in its train columns. On divergence the rows
/// logged so far stay in `log`.
pub fn pretrain_noise(
    model: &mut Model,
    state: &mut OptimState,
    phase: &PhaseConfig,
    probes: &[EvalSet],
    num_bins: usize,
    rng: &RngStream,
    log: &mut TrainLog,
) -> Result<()> {
    phase.validate()?;
    if phase.phase != Phase::NoisePretrain {
        return Err(Error::InvalidArgument(
            "pretrain_noise needs a noise-pretrain phase".into(),
        ));
    }
    let arch = *model.arch();
    let spec = phase.noise_spec(arch.input_dim, arch.num_classes);
    let mut eval_rng = rng.child("noise-eval");
    let held_out = EvalSet::new(
        "noise",
        gaussian_tensor(
            &[NOISE_EVAL_SAMPLES, arch.input_dim],
            spec.mean,
            spec.std,
            &mut eval_rng,
        )?,
        uniform_labels(NOISE_EVAL_SAMPLES, arch.num_classes, &mut eval_rng)?,
    )?;
    let mut stream = noise_batches(spec, rng.child("noise-batches"))?;
    if phase.reset_optimizer {
        state.reset();
    }
    let mut watched: Vec<f64> = Vec::new();
    let probe = |model: &Model, epoch: usize, log: &mut TrainLog| -> Result<f64> {
        let noise = evaluate_set(model, &held_out, num_bins)?;
        check_loss(phase.phase, epoch, noise.loss)?;
        let row = |set_name: &str, ev: &Evaluation| LogRow {
            phase: phase.phase,
            epoch,
            dataset: set_name.to_string(),
            train_loss: noise.loss,
            test_loss: ev.loss,
            train_acc: noise.metrics.accuracy,
            test_acc: ev.metrics.accuracy,
            mean_conf: ev.metrics.mean_confidence,
            ece: ev.metrics.ece,
        };
        log.rows.push(row("noise", &noise));
        let mut first = noise.metrics.mean_confidence;
        for (i, set) in probes.iter().enumerate() {
            let ev = evaluate_set(model, set, num_bins)?;
            if i == 0 {
                first = ev.metrics.mean_confidence;
            }
            log.rows.push(row(&set.name, &ev));
        }
        Ok(first)
    };
    watched.push(probe(model, 0, log)?);
    for epoch in 1..=phase.epochs {
        for _ in 0..spec.batches_per_epoch {
            let (x, t) = stream.next_one_hot();
            train_step(model, &x, &t, phase, state, epoch)?;
        }
        if should_probe(epoch, phase.probe_every, phase.epochs) {
            watched.push(probe(model, epoch, log)?);
            if let Some(c) = phase.convergence {
                if converged(&watched, c) {
                    break;
                }
            }
        }
    }
    Ok(())
}

fn converged(history: &[f64], rule: Convergence) -> bool {
    if history.len() < rule.window {
        return false;
    }
    let tail = &history[history.len() - rule.window..];
    let lo = tail.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = tail.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    hi - lo < rule.tolerance
}

/// Minibatch training on real data with probes on `train` and `test`.
///
/// Rows carry the test set's name; train columns are eval-mode metrics on the
/// full training set.
pub fn train_data(
    model: &mut Model,
    state: &mut OptimState,
    phase: &PhaseConfig,
    train: &EvalSet,
    test: &EvalSet,
    num_bins: usize,
    rng: &RngStream,
    log: &mut TrainLog,
) -> Result<()> {
    phase.validate()?;
    if phase.phase != Phase::DataTrain {
        return Err(Error::InvalidArgument(
            "train_data needs a data-train phase".into(),
        ));
    }
    if train.len() < 2 {
        return Err(Error::InvalidArgument(
            "training set needs at least two samples".into(),
        ));
    }
    let k = model.arch().num_classes;
    if phase.reset_optimizer {
        state.reset();
    }
    let probe = |model: &Model, epoch: usize, log: &mut TrainLog| -> Result<()> {
        let tr = evaluate_set(model, train, num_bins)?;
        let te = evaluate_set(model, test, num_bins)?;
        check_loss(phase.phase, epoch, tr.loss)?;
        log.rows.push(LogRow {
            phase: phase.phase,
            epoch,
            dataset: test.name.clone(),
            train_loss: tr.loss,
            test_loss: te.loss,
            train_acc: tr.metrics.accuracy,
            test_acc: te.metrics.accuracy,
            mean_conf: te.metrics.mean_confidence,
            ece: te.metrics.ece,
        });
        Ok(())
    };
    probe(model, 0, log)?;
    let mut order_rng = rng.child("batch-order");
    let mut history = Vec::new();
    for epoch in 1..=phase.epochs {
        for (x, y) in data_batches(
            &train.inputs,
            &train.labels,
            phase.batch_size,
            true,
            &mut order_rng,
        ) {
            let t = one_hot(&y, k)?;
            train_step(model, &x, &t, phase, state, epoch)?;
        }
        if should_probe(epoch, phase.probe_every, phase.epochs) {
            probe(model, epoch, log)?;
            if let Some(c) = phase.convergence {
                history.push(log.rows.last().unwrap().mean_conf);
                if converged(&history, c) {
                    break;
                }
            }
        }
    }
    Ok(())
}
