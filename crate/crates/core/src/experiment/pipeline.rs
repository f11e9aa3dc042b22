//! Paired with/without-pretraining runs and the depth × size sweep.

use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    evaluate_set, pretrain_noise, train_data, EvalSet, Evaluation, Phase, PhaseConfig, TrainLog,
};
use crate::data::{subset, Dataset, NormStats};
use crate::error::{Error, Result};
use crate::nn::{build_model, ArchSpec, InitSpec, LearningRule, Model};
use crate::optim::OptimState;
use crate::rng::RngStream;

/// Standardized training subset and test set.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: EvalSet,
    pub test: EvalSet,
    pub stats: NormStats,
    pub subset_hash: String,
}

/// Draws a stratified subset of `train_full` from the `subset` child of `rng`,
/// computes its channel statistics and standardizes both sets with them.
pub fn prepare_data(
    train_full: &Dataset,
    test: &Dataset,
    subset_size: usize,
    rng: &RngStream,
) -> Result<PreparedData> {
    let sub = subset(train_full, subset_size, &mut rng.child("subset"))?;
    let stats = NormStats::compute(&sub)?;
    Ok(PreparedData {
        train: EvalSet::from_dataset(&sub, &stats)?,
        test: EvalSet::from_dataset(test, &stats)?,
        subset_hash: sub.content_hash(),
        stats,
    })
}

/// Everything a single training run needs besides data and seed.
#[derive(Debug, Clone, PartialEq)]
pub struct RunPlan {
    pub arch: ArchSpec,
    pub init: InitSpec,
    pub noise: PhaseConfig,
    pub data: PhaseConfig,
    pub num_bins: usize,
}

impl RunPlan {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.noise.validate()?;
        self.data.validate()?;
        if self.noise.phase != Phase::NoisePretrain || self.data.phase != Phase::DataTrain {
            return Err(Error::InvalidArgument(
                "run plan needs a noise phase and a data phase".into(),
            ));
        }
        if self.num_bins == 0 {
            return Err(Error::InvalidArgument("num_bins must be positive".into()));
        }
        Ok(())
    }

    fn needs_feedback(&self) -> bool {
        self.noise.learning_rule == LearningRule::FeedbackAlignment
            || self.data.learning_rule == LearningRule::FeedbackAlignment
    }

    /// The initial model for a run seeded by `rng`; identical for the
    /// pretrained and the data-only arm.
    pub fn initial_model(&self, rng: &RngStream) -> Result<Model> {
        build_model(
            self.arch,
            self.init,
            self.needs_feedback(),
            &mut rng.child("init"),
        )
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub pretrained: bool,
    pub model: Model,
    pub log: TrainLog,
    /// Final eval-mode metrics on the test set.
    pub test: Evaluation,
    pub subset_hash: String,
}

/// One run: optional noise pretraining then data training.
///
/// Child streams of `rng`: `init` for the weights, `noise` for the noise
/// phase and `data` for the batch order. `probes` are extra sets evaluated
/// during noise pretraining, after the test set.
pub fn run_single(
    plan: &RunPlan,
    data: &PreparedData,
    probes: &[EvalSet],
    pretrain: bool,
    rng: &RngStream,
) -> Result<RunOutcome> {
    let mut log = TrainLog::default();
    let (model, test) = run_logged(plan, data, probes, pretrain, rng, &mut log)?;
    Ok(RunOutcome {
        pretrained: pretrain,
        model,
        log,
        test,
        subset_hash: data.subset_hash.clone(),
    })
}

/// Body of [`run_single`]; rows logged before a failure stay in `log`.
pub fn run_logged(
    plan: &RunPlan,
    data: &PreparedData,
    probes: &[EvalSet],
    pretrain: bool,
    rng: &RngStream,
    log: &mut TrainLog,
) -> Result<(Model, Evaluation)> {
    plan.validate()?;
    let mut model = plan.initial_model(rng)?;
    let mut state = OptimState::new();
    if pretrain {
        let mut noise_probes = vec![data.test.clone()];
        noise_probes.extend_from_slice(probes);
        pretrain_noise(
            &mut model,
            &mut state,
            &plan.noise,
            &noise_probes,
            plan.num_bins,
            &rng.child("noise"),
            log,
        )?;
    }
    train_data(
        &mut model,
        &mut state,
        &plan.data,
        &data.train,
        &data.test,
        plan.num_bins,
        &rng.child("data"),
        log,
    )?;
    let test = evaluate_set(&model, &data.test, plan.num_bins)?;
    Ok((model, test))
}

#[derive(Debug, Clone)]
pub struct PairOutcome {
    pub with_pretraining: RunOutcome,
    pub without_pretraining: RunOutcome,
}

/// Paired runs that differ only in the noise phase: same initial weights,
/// same training subset, same data-phase batch order.
pub fn run_pair(
    plan: &RunPlan,
    data: &PreparedData,
    probes: &[EvalSet],
    rng: &RngStream,
) -> Result<PairOutcome> {
    Ok(PairOutcome {
        with_pretraining: run_single(plan, data, probes, true, rng)?,
        without_pretraining: run_single(plan, data, probes, false, rng)?,
    })
}

/// Earliest data-phase epochs at which each log's test accuracy reaches
/// `target`.
pub fn accuracy_matched_epochs(
    a: &TrainLog,
    b: &TrainLog,
    dataset: &str,
    target: f64,
) -> Option<(usize, usize)> {
    let first = |log: &TrainLog| {
        log.series(Phase::DataTrain, dataset)
            .find(|r| r.test_acc >= target)
            .map(|r| r.epoch)
    };
    Some((first(a)?, first(b)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepAxes {
    pub depths: Vec<usize>,
    pub sizes: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl SweepAxes {
    pub fn validate(&self) -> Result<()> {
        if self.depths.is_empty() || self.sizes.is_empty() || self.seeds.is_empty() {
            return Err(Error::InvalidArgument("sweep axes must be nonempty".into()));
        }
        Ok(())
    }

    pub fn coordinates(&self) -> Vec<(usize, usize, u64)> {
        let mut out = Vec::new();
        for &d in &self.depths {
            for &n in &self.sizes {
                for &s in &self.seeds {
                    out.push((d, n, s));
                }
            }
        }
        out
    }
}

/// One sweep record. Failed cells carry `error` and no metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub depth: usize,
    pub size: usize,
    pub seed: u64,
    pub pretrained: bool,
    pub ece: Option<f64>,
    pub acc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl SweepCell {
    fn key(&self) -> (usize, usize, u64, bool) {
        (self.depth, self.size, self.seed, self.pretrained)
    }
}

/// Stream for the cell at `(depth, size, seed)` under the top-level seed.
pub fn cell_rng(top_seed: u64, depth: usize, size: usize, seed: u64) -> RngStream {
    RngStream::new(top_seed).child(&format!("cell/depth={depth}/size={size}/seed={seed}"))
}

fn run_cell(
    plan: &RunPlan,
    train_full: &Dataset,
    test: &Dataset,
    top_seed: u64,
    coord: (usize, usize, u64),
) -> Vec<SweepCell> {
    let (depth, size, seed) = coord;
    let rng = cell_rng(top_seed, depth, size, seed);
    let plan = RunPlan {
        arch: ArchSpec { depth, ..plan.arch },
        ..plan.clone()
    };
    let cell = |pretrained: bool, r: Result<RunOutcome>| {
        let (ece, acc, error) = match r {
            Ok(o) => (
                Some(o.test.metrics.ece),
                Some(o.test.metrics.accuracy),
                None,
            ),
            Err(e) => (None, None, Some(format!("{}: {e}", e.kind()))),
        };
        SweepCell {
            depth,
            size,
            seed,
            pretrained,
            ece,
            acc,
            error,
        }
    };
    let data = prepare_data(train_full, test, size, &rng);
    [true, false]
        .into_iter()
        .map(|p| match &data {
            Ok(data) => cell(p, run_single(&plan, data, &[], p, &rng)),
            Err(e) => cell(p, Err(Error::InvalidArgument(e.to_string()))),
        })
        .collect()
}

/// Runs every `(depth, size, seed)` coordinate as a paired experiment on a
/// pool of `jobs` threads.
///
/// Coordinates whose two cells are already in `completed` without error are
/// skipped. `on_progress` sees the sorted set of finished cells after every
/// coordinate and is never called concurrently. The result is sorted by
/// `(depth, size, seed, pretrained)`.
pub fn run_sweep(
    axes: &SweepAxes,
    plan: &RunPlan,
    train_full: &Dataset,
    test: &Dataset,
    top_seed: u64,
    jobs: usize,
    completed: &[SweepCell],
    on_progress: &(dyn Fn(&[SweepCell]) -> Result<()> + Sync),
) -> Result<Vec<SweepCell>> {
    axes.validate()?;
    plan.validate()?;
    let coords = axes.coordinates();
    let done = |d: usize, n: usize, s: u64| {
        [true, false].iter().all(|&p| {
            completed
                .iter()
                .any(|c| c.key() == (d, n, s, p) && c.error.is_none())
        })
    };
    let mut initial: Vec<SweepCell> = completed
        .iter()
        .filter(|c| coords.contains(&(c.depth, c.size, c.seed)) && done(c.depth, c.size, c.seed))
        .cloned()
        .collect();
    sort_cells(&mut initial);
    initial.dedup_by_key(|c| c.key());
    let todo: Vec<_> = coords
        .iter()
        .copied()
        .filter(|&(d, n, s)| !done(d, n, s))
        .collect();
    let results = Mutex::new(initial);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidState(format!("cannot start worker pool: {e}")))?;
    pool.install(|| {
        todo.par_iter().try_for_each(|&coord| {
            let cells = run_cell(plan, train_full, test, top_seed, coord);
            let mut guard = results.lock().expect("sweep writer poisoned");
            guard.extend(cells);
            sort_cells(&mut guard);
            on_progress(&guard)
        })
    })?;
    Ok(results.into_inner().expect("sweep writer poisoned"))
}

fn sort_cells(cells: &mut [SweepCell]) {
    cells.sort_by_key(|c| (c.depth, c.size, c.seed, !c.pretrained));
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gaussian_image_dataset;
    use crate::nn::OutputKind;

    fn tiny_data(n: usize, seed: u64) -> Dataset {
        let mut ds =
            gaussian_image_dataset("tiny", n, (1, 2, 2), 3, &mut RngStream::new(seed)).unwrap();
        ds.labels = (0..n).map(|i| (i % 3) as u16).collect();
        ds
    }

    fn tiny_plan() -> RunPlan {
        RunPlan {
            arch: ArchSpec {
                input_dim: 4,
                hidden_width: 6,
                depth: 2,
                num_classes: 3,
                output: OutputKind::Softmax,
            },
            init: InitSpec::default(),
            noise: PhaseConfig {
                epochs: 2,
                batches_per_epoch: 3,
                batch_size: 8,
                ..PhaseConfig::noise_default()
            },
            data: PhaseConfig {
                epochs: 2,
                batch_size: 8,
                ..PhaseConfig::data_default()
            },
            num_bins: 10,
        }
    }

    #[test]
    fn paired_runs_share_subset_and_init() {
        let train = tiny_data(60, 1);
        let test = tiny_data(30, 2);
        let rng = RngStream::new(5);
        let data = prepare_data(&train, &test, 24, &rng).unwrap();
        let plan = tiny_plan();
        let pair = run_pair(&plan, &data, &[], &rng).unwrap();
        assert_eq!(
            pair.with_pretraining.subset_hash,
            pair.without_pretraining.subset_hash
        );
        assert_eq!(
            plan.initial_model(&rng).unwrap(),
            plan.initial_model(&rng).unwrap()
        );
        assert!(
            pair.with_pretraining
                .log
                .series(Phase::NoisePretrain, "noise")
                .count()
                > 0
        );
        assert_eq!(
            pair.without_pretraining
                .log
                .series(Phase::NoisePretrain, "noise")
                .count(),
            0
        );
        assert_ne!(pair.with_pretraining.model, pair.without_pretraining.model);
    }

    #[test]
    fn sweep_cardinality_and_resume() {
        let train = tiny_data(90, 1);
        let test = tiny_data(30, 2);
        let axes = SweepAxes {
            depths: vec![1, 2],
            sizes: vec![12, 24],
            seeds: vec![1, 2],
        };
        let calls = Mutex::new(0usize);
        let progress = |_: &[SweepCell]| -> Result<()> {
            *calls.lock().unwrap() += 1;
            Ok(())
        };
        let full = run_sweep(&axes, &tiny_plan(), &train, &test, 7, 2, &[], &progress).unwrap();
        assert_eq!(full.len(), 2 * 2 * 2 * 2);
        assert!(full.iter().all(|c| c.error.is_none()));
        assert_eq!(*calls.lock().unwrap(), 8);

        let again = run_sweep(
            &axes,
            &tiny_plan(),
            &train,
            &test,
            7,
            1,
            &full[..10],
            &progress,
        )
        .unwrap();
        assert_eq!(again, full);
        // 5 coordinates were complete, 3 reran
        assert_eq!(*calls.lock().unwrap(), 11);
    }

    #[test]
    fn oversized_subset_marks_cells_failed() {
        let train = tiny_data(30, 1);
        let test = tiny_data(30, 2);
        let axes = SweepAxes {
            depths: vec![1],
            sizes: vec![12, 1000],
            seeds: vec![1],
        };
        let cells = run_sweep(&axes, &tiny_plan(), &train, &test, 7, 1, &[], &|_| Ok(())).unwrap();
        assert_eq!(cells.len(), 4);
        assert!(cells[..2].iter().all(|c| c.error.is_none()));
        assert!(cells[2..]
            .iter()
            .all(|c| c.error.is_some() && c.ece.is_none()));
    }

    #[test]
    fn accuracy_matching_picks_earliest_epochs() {
        use super::super::LogRow;
        let row = |epoch, acc| LogRow {
            phase: Phase::DataTrain,
            epoch,
            dataset: "t".into(),
            train_loss: 0.0,
            test_loss: 0.0,
            train_acc: 0.0,
            test_acc: acc,
            mean_conf: 0.5,
            ece: 0.0,
        };
        let a = TrainLog {
            rows: vec![row(0, 0.1), row(1, 0.3), row(2, 0.5)],
        };
        let b = TrainLog {
            rows: vec![row(0, 0.1), row(1, 0.2), row(2, 0.35), row(3, 0.5)],
        };
        assert_eq!(accuracy_matched_epochs(&a, &b, "t", 0.3), Some((1, 2)));
        assert_eq!(accuracy_matched_epochs(&a, &b, "t", 0.9), None);
    }
}
