//! Command-line front end. Every subcommand writes its artifacts under the
//! output directory and records them, with SHA-256 hashes, in
//! `manifest.json`.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{parse_config, ExperimentConfig};
use crate::data::{load_cifar10, load_container, Cifar10, Dataset, NormStats};
use crate::error::{Error, Result};
use crate::experiment::{
    gaussian_ood_set, prepare_data, pretrain_noise, run_logged, run_ood, run_sweep, run_toy,
    EvalSet, OodReport, PreparedData, SweepCell, TrainLog,
};
use crate::metrics::{evaluate, predictions_from_probs, Prediction};
use crate::nn::{read_checkpoint, write_checkpoint, Model};
use crate::optim::OptimState;
use crate::rng::RngStream;

#[derive(Debug, Parser)]
#[command(
    name = "noisecal",
    version,
    about = "Random-noise pretraining and calibration experiments"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides `data.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `outputs`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads for sweeps.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Skip the noise phase (ablation).
    #[arg(long)]
    pub no_pretrain: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Noise pretraining only; writes the probe log and a checkpoint.
    Pretrain(CommonArgs),
    /// Noise pretraining (unless --no-pretrain) followed by data training.
    Train(CommonArgs),
    /// Paired runs over the configured depth × size × seed grid.
    Sweep(CommonArgs),
    /// 2-D toy model confidence maps before and after noise pretraining.
    Toy(CommonArgs),
    /// Trains (or loads) a model and measures OOD detection.
    Ood {
        #[command(flatten)]
        common: CommonArgs,
        /// Evaluate this checkpoint instead of training.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Recomputes metrics from a saved predictions.csv.
    Report {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long, default_value_t = 10)]
        bins: usize,
        /// Defaults to one more than the largest label present.
        #[arg(long)]
        num_classes: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarizes the configured datasets.
    InspectData(CommonArgs),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seed: u64,
    pub artifacts: Vec<Artifact>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

pub fn read_manifest(dir: &Path) -> Result<Option<Manifest>> {
    let p = dir.join(MANIFEST_FILE);
    if !p.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    Ok(Some(serde_json::from_str(&text)?))
}

/// Collects artifacts of one invocation and writes the manifest.
struct Outputs {
    dir: PathBuf,
    config_hash: String,
    seed: u64,
    written: Vec<String>,
}

impl Outputs {
    fn new(dir: PathBuf, config_hash: String, seed: u64) -> Result<Self> {
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self {
            dir,
            config_hash,
            seed,
            written: Vec::new(),
        })
    }

    /// Writes through a temporary file so readers never see partial output.
    fn write(&mut self, name: &str, bytes: impl AsRef<[u8]>) -> Result<()> {
        let path = self.dir.join(name);
        let tmp = self.dir.join(format!(".{name}.tmp"));
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        if !self.written.iter().any(|w| w == name) {
            self.written.push(name.to_string());
        }
        Ok(())
    }

    fn write_json(&mut self, name: &str, value: &impl Serialize) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text)
    }

    fn track(&mut self, name: &str) {
        if !self.written.iter().any(|w| w == name) {
            self.written.push(name.to_string());
        }
    }

    /// Lists this run's files plus any earlier artifacts still present in
    /// the directory.
    fn finish(&self) -> Result<Manifest> {
        let mut names: Vec<String> = self.written.clone();
        if let Some(old) = read_manifest(&self.dir)? {
            for a in old.artifacts {
                if self.dir.join(&a.path).is_file() && !names.contains(&a.path) {
                    names.push(a.path);
                }
            }
        }
        names.sort();
        let artifacts = names
            .into_iter()
            .map(|n| {
                Ok(Artifact {
                    sha256: sha256_file(&self.dir.join(&n))?,
                    path: n,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let manifest = Manifest {
            config_hash: self.config_hash.clone(),
            seed: self.seed,
            artifacts,
        };
        let path = self.dir.join(MANIFEST_FILE);
        let tmp = self.dir.join(".manifest.json.tmp");
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        std::fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        Ok(manifest)
    }
}

/// Resolved config plus command-line overrides.
struct Context {
    cfg: ExperimentConfig,
    seed: u64,
    out: PathBuf,
    jobs: usize,
    pretrain: bool,
}

impl Context {
    fn load(args: &CommonArgs, require_config: bool) -> Result<Self> {
        let mut cfg = match &args.config {
            Some(p) => parse_config(p)?,
            None if require_config => {
                return Err(Error::config(
                    "--config",
                    "this command needs a config file",
                ))
            }
            None => ExperimentConfig::from_json(
                r#"{"arch": {"input_dim": 2, "hidden_width": 10, "depth": 1, "num_classes": 2, "output": "sigmoid"}, "data": {}}"#,
            )?,
        };
        if let Some(seed) = args.seed {
            cfg.data.seed = seed;
        }
        if let Some(out) = &args.out {
            cfg.outputs = out.clone();
        }
        if args.jobs == 0 {
            return Err(Error::config("--jobs", "must be ≥ 1"));
        }
        Ok(Self {
            seed: cfg.data.seed,
            out: cfg.outputs.clone(),
            jobs: args.jobs,
            pretrain: !args.no_pretrain,
            cfg,
        })
    }

    fn outputs(&self) -> Result<Outputs> {
        let mut o = Outputs::new(self.out.clone(), self.cfg.hash(), self.seed)?;
        o.write(
            "config.json",
            format!("{}\n", self.cfg.portable().to_json()),
        )?;
        Ok(o)
    }

    fn cifar(&self) -> Result<Cifar10> {
        let dir = self
            .cfg
            .data
            .cifar_dir
            .as_ref()
            .ok_or_else(|| Error::config("data.cifar_dir", "required by this command"))?;
        load_cifar10(dir)
    }

    fn containers(&self) -> Result<Vec<Dataset>> {
        self.cfg
            .data
            .container_paths
            .iter()
            .map(|p| load_container(p))
            .collect()
    }

    fn run_rng(&self) -> RngStream {
        RngStream::new(self.seed).child("run")
    }
}

fn standardized(sets: &[Dataset], stats: &NormStats) -> Result<Vec<EvalSet>> {
    sets.iter()
        .map(|d| EvalSet::from_dataset(d, stats))
        .collect()
}

pub fn predictions_csv(preds: &[Prediction]) -> String {
    let mut s = String::from("index,predicted_label,confidence,true_label\n");
    for (i, p) in preds.iter().enumerate() {
        let t = p.true_label.map_or_else(String::new, |t| t.to_string());
        writeln!(s, "{i},{},{},{t}", p.predicted_label, p.confidence).unwrap();
    }
    s
}

pub fn parse_predictions_csv(path: &Path) -> Result<Vec<Prediction>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some("index,predicted_label,confidence,true_label") {
        return Err(Error::format(path, "unexpected predictions header"));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let bad = |what: &str| Error::format(path, format!("line {}: {what}", i + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(bad("expected 4 fields"));
            }
            Ok(Prediction {
                predicted_label: f[1].parse().map_err(|_| bad("bad predicted_label"))?,
                confidence: f[2].parse().map_err(|_| bad("bad confidence"))?,
                true_label: if f[3].is_empty() {
                    None
                } else {
                    Some(f[3].parse().map_err(|_| bad("bad true_label"))?)
                },
            })
        })
        .collect()
}

fn model_predictions(model: &Model, set: &EvalSet) -> Result<Vec<Prediction>> {
    predictions_from_probs(&model.predict_proba(&set.inputs)?, Some(&set.labels))
}

fn roc_csv(report: &OodReport) -> String {
    let mut s = String::from("fpr,tpr,threshold\n");
    for p in &report.roc.points {
        let t = p.threshold.map_or_else(String::new, |t| t.to_string());
        writeln!(s, "{},{},{t}", p.fpr, p.tpr).unwrap();
    }
    s
}

/// Writes whatever log exists, then propagates `result`.
fn with_log<T>(out: &mut Outputs, name: &str, log: &TrainLog, result: Result<T>) -> Result<T> {
    out.write(name, log.to_csv())?;
    if result.is_err() {
        out.finish()?;
    }
    result
}

fn cmd_pretrain(ctx: &Context) -> Result<()> {
    let mut out = ctx.outputs()?;
    let rng = ctx.run_rng();
    let plan = ctx.cfg.run_plan();
    let mut probes = Vec::new();
    if ctx.cfg.data.cifar_dir.is_some() {
        let cifar = ctx.cifar()?;
        let data = prepare_data(&cifar.train, &cifar.test, ctx.cfg.data.subset_size, &rng)?;
        probes.push(data.test);
        probes.extend(standardized(&ctx.containers()?, &data.stats)?);
    }
    let mut model = plan.initial_model(&rng)?;
    let mut log = TrainLog::default();
    let result = pretrain_noise(
        &mut model,
        &mut OptimState::new(),
        &plan.noise,
        &probes,
        plan.num_bins,
        &rng.child("noise"),
        &mut log,
    );
    with_log(&mut out, "noise_log.csv", &log, result)?;
    write_checkpoint(&model, &out.dir.join("model.nnck"))?;
    out.track("model.nnck");
    out.finish()?;
    Ok(())
}

struct Trained {
    model: Model,
    data: PreparedData,
}

fn train_into(ctx: &Context, out: &mut Outputs, cifar: &Cifar10) -> Result<Trained> {
    let rng = ctx.run_rng();
    let plan = ctx.cfg.run_plan();
    let data = prepare_data(&cifar.train, &cifar.test, ctx.cfg.data.subset_size, &rng)?;
    let probes = standardized(&ctx.containers()?, &data.stats)?;
    let mut log = TrainLog::default();
    let result = run_logged(&plan, &data, &probes, ctx.pretrain, &rng, &mut log);
    let (model, _) = with_log(out, "train_log.csv", &log, result)?;
    let preds = model_predictions(&model, &data.test)?;
    out.write("predictions.csv", predictions_csv(&preds))?;
    out.write_json(
        "metrics.json",
        &evaluate(&preds, plan.arch.num_classes, plan.num_bins)?,
    )?;
    write_checkpoint(&model, &out.dir.join("model.nnck"))?;
    out.track("model.nnck");
    Ok(Trained { model, data })
}

fn cmd_train(ctx: &Context) -> Result<()> {
    let mut out = ctx.outputs()?;
    let cifar = ctx.cifar()?;
    train_into(ctx, &mut out, &cifar)?;
    out.finish()?;
    Ok(())
}

fn cmd_sweep(ctx: &Context) -> Result<bool> {
    let axes = ctx
        .cfg
        .sweep
        .clone()
        .ok_or_else(|| Error::config("sweep", "required by the sweep command"))?;
    let cifar = ctx.cifar()?;
    let completed = resumable_cells(ctx)?;
    let out = std::sync::Mutex::new(ctx.outputs()?);
    let plan = ctx.cfg.run_plan();
    let save = |cells: &[SweepCell]| -> Result<()> {
        let mut o = out.lock().expect("output writer poisoned");
        o.write_json("sweep.json", &cells)?;
        o.finish().map(|_| ())
    };
    let cells = run_sweep(
        &axes,
        &plan,
        &cifar.train,
        &cifar.test,
        ctx.seed,
        ctx.jobs,
        &completed,
        &save,
    )?;
    save(&cells)?;
    Ok(cells.iter().all(|c| c.error.is_none()))
}

/// Cells from an earlier sweep into the same directory with the same config,
/// provided the manifest still vouches for `sweep.json`.
fn resumable_cells(ctx: &Context) -> Result<Vec<SweepCell>> {
    let Some(manifest) = read_manifest(&ctx.out)? else {
        return Ok(Vec::new());
    };
    if manifest.config_hash != ctx.cfg.hash() || manifest.seed != ctx.seed {
        return Ok(Vec::new());
    }
    let path = ctx.out.join("sweep.json");
    let listed = manifest.artifacts.iter().find(|a| a.path == "sweep.json");
    match listed {
        Some(a) if path.is_file() && sha256_file(&path)? == a.sha256 => {
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            Ok(serde_json::from_str(&text)?)
        }
        _ => Ok(Vec::new()),
    }
}

fn cmd_toy(ctx: &Context) -> Result<()> {
    let mut out = ctx.outputs()?;
    let run = run_toy(&ctx.cfg.toy, &RngStream::new(ctx.seed).child("toy"))?;
    out.write("toy_map_untrained.csv", run.untrained_map.to_csv())?;
    out.write("toy_map_pretrained.csv", run.pretrained_map.to_csv())?;
    out.write_json("toy_map.json", &run.pretrained_map.sidecar())?;
    out.write_json("toy_report.json", &run.report)?;
    out.write("toy_log.csv", run.log.to_csv())?;
    out.finish()?;
    Ok(())
}

fn cmd_ood(ctx: &Context, checkpoint: Option<&Path>) -> Result<()> {
    let mut out = ctx.outputs()?;
    let cifar = ctx.cifar()?;
    let (model, data) = match checkpoint {
        Some(p) => {
            let model = read_checkpoint(p)?;
            let data = prepare_data(
                &cifar.train,
                &cifar.test,
                ctx.cfg.data.subset_size,
                &ctx.run_rng(),
            )?;
            (model, data)
        }
        None => {
            let t = train_into(ctx, &mut out, &cifar)?;
            (t.model, t.data)
        }
    };
    let mut reports = Vec::new();
    let containers = ctx.containers()?;
    if containers.is_empty() {
        let c = &cifar.test;
        let x = gaussian_ood_set(
            ctx.cfg.ood.fallback_samples,
            (c.channels, c.height, c.width),
            &data.stats,
            &mut RngStream::new(ctx.seed).child("ood-fallback"),
        )?;
        reports.push(run_ood(&model, &data.test, "gaussian-noise", &x)?);
    } else {
        for ds in &containers {
            let set = EvalSet::from_dataset(ds, &data.stats)?;
            reports.push(run_ood(&model, &data.test, &ds.name, &set.inputs)?);
        }
    }
    for r in &reports {
        out.write(&format!("roc_{}.csv", r.ood_name), roc_csv(r))?;
    }
    out.write_json("ood.json", &reports)?;
    out.finish()?;
    Ok(())
}

fn cmd_report(
    predictions: &Path,
    bins: usize,
    num_classes: Option<usize>,
    out: Option<&Path>,
) -> Result<()> {
    let preds = parse_predictions_csv(predictions)?;
    if bins == 0 {
        return Err(Error::config("--bins", "must be ≥ 1"));
    }
    let k = num_classes.unwrap_or_else(|| {
        preds
            .iter()
            .map(|p| p.predicted_label.max(p.true_label.unwrap_or(0)) + 1)
            .max()
            .unwrap_or(2)
            .max(2)
    });
    let report = evaluate(&preds, k, bins)?;
    let text = serde_json::to_string_pretty(&report)?;
    println!("{text}");
    if let Some(dir) = out {
        let mut o = Outputs::new(dir.to_path_buf(), String::new(), 0)?;
        o.config_hash = sha256_file(predictions)?;
        o.write_json("report.json", &report)?;
        o.finish()?;
    }
    Ok(())
}

#[derive(Serialize)]
struct DatasetSummary {
    name: String,
    samples: usize,
    shape: [usize; 3],
    num_classes: usize,
    label_histogram: Vec<usize>,
    norm_stats: Option<NormStats>,
    sha256: String,
}

fn summarize(ds: &Dataset) -> DatasetSummary {
    DatasetSummary {
        name: ds.name.clone(),
        samples: ds.len(),
        shape: [ds.channels, ds.height, ds.width],
        num_classes: ds.num_classes,
        label_histogram: ds.label_histogram(),
        norm_stats: NormStats::compute(ds).ok(),
        sha256: ds.content_hash(),
    }
}

fn cmd_inspect(ctx: &Context) -> Result<()> {
    let mut out = ctx.outputs()?;
    let mut sets = Vec::new();
    if ctx.cfg.data.cifar_dir.is_some() {
        let c = ctx.cifar()?;
        sets.push(summarize(&c.train));
        sets.push(summarize(&c.test));
    }
    for ds in ctx.containers()? {
        sets.push(summarize(&ds));
    }
    println!("{}", serde_json::to_string_pretty(&sets)?);
    out.write_json("data.json", &sets)?;
    out.finish()?;
    Ok(())
}

/// Runs one invocation. Returns the process exit code: 0 on success, 1 on
/// error (with a JSON error object on stderr) or when any sweep cell failed,
/// 2 for usage errors.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli.command) {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            eprintln!("{}", error_json(&e));
            1
        }
    }
}

pub fn error_json(e: &Error) -> String {
    let mut v = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
    if let Error::Config { key, .. } = e {
        v["key"] = serde_json::Value::String(key.clone());
    }
    v.to_string()
}

/// Executes a parsed command; `Ok(false)` means it finished but some sweep
/// cell failed.
pub fn dispatch(command: &Command) -> Result<bool> {
    match command {
        Command::Pretrain(a) => cmd_pretrain(&Context::load(a, true)?).map(|_| true),
        Command::Train(a) => cmd_train(&Context::load(a, true)?).map(|_| true),
        Command::Sweep(a) => cmd_sweep(&Context::load(a, true)?),
        Command::Toy(a) => cmd_toy(&Context::load(a, false)?).map(|_| true),
        Command::Ood { common, checkpoint } => {
            cmd_ood(&Context::load(common, true)?, checkpoint.as_deref()).map(|_| true)
        }
        Command::Report {
            predictions,
            bins,
            num_classes,
            out,
        } => cmd_report(predictions, *bins, *num_classes, out.as_deref()).map(|_| true),
        Command::InspectData(a) => cmd_inspect(&Context::load(a, true)?).map(|_| true),
    }
}
