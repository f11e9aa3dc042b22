//! JSON experiment configuration with strict key checking.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{read_container_header, CIFAR_BATCH_RECORDS, CIFAR_TEST_FILE, CIFAR_TRAIN_FILES};
use crate::error::{Error, Result};
use crate::experiment::{Phase, PhaseConfig, RunPlan, SweepAxes, ToyConfig};
use crate::nn::{ArchSpec, InitSpec};

/// Largest subset that can be drawn from the CIFAR-10 training split.
pub const CIFAR_TRAIN_SIZE: usize = CIFAR_TRAIN_FILES.len() * CIFAR_BATCH_RECORDS;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Directory holding the CIFAR-10 binary batches.
    #[serde(default)]
    pub cifar_dir: Option<PathBuf>,
    /// RNC1 containers used as out-of-distribution sets.
    #[serde(default)]
    pub container_paths: Vec<PathBuf>,
    #[serde(default = "default_subset_size")]
    pub subset_size: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_subset_size() -> usize {
    4000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    pub bins: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self { bins: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OodConfig {
    /// Size of the Gaussian-noise OOD set used when no container is given.
    pub fallback_samples: usize,
}

impl Default for OodConfig {
    fn default() -> Self {
        Self {
            fallback_samples: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub arch: ArchSpec,
    #[serde(default)]
    pub init: InitSpec,
    #[serde(default = "default_phases")]
    pub phases: Vec<PhaseConfig>,
    pub data: DataConfig,
    #[serde(default)]
    pub metrics: MetricsConfig,
    #[serde(default = "default_outputs")]
    pub outputs: PathBuf,
    #[serde(default)]
    pub sweep: Option<SweepAxes>,
    #[serde(default)]
    pub toy: ToyConfig,
    #[serde(default)]
    pub ood: OodConfig,
}

fn default_phases() -> Vec<PhaseConfig> {
    vec![PhaseConfig::noise_default(), PhaseConfig::data_default()]
}

fn default_outputs() -> PathBuf {
    PathBuf::from("out")
}

fn config_err(key: impl Into<String>, e: impl std::fmt::Display) -> Error {
    Error::config(key, e.to_string())
}

/// Turns a serde failure into a config error keyed by its JSON path (which
/// includes the field name for unknown keys).
fn json_error(e: serde_path_to_error::Error<serde_json::Error>) -> Error {
    let key = e.path().to_string();
    Error::config(key, e.into_inner().to_string())
}

impl ExperimentConfig {
    /// Parses JSON text and checks every bound that does not touch the
    /// filesystem.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(json_error)?;
        cfg.check_values()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// The config with `outputs` reset to `.`, so that where results go does
    /// not change what is recorded about the experiment.
    pub fn portable(&self) -> Self {
        Self {
            outputs: PathBuf::from("."),
            ..self.clone()
        }
    }

    /// SHA-256 of the compact JSON encoding of [`ExperimentConfig::portable`].
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(
            serde_json::to_vec(&self.portable()).expect("config serializes"),
        ))
    }

    pub fn phase(&self, phase: Phase) -> PhaseConfig {
        self.phases
            .iter()
            .find(|p| p.phase == phase)
            .cloned()
            .unwrap_or_else(|| match phase {
                Phase::NoisePretrain => PhaseConfig::noise_default(),
                Phase::DataTrain => PhaseConfig::data_default(),
            })
    }

    pub fn run_plan(&self) -> RunPlan {
        RunPlan {
            arch: self.arch,
            init: self.init,
            noise: self.phase(Phase::NoisePretrain),
            data: self.phase(Phase::DataTrain),
            num_bins: self.metrics.bins,
        }
    }

    /// Bounds that hold regardless of what is on disk.
    pub fn check_values(&self) -> Result<()> {
        self.arch.validate().map_err(|e| config_err("arch", e))?;
        if !(self.init.gain > 0.0 && self.init.gain.is_finite()) {
            return Err(config_err("init.gain", "gain must be positive"));
        }
        let mut seen = Vec::new();
        for (i, p) in self.phases.iter().enumerate() {
            let key = format!("phases[{i}]");
            if p.batch_size < 2 {
                return Err(config_err(
                    format!("{key}.batch_size"),
                    format!("must be ≥ 2, got {}", p.batch_size),
                ));
            }
            p.validate().map_err(|e| config_err(&key, e))?;
            if seen.contains(&p.phase) {
                return Err(config_err(
                    format!("{key}.phase"),
                    format!("duplicate {} phase", p.phase.as_str()),
                ));
            }
            if p.phase == Phase::NoisePretrain && seen.contains(&Phase::DataTrain) {
                return Err(config_err(
                    format!("{key}.phase"),
                    "noise-pretrain must come before data-train",
                ));
            }
            seen.push(p.phase);
        }
        if self.metrics.bins == 0 {
            return Err(config_err("metrics.bins", "must be ≥ 1"));
        }
        if self.data.subset_size < 2 {
            return Err(config_err("data.subset_size", "must be ≥ 2"));
        }
        if self.data.cifar_dir.is_some() && self.data.subset_size > CIFAR_TRAIN_SIZE {
            return Err(config_err(
                "data.subset_size",
                format!(
                    "{} exceeds the {CIFAR_TRAIN_SIZE} CIFAR-10 training samples",
                    self.data.subset_size
                ),
            ));
        }
        if let Some(axes) = &self.sweep {
            axes.validate().map_err(|e| config_err("sweep", e))?;
            if let Some(i) = axes.depths.iter().position(|&d| d == 0) {
                return Err(config_err(
                    format!("sweep.depths[{i}]"),
                    "depth must be ≥ 1",
                ));
            }
            if let Some(i) = axes
                .sizes
                .iter()
                .position(|&n| n < 2 || n > CIFAR_TRAIN_SIZE)
            {
                return Err(config_err(
                    format!("sweep.sizes[{i}]"),
                    format!("size must lie in 2..={CIFAR_TRAIN_SIZE}"),
                ));
            }
        }
        self.toy.validate().map_err(|e| config_err("toy", e))?;
        if self.ood.fallback_samples == 0 {
            return Err(config_err("ood.fallback_samples", "must be ≥ 1"));
        }
        Ok(())
    }

    /// Checks that referenced files exist and agree with the architecture.
    pub fn check_paths(&self) -> Result<()> {
        if let Some(dir) = &self.data.cifar_dir {
            if !dir.is_dir() {
                return Err(config_err(
                    "data.cifar_dir",
                    format!("{} is not a directory", dir.display()),
                ));
            }
            for f in CIFAR_TRAIN_FILES.iter().chain([&CIFAR_TEST_FILE]) {
                if !dir.join(f).is_file() {
                    return Err(config_err(
                        "data.cifar_dir",
                        format!("missing {f} in {}", dir.display()),
                    ));
                }
            }
        }
        for (i, p) in self.data.container_paths.iter().enumerate() {
            let key = format!("data.container_paths[{i}]");
            let h = read_container_header(p).map_err(|e| config_err(&key, e))?;
            let dim = h.channels * h.height * h.width;
            if dim != self.arch.input_dim {
                return Err(config_err(
                    key,
                    format!(
                        "samples have {dim} values but arch.input_dim is {}",
                        self.arch.input_dim
                    ),
                ));
            }
            let len = std::fs::metadata(p).map_err(|e| Error::io(p, e))?.len() as usize;
            if len != h.file_len() {
                return Err(config_err(
                    key,
                    format!("header declares {} bytes, file has {len}", h.file_len()),
                ));
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.check_values()?;
        self.check_paths()
    }
}

/// Reads, parses and fully validates a config file.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let cfg = ExperimentConfig::from_json(&text)?;
    cfg.check_paths()?;
    Ok(cfg)
}

pub fn write_config(cfg: &ExperimentConfig, path: &Path) -> Result<()> {
    std::fs::write(path, cfg.to_json()).map_err(|e| Error::io(path, e))
}
