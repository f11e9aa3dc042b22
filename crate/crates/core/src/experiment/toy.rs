//! Two-input binary toy model and confidence maps over `[−1, 1]²`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{pretrain_noise, LogRow, Phase, PhaseConfig, TrainLog};
use crate::error::{Error, Result};
use crate::metrics::{class_bias, predictions_from_probs, Prediction};
use crate::nn::{build_model, ArchSpec, InitSpec, Model};
use crate::optim::OptimState;
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyConfig {
    pub hidden_width: usize,
    pub noise: PhaseConfig,
    /// Grid points per axis.
    pub resolution: usize,
    pub num_bins: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            hidden_width: 10,
            noise: PhaseConfig::noise_default(),
            resolution: 201,
            num_bins: 10,
        }
    }
}

impl ToyConfig {
    pub fn arch(&self) -> ArchSpec {
        ArchSpec {
            hidden_width: self.hidden_width,
            ..ArchSpec::toy()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.arch().validate()?;
        self.noise.validate()?;
        if self.noise.phase != Phase::NoisePretrain {
            return Err(Error::InvalidArgument(
                "toy noise phase must be noise-pretrain".into(),
            ));
        }
        if self.resolution < 2 {
            return Err(Error::InvalidArgument("resolution must be ≥ 2".into()));
        }
        Ok(())
    }
}

/// Confidence on an `R×R` grid. Row `r` holds `x₂ = −1 + 2r/(R−1)`, column
/// `c` holds `x₁ = −1 + 2c/(R−1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceMap {
    pub resolution: usize,
    /// Row-major confidences.
    pub values: Vec<f64>,
    pub predictions: Vec<Prediction>,
}

/// Grid coordinate `i` of `R`.
pub fn grid_coordinate(i: usize, resolution: usize) -> f64 {
    -1.0 + 2.0 * i as f64 / (resolution - 1) as f64
}

/// Grid inputs in map order: `(x₁, x₂)` per row.
pub fn grid_inputs(resolution: usize) -> Tensor {
    let mut data = Vec::with_capacity(2 * resolution * resolution);
    for r in 0..resolution {
        for c in 0..resolution {
            data.push(grid_coordinate(c, resolution));
            data.push(grid_coordinate(r, resolution));
        }
    }
    Tensor::from_parts(vec![resolution * resolution, 2], data)
}

pub fn confidence_map(model: &Model, resolution: usize) -> Result<ConfidenceMap> {
    if model.arch().input_dim != 2 {
        return Err(Error::InvalidArgument(format!(
            "confidence maps need a 2-input model, got input_dim {}",
            model.arch().input_dim
        )));
    }
    if resolution < 2 {
        return Err(Error::InvalidArgument("resolution must be ≥ 2".into()));
    }
    let probs = model.predict_proba(&grid_inputs(resolution))?;
    let predictions = predictions_from_probs(&probs, None)?;
    Ok(ConfidenceMap {
        resolution,
        values: predictions.iter().map(|p| p.confidence).collect(),
        predictions,
    })
}

impl ConfidenceMap {
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.resolution + col]
    }

    /// `R` lines of `R` comma-separated values.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for row in self.values.chunks(self.resolution) {
            let line: Vec<String> = row.iter().map(f64::to_string).collect();
            writeln!(s, "{}", line.join(",")).unwrap();
        }
        s
    }

    pub fn sidecar(&self) -> serde_json::Value {
        serde_json::json!({ "resolution": self.resolution, "range": [-1.0, 1.0] })
    }

    pub fn summary(&self, num_classes: usize) -> Result<MapSummary> {
        let n = self.values.len() as f64;
        let mean = self.values.iter().sum::<f64>() / n;
        let var = self.values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Ok(MapSummary {
            mean_confidence: mean,
            confidence_std: var.sqrt(),
            min_confidence: self.values.iter().copied().fold(f64::INFINITY, f64::min),
            max_confidence: self
                .values
                .iter()
                .copied()
                .fold(f64::NEG_INFINITY, f64::max),
            class_bias: class_bias(&self.predictions, num_classes)?.bias,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapSummary {
    pub mean_confidence: f64,
    pub confidence_std: f64,
    pub min_confidence: f64,
    pub max_confidence: f64,
    pub class_bias: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyReport {
    pub untrained: MapSummary,
    pub pretrained: MapSummary,
    /// Held-out noise loss after pretraining.
    pub final_noise_loss: f64,
    pub noise_epochs: usize,
}

/// Maps before and after noise pretraining, plus the log of the noise phase.
#[derive(Debug, Clone)]
pub struct ToyRun {
    pub report: ToyReport,
    pub untrained_map: ConfidenceMap,
    pub pretrained_map: ConfidenceMap,
    pub model: Model,
    pub log: TrainLog,
}

/// Builds the toy model from the `init` child of `rng`, maps it, pretrains it
/// on 2-D Gaussian noise with random binary labels and maps it again.
pub fn run_toy(cfg: &ToyConfig, rng: &RngStream) -> Result<ToyRun> {
    cfg.validate()?;
    let arch = cfg.arch();
    let mut model = build_model(arch, InitSpec::default(), false, &mut rng.child("init"))?;
    let untrained_map = confidence_map(&model, cfg.resolution)?;
    let mut log = TrainLog::default();
    pretrain_noise(
        &mut model,
        &mut OptimState::new(),
        &cfg.noise,
        &[],
        cfg.num_bins,
        &rng.child("noise"),
        &mut log,
    )?;
    let pretrained_map = confidence_map(&model, cfg.resolution)?;
    let last: &LogRow = log
        .last(Phase::NoisePretrain, "noise")
        .expect("epoch 0 is always probed");
    Ok(ToyRun {
        report: ToyReport {
            untrained: untrained_map.summary(arch.num_classes)?,
            pretrained: pretrained_map.summary(arch.num_classes)?,
            final_noise_loss: last.train_loss,
            noise_epochs: last.epoch,
        },
        untrained_map,
        pretrained_map,
        model,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::OutputKind;

    #[test]
    fn three_by_three_grid() {
        let g = grid_inputs(3);
        assert_eq!(g.shape(), &[9, 2]);
        let pts: Vec<(f64, f64)> = g.data().chunks(2).map(|p| (p[0], p[1])).collect();
        assert_eq!(pts[0], (-1.0, -1.0));
        assert_eq!(pts[1], (0.0, -1.0));
        assert_eq!(pts[4], (0.0, 0.0));
        assert_eq!(pts[8], (1.0, 1.0));
    }

    #[test]
    fn map_bounds_and_determinism() {
        let model = build_model(
            ArchSpec::toy(),
            InitSpec::default(),
            false,
            &mut RngStream::new(3),
        )
        .unwrap();
        let a = confidence_map(&model, 11).unwrap();
        let b = confidence_map(&model, 11).unwrap();
        assert_eq!(a, b);
        assert!(a
            .values
            .iter()
            .all(|&v| (0.5 - 1e-9..=1.0 + 1e-9).contains(&v)));
        assert_eq!(a.to_csv().lines().count(), 11);
        assert_eq!(a.to_csv().lines().next().unwrap().split(',').count(), 11);
        assert_eq!(a.sidecar()["resolution"], 11);
    }

    #[test]
    fn constant_model_gives_constant_map() {
        let mut model = build_model(
            ArchSpec::toy(),
            InitSpec::default(),
            false,
            &mut RngStream::new(3),
        )
        .unwrap();
        model
            .head
            .weight
            .data_mut()
            .iter_mut()
            .for_each(|w| *w = 0.0);
        model.head.bias.data_mut().copy_from_slice(&[0.3, -0.2]);
        let m = confidence_map(&model, 5).unwrap();
        assert!(m.values.iter().all(|&v| v == m.values[0]));
        let s = m.summary(2).unwrap();
        assert!(s.confidence_std < 1e-12);
        assert!((s.class_bias - 0.5).abs() < 1e-15);
    }

    #[test]
    fn wrong_input_dim_rejected() {
        let arch = ArchSpec {
            input_dim: 3,
            hidden_width: 4,
            depth: 1,
            num_classes: 2,
            output: OutputKind::Softmax,
        };
        let model = build_model(arch, InitSpec::default(), false, &mut RngStream::new(1)).unwrap();
        assert!(matches!(
            confidence_map(&model, 5),
            Err(Error::InvalidArgument(_))
        ));
        let toy = build_model(
            ArchSpec::toy(),
            InitSpec::default(),
            false,
            &mut RngStream::new(1),
        )
        .unwrap();
        assert!(confidence_map(&toy, 1).is_err());
    }
}
