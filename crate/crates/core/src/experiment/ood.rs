//! Out-of-distribution detection by thresholding confidence.

use serde::{Deserialize, Serialize};

use super::EvalSet;
use crate::data::{gaussian_image_dataset, normalize, NormStats};
use crate::error::{Error, Result};
use crate::metrics::{predictions_from_probs, roc_auroc, RocCurve};
use crate::nn::Model;
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodReport {
    pub id_name: String,
    pub ood_name: String,
    pub id_mean_confidence: f64,
    pub ood_mean_confidence: f64,
    pub auroc: f64,
    pub roc: RocCurve,
    #[serde(skip)]
    pub id_confidences: Vec<f64>,
    #[serde(skip)]
    pub ood_confidences: Vec<f64>,
}

fn confidences(model: &Model, inputs: &Tensor) -> Result<Vec<f64>> {
    let probs = model.predict_proba(inputs)?;
    Ok(predictions_from_probs(&probs, None)?
        .iter()
        .map(|p| p.confidence)
        .collect())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Confidence of `model` on in-distribution test inputs and on OOD inputs
/// (already standardized with the in-distribution statistics), with ID as
/// the positive class.
pub fn run_ood(
    model: &Model,
    id_test: &EvalSet,
    ood_name: &str,
    ood: &Tensor,
) -> Result<OodReport> {
    let d = model.arch().input_dim;
    for (name, x) in [(id_test.name.as_str(), &id_test.inputs), (ood_name, ood)] {
        if x.shape().len() != 2 || x.cols() != d {
            return Err(Error::InvalidArgument(format!(
                "`{name}` inputs of shape {:?} do not match input_dim {d}",
                x.shape()
            )));
        }
    }
    let id_confidences = confidences(model, &id_test.inputs)?;
    let ood_confidences = confidences(model, ood)?;
    let roc = roc_auroc(&id_confidences, &ood_confidences)?;
    Ok(OodReport {
        id_name: id_test.name.clone(),
        ood_name: ood_name.to_string(),
        id_mean_confidence: mean(&id_confidences),
        ood_mean_confidence: mean(&ood_confidences),
        auroc: roc.auroc,
        roc,
        id_confidences,
        ood_confidences,
    })
}

/// Fallback OOD set: `n` Gaussian-noise images of shape `dims`, quantized to
/// u8 and standardized with the in-distribution statistics.
pub fn gaussian_ood_set(
    n: usize,
    dims: (usize, usize, usize),
    stats: &NormStats,
    rng: &mut RngStream,
) -> Result<Tensor> {
    let ds = gaussian_image_dataset("gaussian-noise", n, dims, 1, rng)?;
    normalize(&ds, stats)
}
