use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Probabilities are clamped to `[PROB_FLOOR, 1 − PROB_FLOOR]` before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

fn check_pair(a: &Tensor, b: &Tensor, what: &str) -> Result<(usize, usize)> {
    if a.shape().len() != 2 || a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{what}: outputs {:?} and targets {:?} must be equal-shaped matrices",
            a.shape(),
            b.shape()
        )));
    }
    if a.rows() == 0 {
        return Err(Error::InvalidArgument(format!("{what}: empty batch")));
    }
    Ok((a.rows(), a.cols()))
}

/// Mean over samples of `−log p(target)`; `targets` is one-hot (or any
/// distribution, in which case this is the mean cross-entropy).
pub fn cross_entropy(probs: &Tensor, targets: &Tensor) -> Result<f64> {
    let (n, _) = check_pair(probs, targets, "cross_entropy")?;
    let total: f64 = probs
        .data()
        .iter()
        .zip(targets.data())
        .filter(|(_, &t)| t != 0.0)
        .map(|(&p, &t)| -t * p.max(PROB_FLOOR).ln())
        .sum();
    Ok(total / n as f64)
}

/// Binary cross-entropy summed over output elements, averaged over samples.
pub fn bce_loss(outputs: &Tensor, targets: &Tensor) -> Result<f64> {
    let (n, _) = check_pair(outputs, targets, "bce_loss")?;
    let total: f64 = outputs
        .data()
        .iter()
        .zip(targets.data())
        .map(|(&p, &t)| {
            let p = p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum();
    Ok(total / n as f64)
}
