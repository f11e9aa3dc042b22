use serde::{Deserialize, Serialize};

use super::{Model, OutputKind, BN_EPS, BN_MOMENTUM};
use crate::error::{Error, Result};
use crate::tensor::{gemm, softmax_rows_in_place, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Batchnorm uses batch statistics.
    Train,
    /// Batchnorm uses running statistics.
    Eval,
}

/// Per-block activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct BlockCache {
    /// `z = x·Wᵀ + b`
    pub pre_activation: Tensor,
    /// `(z − μ) / sqrt(σ² + ε)`
    pub normalized: Tensor,
    /// Statistics used for normalization (batch or running, depending on mode).
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub inv_std: Vec<f64>,
    /// Post-ReLU output, the input of the next layer.
    pub output: Tensor,
}

#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub mode: Mode,
    pub generation: u64,
    pub input: Tensor,
    pub blocks: Vec<BlockCache>,
    pub logits: Tensor,
    /// Softmax probabilities, or per-output sigmoids for the toy readout.
    pub outputs: Tensor,
}

impl ForwardTrace {
    pub fn batch_size(&self) -> usize {
        self.input.rows()
    }
}

fn affine(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Tensor {
    let (n, fan_in) = (x.rows(), x.cols());
    let fan_out = weight.rows();
    let mut z = Vec::with_capacity(n * fan_out);
    for _ in 0..n {
        z.extend_from_slice(bias.data());
    }
    gemm(
        n,
        fan_in,
        fan_out,
        x.data(),
        false,
        weight.data(),
        true,
        &mut z,
        true,
    );
    Tensor::from_parts(vec![n, fan_out], z)
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

impl Model {
    fn check_batch(&self, batch: &Tensor, mode: Mode) -> Result<()> {
        if batch.shape().len() != 2 || batch.cols() != self.arch.input_dim {
            return Err(Error::Shape(format!(
                "batch shape {:?} does not match input_dim {}",
                batch.shape(),
                self.arch.input_dim
            )));
        }
        if batch.rows() == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        if mode == Mode::Train && batch.rows() < 2 {
            return Err(Error::InvalidArgument(
                "train-mode batchnorm needs at least 2 samples".into(),
            ));
        }
        if !batch.is_finite() {
            return Err(Error::InvalidArgument(
                "batch contains non-finite values".into(),
            ));
        }
        Ok(())
    }

    /// Forward pass. In train mode the running statistics are updated from
    /// the batch statistics after the pass.
    pub fn forward(&mut self, batch: &Tensor, mode: Mode) -> Result<ForwardTrace> {
        let trace = self.forward_frozen(batch, mode)?;
        if mode == Mode::Train {
            let n = batch.rows() as f64;
            let unbias = n / (n - 1.0);
            for (block, cache) in self.blocks.iter_mut().zip(&trace.blocks) {
                let rm = block.running_mean.data_mut();
                for (r, &m) in rm.iter_mut().zip(&cache.mean) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
                }
                let rv = block.running_var.data_mut();
                for (r, &v) in rv.iter_mut().zip(&cache.var) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * unbias;
                }
            }
        }
        Ok(trace)
    }

    /// Eval-mode forward pass; never mutates the model.
    pub fn forward_eval(&self, batch: &Tensor) -> Result<ForwardTrace> {
        self.forward_frozen(batch, Mode::Eval)
    }

    /// Forward pass that leaves running statistics untouched, even in train mode.
    pub fn forward_frozen(&self, batch: &Tensor, mode: Mode) -> Result<ForwardTrace> {
        self.check_batch(batch, mode)?;
        let n = batch.rows();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let x = caches.last().map_or(batch, |c: &BlockCache| &c.output);
            let z = affine(x, &block.linear.weight, &block.linear.bias);
            let width = z.cols();
            let (mean, var) = match mode {
                Mode::Train => {
                    let mut mean = vec![0.0; width];
                    for row in z.data().chunks(width) {
                        for (m, v) in mean.iter_mut().zip(row) {
                            *m += v;
                        }
                    }
                    mean.iter_mut().for_each(|m| *m /= n as f64);
                    let mut var = vec![0.0; width];
                    for row in z.data().chunks(width) {
                        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                            *s += (v - m) * (v - m);
                        }
                    }
                    var.iter_mut().for_each(|s| *s /= n as f64);
                    (mean, var)
                }
                Mode::Eval => (
                    block.running_mean.data().to_vec(),
                    block.running_var.data().to_vec(),
                ),
            };
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
            let mut normalized = z.data().to_vec();
            let mut output = vec![0.0; normalized.len()];
            let (gamma, beta) = (block.gamma.data(), block.beta.data());
            for (xh_row, out_row) in normalized.chunks_mut(width).zip(output.chunks_mut(width)) {
                for j in 0..width {
                    let xh = (xh_row[j] - mean[j]) * inv_std[j];
                    xh_row[j] = xh;
                    out_row[j] = (gamma[j] * xh + beta[j]).max(0.0);
                }
            }
            caches.push(BlockCache {
                pre_activation: z,
                normalized: Tensor::from_parts(vec![n, width], normalized),
                mean,
                var,
                inv_std,
                output: Tensor::from_parts(vec![n, width], output),
            });
        }
        let last = caches.last().map_or(batch, |c| &c.output);
        let logits = affine(last, &self.head.weight, &self.head.bias);
        let mut outputs = logits.data().to_vec();
        match self.arch.output {
            OutputKind::Softmax => softmax_rows_in_place(&mut outputs, self.arch.num_classes),
            OutputKind::Sigmoid => outputs.iter_mut().for_each(|v| *v = sigmoid(*v)),
        }
        Ok(ForwardTrace {
            mode,
            generation: self.generation,
            input: batch.clone(),
            blocks: caches,
            outputs: Tensor::from_parts(logits.shape().to_vec(), outputs),
            logits,
        })
    }

    /// Eval-mode class distribution per sample: softmax rows, or sigmoid
    /// outputs renormalized to sum to one. Processed in chunks to bound memory.
    pub fn predict_proba(&self, inputs: &Tensor) -> Result<Tensor> {
        const CHUNK: usize = 1024;
        if inputs.shape().len() != 2 || inputs.cols() != self.arch.input_dim {
            return Err(Error::Shape(format!(
                "inputs shape {:?} does not match input_dim {}",
                inputs.shape(),
                self.arch.input_dim
            )));
        }
        let n = inputs.rows();
        let k = self.arch.num_classes;
        let mut out = Vec::with_capacity(n * k);
        let mut start = 0;
        while start < n {
            let end = (start + CHUNK).min(n);
            let idx: Vec<usize> = (start..end).collect();
            let trace = self.forward_eval(&inputs.select_rows(&idx))?;
            out.extend_from_slice(trace.outputs.data());
            start = end;
        }
        if self.arch.output == OutputKind::Sigmoid {
            for row in out.chunks_mut(k) {
                let s: f64 = row.iter().sum();
                row.iter_mut().for_each(|v| *v /= s);
            }
        }
        Ok(Tensor::from_parts(vec![n, k], out))
    }
}
