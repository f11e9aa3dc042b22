use serde::{Deserialize, Serialize};

use super::forward::{ForwardTrace, Mode};
use super::Model;
use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

/// How the error signal travels from a layer to the one below it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LearningRule {
    /// Error propagated through `Wᵀ`.
    #[default]
    Backprop,
    /// Error propagated through a fixed random matrix `B`.
    FeedbackAlignment,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradients {
    pub weight: Tensor,
    pub bias: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
}

/// Gradients of the mean loss, shaped like the model's trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub blocks: Vec<LayerGradients>,
    pub head_weight: Tensor,
    pub head_bias: Tensor,
}

impl Gradients {
    /// Slices in the same canonical order as [`Model::params_mut`].
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(4 * self.blocks.len() + 2);
        for b in &self.blocks {
            out.push(b.weight.data());
            out.push(b.bias.data());
            out.push(b.gamma.data());
            out.push(b.beta.data());
        }
        out.push(self.head_weight.data());
        out.push(self.head_bias.data());
        out
    }

    pub fn flat(&self) -> Vec<f64> {
        self.slices().concat()
    }

    pub fn is_finite(&self) -> bool {
        self.slices()
            .iter()
            .all(|s| s.iter().all(|v| v.is_finite()))
    }
}

fn column_sums(data: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for row in data.chunks(cols) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

impl Model {
    /// Exact gradient of the mean loss with respect to every trainable parameter.
    pub fn backprop(&self, trace: &ForwardTrace, targets: &Tensor) -> Result<Gradients> {
        self.backward(trace, targets, LearningRule::Backprop)
    }

    /// Like [`Model::backprop`], except the error sent to the layer below
    /// goes through the fixed feedback matrix instead of `Wᵀ`.
    pub fn feedback_alignment_backward(
        &self,
        trace: &ForwardTrace,
        targets: &Tensor,
    ) -> Result<Gradients> {
        self.backward(trace, targets, LearningRule::FeedbackAlignment)
    }

    pub fn backward(
        &self,
        trace: &ForwardTrace,
        targets: &Tensor,
        rule: LearningRule,
    ) -> Result<Gradients> {
        if trace.mode != Mode::Train {
            return Err(Error::InvalidState(
                "backward needs a train-mode trace".into(),
            ));
        }
        if trace.generation != self.generation {
            return Err(Error::StaleTrace {
                model: self.generation,
                trace: trace.generation,
            });
        }
        if targets.shape() != trace.outputs.shape() {
            return Err(Error::Shape(format!(
                "targets {:?} do not match outputs {:?}",
                targets.shape(),
                trace.outputs.shape()
            )));
        }
        let feedback = match rule {
            LearningRule::Backprop => None,
            LearningRule::FeedbackAlignment => Some(self.feedback.as_ref().ok_or_else(|| {
                Error::InvalidState("model was built without feedback matrices".into())
            })?),
        };

        let n = trace.batch_size();
        let k = self.arch.num_classes;
        let inv_n = 1.0 / n as f64;

        // Softmax + CE and sigmoid + summed BCE share dL/dlogits = (p − t) / n.
        let delta: Vec<f64> = trace
            .outputs
            .data()
            .iter()
            .zip(targets.data())
            .map(|(p, t)| (p - t) * inv_n)
            .collect();

        let top_input = trace.blocks.last().map_or(&trace.input, |c| &c.output);
        let hidden = top_input.cols();
        let mut head_weight = vec![0.0; k * hidden];
        gemm(
            k,
            n,
            hidden,
            &delta,
            true,
            top_input.data(),
            false,
            &mut head_weight,
            false,
        );
        let head_bias = column_sums(&delta, k);

        let mut d_out = vec![0.0; n * hidden];
        match feedback {
            None => gemm(
                n,
                k,
                hidden,
                &delta,
                false,
                self.head.weight.data(),
                false,
                &mut d_out,
                false,
            ),
            Some(fb) => gemm(
                n,
                k,
                hidden,
                &delta,
                false,
                fb.head.data(),
                true,
                &mut d_out,
                false,
            ),
        }

        let mut blocks = Vec::with_capacity(self.blocks.len());
        for (i, (block, cache)) in self.blocks.iter().zip(&trace.blocks).enumerate().rev() {
            let width = block.gamma.len();
            let gamma = block.gamma.data();
            let xhat = cache.normalized.data();
            let out = cache.output.data();

            // ReLU gate, then batchnorm affine.
            let mut dxhat = d_out;
            let mut d_gamma = vec![0.0; width];
            let mut d_beta = vec![0.0; width];
            for ((dx_row, xh_row), o_row) in dxhat
                .chunks_mut(width)
                .zip(xhat.chunks(width))
                .zip(out.chunks(width))
            {
                for j in 0..width {
                    let dy = if o_row[j] > 0.0 { dx_row[j] } else { 0.0 };
                    d_gamma[j] += dy * xh_row[j];
                    d_beta[j] += dy;
                    dx_row[j] = dy * gamma[j];
                }
            }

            // Through the batch statistics.
            let sum_dxhat = column_sums(&dxhat, width);
            let mut sum_dxhat_xhat = vec![0.0; width];
            for (dx_row, xh_row) in dxhat.chunks(width).zip(xhat.chunks(width)) {
                for j in 0..width {
                    sum_dxhat_xhat[j] += dx_row[j] * xh_row[j];
                }
            }
            let mut dz = dxhat;
            for (dz_row, xh_row) in dz.chunks_mut(width).zip(xhat.chunks(width)) {
                for j in 0..width {
                    dz_row[j] = cache.inv_std[j]
                        * (dz_row[j]
                            - inv_n * sum_dxhat[j]
                            - inv_n * xh_row[j] * sum_dxhat_xhat[j]);
                }
            }

            let x = if i == 0 {
                &trace.input
            } else {
                &trace.blocks[i - 1].output
            };
            let fan_in = x.cols();
            let mut d_weight = vec![0.0; width * fan_in];
            gemm(
                width,
                n,
                fan_in,
                &dz,
                true,
                x.data(),
                false,
                &mut d_weight,
                false,
            );
            let d_bias = column_sums(&dz, width);

            d_out = if i > 0 {
                let mut d_in = vec![0.0; n * fan_in];
                match feedback {
                    None => gemm(
                        n,
                        width,
                        fan_in,
                        &dz,
                        false,
                        block.linear.weight.data(),
                        false,
                        &mut d_in,
                        false,
                    ),
                    Some(fb) => gemm(
                        n,
                        width,
                        fan_in,
                        &dz,
                        false,
                        fb.blocks[i - 1].data(),
                        true,
                        &mut d_in,
                        false,
                    ),
                }
                d_in
            } else {
                Vec::new()
            };

            blocks.push(LayerGradients {
                weight: Tensor::from_parts(vec![width, fan_in], d_weight),
                bias: Tensor::from_parts(vec![width], d_bias),
                gamma: Tensor::from_parts(vec![width], d_gamma),
                beta: Tensor::from_parts(vec![width], d_beta),
            });
        }
        blocks.reverse();

        Ok(Gradients {
            blocks,
            head_weight: Tensor::from_parts(vec![k, hidden], head_weight),
            head_bias: Tensor::from_parts(vec![k], head_bias),
        })
    }

    /// Mean training loss of a trace against `targets`, using the loss that
    /// matches the readout.
    pub fn loss(&self, trace: &ForwardTrace, targets: &Tensor) -> Result<f64> {
        match self.arch.output {
            super::OutputKind::Softmax => super::cross_entropy(&trace.outputs, targets),
            super::OutputKind::Sigmoid => super::bce_loss(&trace.outputs, targets),
        }
    }
}
