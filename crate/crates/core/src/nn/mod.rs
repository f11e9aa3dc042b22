//! Feedforward classifier: `depth` blocks of Linear → BatchNorm → ReLU
//! followed by a linear head with a softmax (or per-output sigmoid) readout.

mod backward;
mod checkpoint;
mod forward;
mod loss;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

pub use backward::{Gradients, LayerGradients, LearningRule};
pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use forward::{BlockCache, ForwardTrace, Mode};
pub use loss::{bce_loss, cross_entropy, PROB_FLOOR};

/// Batchnorm variance offset.
pub const BN_EPS: f64 = 1e-5;
/// Weight of the newest batch in the running statistics.
pub const BN_MOMENTUM: f64 = 0.1;

/// Readout nonlinearity, which also fixes the training loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutputKind {
    /// Softmax over classes, trained with cross-entropy.
    Softmax,
    /// Independent sigmoid per output, trained with binary cross-entropy.
    Sigmoid,
}

impl OutputKind {
    fn code(self) -> u32 {
        match self {
            OutputKind::Softmax => 0,
            OutputKind::Sigmoid => 1,
        }
    }

    fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(OutputKind::Softmax),
            1 => Some(OutputKind::Sigmoid),
            _ => None,
        }
    }
}

fn default_output() -> OutputKind {
    OutputKind::Softmax
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    pub input_dim: usize,
    pub hidden_width: usize,
    pub depth: usize,
    pub num_classes: usize,
    #[serde(default = "default_output")]
    pub output: OutputKind,
}

impl ArchSpec {
    /// 32×32×3 inputs, 10 classes, 256-wide hidden blocks.
    pub fn cifar(depth: usize) -> Self {
        Self {
            input_dim: 3072,
            hidden_width: 256,
            depth,
            num_classes: 10,
            output: OutputKind::Softmax,
        }
    }

    /// Two inputs, one hidden block of 10 units, two sigmoid outputs.
    pub fn toy() -> Self {
        Self {
            input_dim: 2,
            hidden_width: 10,
            depth: 1,
            num_classes: 2,
            output: OutputKind::Sigmoid,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 {
            return Err(Error::InvalidArgument("depth must be ≥ 1".into()));
        }
        if self.hidden_width < 1 {
            return Err(Error::InvalidArgument("hidden_width must be ≥ 1".into()));
        }
        if self.input_dim < 1 {
            return Err(Error::InvalidArgument("input_dim must be ≥ 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidArgument("num_classes must be ≥ 2".into()));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of every affine layer, head last.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.depth + 1);
        let mut fan_in = self.input_dim;
        for _ in 0..self.depth {
            dims.push((fan_in, self.hidden_width));
            fan_in = self.hidden_width;
        }
        dims.push((fan_in, self.num_classes));
        dims
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitScheme {
    HeNormal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitSpec {
    pub scheme: InitScheme,
    /// Weight std is `gain / sqrt(fan_in)`.
    pub gain: f64,
}

impl Default for InitSpec {
    fn default() -> Self {
        Self {
            scheme: InitScheme::HeNormal,
            gain: std::f64::consts::SQRT_2,
        }
    }
}

impl InitSpec {
    pub fn std_for(&self, fan_in: usize) -> f64 {
        match self.scheme {
            InitScheme::HeNormal => self.gain / (fan_in as f64).sqrt(),
        }
    }
}

/// Affine map `y = x·Wᵀ + b` with `W` stored `[out×in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    pub fn fan_in(&self) -> usize {
        self.weight.cols()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub linear: Dense,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

/// Fixed random matrices used in place of `Wᵀ` when propagating errors
/// downward under feedback alignment. Each has the shape of the transposed
/// forward weight, `[in×out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Feedback {
    /// One matrix per block except the first (`blocks[j]` pairs with block `j+1`).
    pub blocks: Vec<Tensor>,
    pub head: Tensor,
}

#[derive(Debug, Clone)]
pub struct Model {
    arch: ArchSpec,
    pub blocks: Vec<Block>,
    pub head: Dense,
    feedback: Option<Feedback>,
    generation: u64,
}

impl PartialEq for Model {
    fn eq(&self, other: &Self) -> bool {
        self.arch == other.arch
            && self.blocks == other.blocks
            && self.head == other.head
            && self.feedback == other.feedback
    }
}

/// Trainable parameter view used by the optimizer.
pub struct ParamMut<'a> {
    pub name: String,
    pub values: &'a mut [f64],
    /// Whether L2 weight decay applies (weights only).
    pub decay: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub len: usize,
    pub decay: bool,
}

impl ParamSpec {
    fn new(name: String, len: usize, decay: bool) -> Self {
        Self { name, len, decay }
    }
}

fn he_matrix(rows: usize, cols: usize, std: f64, rng: &mut RngStream) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.normal(0.0, std)).collect();
    Tensor::from_parts(vec![rows, cols], data)
}

/// Builds a freshly initialised model.
///
/// Draw order: block weights in order, head weight, then (if requested) the
/// feedback matrices. Forward weights therefore do not depend on
/// `with_feedback`.
pub fn build_model(
    arch: ArchSpec,
    init: InitSpec,
    with_feedback: bool,
    rng: &mut RngStream,
) -> Result<Model> {
    arch.validate()?;
    if !(init.gain > 0.0) || !init.gain.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "init gain must be > 0, got {}",
            init.gain
        )));
    }
    let dims = arch.layer_dims();
    let mut blocks = Vec::with_capacity(arch.depth);
    for &(fan_in, fan_out) in &dims[..arch.depth] {
        blocks.push(Block {
            linear: Dense {
                weight: he_matrix(fan_out, fan_in, init.std_for(fan_in), rng),
                bias: Tensor::zeros(&[fan_out]),
            },
            gamma: Tensor::filled(&[fan_out], 1.0),
            beta: Tensor::zeros(&[fan_out]),
            running_mean: Tensor::zeros(&[fan_out]),
            running_var: Tensor::filled(&[fan_out], 1.0),
        });
    }
    let (fan_in, fan_out) = dims[arch.depth];
    let head = Dense {
        weight: he_matrix(fan_out, fan_in, init.std_for(fan_in), rng),
        bias: Tensor::zeros(&[fan_out]),
    };
    let feedback = with_feedback.then(|| {
        let blocks = dims[1..arch.depth]
            .iter()
            .map(|&(fi, fo)| he_matrix(fi, fo, init.std_for(fi), rng))
            .collect();
        let (fi, fo) = dims[arch.depth];
        Feedback {
            blocks,
            head: he_matrix(fi, fo, init.std_for(fi), rng),
        }
    });
    Ok(Model {
        arch,
        blocks,
        head,
        feedback,
        generation: 0,
    })
}

impl Model {
    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn feedback(&self) -> Option<&Feedback> {
        self.feedback.as_ref()
    }

    /// Replaces the feedback matrices. Shapes must match `Wᵀ` of each layer.
    pub fn set_feedback(&mut self, feedback: Option<Feedback>) -> Result<()> {
        if let Some(fb) = &feedback {
            if fb.blocks.len() + 1 != self.blocks.len() {
                return Err(Error::Shape(format!(
                    "expected {} block feedback matrices, got {}",
                    self.blocks.len() - 1,
                    fb.blocks.len()
                )));
            }
            let layers = self.blocks[1..]
                .iter()
                .map(|b| &b.linear)
                .chain(std::iter::once(&self.head));
            for (b, layer) in fb
                .blocks
                .iter()
                .chain(std::iter::once(&fb.head))
                .zip(layers)
            {
                if b.shape() != [layer.fan_in(), layer.fan_out()] {
                    return Err(Error::Shape(format!(
                        "feedback matrix {:?} does not match layer Wᵀ [{}, {}]",
                        b.shape(),
                        layer.fan_in(),
                        layer.fan_out()
                    )));
                }
            }
        }
        self.feedback = feedback;
        Ok(())
    }

    /// Monotone counter bumped whenever trainable parameters may change.
    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn parameter_count(&self) -> usize {
        self.blocks
            .iter()
            .map(|b| b.linear.weight.len() + b.linear.bias.len() + b.gamma.len() + b.beta.len())
            .sum::<usize>()
            + self.head.weight.len()
            + self.head.bias.len()
    }

    /// Name, length and decay flag of every trainable parameter, in the
    /// canonical order used by [`Model::params_mut`] and [`Gradients::slices`].
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut out = Vec::with_capacity(4 * self.blocks.len() + 2);
        for (i, b) in self.blocks.iter().enumerate() {
            out.push(ParamSpec::new(
                format!("blocks.{i}.weight"),
                b.linear.weight.len(),
                true,
            ));
            out.push(ParamSpec::new(
                format!("blocks.{i}.bias"),
                b.linear.bias.len(),
                false,
            ));
            out.push(ParamSpec::new(
                format!("blocks.{i}.gamma"),
                b.gamma.len(),
                false,
            ));
            out.push(ParamSpec::new(
                format!("blocks.{i}.beta"),
                b.beta.len(),
                false,
            ));
        }
        out.push(ParamSpec::new(
            "head.weight".into(),
            self.head.weight.len(),
            true,
        ));
        out.push(ParamSpec::new(
            "head.bias".into(),
            self.head.bias.len(),
            false,
        ));
        out
    }

    /// Mutable views of every trainable parameter in canonical order:
    /// per block `weight, bias, gamma, beta`, then `head.weight, head.bias`.
    pub fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        self.generation += 1;
        let mut out = Vec::with_capacity(4 * self.blocks.len() + 2);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push(ParamMut {
                name: format!("blocks.{i}.weight"),
                values: b.linear.weight.data_mut(),
                decay: true,
            });
            out.push(ParamMut {
                name: format!("blocks.{i}.bias"),
                values: b.linear.bias.data_mut(),
                decay: false,
            });
            out.push(ParamMut {
                name: format!("blocks.{i}.gamma"),
                values: b.gamma.data_mut(),
                decay: false,
            });
            out.push(ParamMut {
                name: format!("blocks.{i}.beta"),
                values: b.beta.data_mut(),
                decay: false,
            });
        }
        out.push(ParamMut {
            name: "head.weight".into(),
            values: self.head.weight.data_mut(),
            decay: true,
        });
        out.push(ParamMut {
            name: "head.bias".into(),
            values: self.head.bias.data_mut(),
            decay: false,
        });
        out
    }

    /// Flat copy of the trainable parameters in canonical order.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.parameter_count());
        for b in &self.blocks {
            out.extend_from_slice(b.linear.weight.data());
            out.extend_from_slice(b.linear.bias.data());
            out.extend_from_slice(b.gamma.data());
            out.extend_from_slice(b.beta.data());
        }
        out.extend_from_slice(self.head.weight.data());
        out.extend_from_slice(self.head.bias.data());
        out
    }

    /// SHA-256 over every stored value (parameters, running statistics and
    /// feedback), used to prove that evaluation left a model untouched.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut bytes = Vec::new();
        checkpoint::encode(self, &mut bytes);
        hex::encode(Sha256::digest(&bytes))
    }
}
