//! Random-noise pretraining and uncertainty calibration for feedforward
//! classifiers.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`] and [`rng`]: dense `f64` arithmetic and deterministic sampling.
//! * [`nn`]: Linear → BatchNorm → ReLU networks with hand-written backprop and
//!   feedback alignment.
//! * [`optim`]: Adam with coupled L2 weight decay.
//! * [`data`]: CIFAR-10 binary and RNC1 container loaders, stratified
//!   subsets, standardization, noise and minibatch streams.
//! * [`metrics`] and [`stats`]: confidence, reliability bins, ECE, class
//!   bias, ROC/AUROC and rank tests.
//! * [`experiment`]: noise pretraining, data training, sweeps, the 2-D toy
//!   model and OOD evaluation.
//! * [`config`] and [`cli`]: the JSON experiment config and the command-line
//!   front end.

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod stats;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::RngStream;
pub use tensor::Tensor;
