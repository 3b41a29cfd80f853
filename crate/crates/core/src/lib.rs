//! Stochastic differentiable quantization at desk scale.
//!
//! A small reverse-mode autodiff engine ([`grad`]) carries the quantizers
//! ([`quant`]), the bitwidth search ([`dbp`], [`phase1`]), post-training
//! with distillation and bin regularization ([`phase2`]) and the hardware
//! cost model ([`cost`]).

// `!(x > 0.0)` style checks are used on purpose so NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod cost;
pub mod data;
pub mod dbp;
pub mod error;
pub mod grad;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod oracles;
pub mod phase1;
pub mod phase2;
pub mod pipeline;
pub mod quant;
pub mod report;
pub mod strategy;
pub mod tensor;
pub mod train;

pub use error::{Result, SdqError};
pub use tensor::Tensor;
