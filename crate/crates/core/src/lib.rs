//! Unsupervised structural-counterfactual generation under domain shift.
//!
//! Separate neural causal mechanisms are fitted to unpaired source and
//! target observational data, the exogenous causes are split into a shared
//! effect-intrinsic context and domain-intrinsic noise, a pushforward
//! posterior network performs abduction, and counterfactuals are sampled
//! through the target mechanism. An analytic, exactly invertible pair of
//! SCMs provides the ground truth for evaluation with an aggregated MMD
//! two-sample test.
//!
//! The numeric core ([`tensor`], [`autodiff`], [`nn`], [`optim`],
//! [`kernel`]) is generic over [`Scalar`]; the modelling layers run in
//! `f64` through the aliases below.

pub mod autodiff;
pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod kernel;
pub mod ncm;
pub mod nn;
pub mod optim;
pub mod posterior;
pub mod rng;
pub mod scm;
pub mod selftest;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor = tensor::Tensor<f64>;
pub type Tape = autodiff::Tape<f64>;
pub type Mlp = nn::Mlp<f64>;
pub type Optimizer = optim::Optimizer<f64>;
