//! Audio-visual source separation with dynamic gating fusion.
//!
//! The crate is organized bottom-up: a small reverse-mode tensor engine
//! ([`autodiff`]), signal processing ([`dsp`]), a synthetic mix-and-separate
//! data source ([`data`]), the network pieces ([`unet`], [`fusion`],
//! [`transformer`]) tied together in [`model`], and BSS-eval style metrics
//! ([`metrics`]).

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod fusion;
mod kernels;
pub mod masks;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod transformer;
pub mod unet;

pub use autodiff::{finite_diff_check, finite_diff_check_steps, BatchNormMode, Conv2dAttrs, Gradients, Graph, Var};
pub use error::{Error, ErrorCategory, Result};
pub use params::ParamStore;
pub use tensor::Tensor;
