//! Curvature-regularized training lab.
//!
//! A small reverse-mode autodiff engine with double backward, desk-scale
//! models, four update rules (SGD, first-order perturbed gradient, gradient-l1
//! penalty and HERO), post-training quantization, and numerical checks of the
//! perturbation lower bounds that motivate the curvature penalty.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod experiment;
pub mod models;
pub mod objective;
pub mod params;
pub mod quantizer;
pub mod robustness;
pub mod seeds;
pub mod tensor;
pub mod trainers;

pub use autodiff::{BackwardKind, Graph, PassCounts, Var};
pub use data::{LabeledBatch, LabeledDataset};
pub use error::{Error, Result};
pub use models::ModelSpec;
pub use objective::{hvp_fd, Objective};
pub use params::{GradientSet, ParamKind, ParamSet};
pub use tensor::Tensor;
pub use trainers::{Rule, TrainerConfig};
