//! Decomposed-representation counterfactual regression.
//!
//! Estimates individual treatment effects from observational data by learning
//! three representations of the covariates — instrument-like factors that
//! drive only treatment, confounders that drive both treatment and outcome,
//! and adjustment factors that drive only the outcome — together with
//! per-sample balancing weights that remove the confounder's association with
//! treatment. Potential outcomes are predicted by per-arm regression heads on
//! the confounder and adjustment representations.
//!
//! The crate contains a small reverse-mode differentiation engine ([`ad`]),
//! the factor model ([`model`]), the decomposition and balancing objectives
//! ([`losses`]), synthetic benchmark generation and dataset handling
//! ([`data`]), the alternating training loop with hyperparameter search
//! ([`trainer`]) and treatment-effect error metrics ([`metrics`]).

pub mod ad;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod trainer;

pub use ad::{AdamState, Gradients, Tape, Tensor};
pub use data::{Dataset, OutcomeType, SplitIndices, SplitSpec, SyntheticConfig, VarRole};
pub use error::{AdError, Error, Result};
pub use losses::{Bandwidth, Coefficients, KernelSpec, LossReport};
pub use metrics::{EvalReport, Scope};
pub use model::{ContributionProfile, DeRCFRModel, LayerCount, ModelConfig, NetworkSpec};
pub use trainer::{Ablation, Hyperparams, TrainConfig, TrainResult};
