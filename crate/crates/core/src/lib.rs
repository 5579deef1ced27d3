//! Concept-based knowledge distillation for black-box binary classifiers.
//!
//! A surrogate network is trained to do two things at once: predict a fixed
//! vocabulary of human-level domain concepts, and reproduce the score of an
//! opaque classifier as an attention-weighted sum of those concept
//! predictions. Every prediction therefore comes with two explanations: which
//! concepts are present in the instance, and how much each one contributes to
//! the mimicked score.
//!
//! Module map:
//!
//! - [`nn`]: dense feed-forward engine with exact backpropagation.
//! - [`model`]: the concept model (shared trunk + per-concept heads) and the
//!   attention-based distillation branch.
//! - [`training`]: the weighted multi-task loss and the training regimes.
//! - [`metrics`]: fidelity, ROC AUC, recall at a fixed FPR, Pareto frontier.
//! - [`teachers`]: random-forest concept teachers producing soft labels.
//! - [`blackbox`]: adapters for the classifier being explained.
//! - [`data`]: datasets, CSV I/O, splits and the synthetic generator.
//! - [`hpo`]: random hyperparameter search and the lambda trade-off sweep.
//! - [`pipeline`]: the whole flow from synthetic data to evaluated surrogates.

pub mod blackbox;
pub mod data;
pub mod error;
pub mod hpo;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod teachers;
pub mod training;

pub use error::{Error, Result};
