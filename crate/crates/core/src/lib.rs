//! Bounded-memory Bayesian continual learning for binary neural networks.
//!
//! Each synapse carries a signed Bernoulli posterior in natural-parameter
//! form. The BiMU rule updates it online with a metaplastic step size and a
//! prior relaxation that bounds how much evidence is retained, which keeps
//! probabilities away from 0/1 and preserves epistemic uncertainty for
//! one-pass active querying.

pub mod active;
pub mod binnet;
pub mod metrics;
pub mod numkit;
pub mod posterior;
pub mod runner;
pub mod rules;
pub mod streams;
pub mod uncertainty;

pub use active::{BudgetController, QueryDecision};
pub use binnet::{Activation, ForwardTape, LossGradient, NetworkSpec};
pub use metrics::AccuracyMatrix;
pub use numkit::{DenseMatrix, RngStream};
pub use posterior::BernoulliPosterior;
pub use rules::{BiMUConfig, Method, STEState};
pub use streams::{StreamEvent, TaskSequence};
pub use uncertainty::{PredictionSet, ScoreKind, UncertaintyReport};
pub use runner::{ExperimentConfig, RunRecord, RunSummary};
