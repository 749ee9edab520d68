//! Self-training for binary content classification with scarce labels.
//!
//! A lightweight probabilistic classifier proposes confident pseudo-labels on
//! unlabeled data, two persona agents (a strict moderator and a lenient user)
//! verify them through a decide/review/decide negotiation, and the classifier
//! is retrained with a positive-negative-unlabeled (PNU) risk that treats
//! labeled, agreed and disagreed items differently. Rounds that do not hold up
//! on the development split are reverted.
//!
//! The numerical core ([`classifier`], [`loss`], [`features`]) is generic over
//! [`Scalar`]; the aliases at the crate root fix it to [`Real`] (`f64`).

pub mod adjudicator;
pub mod classifier;
pub mod config;
pub mod data;
pub mod eval;
pub mod features;
pub mod loss;
pub mod persist;
pub mod pipeline;
pub mod pool;
pub mod scalar;
pub mod synth;

pub use scalar::Scalar;

pub use adjudicator::{Decision, Outcome, Transcript};
pub use config::RunConfig;
pub use data::{Dataset, Label, Sample, Split};
pub use pool::{LabelState, PoolState};

/// Default scalar for the concrete API.
pub type Real = f64;

pub type ClassifierParams = classifier::ClassifierParams<Real>;
pub type FeatureMatrix = features::FeatureMatrix<Real>;
pub type FeatureVector = features::FeatureVector<Real>;
pub type LossConfig = loss::LossConfig<Real>;
pub type LossBreakdown = loss::LossBreakdown<Real>;
pub type Gradient = loss::Gradient<Real>;
pub type TrainOutcome = classifier::TrainOutcome<Real>;
pub type RoundReport = pipeline::RoundReport;
