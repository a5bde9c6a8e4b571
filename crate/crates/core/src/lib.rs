//! Counterfactual voting adjustment for helpfulness votes.
//!
//! Votes on Q&A answers are distorted by where an answer is displayed and by
//! the votes it already has. This crate reconstructs each vote's decision
//! context from a question's history, fits a logistic vote model that
//! separates answer quality from the position and herding effects, and then
//! averages the fitted vote probability over the community's population of
//! contexts to get a debiased quality score.
//!
//! Module map:
//!
//! * [`trajectory`]: questions, answers, vote streams and context replay.
//! * [`ingest`]: StackExchange dump XML and quality-label CSV readers.
//! * [`model`]: vote probability, regularized likelihood and its gradient.
//! * [`trainer`]: deterministic L-BFGS fitting and prefix refits.
//! * [`counterfactual`]: debiased quality, what-if curves, power-law fit.
//! * [`bias`]: position sensitivity, herding degree, community map.
//! * [`simulator`]: semi-synthetic generator and the toy scenarios.
//! * [`evaluation`]: rankers, z-scores, Kendall's tau, bootstrap, win rates.
//! * [`config`]: plain-text `key=value` config files.
//!
//! The estimator is only causal under an ignorability assumption: given the
//! answer's own pre-read features (here, its relative length), the potential
//! vote is independent of the vote history and display rank it was shown
//! with. Nothing in the code checks this; it is a modelling assumption.

pub mod bias;
pub mod config;
pub mod counterfactual;
pub mod error;
pub mod evaluation;
pub mod ingest;
pub mod model;
pub mod simulator;
pub mod trainer;
pub mod trajectory;

pub use error::{CvaError, Result};
