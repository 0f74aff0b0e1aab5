//! Average treatment effect estimation by fusing a randomized experiment
//! with a biased observational dataset.
//!
//! The crate provides cross-fit AIP(S)W baselines, efficient one-step
//! estimators under two restrictions on the outcome mean function (linear
//! confounding bias, outcome-mediated selection bias), a control-variate
//! comparator, synthetic scenarios with analytic oracle nuisances, and a
//! deterministic Monte Carlo benchmark harness.

pub mod cli;
pub mod dataset;
pub mod estimators;
pub mod influence;
mod linalg;
pub mod nuisance;
pub mod simulation;

pub use dataset::{Dataset, FoldAssignment, FusedObservation, OutcomeKind};
pub use estimators::{EstimateReport, Method};
pub use influence::EstimandKind;
pub use nuisance::{CrossFitBundle, NuisanceAt, NuisanceModel, PsiSpec};
pub use simulation::{BenchmarkConfig, BenchmarkResult, ScenarioKind, ScenarioSpec};
