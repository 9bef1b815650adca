//! Causal explanation models for black-box predictors.

pub mod blackbox;
pub mod config;
pub mod data;
pub mod datasets;
pub mod error;
pub mod evaluation;
pub mod explainer;
pub mod loss;
pub mod masking;
pub mod models;
pub mod nn;
pub mod runner;
pub mod targets;
pub mod uncertainty;

pub use data::{AttributionVector, FeatureMatrix, PredictionMatrix, TargetMatrix};
pub use error::{Error, Result};
