//! The black-box model contract.
//!
//! The engine only ever calls `predict` on batches; it never inspects model
//! internals. Every prediction is counted so tests can verify the exact
//! evaluation budget of the masking sweep.

use crate::data::{FeatureMatrix, PredictionMatrix};
use crate::error::{Error, Result};
use std::sync::atomic::{AtomicU64, Ordering};

/// Counts individual sample evaluations across threads.
#[derive(Debug, Default)]
pub struct EvaluationCounter(AtomicU64);

impl EvaluationCounter {
    pub fn new() -> Self {
        Self(AtomicU64::new(0))
    }

    /// Records `n` sample evaluations.
    pub fn add(&self, n: u64) {
        self.0.fetch_add(n, Ordering::Relaxed);
    }

    pub fn get(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.0.store(0, Ordering::Relaxed);
    }
}

/// Any predictive model the engine can explain.
///
/// Implementations must be deterministic: the same batch must produce the
/// same predictions on every call. `predict` must return one row per input
/// row, each of width `output_dim`, and must bump the evaluation counter by
/// the number of input rows.
pub trait BlackBoxModel: Send + Sync {
    /// Short human-readable identifier used in reports.
    fn name(&self) -> &str;

    /// Width of each prediction row.
    fn output_dim(&self) -> usize;

    /// Predicts a batch; rows correspond one-to-one with input rows.
    fn predict(&self, x: &FeatureMatrix) -> Result<PredictionMatrix>;

    /// Total sample evaluations since construction (or the last reset).
    fn evaluations(&self) -> u64;

    /// True when calls must not run concurrently (e.g. a subprocess pipe).
    /// Serial models are driven from a single thread; parallel work then
    /// batches requests instead of fanning out predict calls.
    fn is_serial(&self) -> bool {
        false
    }

    /// Stable identity string recorded in explainer provenance so a saved
    /// explainer can be matched to the model it was trained against.
    fn fingerprint(&self) -> String;
}

/// Validates a prediction batch against the model contract.
pub(crate) fn check_prediction_shape(
    model: &dyn BlackBoxModel,
    x_rows: usize,
    y: &PredictionMatrix,
) -> Result<()> {
    if y.rows() != x_rows {
        return Err(Error::DimensionMismatch {
            expected: x_rows,
            actual: y.rows(),
            context: format!("prediction rows from model '{}'", model.name()),
        });
    }
    if y.cols() != model.output_dim() {
        return Err(Error::DimensionMismatch {
            expected: model.output_dim(),
            actual: y.cols(),
            context: format!("prediction width from model '{}'", model.name()),
        });
    }
    for (i, v) in y.as_slice().iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::Domain(format!(
                "model '{}' produced non-finite prediction {v} at flat index {i}",
                model.name()
            )));
        }
    }
    Ok(())
}
