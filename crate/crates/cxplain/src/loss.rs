//! Per-sample loss functions used to score target-model predictions.
//!
//! Probabilities fed to the log-based losses are clamped to
//! `[prob_clamp, 1 - prob_clamp]` so masked inputs that drive a model to a
//! hard 0 or 1 cannot produce infinite errors.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Which scalar loss scores a single (target, prediction) pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    MeanSquaredError,
    /// Multi-class cross-entropy; targets are a distribution over k classes.
    CategoricalCrossentropy,
    /// Binary cross-entropy; targets and predictions are k independent probabilities.
    BinaryCrossentropy,
}

/// A loss kind plus the probability clamp applied before any `ln`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossFunction {
    pub kind: LossKind,
    /// Probabilities are clamped to `[prob_clamp, 1 - prob_clamp]`.
    pub prob_clamp: f64,
}

impl LossFunction {
    pub const DEFAULT_PROB_CLAMP: f64 = 1e-12;

    pub fn new(kind: LossKind) -> Self {
        Self {
            kind,
            prob_clamp: Self::DEFAULT_PROB_CLAMP,
        }
    }

    fn clamp(&self, p: f64) -> f64 {
        p.clamp(self.prob_clamp, 1.0 - self.prob_clamp)
    }

    /// Loss for one sample. `target` and `prediction` must have equal length.
    pub fn evaluate(&self, target: &[f64], prediction: &[f64]) -> Result<f64> {
        if target.len() != prediction.len() {
            return Err(Error::DimensionMismatch {
                expected: target.len(),
                actual: prediction.len(),
                context: "loss target vs prediction".into(),
            });
        }
        if target.is_empty() {
            return Err(Error::contract("loss inputs must be non-empty"));
        }
        let k = target.len() as f64;
        let value = match self.kind {
            LossKind::MeanSquaredError => {
                let mut acc = 0.0;
                for (t, p) in target.iter().zip(prediction) {
                    let d = t - p;
                    acc += d * d;
                }
                acc / k
            }
            LossKind::CategoricalCrossentropy => {
                let mut acc = 0.0;
                for (t, p) in target.iter().zip(prediction) {
                    if *t > 0.0 {
                        acc -= t * self.clamp(*p).ln();
                    }
                }
                acc
            }
            LossKind::BinaryCrossentropy => {
                let mut acc = 0.0;
                for (t, p) in target.iter().zip(prediction) {
                    let p = self.clamp(*p);
                    acc -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
                }
                acc / k
            }
        };
        if !value.is_finite() {
            return Err(Error::Domain(format!(
                "loss produced a non-finite value ({value}) for target {target:?}, prediction {prediction:?}"
            )));
        }
        Ok(value)
    }
}
