//! The trainable explanation model.
//!
//! An explainer is a softmax-head network that maps an input sample to a
//! distribution of importance over feature groups, trained with KL
//! divergence against precomputed importance targets. It carries the
//! grouping and masking choice it was trained under, plus provenance tying
//! it to the explained model.

use crate::data::{AttributionVector, FeatureMatrix};
use crate::error::{Error, Result};
use crate::masking::{FeatureGrouping, MaskingStrategy};
use crate::nn::{train, MlpNetwork, OutputHead, TrainConfig, TrainHistory, TrainLoss};
use crate::targets::OmegaMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Where an explainer came from: which model it explains and the seed that
/// reproduces it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub target_model_fingerprint: String,
    pub seed: u64,
}

/// A trained importance estimator plus everything needed to reuse it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainerModel {
    network: MlpNetwork,
    grouping: FeatureGrouping,
    masking: MaskingStrategy,
    provenance: Provenance,
    history: TrainHistory,
}

impl ExplainerModel {
    pub fn grouping(&self) -> &FeatureGrouping {
        &self.grouping
    }

    pub fn masking(&self) -> &MaskingStrategy {
        &self.masking
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn history(&self) -> &TrainHistory {
        &self.history
    }

    pub fn input_dim(&self) -> usize {
        self.network.input_dim()
    }

    pub fn num_groups(&self) -> usize {
        self.network.output_dim()
    }

    /// Attributions for a batch: one importance distribution per row.
    pub fn explain(&self, x: &FeatureMatrix) -> Result<OmegaMatrix> {
        let out = self.network.forward(x)?;
        let mut rows = Vec::with_capacity(x.rows());
        for s in 0..x.rows() {
            rows.push(AttributionVector::new(out.row(s).to_vec())?);
        }
        OmegaMatrix::new(rows)
    }

    /// Attribution for a single sample.
    pub fn explain_one(&self, x_row: &[f64]) -> Result<AttributionVector> {
        let x = FeatureMatrix::new(x_row.to_vec(), 1, x_row.len())?;
        let omega = self.explain(&x)?;
        Ok(omega.row(0).clone())
    }
}

/// Splits `n` rows into (train, validation) index sets: a seeded shuffle,
/// then the last `ceil(fraction * n)` rows become validation.
pub fn validation_split(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..=0.5).contains(&fraction) {
        return Err(Error::Config(format!(
            "validation_fraction must be in [0, 0.5], got {fraction}"
        )));
    }
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);
    let n_val = (fraction * n as f64).ceil() as usize;
    let n_train = n - n_val;
    if n_train == 0 {
        return Err(Error::Config(format!(
            "validation_fraction {fraction} leaves no training rows for n = {n}"
        )));
    }
    let val = indices.split_off(n_train);
    Ok((indices, val))
}

/// Trains an explainer on precomputed importance targets.
///
/// Minimizes mean KL(target || output) with mini-batch Adam; the parameters
/// from the epoch with the best monitored loss (validation KL when
/// `validation_fraction > 0`, else training KL) are kept.
pub fn train_explainer(
    x: &FeatureMatrix,
    omega: &OmegaMatrix,
    grouping: &FeatureGrouping,
    masking: &MaskingStrategy,
    target_model_fingerprint: &str,
    config: &TrainConfig,
    validation_fraction: f64,
) -> Result<ExplainerModel> {
    if x.rows() != omega.num_samples() {
        return Err(Error::DimensionMismatch {
            expected: x.rows(),
            actual: omega.num_samples(),
            context: "importance target rows vs input rows".into(),
        });
    }
    if x.cols() != grouping.feature_dim() {
        return Err(Error::DimensionMismatch {
            expected: grouping.feature_dim(),
            actual: x.cols(),
            context: "input width vs grouping".into(),
        });
    }
    if omega.num_groups() != grouping.num_groups() {
        return Err(Error::DimensionMismatch {
            expected: grouping.num_groups(),
            actual: omega.num_groups(),
            context: "importance target width vs grouping".into(),
        });
    }

    let y = omega.to_target_matrix();
    let (train_idx, val_idx) = validation_split(x.rows(), validation_fraction, config.seed)?;
    let tx = x.gather_rows(&train_idx)?;
    let ty = y.gather_rows(&train_idx)?;
    let (vx, vy) = if val_idx.is_empty() {
        (None, None)
    } else {
        (
            Some(x.gather_rows(&val_idx)?),
            Some(y.gather_rows(&val_idx)?),
        )
    };

    let mut network = MlpNetwork::new(
        x.cols(),
        &config.hidden,
        grouping.num_groups(),
        OutputHead::Softmax,
        config.seed,
    )?;
    let validation = match (&vx, &vy) {
        (Some(a), Some(b)) => Some((a, b)),
        _ => None,
    };
    let history = train(
        &mut network,
        TrainLoss::KlDivergence,
        &tx,
        &ty,
        validation,
        config,
    )?;

    Ok(ExplainerModel {
        network,
        grouping: grouping.clone(),
        masking: masking.clone(),
        provenance: Provenance {
            target_model_fingerprint: target_model_fingerprint.to_string(),
            seed: config.seed,
        },
        history,
    })
}

pub const EXPLAINER_SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ExplainerFile {
    schema_version: u32,
    model: ExplainerModel,
}

/// Saves an explainer as one JSON file; values round-trip exactly.
pub fn save_explainer(model: &ExplainerModel, path: &Path) -> Result<()> {
    let file = ExplainerFile {
        schema_version: EXPLAINER_SCHEMA_VERSION,
        model: model.clone(),
    };
    let json = serde_json::to_string(&file)
        .map_err(|e| Error::format(path, format!("serialize explainer: {e}")))?;
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn load_explainer(path: &Path) -> Result<ExplainerModel> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: ExplainerFile =
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
    if file.schema_version != EXPLAINER_SCHEMA_VERSION {
        return Err(Error::SchemaVersion {
            found: file.schema_version,
            supported: EXPLAINER_SCHEMA_VERSION,
        });
    }
    let m = &file.model;
    if m.grouping.num_groups() != m.network.output_dim()
        || m.grouping.feature_dim() != m.network.input_dim()
    {
        return Err(Error::format(
            path,
            "grouping does not match network dimensions".to_string(),
        ));
    }
    Ok(file.model)
}

/// Total variation distance between two distributions of equal length.
pub fn total_variation(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_simplex_targets(n: usize, p: usize, seed: u64) -> OmegaMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = (0..n)
            .map(|_| {
                let mut row: Vec<f64> = (0..p).map(|_| rng.random_range(0.05..1.0)).collect();
                let s: f64 = row.iter().sum();
                for v in &mut row {
                    *v /= s;
                }
                AttributionVector::new(row).unwrap()
            })
            .collect();
        OmegaMatrix::new(rows).unwrap()
    }

    fn random_inputs(n: usize, d: usize, seed: u64) -> FeatureMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * d).map(|_| rng.random_range(0.0..1.0)).collect();
        FeatureMatrix::new(data, n, d).unwrap()
    }

    fn quick_config(epochs: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            hidden: vec![32],
            learning_rate: 5e-3,
            epochs,
            batch_size: 8,
            seed,
            patience: None,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn validation_split_is_seeded_and_partitions() {
        let (tr, va) = validation_split(10, 0.25, 3).unwrap();
        assert_eq!(va.len(), 3); // ceil(2.5)
        assert_eq!(tr.len(), 7);
        let mut all: Vec<usize> = tr.iter().chain(&va).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        let (tr2, va2) = validation_split(10, 0.25, 3).unwrap();
        assert_eq!((tr, va), (tr2, va2));
        let (tr3, _) = validation_split(10, 0.25, 4).unwrap();
        assert_ne!(validation_split(10, 0.25, 3).unwrap().0, tr3);

        assert!(validation_split(10, 0.6, 0).is_err());
        assert!(validation_split(10, -0.1, 0).is_err());
        let (tr, va) = validation_split(10, 0.0, 0).unwrap();
        assert_eq!(tr.len(), 10);
        assert!(va.is_empty());
    }

    #[test]
    fn memorizes_small_fixed_targets() {
        // N=16, d=p=4: capacity far exceeds the data; training drives KL near 0.
        let x = random_inputs(16, 4, 1);
        let omega = random_simplex_targets(16, 4, 2);
        let grouping = FeatureGrouping::identity(4).unwrap();
        let model = train_explainer(
            &x,
            &omega,
            &grouping,
            &MaskingStrategy::Zero,
            "test:model",
            &quick_config(2000, 7),
            0.0,
        )
        .unwrap();
        let final_kl = model.history().best_loss();
        assert!(final_kl <= 0.05, "train KL {final_kl}");

        // Attributions on training samples land near their targets.
        let est = model.explain(&x).unwrap();
        for i in 0..16 {
            let tv = total_variation(est.row(i), omega.row(i));
            assert!(tv <= 0.1, "sample {i}: TV {tv}");
        }
    }

    #[test]
    fn uniform_targets_yield_uniform_outputs() {
        let x = random_inputs(32, 3, 5);
        let uniform = AttributionVector::uniform(3).unwrap();
        let omega = OmegaMatrix::new(vec![uniform.clone(); 32]).unwrap();
        let grouping = FeatureGrouping::identity(3).unwrap();
        let model = train_explainer(
            &x,
            &omega,
            &grouping,
            &MaskingStrategy::Zero,
            "test:model",
            &quick_config(300, 3),
            0.0,
        )
        .unwrap();
        // Probe on fresh inputs, not the training set.
        let probe = random_inputs(8, 3, 99);
        let est = model.explain(&probe).unwrap();
        for i in 0..8 {
            let tv = total_variation(est.row(i), uniform.as_slice());
            assert!(tv <= 0.05, "sample {i}: TV {tv}");
        }
    }

    #[test]
    fn history_shape_follows_validation_fraction() {
        let x = random_inputs(20, 3, 8);
        let omega = random_simplex_targets(20, 3, 9);
        let grouping = FeatureGrouping::identity(3).unwrap();

        let no_val = train_explainer(
            &x,
            &omega,
            &grouping,
            &MaskingStrategy::Zero,
            "m",
            &quick_config(5, 1),
            0.0,
        )
        .unwrap();
        assert!(no_val
            .history()
            .records
            .iter()
            .all(|r| r.val_loss.is_none()));

        let with_val = train_explainer(
            &x,
            &omega,
            &grouping,
            &MaskingStrategy::Zero,
            "m",
            &quick_config(5, 1),
            0.2,
        )
        .unwrap();
        assert!(with_val
            .history()
            .records
            .iter()
            .all(|r| r.val_loss.is_some()));
    }

    #[test]
    fn explain_is_deterministic_and_order_preserving() {
        let x = random_inputs(12, 4, 13);
        let omega = random_simplex_targets(12, 4, 14);
        let grouping = FeatureGrouping::identity(4).unwrap();
        let model = train_explainer(
            &x,
            &omega,
            &grouping,
            &MaskingStrategy::Zero,
            "m",
            &quick_config(20, 2),
            0.0,
        )
        .unwrap();
        let a = model.explain(&x).unwrap();
        let b = model.explain(&x).unwrap();
        assert_eq!(a, b);
        for i in 0..12 {
            let one = model.explain_one(x.row(i)).unwrap();
            assert_eq!(one.as_slice(), a.row(i).as_slice());
        }
    }

    #[test]
    fn shape_mismatches_are_rejected() {
        let x = random_inputs(8, 3, 0);
        let omega = random_simplex_targets(7, 3, 0);
        let grouping = FeatureGrouping::identity(3).unwrap();
        let cfg = quick_config(1, 0);
        assert!(train_explainer(
            &x,
            &omega,
            &grouping,
            &MaskingStrategy::Zero,
            "m",
            &cfg,
            0.0
        )
        .is_err());

        let omega = random_simplex_targets(8, 2, 0);
        assert!(train_explainer(
            &x,
            &omega,
            &grouping,
            &MaskingStrategy::Zero,
            "m",
            &cfg,
            0.0
        )
        .is_err());

        let grouping4 = FeatureGrouping::identity(4).unwrap();
        let omega4 = random_simplex_targets(8, 4, 0);
        assert!(train_explainer(
            &x,
            &omega4,
            &grouping4,
            &MaskingStrategy::Zero,
            "m",
            &cfg,
            0.0
        )
        .is_err());
    }

    #[test]
    fn save_load_round_trip_preserves_attributions() {
        let x = random_inputs(10, 3, 17);
        let omega = random_simplex_targets(10, 3, 18);
        let grouping = FeatureGrouping::identity(3).unwrap();
        let model = train_explainer(
            &x,
            &omega,
            &grouping,
            &MaskingStrategy::Zero,
            "target:abc",
            &quick_config(30, 4),
            0.2,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("explainer.json");
        save_explainer(&model, &path).unwrap();
        let back = load_explainer(&path).unwrap();
        assert_eq!(back, model);
        assert_eq!(back.explain(&x).unwrap(), model.explain(&x).unwrap());
        assert_eq!(back.provenance().target_model_fingerprint, "target:abc");
    }

    #[test]
    fn load_rejects_corruption_and_missing_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("explainer.json");
        assert!(matches!(load_explainer(&path), Err(Error::NotFound(_))));
        std::fs::write(&path, "{not json").unwrap();
        assert!(matches!(load_explainer(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn training_does_not_mutate_inputs() {
        let x = random_inputs(8, 3, 40);
        let omega = random_simplex_targets(8, 3, 41);
        let x_before = x.clone();
        let omega_before = omega.clone();
        let grouping = FeatureGrouping::identity(3).unwrap();
        train_explainer(
            &x,
            &omega,
            &grouping,
            &MaskingStrategy::Zero,
            "m",
            &quick_config(5, 0),
            0.25,
        )
        .unwrap();
        assert_eq!(x, x_before);
        assert_eq!(omega, omega_before);
    }
}
