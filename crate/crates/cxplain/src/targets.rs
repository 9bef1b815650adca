//! Importance targets from masked re-evaluation.
//!
//! For each sample, the target model is scored once on the unmasked input
//! and once per feature group with that group masked. The error increase
//! caused by masking a group, normalized across groups, is that group's
//! importance target. A sample therefore costs exactly `p + 1` model
//! evaluations, issued as one batched predict call.

use crate::blackbox::{check_prediction_shape, BlackBoxModel};
use crate::data::{AttributionVector, FeatureMatrix, TargetMatrix};
use crate::error::{Error, Result};
use crate::loss::LossFunction;
use crate::masking::{mask_group_in_place, FeatureGrouping, MaskingStrategy};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

/// How a negative error delta (masking *helped* the model) enters the
/// normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeDelta {
    /// Clip to zero: a group only earns importance by hurting the model.
    #[default]
    Floor,
    /// Use the magnitude: any effect on the error counts as importance.
    Abs,
}

/// Loss and normalization choices for target precomputation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetConfig {
    pub loss: LossFunction,
    #[serde(default)]
    pub negative_delta: NegativeDelta,
}

/// Per-sample prediction errors: unmasked, then one per masked group.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorProfile {
    /// Error on the unmasked input.
    pub base: f64,
    /// Error with group `i` masked, for each group.
    pub masked: Vec<f64>,
}

impl ErrorProfile {
    /// Error increase per group: `masked[i] - base`.
    pub fn deltas(&self) -> Vec<f64> {
        self.masked.iter().map(|m| m - self.base).collect()
    }
}

/// Normalizes error deltas into an importance distribution.
///
/// Negative deltas are transformed per `policy`; the result is divided by
/// its sum. When no group has positive transformed weight the distribution
/// falls back to uniform: the sweep found no evidence to rank groups.
pub fn normalize_deltas(deltas: &[f64], policy: NegativeDelta) -> Result<AttributionVector> {
    if deltas.is_empty() {
        return Err(Error::contract("cannot normalize an empty delta vector"));
    }
    for (i, d) in deltas.iter().enumerate() {
        if !d.is_finite() {
            return Err(Error::Domain(format!(
                "non-finite error delta {d} at group {i}"
            )));
        }
    }
    let transformed: Vec<f64> = match policy {
        NegativeDelta::Floor => deltas.iter().map(|d| d.max(0.0)).collect(),
        NegativeDelta::Abs => deltas.iter().map(|d| d.abs()).collect(),
    };
    let sum: f64 = transformed.iter().sum();
    if sum <= 0.0 || !sum.is_finite() {
        return AttributionVector::uniform(deltas.len());
    }
    let omega: Vec<f64> = transformed.iter().map(|t| t / sum).collect();
    AttributionVector::new(omega)
}

/// Scores one sample on the unmasked input and on each single-group mask,
/// using a single batched predict call of `p + 1` rows.
pub fn error_profile(
    model: &dyn BlackBoxModel,
    x_row: &[f64],
    y_row: &[f64],
    grouping: &FeatureGrouping,
    strategy: &MaskingStrategy,
    loss: &LossFunction,
) -> Result<ErrorProfile> {
    let d = grouping.feature_dim();
    if x_row.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            actual: x_row.len(),
            context: "sample width vs grouping".into(),
        });
    }
    let p = grouping.num_groups();
    let mut batch = Vec::with_capacity((p + 1) * d);
    batch.extend_from_slice(x_row);
    for g in 0..p {
        let start = batch.len();
        batch.extend_from_slice(x_row);
        mask_group_in_place(&mut batch[start..], grouping.group(g), strategy);
    }
    let x_batch = FeatureMatrix::new(batch, p + 1, d)?;
    let y_batch = model.predict(&x_batch)?;
    check_prediction_shape(model, p + 1, &y_batch)?;

    let base = loss.evaluate(y_row, y_batch.row(0))?;
    let mut masked = Vec::with_capacity(p);
    for g in 0..p {
        masked.push(loss.evaluate(y_row, y_batch.row(g + 1))?);
    }
    Ok(ErrorProfile { base, masked })
}

/// Importance target for a single labeled sample.
pub fn sample_target(
    model: &dyn BlackBoxModel,
    x_row: &[f64],
    y_row: &[f64],
    grouping: &FeatureGrouping,
    strategy: &MaskingStrategy,
    config: &TargetConfig,
) -> Result<AttributionVector> {
    let profile = error_profile(model, x_row, y_row, grouping, strategy, &config.loss)?;
    normalize_deltas(&profile.deltas(), config.negative_delta)
}

/// Importance targets for a dataset: one distribution per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct OmegaMatrix {
    rows: Vec<AttributionVector>,
    num_groups: usize,
}

impl OmegaMatrix {
    pub fn new(rows: Vec<AttributionVector>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::contract("target matrix needs at least one row"));
        }
        let num_groups = rows[0].len();
        for (i, r) in rows.iter().enumerate() {
            if r.len() != num_groups {
                return Err(Error::DimensionMismatch {
                    expected: num_groups,
                    actual: r.len(),
                    context: format!("importance target row {i}"),
                });
            }
        }
        Ok(Self { rows, num_groups })
    }

    pub fn num_samples(&self) -> usize {
        self.rows.len()
    }

    pub fn num_groups(&self) -> usize {
        self.num_groups
    }

    pub fn row(&self, i: usize) -> &AttributionVector {
        &self.rows[i]
    }

    pub fn rows(&self) -> &[AttributionVector] {
        &self.rows
    }

    /// Flattens to a row-major matrix for use as training supervision.
    pub fn to_target_matrix(&self) -> TargetMatrix {
        let mut data = Vec::with_capacity(self.rows.len() * self.num_groups);
        for r in &self.rows {
            data.extend_from_slice(r.as_slice());
        }
        TargetMatrix::new(data, self.rows.len(), self.num_groups)
            .expect("rows validated at construction")
    }

    /// Per-group mean importance across samples.
    pub fn column_means(&self) -> Vec<f64> {
        let mut means = vec![0.0; self.num_groups];
        for r in &self.rows {
            for (m, v) in means.iter_mut().zip(r.iter()) {
                *m += v;
            }
        }
        let n = self.rows.len() as f64;
        for m in &mut means {
            *m /= n;
        }
        means
    }
}

/// Result of a full precompute sweep.
#[derive(Debug)]
pub struct PrecomputedTargets {
    pub omega: OmegaMatrix,
    /// Unmasked error per sample.
    pub base_errors: Vec<f64>,
    /// Rows where no group earned positive weight and uniform was used.
    pub uniform_fallbacks: usize,
    /// Model sample-evaluations consumed by this sweep: exactly `n * (p + 1)`.
    pub evaluations: u64,
}

/// Computes importance targets for every sample in `x`.
///
/// Samples are independent; they run in parallel on the current rayon pool
/// unless the model is serial. Results are ordered by sample index either
/// way, so the output does not depend on thread count.
pub fn precompute_targets(
    model: &dyn BlackBoxModel,
    x: &FeatureMatrix,
    y: &TargetMatrix,
    grouping: &FeatureGrouping,
    strategy: &MaskingStrategy,
    config: &TargetConfig,
) -> Result<PrecomputedTargets> {
    if x.rows() != y.rows() {
        return Err(Error::DimensionMismatch {
            expected: x.rows(),
            actual: y.rows(),
            context: "label rows vs input rows".into(),
        });
    }
    if y.cols() != model.output_dim() {
        return Err(Error::DimensionMismatch {
            expected: model.output_dim(),
            actual: y.cols(),
            context: "label width vs model output width".into(),
        });
    }
    strategy.validate(grouping.feature_dim())?;
    let before = model.evaluations();
    let n = x.rows();

    let per_sample = |i: usize| -> Result<(AttributionVector, f64)> {
        let profile = error_profile(model, x.row(i), y.row(i), grouping, strategy, &config.loss)
            .map_err(|e| Error::ModelEval {
                sample: i,
                source: Box::new(e),
            })?;
        let omega = normalize_deltas(&profile.deltas(), config.negative_delta).map_err(|e| {
            Error::ModelEval {
                sample: i,
                source: Box::new(e),
            }
        })?;
        Ok((omega, profile.base))
    };

    let results: Vec<(AttributionVector, f64)> = if model.is_serial() {
        (0..n).map(per_sample).collect::<Result<_>>()?
    } else {
        (0..n)
            .into_par_iter()
            .map(per_sample)
            .collect::<Result<_>>()?
    };

    let p = grouping.num_groups();
    let uniform = AttributionVector::uniform(p)?;
    let uniform_fallbacks = results
        .iter()
        .filter(|(omega, _)| omega == &uniform)
        .count();
    let mut rows = Vec::with_capacity(n);
    let mut base_errors = Vec::with_capacity(n);
    for (omega, base) in results {
        rows.push(omega);
        base_errors.push(base);
    }
    Ok(PrecomputedTargets {
        omega: OmegaMatrix::new(rows)?,
        base_errors,
        uniform_fallbacks,
        evaluations: model.evaluations() - before,
    })
}

/// Sidecar metadata stored next to a targets file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OmegaMetadata {
    pub schema_version: u32,
    pub model_fingerprint: String,
    pub target_config: TargetConfig,
    pub grouping: FeatureGrouping,
    pub masking: MaskingStrategy,
    pub num_samples: usize,
    pub num_groups: usize,
    pub uniform_fallbacks: usize,
    pub evaluations: u64,
}

pub const OMEGA_SCHEMA_VERSION: u32 = 1;

/// Writes targets as CSV: header `omega_0,...,omega_{p-1}`, one row per
/// sample. Values use shortest round-trip formatting, so a file is
/// reproduced byte for byte by an identical run.
pub fn save_omega_csv(omega: &OmegaMatrix, path: &Path) -> Result<()> {
    let mut out = String::new();
    let header: Vec<String> = (0..omega.num_groups())
        .map(|g| format!("omega_{g}"))
        .collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in omega.rows() {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes())
        .map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads a targets CSV written by [`save_omega_csv`]. Errors name the
/// offending 1-based data row.
pub fn load_omega_csv(path: &Path) -> Result<OmegaMatrix> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(f);
    let mut lines = reader.lines();
    let header = match lines.next() {
        Some(h) => h.map_err(|e| Error::io(path, e))?,
        None => return Err(Error::format(path, "file is empty")),
    };
    let p = header.split(',').count();
    for (g, col) in header.split(',').enumerate() {
        let expected = format!("omega_{g}");
        if col.trim() != expected {
            return Err(Error::format(
                path,
                format!("header column {g} is '{col}', expected '{expected}'"),
            ));
        }
    }
    let mut rows = Vec::new();
    for (idx, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != p {
            return Err(Error::format(
                path,
                format!("row {}: expected {p} values, got {}", idx + 1, cells.len()),
            ));
        }
        let mut values = Vec::with_capacity(p);
        for cell in &cells {
            let v: f64 = cell.trim().parse().map_err(|e| {
                Error::format(path, format!("row {}: bad number '{cell}': {e}", idx + 1))
            })?;
            values.push(v);
        }
        let row = AttributionVector::new(values)
            .map_err(|e| Error::format(path, format!("row {}: {e}", idx + 1)))?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::format(path, "no data rows"));
    }
    OmegaMatrix::new(rows)
}

pub fn save_omega_metadata(meta: &OmegaMetadata, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(meta)
        .map_err(|e| Error::format(path, format!("serialize metadata: {e}")))?;
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn load_omega_metadata(path: &Path) -> Result<OmegaMetadata> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let meta: OmegaMetadata =
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
    if meta.schema_version != OMEGA_SCHEMA_VERSION {
        return Err(Error::SchemaVersion {
            found: meta.schema_version,
            supported: OMEGA_SCHEMA_VERSION,
        });
    }
    Ok(meta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blackbox::EvaluationCounter;
    use crate::loss::LossKind;

    /// Predicts sigmoid(w . x + b); one output.
    struct SigmoidLinear {
        w: Vec<f64>,
        b: f64,
        counter: EvaluationCounter,
    }

    impl SigmoidLinear {
        fn new(w: Vec<f64>, b: f64) -> Self {
            Self {
                w,
                b,
                counter: EvaluationCounter::new(),
            }
        }
    }

    impl BlackBoxModel for SigmoidLinear {
        fn name(&self) -> &str {
            "sigmoid_linear"
        }

        fn output_dim(&self) -> usize {
            1
        }

        fn predict(&self, x: &FeatureMatrix) -> Result<crate::data::PredictionMatrix> {
            self.counter.add(x.rows() as u64);
            let mut out = Vec::with_capacity(x.rows());
            for i in 0..x.rows() {
                let t: f64 = x
                    .row(i)
                    .iter()
                    .zip(&self.w)
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
                    + self.b;
                out.push(1.0 / (1.0 + (-t).exp()));
            }
            crate::data::PredictionMatrix::new(out, x.rows(), 1)
        }

        fn evaluations(&self) -> u64 {
            self.counter.get()
        }

        fn fingerprint(&self) -> String {
            format!("sigmoid_linear:{:?}:{}", self.w, self.b)
        }
    }

    fn bce_config() -> TargetConfig {
        TargetConfig {
            loss: LossFunction::new(LossKind::BinaryCrossentropy),
            negative_delta: NegativeDelta::Floor,
        }
    }

    #[test]
    fn delta_normalization_examples() {
        // Positive deltas normalize proportionally.
        let omega = normalize_deltas(&[2.0, 1.0, 1.0], NegativeDelta::Floor).unwrap();
        assert_eq!(omega.as_slice(), &[0.5, 0.25, 0.25]);

        // Negative deltas are floored to zero before normalizing.
        let omega = normalize_deltas(&[0.4, 0.0, -0.2], NegativeDelta::Floor).unwrap();
        assert_eq!(omega.as_slice(), &[1.0, 0.0, 0.0]);

        // All non-positive: uniform fallback.
        let omega = normalize_deltas(&[-0.1, 0.0, -0.5], NegativeDelta::Floor).unwrap();
        assert_eq!(omega.as_slice(), &[1.0 / 3.0; 3]);

        // Abs policy counts magnitudes instead.
        let omega = normalize_deltas(&[1.5, -0.5, 0.0], NegativeDelta::Abs).unwrap();
        assert_eq!(omega.as_slice(), &[0.75, 0.25, 0.0]);

        assert!(normalize_deltas(&[], NegativeDelta::Floor).is_err());
        assert!(normalize_deltas(&[f64::NAN], NegativeDelta::Floor).is_err());
    }

    #[test]
    fn loss_scale_leaves_omega_unchanged() {
        // Scaling every delta by a power of two cancels exactly in the ratio.
        let deltas = [0.4, 0.1, 0.0, -0.3];
        let base = normalize_deltas(&deltas, NegativeDelta::Floor).unwrap();
        for c in [2.0, 0.5, 1024.0] {
            let scaled: Vec<f64> = deltas.iter().map(|d| d * c).collect();
            let omega = normalize_deltas(&scaled, NegativeDelta::Floor).unwrap();
            assert_eq!(omega.as_slice(), base.as_slice());
        }
    }

    #[test]
    fn error_profile_batches_one_call() {
        let model = SigmoidLinear::new(vec![4.0, 0.0], -2.0);
        let grouping = FeatureGrouping::identity(2).unwrap();
        let loss = LossFunction::new(LossKind::BinaryCrossentropy);
        let profile = error_profile(
            &model,
            &[1.0, 0.7],
            &[1.0],
            &grouping,
            &MaskingStrategy::Zero,
            &loss,
        )
        .unwrap();
        // One batched call of p + 1 = 3 rows.
        assert_eq!(model.evaluations(), 3);

        // Hand-computed: unmasked t = 2, sigmoid ~ 0.8808; mask x0 -> t = -2.
        let sig = |t: f64| 1.0 / (1.0 + (-t).exp());
        let expect_base = -(sig(2.0).ln());
        let expect_mask0 = -(sig(-2.0).ln());
        assert!((profile.base - expect_base).abs() < 1e-12);
        assert!((profile.masked[0] - expect_mask0).abs() < 1e-12);
        // Feature 1 has zero weight: masking it changes nothing.
        assert!((profile.masked[1] - expect_base).abs() < 1e-15);

        let deltas = profile.deltas();
        assert!(deltas[0] > 0.0);
        assert_eq!(deltas[1], 0.0);
    }

    #[test]
    fn irrelevant_feature_gets_zero_importance() {
        let model = SigmoidLinear::new(vec![8.0, 0.0, 0.0], -4.0);
        let grouping = FeatureGrouping::identity(3).unwrap();
        let omega = sample_target(
            &model,
            &[1.0, 0.3, 0.9],
            &[1.0],
            &grouping,
            &MaskingStrategy::Zero,
            &bce_config(),
        )
        .unwrap();
        assert_eq!(omega.as_slice(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn precompute_costs_exactly_n_times_p_plus_one() {
        let model = SigmoidLinear::new(vec![1.0, -1.0, 0.5, 0.0], 0.0);
        let n = 9;
        let p = 4;
        let x =
            FeatureMatrix::new((0..n * p).map(|i| (i % 7) as f64 / 7.0).collect(), n, p).unwrap();
        let y = TargetMatrix::new(vec![1.0; n], n, 1).unwrap();
        let grouping = FeatureGrouping::identity(p).unwrap();
        let result = precompute_targets(
            &model,
            &x,
            &y,
            &grouping,
            &MaskingStrategy::Zero,
            &bce_config(),
        )
        .unwrap();
        assert_eq!(result.evaluations, (n * (p + 1)) as u64);
        assert_eq!(model.evaluations(), (n * (p + 1)) as u64);
        assert_eq!(result.omega.num_samples(), n);
        assert_eq!(result.omega.num_groups(), p);
        assert_eq!(result.base_errors.len(), n);
    }

    #[test]
    fn precompute_shape_errors() {
        let model = SigmoidLinear::new(vec![1.0, 1.0], 0.0);
        let x = FeatureMatrix::new(vec![0.1, 0.2], 1, 2).unwrap();
        let y_bad_rows = TargetMatrix::new(vec![1.0, 0.0], 2, 1).unwrap();
        let y_bad_cols = TargetMatrix::new(vec![1.0, 0.0], 1, 2).unwrap();
        let grouping = FeatureGrouping::identity(2).unwrap();
        let cfg = bce_config();
        assert!(precompute_targets(
            &model,
            &x,
            &y_bad_rows,
            &grouping,
            &MaskingStrategy::Zero,
            &cfg
        )
        .is_err());
        assert!(precompute_targets(
            &model,
            &x,
            &y_bad_cols,
            &grouping,
            &MaskingStrategy::Zero,
            &cfg
        )
        .is_err());
        let bad_mask = MaskingStrategy::Constant(vec![0.0]);
        let y = TargetMatrix::new(vec![1.0], 1, 1).unwrap();
        assert!(precompute_targets(&model, &x, &y, &grouping, &bad_mask, &cfg).is_err());
    }

    #[test]
    fn grouped_masking_attributes_to_patches() {
        // 2x2 image, 1x2 patches: two groups (top row, bottom row).
        let model = SigmoidLinear::new(vec![6.0, 6.0, 0.0, 0.0], -6.0);
        let grouping = FeatureGrouping::grid(2, 2, 1, 2).unwrap();
        let omega = sample_target(
            &model,
            &[1.0, 1.0, 1.0, 1.0],
            &[1.0],
            &grouping,
            &MaskingStrategy::Zero,
            &bce_config(),
        )
        .unwrap();
        assert_eq!(omega.as_slice(), &[1.0, 0.0]);
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let rows = vec![
            AttributionVector::new(vec![0.5, 0.25, 0.25]).unwrap(),
            AttributionVector::new(vec![1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]).unwrap(),
            AttributionVector::new(vec![1.0, 0.0, 0.0]).unwrap(),
        ];
        let omega = OmegaMatrix::new(rows).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("omega.csv");
        save_omega_csv(&omega, &path).unwrap();

        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("omega_0,omega_1,omega_2\n"));

        let back = load_omega_csv(&path).unwrap();
        assert_eq!(back, omega);

        // Writing again produces identical bytes.
        let path2 = dir.path().join("omega2.csv");
        save_omega_csv(&back, &path2).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn csv_load_reports_row_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "omega_0,omega_1\n0.5,0.5\n0.9,oops\n").unwrap();
        let err = load_omega_csv(&path).unwrap_err();
        assert!(err.to_string().contains("row 2"), "{err}");

        std::fs::write(&path, "omega_0,omega_1\n0.9,0.9\n").unwrap();
        let err = load_omega_csv(&path).unwrap_err();
        assert!(err.to_string().contains("row 1"), "{err}");

        std::fs::write(&path, "wrong,header\n0.5,0.5\n").unwrap();
        assert!(load_omega_csv(&path).is_err());
    }

    #[test]
    fn metadata_round_trip_and_version_gate() {
        let meta = OmegaMetadata {
            schema_version: OMEGA_SCHEMA_VERSION,
            model_fingerprint: "m:1".into(),
            target_config: bce_config(),
            grouping: FeatureGrouping::identity(2).unwrap(),
            masking: MaskingStrategy::Zero,
            num_samples: 4,
            num_groups: 2,
            uniform_fallbacks: 0,
            evaluations: 12,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("omega.meta.json");
        save_omega_metadata(&meta, &path).unwrap();
        let back = load_omega_metadata(&path).unwrap();
        assert_eq!(back, meta);

        let mut wrong = meta.clone();
        wrong.schema_version = 99;
        save_omega_metadata(&wrong, &path).unwrap();
        assert!(matches!(
            load_omega_metadata(&path),
            Err(Error::SchemaVersion { found: 99, .. })
        ));
    }
}
