//! Run configuration: one JSON file, fully validated before any compute,
//! with dotted-path command-line overrides.

use crate::error::{Error, Result};
use crate::loss::LossKind;
use crate::models::{AnalyticKind, ClassifierConfig, DEFAULT_BRIDGE_TIMEOUT_SECS};
use crate::nn::TrainConfig;
use crate::targets::NegativeDelta;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Where the data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Uniform features; only feature 0 decides the class.
    SingleInformative { n: usize, p: usize },
    /// Uniform features; class probability is a sigmoid of a weighted sum.
    AdditiveLogit { n: usize, weights: Vec<f64> },
    /// Noise images with a bright blob whose half determines the class.
    PatchImages {
        n: usize,
        height: usize,
        width: usize,
    },
    /// IDX image/label pairs filtered to two classes. When the test pair is
    /// present it becomes the held-out side; otherwise the train pair is
    /// split.
    Idx {
        images: PathBuf,
        labels: PathBuf,
        #[serde(default)]
        test_images: Option<PathBuf>,
        #[serde(default)]
        test_labels: Option<PathBuf>,
        class_a: u8,
        class_b: u8,
    },
    /// Numeric CSV with a header; the last `target_cols` columns are
    /// targets.
    Csv { path: PathBuf, target_cols: usize },
}

/// How labels are presented to the loss: `one_hot` keeps two columns,
/// `binary` collapses to the class-1 indicator column for single-output
/// target models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelFormat {
    #[default]
    OneHot,
    Binary,
}

/// How features combine into explanation groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum GroupingSpec {
    /// One group per raw feature.
    Identity,
    /// Patch tiling of the dataset's image layout.
    Grid {
        patch_height: usize,
        patch_width: usize,
    },
    /// Explicit disjoint groups covering every feature index.
    Custom { groups: Vec<Vec<usize>> },
}

/// How masked features are filled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum MaskingSpec {
    Zero,
    /// Column means of the training partition.
    DatasetMean,
    Constant {
        values: Vec<f64>,
    },
}

/// The model being explained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum TargetModelSpec {
    /// Train the built-in classifier on the training partition.
    Builtin {
        #[serde(default)]
        classifier: ClassifierConfig,
    },
    /// Closed-form model.
    Analytic { model: AnalyticKind },
    /// External process speaking the line protocol.
    Bridge {
        command: Vec<String>,
        #[serde(default = "default_bridge_timeout")]
        timeout_secs: f64,
    },
}

fn default_bridge_timeout() -> f64 {
    DEFAULT_BRIDGE_TIMEOUT_SECS
}

/// Bootstrap ensemble settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleSpec {
    pub num_members: usize,
    /// Confidence level for the interval widths.
    pub gamma: f64,
}

impl Default for EnsembleSpec {
    fn default() -> Self {
        Self {
            num_members: 10,
            gamma: 0.9,
        }
    }
}

/// Benchmark settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSpec {
    /// Fraction of groups masked for the log-odds drop metric.
    pub q: f64,
    /// Fraction of groups kept per image in the uncertainty benchmark.
    pub top_fraction: f64,
    /// Test images scored by the benchmark (capped by the test partition).
    pub num_test_images: usize,
    /// Ensemble sizes compared in the uncertainty benchmark.
    pub ensemble_sizes: Vec<usize>,
}

impl Default for EvaluationSpec {
    fn default() -> Self {
        Self {
            q: 0.1,
            top_fraction: 0.025,
            num_test_images: 100,
            ensemble_sizes: vec![5, 10, 20],
        }
    }
}

fn default_test_fraction() -> f64 {
    0.2
}

fn default_validation_fraction() -> f64 {
    0.1
}

/// Everything a run needs. Unknown keys are rejected at parse time;
/// [`RunConfig::validate`] checks ranges before any compute starts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub label_format: LabelFormat,
    /// Held-out fraction for datasets without an explicit test pair.
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    pub grouping: GroupingSpec,
    pub masking: MaskingSpec,
    pub loss: LossKind,
    #[serde(default)]
    pub negative_delta: NegativeDelta,
    pub target_model: TargetModelSpec,
    /// Explainer network and optimization settings.
    #[serde(default)]
    pub explainer: TrainConfig,
    /// Fraction of explainer rows held out to monitor training.
    #[serde(default = "default_validation_fraction")]
    pub validation_fraction: f64,
    #[serde(default)]
    pub ensemble: EnsembleSpec,
    #[serde(default)]
    pub evaluation: EvaluationSpec,
    /// Seeds the dataset, splits, bootstrap, and benchmark baselines.
    pub master_seed: u64,
    /// All outputs land under this directory.
    pub output_dir: PathBuf,
    /// Worker-thread cap; flag and environment can override.
    #[serde(default)]
    pub threads: Option<usize>,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        match &self.dataset {
            DatasetSpec::SingleInformative { n, p } => {
                if *n == 0 || *p < 2 {
                    return Err(Error::Config(format!(
                        "single_informative needs n >= 1 and p >= 2, got n={n}, p={p}"
                    )));
                }
            }
            DatasetSpec::AdditiveLogit { n, weights } => {
                if *n == 0 || weights.is_empty() {
                    return Err(Error::Config(
                        "additive_logit needs n >= 1 and non-empty weights".into(),
                    ));
                }
                if weights.iter().any(|w| !w.is_finite()) {
                    return Err(Error::Config(
                        "additive_logit weights must be finite".into(),
                    ));
                }
            }
            DatasetSpec::PatchImages { n, height, width } => {
                if *n == 0 || *height < 8 || *width < 8 {
                    return Err(Error::Config(format!(
                        "patch_images needs n >= 1 and height, width >= 8, got n={n}, {height}x{width}"
                    )));
                }
            }
            DatasetSpec::Idx {
                test_images,
                test_labels,
                class_a,
                class_b,
                ..
            } => {
                if test_images.is_some() != test_labels.is_some() {
                    return Err(Error::Config(
                        "test_images and test_labels must be given together".into(),
                    ));
                }
                if class_a == class_b {
                    return Err(Error::Config(format!(
                        "class_a and class_b must differ, both are {class_a}"
                    )));
                }
            }
            DatasetSpec::Csv { target_cols, .. } => {
                if *target_cols == 0 {
                    return Err(Error::Config("target_cols must be at least 1".into()));
                }
            }
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::Config(format!(
                "test_fraction must be in (0, 1), got {}",
                self.test_fraction
            )));
        }
        match &self.grouping {
            GroupingSpec::Grid {
                patch_height,
                patch_width,
            } => {
                if *patch_height == 0 || *patch_width == 0 {
                    return Err(Error::Config("grid patch sides must be positive".into()));
                }
            }
            GroupingSpec::Custom { groups } => {
                if groups.is_empty() {
                    return Err(Error::Config("custom grouping needs groups".into()));
                }
            }
            GroupingSpec::Identity => {}
        }
        if let MaskingSpec::Constant { values } = &self.masking {
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config("constant mask values must be finite".into()));
            }
        }
        if let TargetModelSpec::Bridge {
            command,
            timeout_secs,
        } = &self.target_model
        {
            if command.is_empty() {
                return Err(Error::Config("bridge command must be non-empty".into()));
            }
            if !(*timeout_secs > 0.0 && timeout_secs.is_finite()) {
                return Err(Error::Config(format!(
                    "bridge timeout must be positive, got {timeout_secs}"
                )));
            }
        }
        if !(0.0..=0.5).contains(&self.validation_fraction) {
            return Err(Error::Config(format!(
                "validation_fraction must be in [0, 0.5], got {}",
                self.validation_fraction
            )));
        }
        if self.ensemble.num_members == 0 {
            return Err(Error::Config(
                "ensemble.num_members must be at least 1".into(),
            ));
        }
        if !(self.ensemble.gamma > 0.0 && self.ensemble.gamma < 1.0) {
            return Err(Error::Config(format!(
                "ensemble.gamma must be in (0, 1), got {}",
                self.ensemble.gamma
            )));
        }
        if !(self.evaluation.q > 0.0 && self.evaluation.q < 1.0) {
            return Err(Error::Config(format!(
                "evaluation.q must be in (0, 1), got {}",
                self.evaluation.q
            )));
        }
        if !(self.evaluation.top_fraction > 0.0 && self.evaluation.top_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "evaluation.top_fraction must be in (0, 1], got {}",
                self.evaluation.top_fraction
            )));
        }
        if self.evaluation.num_test_images == 0 {
            return Err(Error::Config(
                "evaluation.num_test_images must be at least 1".into(),
            ));
        }
        if self.evaluation.ensemble_sizes.is_empty() || self.evaluation.ensemble_sizes.contains(&0)
        {
            return Err(Error::Config(
                "evaluation.ensemble_sizes must be non-empty positive counts".into(),
            ));
        }
        if self.explainer.batch_size == 0 || self.explainer.epochs == 0 {
            return Err(Error::Config(
                "explainer batch_size and epochs must be positive".into(),
            ));
        }
        if self.threads == Some(0) {
            return Err(Error::Config("threads must be at least 1 when set".into()));
        }
        Ok(())
    }
}

/// Parses `key=value`, where `key` is a dotted path into the configuration
/// and `value` is JSON (with a bareword fallback to a string).
fn split_override(raw: &str) -> Result<(Vec<String>, serde_json::Value)> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{raw}' is not of the form key=value")))?;
    if key.is_empty() {
        return Err(Error::Config(format!("override '{raw}' has an empty key")));
    }
    let parsed = serde_json::from_str(value)
        .unwrap_or_else(|_| serde_json::Value::String(value.to_string()));
    Ok((key.split('.').map(str::to_string).collect(), parsed))
}

fn apply_override(
    root: &mut serde_json::Value,
    path: &[String],
    value: serde_json::Value,
) -> Result<()> {
    let mut cursor = root;
    for (depth, segment) in path.iter().enumerate() {
        let last = depth == path.len() - 1;
        if let Ok(index) = segment.parse::<usize>() {
            let arr = cursor.as_array_mut().ok_or_else(|| {
                Error::Config(format!(
                    "override path segment '{segment}' indexes a non-array at depth {depth}"
                ))
            })?;
            if index >= arr.len() {
                return Err(Error::Config(format!(
                    "override index {index} out of bounds (array length {})",
                    arr.len()
                )));
            }
            if last {
                arr[index] = value;
                return Ok(());
            }
            cursor = &mut arr[index];
        } else {
            if !cursor.is_object() {
                return Err(Error::Config(format!(
                    "override path segment '{segment}' descends into a non-object at depth {depth}"
                )));
            }
            let map = cursor.as_object_mut().expect("checked object");
            if last {
                map.insert(segment.clone(), value);
                return Ok(());
            }
            cursor = map
                .entry(segment.clone())
                .or_insert_with(|| serde_json::Value::Object(Default::default()));
        }
    }
    unreachable!("override paths are non-empty");
}

/// Loads a configuration file, applies `key=value` overrides, and
/// validates the result.
pub fn load_config(path: &Path, overrides: &[String]) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Error::format(path, format!("configuration did not parse: {e}")))?;
    for raw in overrides {
        let (segments, v) = split_override(raw)?;
        apply_override(&mut value, &segments, v)?;
    }
    let config: RunConfig = serde_json::from_value(value)
        .map_err(|e| Error::Config(format!("invalid configuration: {e}")))?;
    config.validate()?;
    Ok(config)
}
