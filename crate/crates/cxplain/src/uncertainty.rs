//! Bootstrap-ensemble uncertainty for attributions.
//!
//! M explainers are trained on with-replacement resamples of the training
//! set. Per feature, the ensemble's median attribution is the point
//! estimate and the [alpha/2, 1-alpha/2] quantiles bound a confidence
//! interval whose width is the uncertainty score.

use crate::data::{AttributionVector, FeatureMatrix};
use crate::error::{Error, Result};
use crate::explainer::{load_explainer, save_explainer, train_explainer, ExplainerModel};
use crate::masking::{FeatureGrouping, MaskingStrategy};
use crate::nn::TrainConfig;
use crate::targets::OmegaMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

/// `n` uniform draws with replacement from `0..n`, deterministic in `seed`.
pub fn bootstrap_indices(n: usize, seed: u64) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::contract("cannot resample an empty dataset"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n).map(|_| rng.random_range(0..n)).collect())
}

/// M resample-trained explainers plus the audit trail to reproduce them.
#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapEnsemble {
    members: Vec<ExplainerModel>,
    master_seed: u64,
    resample_indices: Vec<Vec<usize>>,
}

impl BootstrapEnsemble {
    pub fn num_members(&self) -> usize {
        self.members.len()
    }

    pub fn members(&self) -> &[ExplainerModel] {
        &self.members
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn resample_indices(&self) -> &[Vec<usize>] {
        &self.resample_indices
    }

    pub fn grouping(&self) -> &FeatureGrouping {
        self.members[0].grouping()
    }

    /// The ensemble formed by the first `m` members. Identical to training
    /// an `m`-member ensemble from scratch, because member `i` depends only
    /// on `master_seed + i`.
    pub fn prefix(&self, m: usize) -> Result<BootstrapEnsemble> {
        if m == 0 || m > self.members.len() {
            return Err(Error::contract(format!(
                "prefix of {m} members from an ensemble of {}",
                self.members.len()
            )));
        }
        Ok(BootstrapEnsemble {
            members: self.members[..m].to_vec(),
            master_seed: self.master_seed,
            resample_indices: self.resample_indices[..m].to_vec(),
        })
    }

    /// Point attribution with per-feature confidence bounds for one sample.
    pub fn attribute(&self, x_row: &[f64], gamma: f64) -> Result<AttributionWithCi> {
        if !(0.0..1.0).contains(&gamma) || gamma <= 0.0 {
            return Err(Error::Config(format!(
                "confidence level gamma must be in (0, 1), got {gamma}"
            )));
        }
        let p = self.members[0].num_groups();
        let m = self.members.len();
        // member_values[i] collects each member's attribution for feature i.
        let mut member_values = vec![Vec::with_capacity(m); p];
        for member in &self.members {
            let a = member.explain_one(x_row)?;
            for (i, v) in a.iter().enumerate() {
                member_values[i].push(*v);
            }
        }
        let alpha = 1.0 - gamma;
        let mut median = Vec::with_capacity(p);
        let mut lower = Vec::with_capacity(p);
        let mut upper = Vec::with_capacity(p);
        for values in &mut member_values {
            values.sort_by(|a, b| a.partial_cmp(b).unwrap());
            median.push(linear_quantile(values, 0.5));
            lower.push(linear_quantile(values, alpha / 2.0));
            upper.push(linear_quantile(values, 1.0 - alpha / 2.0));
        }
        let sum: f64 = median.iter().sum();
        let point = if sum > 0.0 && sum.is_finite() {
            AttributionVector::new(median.iter().map(|v| v / sum).collect())?
        } else {
            AttributionVector::uniform(p)?
        };
        Ok(AttributionWithCi {
            median,
            point,
            lower,
            upper,
            gamma,
        })
    }
}

/// Quantile by linear interpolation of sorted values at index `(n-1) * q`.
pub fn linear_quantile(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    debug_assert!((0.0..=1.0).contains(&q));
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    if lo + 1 < sorted.len() {
        sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
    } else {
        sorted[lo]
    }
}

/// Attribution with confidence bounds. `median` is the raw per-feature
/// ensemble median (its sum may drift off 1); `point` is that median
/// renormalized onto the simplex. Bounds stay in raw median scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionWithCi {
    pub median: Vec<f64>,
    pub point: AttributionVector,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub gamma: f64,
}

impl AttributionWithCi {
    /// Per-feature uncertainty: CI width `upper - lower`.
    pub fn width(&self) -> Vec<f64> {
        self.upper
            .iter()
            .zip(&self.lower)
            .map(|(u, l)| u - l)
            .collect()
    }
}

/// Trains `num_members` explainers, member `m` on the seeded resample with
/// seed `master_seed + m` (also that member's training seed).
#[allow(clippy::too_many_arguments)]
pub fn train_ensemble(
    x: &FeatureMatrix,
    omega: &OmegaMatrix,
    grouping: &FeatureGrouping,
    masking: &MaskingStrategy,
    target_model_fingerprint: &str,
    config: &TrainConfig,
    validation_fraction: f64,
    num_members: usize,
    master_seed: u64,
) -> Result<BootstrapEnsemble> {
    if num_members == 0 {
        return Err(Error::Config("ensemble needs at least one member".into()));
    }
    let mut members = Vec::with_capacity(num_members);
    let mut resample_indices = Vec::with_capacity(num_members);
    for m in 0..num_members {
        let member_seed = master_seed + m as u64;
        let indices = bootstrap_indices(x.rows(), member_seed)?;
        let rx = x.gather_rows(&indices)?;
        let romega = OmegaMatrix::new(indices.iter().map(|&i| omega.row(i).clone()).collect())?;
        let member_config = TrainConfig {
            seed: member_seed,
            ..config.clone()
        };
        let member = train_explainer(
            &rx,
            &romega,
            grouping,
            masking,
            target_model_fingerprint,
            &member_config,
            validation_fraction,
        )
        .map_err(|e| Error::EnsembleMember {
            member: m,
            source: Box::new(e),
        })?;
        members.push(member);
        resample_indices.push(indices);
    }
    Ok(BootstrapEnsemble {
        members,
        master_seed,
        resample_indices,
    })
}

pub const ENSEMBLE_SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct EnsembleManifest {
    schema_version: u32,
    master_seed: u64,
    num_members: usize,
    member_files: Vec<String>,
    resample_indices: Vec<Vec<usize>>,
    /// Hex SHA-256 of each member's resample indices, for audit.
    resample_digests: Vec<String>,
}

fn digest_indices(indices: &[usize]) -> String {
    let mut hasher = Sha256::new();
    for &i in indices {
        hasher.update((i as u64).to_le_bytes());
    }
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Persists the ensemble as a directory: one model file per member plus a
/// manifest with seeds and resample audit digests.
pub fn save_ensemble(ensemble: &BootstrapEnsemble, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut member_files = Vec::with_capacity(ensemble.members.len());
    for (m, member) in ensemble.members.iter().enumerate() {
        let name = format!("member_{m:03}.json");
        save_explainer(member, &dir.join(&name))?;
        member_files.push(name);
    }
    let manifest = EnsembleManifest {
        schema_version: ENSEMBLE_SCHEMA_VERSION,
        master_seed: ensemble.master_seed,
        num_members: ensemble.members.len(),
        member_files,
        resample_indices: ensemble.resample_indices.clone(),
        resample_digests: ensemble
            .resample_indices
            .iter()
            .map(|ix| digest_indices(ix))
            .collect(),
    };
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::format(&path, format!("serialize manifest: {e}")))?;
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

pub fn load_ensemble(dir: &Path) -> Result<BootstrapEnsemble> {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: EnsembleManifest =
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    if manifest.schema_version != ENSEMBLE_SCHEMA_VERSION {
        return Err(Error::SchemaVersion {
            found: manifest.schema_version,
            supported: ENSEMBLE_SCHEMA_VERSION,
        });
    }
    if manifest.member_files.len() != manifest.num_members
        || manifest.resample_indices.len() != manifest.num_members
        || manifest.resample_digests.len() != manifest.num_members
    {
        return Err(Error::format(
            &path,
            "manifest member counts disagree".to_string(),
        ));
    }
    for (m, (ix, digest)) in manifest
        .resample_indices
        .iter()
        .zip(&manifest.resample_digests)
        .enumerate()
    {
        if &digest_indices(ix) != digest {
            return Err(Error::format(
                &path,
                format!("resample digest mismatch for member {m}"),
            ));
        }
    }
    let mut members = Vec::with_capacity(manifest.num_members);
    for name in &manifest.member_files {
        members.push(load_explainer(&dir.join(name))?);
    }
    if members.is_empty() {
        return Err(Error::format(
            &path,
            "manifest lists no members".to_string(),
        ));
    }
    let (d, p) = (members[0].input_dim(), members[0].num_groups());
    if members
        .iter()
        .any(|m| m.input_dim() != d || m.num_groups() != p)
    {
        return Err(Error::format(
            &path,
            "members disagree on dimensions".to_string(),
        ));
    }
    Ok(BootstrapEnsemble {
        members,
        master_seed: manifest.master_seed,
        resample_indices: manifest.resample_indices,
    })
}
