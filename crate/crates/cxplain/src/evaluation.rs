//! Attribution quality metrics and benchmark harnesses.
//!
//! The central quality metric is the change in log-odds of the predicted
//! class after masking the features an attribution ranks most important: a
//! good attribution makes that change large. Uncertainty quality is scored
//! by correlating per-feature confidence-interval widths with rank errors
//! against a ground-truth importance ranking.

use crate::blackbox::{check_prediction_shape, BlackBoxModel};
use crate::data::{AttributionVector, FeatureMatrix};
use crate::error::{Error, Result};
use crate::masking::{mask_group_in_place, FeatureGrouping, MaskingStrategy};
use crate::targets::OmegaMatrix;
use crate::uncertainty::BootstrapEnsemble;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

/// Probabilities are clamped to `[LOG_ODDS_CLAMP, 1 - LOG_ODDS_CLAMP]`
/// before the log-odds transform, so saturated classifier outputs stay
/// finite.
pub const LOG_ODDS_CLAMP: f64 = 1e-7;

/// `ln(p / (1 - p))` after clamping `p` away from 0 and 1.
pub fn log_odds(p: f64) -> f64 {
    let p = p.clamp(LOG_ODDS_CLAMP, 1.0 - LOG_ODDS_CLAMP);
    (p / (1.0 - p)).ln()
}

/// Turns an arbitrary signed score vector into an importance distribution:
/// absolute values normalized to sum 1, uniform when all are zero.
pub fn normalize_explanation(e: &[f64]) -> Result<AttributionVector> {
    if e.is_empty() {
        return Err(Error::contract("explanation vector must be non-empty"));
    }
    for (i, v) in e.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::Domain(format!(
                "non-finite explanation value {v} at index {i}"
            )));
        }
    }
    let abs: Vec<f64> = e.iter().map(|v| v.abs()).collect();
    let sum: f64 = abs.iter().sum();
    if sum == 0.0 {
        return AttributionVector::uniform(e.len());
    }
    if sum == 1.0 {
        return AttributionVector::new(abs);
    }
    AttributionVector::new(abs.iter().map(|v| v / sum).collect())
}

/// Which output probability the Δ log-odds metrics track.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "class")]
pub enum ConfidenceRule {
    /// The class the model predicts on the *unmasked* input; that same
    /// class's probability is then read off the masked prediction.
    PredictedClass,
    /// A fixed class index. A single sigmoid output is treated as the
    /// two-class distribution `[1 - p, p]`, so indices 0 and 1 are valid.
    FixedClass(usize),
}

/// Probability of `class` under a prediction row; single-output rows are
/// read as `[1 - p, p]`.
fn class_probability(row: &[f64], class: usize) -> Result<f64> {
    if row.len() == 1 {
        match class {
            0 => Ok(1.0 - row[0]),
            1 => Ok(row[0]),
            _ => Err(Error::contract(format!(
                "class {class} out of range for a single-output model"
            ))),
        }
    } else {
        row.get(class).copied().ok_or_else(|| {
            Error::contract(format!(
                "class {class} out of range for {} outputs",
                row.len()
            ))
        })
    }
}

/// Class with the highest probability; ties go to the lower index.
pub fn predicted_class(row: &[f64]) -> usize {
    if row.len() == 1 {
        return usize::from(row[0] >= 0.5);
    }
    let mut best = 0;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

impl ConfidenceRule {
    fn resolve_class(&self, unmasked_row: &[f64]) -> usize {
        match self {
            ConfidenceRule::PredictedClass => predicted_class(unmasked_row),
            ConfidenceRule::FixedClass(c) => *c,
        }
    }
}

/// Indices of the `count` groups with the highest attribution, ties broken
/// by lower group index.
pub fn top_groups(attribution: &[f64], count: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..attribution.len()).collect();
    idx.sort_by(|&i, &j| {
        attribution[j]
            .partial_cmp(&attribution[i])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(i.cmp(&j))
    });
    idx.truncate(count);
    idx
}

/// Δ log-odds after masking the top `ceil(q * p)` attributed groups.
///
/// The tracked probability is resolved by `rule` on the unmasked
/// prediction; the same class is read off the masked prediction. Positive
/// values mean masking hurt the model, i.e. the attribution found features
/// that matter. Costs one predict call of 2 rows.
pub fn delta_log_odds_topq(
    model: &dyn BlackBoxModel,
    x_row: &[f64],
    attribution: &[f64],
    q: f64,
    grouping: &FeatureGrouping,
    strategy: &MaskingStrategy,
    rule: ConfidenceRule,
) -> Result<f64> {
    if !(0.0..1.0).contains(&q) || q <= 0.0 {
        return Err(Error::Config(format!("q must be in (0, 1), got {q}")));
    }
    let p = grouping.num_groups();
    if attribution.len() != p {
        return Err(Error::DimensionMismatch {
            expected: p,
            actual: attribution.len(),
            context: "attribution length vs grouping".into(),
        });
    }
    let d = grouping.feature_dim();
    if x_row.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            actual: x_row.len(),
            context: "sample width vs grouping".into(),
        });
    }
    let count = (q * p as f64).ceil() as usize;
    let selected = top_groups(attribution, count);

    let mut batch = Vec::with_capacity(2 * d);
    batch.extend_from_slice(x_row);
    let start = batch.len();
    batch.extend_from_slice(x_row);
    for &g in &selected {
        mask_group_in_place(&mut batch[start..], grouping.group(g), strategy);
    }
    let x = FeatureMatrix::new(batch, 2, d)?;
    let y = model.predict(&x)?;
    check_prediction_shape(model, 2, &y)?;

    let class = rule.resolve_class(y.row(0));
    let p_orig = class_probability(y.row(0), class)?;
    let p_masked = class_probability(y.row(1), class)?;
    Ok(log_odds(p_orig) - log_odds(p_masked))
}

/// Ground-truth importance scores: Δ log-odds from masking each group
/// alone. Costs one predict call of `p + 1` rows.
pub fn per_feature_delta_log_odds(
    model: &dyn BlackBoxModel,
    x_row: &[f64],
    grouping: &FeatureGrouping,
    strategy: &MaskingStrategy,
    rule: ConfidenceRule,
) -> Result<Vec<f64>> {
    let p = grouping.num_groups();
    if p < 2 {
        return Err(Error::contract("need at least 2 groups to rank"));
    }
    let d = grouping.feature_dim();
    if x_row.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            actual: x_row.len(),
            context: "sample width vs grouping".into(),
        });
    }
    let mut batch = Vec::with_capacity((p + 1) * d);
    batch.extend_from_slice(x_row);
    for g in 0..p {
        let start = batch.len();
        batch.extend_from_slice(x_row);
        mask_group_in_place(&mut batch[start..], grouping.group(g), strategy);
    }
    let x = FeatureMatrix::new(batch, p + 1, d)?;
    let y = model.predict(&x)?;
    check_prediction_shape(model, p + 1, &y)?;

    let class = rule.resolve_class(y.row(0));
    let lo_orig = log_odds(class_probability(y.row(0), class)?);
    let mut out = Vec::with_capacity(p);
    for g in 0..p {
        out.push(lo_orig - log_odds(class_probability(y.row(g + 1), class)?));
    }
    Ok(out)
}

/// Δ log-odds for each row of a test set under one fixed attribution per
/// row. Rows run in parallel unless the model is serial; output order is
/// by row index either way.
pub fn delta_log_odds_sample(
    model: &dyn BlackBoxModel,
    x: &FeatureMatrix,
    attributions: &OmegaMatrix,
    q: f64,
    grouping: &FeatureGrouping,
    strategy: &MaskingStrategy,
    rule: ConfidenceRule,
) -> Result<Vec<f64>> {
    if attributions.num_samples() != x.rows() {
        return Err(Error::DimensionMismatch {
            expected: x.rows(),
            actual: attributions.num_samples(),
            context: "attribution rows vs test rows".into(),
        });
    }
    let per_row = |i: usize| {
        delta_log_odds_topq(
            model,
            x.row(i),
            attributions.row(i),
            q,
            grouping,
            strategy,
            rule,
        )
        .map_err(|e| Error::ModelEval {
            sample: i,
            source: Box::new(e),
        })
    };
    if model.is_serial() {
        (0..x.rows()).map(per_row).collect()
    } else {
        (0..x.rows()).into_par_iter().map(per_row).collect()
    }
}

/// Descending ranks: rank 0 is the largest score, ties won by lower index.
pub fn ranks_desc(scores: &[f64]) -> Result<Vec<usize>> {
    for (i, s) in scores.iter().enumerate() {
        if !s.is_finite() {
            return Err(Error::Domain(format!(
                "non-finite score {s} at index {i} cannot be ranked"
            )));
        }
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&i, &j| {
        scores[j]
            .partial_cmp(&scores[i])
            .expect("scores checked finite")
            .then(i.cmp(&j))
    });
    let mut ranks = vec![0usize; scores.len()];
    for (pos, &i) in idx.iter().enumerate() {
        ranks[i] = pos;
    }
    Ok(ranks)
}

/// Per-feature absolute rank difference between two score vectors.
pub fn rank_error(true_scores: &[f64], est_scores: &[f64]) -> Result<Vec<usize>> {
    if true_scores.len() != est_scores.len() {
        return Err(Error::DimensionMismatch {
            expected: true_scores.len(),
            actual: est_scores.len(),
            context: "rank error score vectors".into(),
        });
    }
    let rt = ranks_desc(true_scores)?;
    let re = ranks_desc(est_scores)?;
    Ok(rt.iter().zip(&re).map(|(a, b)| a.abs_diff(*b)).collect())
}

/// Sample Pearson correlation. Errors when either vector is constant (the
/// correlation is undefined there); callers treat that as a skip.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            actual: b.len(),
            context: "correlation inputs".into(),
        });
    }
    if a.len() < 2 {
        return Err(Error::contract("correlation needs at least 2 points"));
    }
    let n = a.len() as f64;
    let mean_a = a.iter().sum::<f64>() / n;
    let mean_b = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var_a = 0.0;
    let mut var_b = 0.0;
    for (x, y) in a.iter().zip(b) {
        let da = x - mean_a;
        let db = y - mean_b;
        cov += da * db;
        var_a += da * da;
        var_b += db * db;
    }
    if var_a == 0.0 || var_b == 0.0 {
        return Err(Error::UndefinedStatistic(
            "correlation of a constant vector".into(),
        ));
    }
    Ok((cov / (var_a * var_b).sqrt()).clamp(-1.0, 1.0))
}

/// Fisher z-transform `atanh(rho)`; requires `|rho| < 1`.
pub fn fisher_z(rho: f64) -> Result<f64> {
    if !rho.is_finite() || rho.abs() >= 1.0 {
        return Err(Error::Domain(format!(
            "fisher z-transform needs |rho| < 1, got {rho}"
        )));
    }
    Ok(rho.atanh())
}

/// How an MWW p-value was computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MwwMethod {
    /// Exact permutation enumeration over all group assignments.
    Exact,
    /// Normal approximation with tie and continuity corrections.
    NormalApproximation,
}

/// Mann-Whitney-Wilcoxon test result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MwwResult {
    pub u_a: f64,
    pub u_b: f64,
    pub p_value: f64,
    pub method: MwwMethod,
}

/// Midranks (1-based, ties averaged) of the pooled sample.
fn midranks(pooled: &[f64]) -> Vec<f64> {
    let n = pooled.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&i, &j| pooled[i].partial_cmp(&pooled[j]).expect("finite"));
    let mut ranks = vec![0.0; n];
    let mut start = 0;
    while start < n {
        let mut end = start;
        while end + 1 < n && pooled[idx[end + 1]] == pooled[idx[start]] {
            end += 1;
        }
        // Average of 1-based positions start+1 ..= end+1.
        let avg = (start + end + 2) as f64 / 2.0;
        for &i in &idx[start..=end] {
            ranks[i] = avg;
        }
        start = end + 1;
    }
    ranks
}

struct ExactCounter {
    u_lo: f64,
    u_hi: f64,
    offset: f64,
    count_lo: u64,
    count_hi: u64,
    total: u64,
}

fn enumerate_subsets(
    ranks: &[f64],
    start: usize,
    remaining: usize,
    sum: f64,
    c: &mut ExactCounter,
) {
    if remaining == 0 {
        let u = sum - c.offset;
        c.total += 1;
        if u <= c.u_lo {
            c.count_lo += 1;
        }
        if u >= c.u_hi {
            c.count_hi += 1;
        }
        return;
    }
    for i in start..=ranks.len() - remaining {
        enumerate_subsets(ranks, i + 1, remaining - 1, sum + ranks[i], c);
    }
}

/// Total pooled size at or below which the exact permutation p-value is
/// computed instead of the normal approximation.
pub const MWW_EXACT_LIMIT: usize = 20;

/// Rank-sum test with 0.5 credit for ties. Two-sided p-value: exact
/// permutation enumeration when the pooled size is at most
/// `MWW_EXACT_LIMIT`, else normal approximation with tie and continuity
/// corrections.
pub fn mww_test(a: &[f64], b: &[f64]) -> Result<MwwResult> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::contract("both samples must be non-empty"));
    }
    for v in a.iter().chain(b) {
        if !v.is_finite() {
            return Err(Error::Domain(format!("non-finite sample value {v}")));
        }
    }
    let (na, nb) = (a.len(), b.len());
    let mut u_a = 0.0;
    for x in a {
        for y in b {
            if x > y {
                u_a += 1.0;
            } else if x == y {
                u_a += 0.5;
            }
        }
    }
    let prod = (na * nb) as f64;
    let u_b = prod - u_a;
    let u_min = u_a.min(u_b);
    let n = na + nb;

    if n <= MWW_EXACT_LIMIT {
        let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
        let ranks = midranks(&pooled);
        let mut counter = ExactCounter {
            u_lo: u_min,
            u_hi: prod - u_min,
            offset: (na * (na + 1)) as f64 / 2.0,
            count_lo: 0,
            count_hi: 0,
            total: 0,
        };
        enumerate_subsets(&ranks, 0, na, 0.0, &mut counter);
        let p = (counter.count_lo + counter.count_hi) as f64 / counter.total as f64;
        return Ok(MwwResult {
            u_a,
            u_b,
            p_value: p.min(1.0),
            method: MwwMethod::Exact,
        });
    }

    // Tie correction: sum t^3 - t over tie groups of the pooled sample.
    let mut pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    pooled.sort_by(|x, y| x.partial_cmp(y).expect("finite"));
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && pooled[j + 1] == pooled[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let nf = n as f64;
    let sigma2 = (prod / 12.0) * ((nf + 1.0) - tie_term / (nf * (nf - 1.0)));
    if sigma2 <= 0.0 {
        // Everything tied: no evidence either way.
        return Ok(MwwResult {
            u_a,
            u_b,
            p_value: 1.0,
            method: MwwMethod::NormalApproximation,
        });
    }
    let mean = prod / 2.0;
    let z = (u_min - mean + 0.5) / sigma2.sqrt();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let p = (2.0 * normal.cdf(z)).min(1.0);
    Ok(MwwResult {
        u_a,
        u_b,
        p_value: p,
        method: MwwMethod::NormalApproximation,
    })
}

/// Seeded random simplex attributions, the no-information baseline.
pub fn random_attributions(n: usize, p: usize, seed: u64) -> Result<OmegaMatrix> {
    if n == 0 || p == 0 {
        return Err(Error::contract("random attributions need n, p >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(n);
    for _ in 0..n {
        let mut row: Vec<f64> = (0..p).map(|_| rng.random_range(0.0..1.0)).collect();
        let sum: f64 = row.iter().sum();
        if sum > 0.0 {
            for v in &mut row {
                *v /= sum;
            }
            rows.push(AttributionVector::new(row)?);
        } else {
            rows.push(AttributionVector::uniform(p)?);
        }
    }
    OmegaMatrix::new(rows)
}

/// Settings for the uncertainty-correlation benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UncertaintyBenchmarkConfig {
    /// Fraction of all groups kept per image (after the positive filter),
    /// counted as `ceil(top_fraction * p)`.
    pub top_fraction: f64,
    /// Confidence level for the CI widths.
    pub gamma: f64,
    /// Minimum usable features per image; below this the image is skipped.
    pub min_features: usize,
    /// Keep only features whose ground-truth Δ log-odds is positive before
    /// taking the top fraction. The reverse order is available for
    /// comparison.
    pub filter_positive_first: bool,
    /// Seed for the random-noise uncertainty baseline.
    pub baseline_seed: u64,
    pub rule: ConfidenceRule,
}

impl Default for UncertaintyBenchmarkConfig {
    fn default() -> Self {
        Self {
            top_fraction: 0.025,
            gamma: 0.9,
            min_features: 2,
            filter_positive_first: true,
            baseline_seed: 0,
            rule: ConfidenceRule::PredictedClass,
        }
    }
}

/// Aggregated correlation for one uncertainty source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationSummary {
    pub label: String,
    /// Mean Fisher-z over evaluable images.
    pub mean_z: f64,
    pub images_used: usize,
    /// Images with a defined subset but an undefined or degenerate
    /// correlation for this source.
    pub images_skipped: usize,
}

/// Output of the uncertainty-correlation benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyBenchmarkResult {
    /// One summary per ensemble, keyed by member count M.
    pub ensembles: Vec<(usize, CorrelationSummary)>,
    pub baseline: CorrelationSummary,
    pub images_total: usize,
    /// Images dropped before any correlation: too few usable features.
    pub images_without_subset: usize,
}

struct ImageSubset {
    selected: Vec<usize>,
    true_scores: Vec<f64>,
}

fn select_subset(true_scores: &[f64], cfg: &UncertaintyBenchmarkConfig) -> Option<Vec<usize>> {
    let p = true_scores.len();
    let cap = (cfg.top_fraction * p as f64).ceil() as usize;
    let candidates: Vec<usize> = if cfg.filter_positive_first {
        let positive: Vec<usize> = (0..p).filter(|&i| true_scores[i] > 0.0).collect();
        let mut by_score = positive;
        by_score.sort_by(|&i, &j| {
            true_scores[j]
                .partial_cmp(&true_scores[i])
                .expect("finite")
                .then(i.cmp(&j))
        });
        by_score.truncate(cap);
        by_score
    } else {
        let mut top = top_groups(true_scores, cap);
        top.retain(|&i| true_scores[i] > 0.0);
        top
    };
    if candidates.len() < cfg.min_features.max(2) {
        None
    } else {
        Some(candidates)
    }
}

fn accumulate_correlation(
    label: &str,
    pairs: &[(Vec<f64>, Vec<f64>)],
) -> Result<CorrelationSummary> {
    let mut z_sum = 0.0;
    let mut used = 0;
    let mut skipped = 0;
    for (re, u) in pairs {
        match pearson(re, u).and_then(fisher_z) {
            Ok(z) => {
                z_sum += z;
                used += 1;
            }
            Err(Error::UndefinedStatistic(_)) | Err(Error::Domain(_)) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    if used == 0 {
        return Err(Error::EmptyBenchmark(format!(
            "no image produced a defined correlation for '{label}'"
        )));
    }
    Ok(CorrelationSummary {
        label: label.to_string(),
        mean_z: z_sum / used as f64,
        images_used: used,
        images_skipped: skipped,
    })
}

/// Correlates per-feature CI widths with ground-truth rank errors.
///
/// Per image: per-feature Δ log-odds ground truth; keep features with
/// positive Δ log-odds, then the top `top_fraction` of groups by that
/// score (at least `min_features`, else skip the image). For each
/// ensemble, rank errors come from its median attribution ranking against
/// the ground-truth ranking (ranks over all groups, then restricted to the
/// kept subset) and widths from its `gamma` CIs. The baseline keeps the
/// first ensemble's rank errors but replaces widths with seeded uniform
/// noise. Each source aggregates the mean Fisher-z over images where the
/// correlation is defined.
pub fn uncertainty_correlation_benchmark(
    model: &dyn BlackBoxModel,
    ensembles: &[(usize, &BootstrapEnsemble)],
    x_test: &FeatureMatrix,
    grouping: &FeatureGrouping,
    strategy: &MaskingStrategy,
    cfg: &UncertaintyBenchmarkConfig,
) -> Result<UncertaintyBenchmarkResult> {
    if ensembles.is_empty() {
        return Err(Error::contract("need at least one ensemble"));
    }
    if !(cfg.top_fraction > 0.0 && cfg.top_fraction <= 1.0) {
        return Err(Error::Config(format!(
            "top_fraction must be in (0, 1], got {}",
            cfg.top_fraction
        )));
    }
    let n = x_test.rows();
    let per_image = |i: usize| -> Result<Option<ImageSubset>> {
        let scores = per_feature_delta_log_odds(model, x_test.row(i), grouping, strategy, cfg.rule)
            .map_err(|e| Error::ModelEval {
                sample: i,
                source: Box::new(e),
            })?;
        Ok(select_subset(&scores, cfg).map(|selected| ImageSubset {
            selected,
            true_scores: scores,
        }))
    };
    let subsets: Vec<Option<ImageSubset>> = if model.is_serial() {
        (0..n).map(per_image).collect::<Result<_>>()?
    } else {
        (0..n)
            .into_par_iter()
            .map(per_image)
            .collect::<Result<_>>()?
    };
    let images_without_subset = subsets.iter().filter(|s| s.is_none()).count();
    let usable: Vec<(usize, &ImageSubset)> = subsets
        .iter()
        .enumerate()
        .filter_map(|(i, s)| s.as_ref().map(|s| (i, s)))
        .collect();
    if usable.is_empty() {
        return Err(Error::EmptyBenchmark(
            "every image was skipped during feature selection".into(),
        ));
    }

    let mut per_ensemble = Vec::with_capacity(ensembles.len());
    let mut first_rank_errors: Vec<Vec<f64>> = Vec::new();
    for (ei, (m, ensemble)) in ensembles.iter().enumerate() {
        let mut pairs = Vec::with_capacity(usable.len());
        for (i, subset) in &usable {
            let ci = ensemble.attribute(x_test.row(*i), cfg.gamma)?;
            let re_all = rank_error(&subset.true_scores, &ci.median)?;
            let width = ci.width();
            let re: Vec<f64> = subset.selected.iter().map(|&f| re_all[f] as f64).collect();
            let u: Vec<f64> = subset.selected.iter().map(|&f| width[f]).collect();
            if ei == 0 {
                first_rank_errors.push(re.clone());
            }
            pairs.push((re, u));
        }
        let summary = accumulate_correlation(&format!("ensemble_m{m}"), &pairs)?;
        per_ensemble.push((*m, summary));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.baseline_seed);
    let baseline_pairs: Vec<(Vec<f64>, Vec<f64>)> = first_rank_errors
        .into_iter()
        .map(|re| {
            let noise: Vec<f64> = (0..re.len()).map(|_| rng.random_range(0.0..1.0)).collect();
            (re, noise)
        })
        .collect();
    let baseline = accumulate_correlation("random_uncertainty", &baseline_pairs)?;

    Ok(UncertaintyBenchmarkResult {
        ensembles: per_ensemble,
        baseline,
        images_total: n,
        images_without_subset,
    })
}

/// Per-method Δ log-odds outcomes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub method: String,
    pub per_image: Vec<f64>,
    pub median: f64,
    pub first_quartile: f64,
    pub third_quartile: f64,
    /// Wall-clock seconds spent producing this method's attributions.
    /// Reported separately from the deterministic outputs.
    pub seconds: f64,
}

impl MethodResult {
    /// Builds the summary statistics from raw per-image values.
    pub fn from_values(
        method: impl Into<String>,
        per_image: Vec<f64>,
        seconds: f64,
    ) -> Result<Self> {
        if per_image.is_empty() {
            return Err(Error::EmptyBenchmark("method produced no values".into()));
        }
        let mut sorted = per_image.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
        let q = |f: f64| crate::uncertainty::linear_quantile(&sorted, f);
        Ok(Self {
            method: method.into(),
            median: q(0.5),
            first_quartile: q(0.25),
            third_quartile: q(0.75),
            per_image,
            seconds,
        })
    }
}

/// Significance test between two methods' per-image Δ log-odds samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseTest {
    pub method_a: String,
    pub method_b: String,
    pub mww: MwwResult,
}

/// Everything a benchmark run produces, ready for serialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub methods: Vec<MethodResult>,
    pub pairwise: Vec<PairwiseTest>,
    pub uncertainty: Option<UncertaintyBenchmarkResult>,
    /// Free-form configuration echo: (key, value) pairs, in emit order.
    pub metadata: Vec<(String, String)>,
    /// Notes such as fallback decisions; serialized with the summary.
    pub notes: Vec<String>,
}

impl EvalReport {
    /// Per-image metric CSV in long form: `image,method,delta_log_odds`.
    pub fn per_image_csv(&self) -> String {
        let mut out = String::from("image,method,delta_log_odds\n");
        for m in &self.methods {
            for (i, v) in m.per_image.iter().enumerate() {
                out.push_str(&format!("{i},{},{v}\n", m.method));
            }
        }
        out
    }

    /// Deterministic structured-text summary: configuration, per-method
    /// quartiles, pairwise tests, uncertainty correlations. Wall-clock
    /// timings are excluded; they belong in the separate timings file.
    pub fn summary_text(&self) -> String {
        let mut out = String::new();
        out.push_str("# benchmark summary\n\n[configuration]\n");
        for (k, v) in &self.metadata {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out.push_str("\n[delta_log_odds]\n");
        for m in &self.methods {
            out.push_str(&format!(
                "{}: median = {}, quartiles = [{}, {}], images = {}\n",
                m.method,
                m.median,
                m.first_quartile,
                m.third_quartile,
                m.per_image.len()
            ));
        }
        if !self.pairwise.is_empty() {
            out.push_str("\n[pairwise_tests]\n");
            for t in &self.pairwise {
                out.push_str(&format!(
                    "{} vs {}: U = {}, p = {} ({})\n",
                    t.method_a,
                    t.method_b,
                    t.mww.u_a,
                    t.mww.p_value,
                    match t.mww.method {
                        MwwMethod::Exact => "exact",
                        MwwMethod::NormalApproximation => "normal approximation",
                    }
                ));
            }
        }
        if let Some(u) = &self.uncertainty {
            out.push_str("\n[uncertainty_correlation]\n");
            for (m, s) in &u.ensembles {
                out.push_str(&format!(
                    "M={m}: mean_fisher_z = {}, images_used = {}, images_skipped = {}\n",
                    s.mean_z, s.images_used, s.images_skipped
                ));
            }
            out.push_str(&format!(
                "{}: mean_fisher_z = {}, images_used = {}, images_skipped = {}\n",
                u.baseline.label,
                u.baseline.mean_z,
                u.baseline.images_used,
                u.baseline.images_skipped
            ));
            out.push_str(&format!(
                "images_total = {}, images_without_subset = {}\n",
                u.images_total, u.images_without_subset
            ));
        }
        if !self.notes.is_empty() {
            out.push_str("\n[notes]\n");
            for n in &self.notes {
                out.push_str(&format!("- {n}\n"));
            }
        }
        out
    }

    /// Wall-clock seconds per method, kept out of the deterministic files.
    pub fn timings_csv(&self) -> String {
        let mut out = String::from("method,seconds\n");
        for m in &self.methods {
            out.push_str(&format!("{},{}\n", m.method, m.seconds));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blackbox::EvaluationCounter;
    use crate::data::PredictionMatrix;

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

        fn predict(&self, x: &FeatureMatrix) -> Result<PredictionMatrix> {
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
            PredictionMatrix::new(out, x.rows(), 1)
        }

        fn evaluations(&self) -> u64 {
            self.counter.get()
        }

        fn fingerprint(&self) -> String {
            "sigmoid_linear".into()
        }
    }

    struct ConstantModel(f64);

    impl BlackBoxModel for ConstantModel {
        fn name(&self) -> &str {
            "constant"
        }

        fn output_dim(&self) -> usize {
            1
        }

        fn predict(&self, x: &FeatureMatrix) -> Result<PredictionMatrix> {
            PredictionMatrix::new(vec![self.0; x.rows()], x.rows(), 1)
        }

        fn evaluations(&self) -> u64 {
            0
        }

        fn fingerprint(&self) -> String {
            "constant".into()
        }
    }

    #[test]
    fn log_odds_examples() {
        assert_eq!(log_odds(0.5), 0.0);
        assert!((log_odds(0.9) - 9.0f64.ln()).abs() < 1e-12);
        assert!((log_odds(0.9) - 2.197225).abs() < 1e-6);
        // Clamp keeps the extremes finite.
        let at_one = log_odds(1.0);
        assert!(at_one.is_finite());
        assert!((at_one - 16.118).abs() < 0.01);
        assert!((log_odds(0.0) + at_one).abs() < 1e-8);
    }

    #[test]
    fn normalize_explanation_examples() {
        assert_eq!(
            normalize_explanation(&[1.0, -1.0]).unwrap().as_slice(),
            &[0.5, 0.5]
        );
        assert_eq!(
            normalize_explanation(&[0.0, 0.0, 0.0]).unwrap().as_slice(),
            &[1.0 / 3.0; 3]
        );
        // Simplex input passes through unchanged.
        assert_eq!(
            normalize_explanation(&[0.25, 0.75]).unwrap().as_slice(),
            &[0.25, 0.75]
        );
        assert!(normalize_explanation(&[f64::NAN]).is_err());
        assert!(normalize_explanation(&[]).is_err());
    }

    #[test]
    fn predicted_class_and_probability() {
        assert_eq!(predicted_class(&[0.2, 0.5, 0.3]), 1);
        // Tie goes to the lower index.
        assert_eq!(predicted_class(&[0.4, 0.4, 0.2]), 0);
        assert_eq!(predicted_class(&[0.7]), 1);
        assert_eq!(predicted_class(&[0.3]), 0);
        assert_eq!(class_probability(&[0.7], 1).unwrap(), 0.7);
        assert!((class_probability(&[0.7], 0).unwrap() - 0.3).abs() < 1e-15);
        assert!(class_probability(&[0.7], 2).is_err());
        assert!(class_probability(&[0.2, 0.8], 2).is_err());
    }

    #[test]
    fn top_groups_orders_and_breaks_ties_low() {
        assert_eq!(top_groups(&[0.1, 0.5, 0.4], 2), vec![1, 2]);
        assert_eq!(top_groups(&[0.3, 0.3, 0.4], 2), vec![2, 0]);
        assert_eq!(top_groups(&[0.25; 4], 2), vec![0, 1]);
    }

    #[test]
    fn delta_log_odds_on_constant_model_is_zero() {
        let model = ConstantModel(0.7);
        let grouping = FeatureGrouping::identity(4).unwrap();
        let v = delta_log_odds_topq(
            &model,
            &[1.0; 4],
            &[0.25; 4],
            0.5,
            &grouping,
            &MaskingStrategy::Zero,
            ConfidenceRule::PredictedClass,
        )
        .unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn delta_log_odds_analytic_sigmoid_case() {
        // Masking the only informative feature moves the logit from 2 to -2;
        // log-odds of a sigmoid is its logit, so the drop is exactly 4.
        let model = SigmoidLinear::new(vec![4.0, 0.0, 0.0, 0.0], -2.0);
        let grouping = FeatureGrouping::identity(4).unwrap();
        let attribution = [0.97, 0.01, 0.01, 0.01];
        let v = delta_log_odds_topq(
            &model,
            &[1.0, 0.5, 0.5, 0.5],
            &attribution,
            0.25,
            &grouping,
            &MaskingStrategy::Zero,
            ConfidenceRule::PredictedClass,
        )
        .unwrap();
        assert!((v - 4.0).abs() < 1e-9, "{v}");
        // One predict call of 2 rows.
        assert_eq!(model.evaluations(), 2);
    }

    #[test]
    fn topq_count_is_ceiling() {
        // q = 10% of 49 groups: ceil(4.9) = 5 masked groups.
        let count = (0.1f64 * 49.0).ceil() as usize;
        assert_eq!(count, 5);
        // Masking everything when ceil(q p) == p equals a full mask.
        let model = SigmoidLinear::new(vec![3.0, 2.0], -2.0);
        let grouping = FeatureGrouping::identity(2).unwrap();
        let full = delta_log_odds_topq(
            &model,
            &[1.0, 1.0],
            &[0.6, 0.4],
            0.99,
            &grouping,
            &MaskingStrategy::Zero,
            ConfidenceRule::PredictedClass,
        )
        .unwrap();
        // Logit drops from 3 to -2: difference 5.
        assert!((full - 5.0).abs() < 1e-9);
    }

    #[test]
    fn per_feature_delta_log_odds_additive_logit_is_exact() {
        // For sigmoid(sum w_i x_i + b), zero-masking feature i changes the
        // logit by exactly w_i * x_i.
        let w = vec![2.0, -1.0, 0.5];
        let model = SigmoidLinear::new(w.clone(), 0.3);
        let grouping = FeatureGrouping::identity(3).unwrap();
        let x = [0.8, 0.6, 0.9];
        let v = per_feature_delta_log_odds(
            &model,
            &x,
            &grouping,
            &MaskingStrategy::Zero,
            ConfidenceRule::FixedClass(1),
        )
        .unwrap();
        for i in 0..3 {
            assert!((v[i] - w[i] * x[i]).abs() < 1e-9, "feature {i}: {}", v[i]);
        }
        // One call of p + 1 rows.
        assert_eq!(model.evaluations(), 4);

        let constant = ConstantModel(0.4);
        let v = per_feature_delta_log_odds(
            &constant,
            &x,
            &grouping,
            &MaskingStrategy::Zero,
            ConfidenceRule::PredictedClass,
        )
        .unwrap();
        assert_eq!(v, vec![0.0; 3]);
    }

    #[test]
    fn rank_error_examples() {
        assert_eq!(
            rank_error(&[5.0, 1.0, 3.0], &[5.0, 1.0, 3.0]).unwrap(),
            vec![0, 0, 0]
        );
        assert_eq!(
            rank_error(&[3.0, 2.0, 1.0], &[1.0, 2.0, 3.0]).unwrap(),
            vec![2, 0, 2]
        );
        // Shift invariance.
        assert_eq!(
            rank_error(&[3.0, 2.0, 1.0], &[13.0, 12.0, 11.0]).unwrap(),
            vec![0, 0, 0]
        );
        assert!(rank_error(&[1.0], &[1.0, 2.0]).is_err());
        assert!(rank_error(&[f64::NAN, 1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn ranks_desc_tie_breaking() {
        assert_eq!(ranks_desc(&[1.0, 3.0, 2.0]).unwrap(), vec![2, 0, 1]);
        // Ties: lower index gets the better rank.
        assert_eq!(ranks_desc(&[2.0, 2.0, 1.0]).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn pearson_examples() {
        let a = [1.0, 2.0, 3.0];
        assert!((pearson(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = a.iter().map(|v| -v).collect();
        assert!((pearson(&a, &neg).unwrap() + 1.0).abs() < 1e-12);
        // Closed form: 9 / sqrt(84).
        let r = pearson(&[1.0, 2.0, 3.0], &[1.0, 2.0, 4.0]).unwrap();
        assert!((r - 9.0 / 84.0f64.sqrt()).abs() < 1e-12);
        assert!((r - 0.981981).abs() < 1e-5);
        assert!(matches!(
            pearson(&[1.0, 1.0], &[1.0, 2.0]),
            Err(Error::UndefinedStatistic(_))
        ));
        assert!(pearson(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn fisher_z_examples() {
        assert_eq!(fisher_z(0.0).unwrap(), 0.0);
        assert!((fisher_z(0.5).unwrap() - 0.549306).abs() < 1e-6);
        for rho in [0.1, 0.45, 0.9] {
            assert!((fisher_z(-rho).unwrap() + fisher_z(rho).unwrap()).abs() < 1e-15);
        }
        assert!(fisher_z(1.0).is_err());
        assert!(fisher_z(-1.0).is_err());
        assert!(fisher_z(f64::NAN).is_err());
    }

    #[test]
    fn mww_exact_example() {
        let r = mww_test(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap();
        assert_eq!(r.u_a, 0.0);
        assert_eq!(r.u_b, 9.0);
        assert_eq!(r.method, MwwMethod::Exact);
        assert!((r.p_value - 0.1).abs() < 1e-12, "p = {}", r.p_value);
    }

    #[test]
    fn mww_identical_samples_take_half_credit() {
        let r = mww_test(&[1.0, 2.0], &[1.0, 2.0]).unwrap();
        assert_eq!(r.u_a, 2.0); // n^2 / 2
        assert_eq!(r.p_value, 1.0);
    }

    #[test]
    fn mww_is_symmetric() {
        let a = [1.0, 3.0, 5.0, 7.0];
        let b = [2.0, 4.0, 6.0];
        let ab = mww_test(&a, &b).unwrap();
        let ba = mww_test(&b, &a).unwrap();
        assert_eq!(ab.u_a, ba.u_b);
        assert_eq!(ab.u_b, ba.u_a);
        assert_eq!(ab.p_value, ba.p_value);
        assert!((ab.u_a + ab.u_b - 12.0).abs() < 1e-12);
    }

    #[test]
    fn mww_large_shifted_samples_are_significant() {
        let a: Vec<f64> = (0..100).map(|i| i as f64 * 0.01).collect();
        let b: Vec<f64> = (0..100).map(|i| 100.0 + i as f64 * 0.01).collect();
        let r = mww_test(&a, &b).unwrap();
        assert_eq!(r.u_a, 0.0);
        assert_eq!(r.method, MwwMethod::NormalApproximation);
        assert!(r.p_value < 0.001, "p = {}", r.p_value);
    }

    #[test]
    fn mww_rejects_bad_input() {
        assert!(mww_test(&[], &[1.0]).is_err());
        assert!(mww_test(&[1.0], &[]).is_err());
        assert!(mww_test(&[f64::NAN], &[1.0]).is_err());
    }

    #[test]
    fn random_attributions_are_seeded_simplex_rows() {
        let a = random_attributions(5, 4, 9).unwrap();
        let b = random_attributions(5, 4, 9).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, random_attributions(5, 4, 10).unwrap());
        for i in 0..5 {
            let sum: f64 = a.row(i).iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn subset_selection_filters_positives_then_takes_top() {
        let cfg = UncertaintyBenchmarkConfig {
            top_fraction: 0.5,
            min_features: 2,
            ..UncertaintyBenchmarkConfig::default()
        };
        // p = 6, cap = 3; positives are indices 0, 2, 4, 5.
        let scores = [3.0, -1.0, 5.0, 0.0, 1.0, 2.0];
        let subset = select_subset(&scores, &cfg).unwrap();
        assert_eq!(subset, vec![2, 0, 5]);

        // Too few positives: skip.
        let scores = [1.0, -2.0, -3.0, -4.0, 0.0, -1.0];
        assert!(select_subset(&scores, &cfg).is_none());
    }

    #[test]
    fn method_result_quartiles() {
        let m = MethodResult::from_values("m", vec![0.5, 0.1, 0.3, 0.2, 0.4], 1.0).unwrap();
        assert_eq!(m.median, 0.3);
        assert!((m.first_quartile - 0.2).abs() < 1e-15);
        assert!((m.third_quartile - 0.4).abs() < 1e-15);
        assert!(MethodResult::from_values("m", vec![], 0.0).is_err());
    }

    #[test]
    fn report_serialization_shapes() {
        let report = EvalReport {
            methods: vec![
                MethodResult::from_values("alpha", vec![1.0, 2.0], 0.5).unwrap(),
                MethodResult::from_values("beta", vec![0.1], 0.2).unwrap(),
            ],
            pairwise: vec![PairwiseTest {
                method_a: "alpha".into(),
                method_b: "beta".into(),
                mww: mww_test(&[1.0, 2.0], &[0.1]).unwrap(),
            }],
            uncertainty: None,
            metadata: vec![("q".into(), "0.1".into())],
            notes: vec!["fallback used".into()],
        };
        let csv = report.per_image_csv();
        assert!(csv.starts_with("image,method,delta_log_odds\n"));
        assert!(csv.contains("0,alpha,1\n"));
        assert!(csv.contains("1,alpha,2\n"));
        assert!(csv.contains("0,beta,0.1\n"));

        let summary = report.summary_text();
        assert!(summary.contains("q = 0.1"));
        assert!(summary.contains("alpha vs beta"));
        assert!(summary.contains("fallback used"));
        // Timings never leak into the deterministic summary.
        assert!(!summary.contains("seconds"));
        assert!(report.timings_csv().contains("alpha,0.5\n"));
    }
}
