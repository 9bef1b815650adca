//! Feature groups and masking strategies.
//!
//! Importance is attributed to feature *groups*: either one group per raw
//! feature, or rectangular patches of an image laid out row-major. Masking
//! replaces a group's features with uninformative values; the choice of
//! replacement is the `MaskingStrategy`.

use crate::data::FeatureMatrix;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// How the flat feature vector is spatially organized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum GroupLayout {
    /// No spatial structure; features are independent columns.
    Flat,
    /// Features are pixels of a `height` x `width` image, row-major.
    Grid {
        height: usize,
        width: usize,
        patch_height: usize,
        patch_width: usize,
    },
}

/// A partition of feature indices into importance groups.
///
/// Groups are disjoint, cover `0..feature_dim`, and each is sorted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureGrouping {
    groups: Vec<Vec<usize>>,
    feature_dim: usize,
    layout: GroupLayout,
}

impl FeatureGrouping {
    /// One singleton group per feature: importance is per raw feature.
    pub fn identity(feature_dim: usize) -> Result<Self> {
        if feature_dim == 0 {
            return Err(Error::contract("grouping needs at least one feature"));
        }
        Ok(Self {
            groups: (0..feature_dim).map(|i| vec![i]).collect(),
            feature_dim,
            layout: GroupLayout::Flat,
        })
    }

    /// Tiles a `height` x `width` row-major image with `patch_height` x
    /// `patch_width` patches. Patches are laid out row-major; patches at the
    /// right and bottom edges are truncated when the patch size does not
    /// divide the image size.
    pub fn grid(
        height: usize,
        width: usize,
        patch_height: usize,
        patch_width: usize,
    ) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::contract("grid dimensions must be positive"));
        }
        if patch_height == 0 || patch_width == 0 {
            return Err(Error::contract("patch dimensions must be positive"));
        }
        if patch_height > height || patch_width > width {
            return Err(Error::contract(format!(
                "patch {patch_height}x{patch_width} exceeds image {height}x{width}"
            )));
        }
        let rows = height.div_ceil(patch_height);
        let cols = width.div_ceil(patch_width);
        let mut groups = Vec::with_capacity(rows * cols);
        for pr in 0..rows {
            for pc in 0..cols {
                let r0 = pr * patch_height;
                let c0 = pc * patch_width;
                let r1 = (r0 + patch_height).min(height);
                let c1 = (c0 + patch_width).min(width);
                let mut group = Vec::with_capacity((r1 - r0) * (c1 - c0));
                for r in r0..r1 {
                    for c in c0..c1 {
                        group.push(r * width + c);
                    }
                }
                group.sort_unstable();
                groups.push(group);
            }
        }
        Ok(Self {
            groups,
            feature_dim: height * width,
            layout: GroupLayout::Grid {
                height,
                width,
                patch_height,
                patch_width,
            },
        })
    }

    /// Explicit groups; must be disjoint, non-empty, and cover `0..feature_dim`.
    pub fn custom(groups: Vec<Vec<usize>>, feature_dim: usize) -> Result<Self> {
        if groups.is_empty() {
            return Err(Error::contract("grouping needs at least one group"));
        }
        let mut seen = vec![false; feature_dim];
        for (g, group) in groups.iter().enumerate() {
            if group.is_empty() {
                return Err(Error::contract(format!("group {g} is empty")));
            }
            for &i in group {
                if i >= feature_dim {
                    return Err(Error::contract(format!(
                        "group {g} references feature {i}, but feature_dim is {feature_dim}"
                    )));
                }
                if seen[i] {
                    return Err(Error::contract(format!(
                        "feature {i} appears in more than one group"
                    )));
                }
                seen[i] = true;
            }
        }
        if let Some(missing) = seen.iter().position(|&s| !s) {
            return Err(Error::contract(format!(
                "feature {missing} is not covered by any group"
            )));
        }
        let mut groups = groups;
        for g in &mut groups {
            g.sort_unstable();
        }
        Ok(Self {
            groups,
            feature_dim,
            layout: GroupLayout::Flat,
        })
    }

    /// Number of groups; this is the attribution dimension `p`.
    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    /// Width of the feature vectors this grouping applies to.
    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn group(&self, g: usize) -> &[usize] {
        &self.groups[g]
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn layout(&self) -> GroupLayout {
        self.layout
    }
}

/// What replaces a masked feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "values")]
pub enum MaskingStrategy {
    /// Replace with 0.
    Zero,
    /// Replace feature `i` with the training-set mean of feature `i`.
    DatasetMean(Vec<f64>),
    /// Replace feature `i` with a caller-supplied constant for feature `i`.
    Constant(Vec<f64>),
}

impl MaskingStrategy {
    /// Computes per-column means of `x` for `DatasetMean` masking.
    pub fn dataset_mean(x: &FeatureMatrix) -> Self {
        let mut means = vec![0.0; x.cols()];
        for i in 0..x.rows() {
            for (m, v) in means.iter_mut().zip(x.row(i)) {
                *m += v;
            }
        }
        let n = x.rows() as f64;
        for m in &mut means {
            *m /= n;
        }
        MaskingStrategy::DatasetMean(means)
    }

    /// Replacement value for feature `i`.
    fn replacement(&self, i: usize) -> f64 {
        match self {
            MaskingStrategy::Zero => 0.0,
            MaskingStrategy::DatasetMean(v) | MaskingStrategy::Constant(v) => v[i],
        }
    }

    /// Checks the strategy against a feature dimension.
    pub fn validate(&self, feature_dim: usize) -> Result<()> {
        match self {
            MaskingStrategy::Zero => Ok(()),
            MaskingStrategy::DatasetMean(v) | MaskingStrategy::Constant(v) => {
                if v.len() != feature_dim {
                    Err(Error::DimensionMismatch {
                        expected: feature_dim,
                        actual: v.len(),
                        context: "masking replacement vector".into(),
                    })
                } else {
                    Ok(())
                }
            }
        }
    }
}

/// Overwrites the features of `group` in `row` (in place) with replacements.
pub fn mask_group_in_place(row: &mut [f64], group: &[usize], strategy: &MaskingStrategy) {
    for &i in group {
        row[i] = strategy.replacement(i);
    }
}

/// Returns a copy of `row` with one group masked.
pub fn mask_group(row: &[f64], group: &[usize], strategy: &MaskingStrategy) -> Vec<f64> {
    let mut out = row.to_vec();
    mask_group_in_place(&mut out, group, strategy);
    out
}

/// Returns a copy of `row` with several groups masked at once.
pub fn mask_groups(row: &[f64], groups: &[&[usize]], strategy: &MaskingStrategy) -> Vec<f64> {
    let mut out = row.to_vec();
    for group in groups {
        mask_group_in_place(&mut out, group, strategy);
    }
    out
}
