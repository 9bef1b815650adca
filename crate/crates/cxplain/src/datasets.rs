//! Dataset ingestion and synthetic generators with known ground truth.
//!
//! Generators are pure functions of their parameters and seed. Loaders
//! accept the big-endian IDX image format and numeric CSV with a header.

use crate::data::{FeatureMatrix, TargetMatrix};
use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Image geometry of a flattened feature row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageLayout {
    pub height: usize,
    pub width: usize,
}

/// Seeded train/test partition of `[0, n)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataSplit {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

/// Shuffles `[0, n)` with `seed` and takes the last `ceil(test_fraction*n)`
/// indices as the test side. Both sides end up non-empty.
pub fn split_indices(n: usize, test_fraction: f64, seed: u64) -> Result<DataSplit> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Config(format!(
            "test_fraction must be in (0, 1), got {test_fraction}"
        )));
    }
    let test_len = ((test_fraction * n as f64).ceil() as usize).min(n);
    if test_len == 0 || test_len == n {
        return Err(Error::Config(format!(
            "split of {n} rows with test_fraction {test_fraction} leaves one side empty"
        )));
    }
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);
    let train = indices[..n - test_len].to_vec();
    let test = indices[n - test_len..].to_vec();
    Ok(DataSplit { train, test, seed })
}

/// Features with aligned targets, optional image geometry, and an optional
/// held-out split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    x: FeatureMatrix,
    y: TargetMatrix,
    layout: Option<ImageLayout>,
    split: Option<DataSplit>,
    /// How the dataset was produced, for run manifests.
    provenance: String,
}

impl LabeledDataset {
    pub fn new(x: FeatureMatrix, y: TargetMatrix, provenance: impl Into<String>) -> Result<Self> {
        if x.rows() != y.rows() {
            return Err(Error::DimensionMismatch {
                expected: x.rows(),
                actual: y.rows(),
                context: "dataset features vs targets".into(),
            });
        }
        Ok(Self {
            x,
            y,
            layout: None,
            split: None,
            provenance: provenance.into(),
        })
    }

    pub fn with_layout(mut self, height: usize, width: usize) -> Result<Self> {
        if height * width != self.x.cols() {
            return Err(Error::DimensionMismatch {
                expected: self.x.cols(),
                actual: height * width,
                context: "image layout vs feature width".into(),
            });
        }
        self.layout = Some(ImageLayout { height, width });
        Ok(self)
    }

    /// Attaches a seeded train/test split.
    pub fn with_split(mut self, test_fraction: f64, seed: u64) -> Result<Self> {
        self.split = Some(split_indices(self.x.rows(), test_fraction, seed)?);
        Ok(self)
    }

    pub fn x(&self) -> &FeatureMatrix {
        &self.x
    }

    pub fn y(&self) -> &TargetMatrix {
        &self.y
    }

    pub fn layout(&self) -> Option<ImageLayout> {
        self.layout
    }

    pub fn split(&self) -> Option<&DataSplit> {
        self.split.as_ref()
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn num_samples(&self) -> usize {
        self.x.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.x.cols()
    }

    pub fn target_dim(&self) -> usize {
        self.y.cols()
    }

    /// Rows on the training side of the split; the whole set when no split
    /// is attached.
    pub fn train_partition(&self) -> Result<(FeatureMatrix, TargetMatrix)> {
        match &self.split {
            Some(s) => Ok((self.x.gather_rows(&s.train)?, self.y.gather_rows(&s.train)?)),
            None => Ok((self.x.clone(), self.y.clone())),
        }
    }

    /// Rows on the test side of the split.
    pub fn test_partition(&self) -> Result<(FeatureMatrix, TargetMatrix)> {
        match &self.split {
            Some(s) => Ok((self.x.gather_rows(&s.test)?, self.y.gather_rows(&s.test)?)),
            None => Err(Error::contract("dataset has no held-out split")),
        }
    }
}

const ONE_HOT_CLASS_0: [f64; 2] = [1.0, 0.0];
const ONE_HOT_CLASS_1: [f64; 2] = [0.0, 1.0];

/// Uniform features where only feature 0 carries signal: class 1 when
/// `x_0 > 0.5`. Two-column one-hot labels.
pub fn gen_single_informative(n: usize, p: usize, seed: u64) -> Result<LabeledDataset> {
    if n == 0 || p < 2 {
        return Err(Error::Config(format!(
            "single-informative generator needs n >= 1 and p >= 2, got n={n}, p={p}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Vec::with_capacity(n * p);
    let mut y = Vec::with_capacity(n * 2);
    for _ in 0..n {
        let start = x.len();
        for _ in 0..p {
            x.push(rng.random_range(0.0..1.0));
        }
        let class_1 = x[start] > 0.5;
        y.extend_from_slice(if class_1 {
            &ONE_HOT_CLASS_1
        } else {
            &ONE_HOT_CLASS_0
        });
    }
    LabeledDataset::new(
        FeatureMatrix::new(x, n, p)?,
        TargetMatrix::new(y, n, 2)?,
        format!("gen_single_informative(n={n}, p={p}, seed={seed})"),
    )
}

/// Intercept that centers the additive logit when features are uniform on
/// `[0, 1]`: the mean logit is `0.5 * sum(w) + b`, so `b = -0.5 * sum(w)`.
pub fn additive_logit_bias(weights: &[f64]) -> f64 {
    -0.5 * weights.iter().sum::<f64>()
}

/// Uniform features with `P(class 1 | x) = sigmoid(w . x + b)` and labels
/// sampled from that probability. Two-column one-hot labels.
pub fn gen_additive_logit(n: usize, weights: &[f64], seed: u64) -> Result<LabeledDataset> {
    let p = weights.len();
    if n == 0 || p == 0 {
        return Err(Error::Config(
            "additive-logit generator needs n >= 1 and at least one weight".into(),
        ));
    }
    if weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::Config("weights must be finite".into()));
    }
    let bias = additive_logit_bias(weights);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Vec::with_capacity(n * p);
    let mut y = Vec::with_capacity(n * 2);
    for _ in 0..n {
        let start = x.len();
        for _ in 0..p {
            x.push(rng.random_range(0.0..1.0));
        }
        let logit: f64 = x[start..]
            .iter()
            .zip(weights)
            .map(|(a, b)| a * b)
            .sum::<f64>()
            + bias;
        let prob = 1.0 / (1.0 + (-logit).exp());
        let class_1 = rng.random_range(0.0..1.0) < prob;
        y.extend_from_slice(if class_1 {
            &ONE_HOT_CLASS_1
        } else {
            &ONE_HOT_CLASS_0
        });
    }
    LabeledDataset::new(
        FeatureMatrix::new(x, n, p)?,
        TargetMatrix::new(y, n, 2)?,
        format!("gen_additive_logit(n={n}, p={p}, seed={seed})"),
    )
}

const BLOB_SIDE: usize = 3;
const BLOB_MIN: f64 = 0.8;
const BACKGROUND_MAX: f64 = 0.3;

/// Noise-background images with one bright 3x3 blob; the class says which
/// horizontal half holds the blob (left is class 0 = `[1, 0]`). Classes
/// alternate by row so counts stay balanced.
pub fn gen_patch_images(
    n: usize,
    height: usize,
    width: usize,
    seed: u64,
) -> Result<LabeledDataset> {
    if n == 0 || height < 8 || width < 8 {
        return Err(Error::Config(format!(
            "patch-image generator needs n >= 1 and height, width >= 8, got n={n}, {height}x{width}"
        )));
    }
    let d = height * width;
    let half = width / 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Vec::with_capacity(n * d);
    let mut y = Vec::with_capacity(n * 2);
    for i in 0..n {
        let start = x.len();
        for _ in 0..d {
            x.push(rng.random_range(0.0..BACKGROUND_MAX));
        }
        let class_1 = i % 2 == 1;
        let top = rng.random_range(0..=height - BLOB_SIDE);
        // The blob fits fully inside its half.
        let left = if class_1 {
            rng.random_range(half..=width - BLOB_SIDE)
        } else {
            rng.random_range(0..=half - BLOB_SIDE)
        };
        for r in top..top + BLOB_SIDE {
            for c in left..left + BLOB_SIDE {
                x[start + r * width + c] = rng.random_range(BLOB_MIN..1.0);
            }
        }
        y.extend_from_slice(if class_1 {
            &ONE_HOT_CLASS_1
        } else {
            &ONE_HOT_CLASS_0
        });
    }
    LabeledDataset::new(
        FeatureMatrix::new(x, n, d)?,
        TargetMatrix::new(y, n, 2)?,
        format!("gen_patch_images(n={n}, h={height}, w={width}, seed={seed})"),
    )?
    .with_layout(height, width)
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32_be(bytes: &[u8], offset: usize, path: &Path, what: &str) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(Error::format(
            path,
            format!(
                "truncated before {what}: need {end} bytes, have {}",
                bytes.len()
            ),
        ));
    }
    Ok(u32::from_be_bytes([
        bytes[offset],
        bytes[offset + 1],
        bytes[offset + 2],
        bytes[offset + 3],
    ]))
}

/// Loads a big-endian IDX image/label pair. Pixels are scaled to `[0, 1]`
/// by dividing by 255; labels stay as raw class numbers in one column.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let img = std::fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let magic = read_u32_be(&img, 0, images_path, "image magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(
            images_path,
            format!("image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        ));
    }
    let n = read_u32_be(&img, 4, images_path, "image count")? as usize;
    let height = read_u32_be(&img, 8, images_path, "image height")? as usize;
    let width = read_u32_be(&img, 12, images_path, "image width")? as usize;
    let expected = 16 + n * height * width;
    if img.len() != expected {
        return Err(Error::format(
            images_path,
            format!("payload is {} bytes, header implies {expected}", img.len()),
        ));
    }

    let lab = std::fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    let magic = read_u32_be(&lab, 0, labels_path, "label magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(
            labels_path,
            format!("label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        ));
    }
    let n_labels = read_u32_be(&lab, 4, labels_path, "label count")? as usize;
    if lab.len() != 8 + n_labels {
        return Err(Error::format(
            labels_path,
            format!(
                "payload is {} bytes, header implies {}",
                lab.len(),
                8 + n_labels
            ),
        ));
    }
    if n_labels != n {
        return Err(Error::format(
            labels_path,
            format!("{n_labels} labels for {n} images"),
        ));
    }

    let x: Vec<f64> = img[16..].iter().map(|&b| f64::from(b) / 255.0).collect();
    let y: Vec<f64> = lab[8..].iter().map(|&b| f64::from(b)).collect();
    LabeledDataset::new(
        FeatureMatrix::new(x, n, height * width)?,
        TargetMatrix::new(y, n, 1)?,
        format!(
            "load_idx({}, {})",
            images_path.display(),
            labels_path.display()
        ),
    )?
    .with_layout(height, width)
}

/// Keeps only rows labeled `class_a` or `class_b` (raw single-column
/// labels) and relabels them one-hot: a to `[1, 0]`, b to `[0, 1]`. Row
/// order is preserved; any split is dropped because row indices change.
pub fn filter_classes(ds: &LabeledDataset, class_a: u8, class_b: u8) -> Result<LabeledDataset> {
    if ds.target_dim() != 1 {
        return Err(Error::contract(
            "class filtering needs raw single-column labels",
        ));
    }
    if class_a == class_b {
        return Err(Error::Config(format!(
            "the two classes must differ, both are {class_a}"
        )));
    }
    let (a, b) = (f64::from(class_a), f64::from(class_b));
    let mut keep = Vec::new();
    let mut y = Vec::new();
    for i in 0..ds.num_samples() {
        let label = ds.y.row(i)[0];
        if label == a {
            keep.push(i);
            y.extend_from_slice(&ONE_HOT_CLASS_0);
        } else if label == b {
            keep.push(i);
            y.extend_from_slice(&ONE_HOT_CLASS_1);
        }
    }
    if keep.is_empty() {
        return Err(Error::contract(format!(
            "no rows labeled {class_a} or {class_b}"
        )));
    }
    let x = ds.x.gather_rows(&keep)?;
    let mut out = LabeledDataset::new(
        x,
        TargetMatrix::new(y, keep.len(), 2)?,
        format!("filter_classes({}, {class_a}, {class_b})", ds.provenance()),
    )?;
    if let Some(l) = ds.layout {
        out = out.with_layout(l.height, l.width)?;
    }
    Ok(out)
}

/// Loads a numeric CSV with a header row; the last `target_cols` columns
/// become the targets.
pub fn load_csv(path: &Path, target_cols: usize) -> Result<LabeledDataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::format(path, "empty file"))?;
    let total_cols = header.split(',').count();
    if target_cols == 0 || target_cols >= total_cols {
        return Err(Error::Config(format!(
            "target_cols must be in [1, {}), got {target_cols}",
            total_cols
        )));
    }
    let d = total_cols - target_cols;
    let mut x = Vec::new();
    let mut y = Vec::new();
    let mut n = 0;
    for (idx, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != total_cols {
            return Err(Error::format(
                path,
                format!(
                    "row {}: expected {total_cols} values, got {}",
                    idx + 1,
                    cells.len()
                ),
            ));
        }
        for (c, cell) in cells.iter().enumerate() {
            let v: f64 = cell.trim().parse().map_err(|e| {
                Error::format(path, format!("row {}: bad number '{cell}': {e}", idx + 1))
            })?;
            if c < d {
                x.push(v);
            } else {
                y.push(v);
            }
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::format(path, "no data rows"));
    }
    LabeledDataset::new(
        FeatureMatrix::new(x, n, d)?,
        TargetMatrix::new(y, n, target_cols)?,
        format!("load_csv({}, target_cols={target_cols})", path.display()),
    )
}

/// Writes the dataset as CSV with `f0..` feature and `t0..` target columns
/// at full round-trip precision.
pub fn save_csv(ds: &LabeledDataset, path: &Path) -> Result<()> {
    let mut out = String::new();
    let header: Vec<String> = (0..ds.feature_dim())
        .map(|i| format!("f{i}"))
        .chain((0..ds.target_dim()).map(|i| format!("t{i}")))
        .collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for i in 0..ds.num_samples() {
        let cells: Vec<String> =
            ds.x.row(i)
                .iter()
                .chain(ds.y.row(i))
                .map(|v| v.to_string())
                .collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Loads a header-plus-rows CSV where every column is a feature. A file
/// with only a header yields `None` alongside the column count.
pub fn load_features_csv(path: &Path) -> Result<(Option<FeatureMatrix>, usize)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::format(path, "empty file"))?;
    let d = header.split(',').count();
    let mut x = Vec::new();
    let mut n = 0;
    for (idx, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != d {
            return Err(Error::format(
                path,
                format!("row {}: expected {d} values, got {}", idx + 1, cells.len()),
            ));
        }
        for cell in cells {
            x.push(cell.trim().parse::<f64>().map_err(|e| {
                Error::format(path, format!("row {}: bad number '{cell}': {e}", idx + 1))
            })?);
        }
        n += 1;
    }
    if n == 0 {
        return Ok((None, d));
    }
    Ok((Some(FeatureMatrix::new(x, n, d)?), d))
}

/// Writes features as CSV with `f0..` columns at full round-trip
/// precision.
pub fn save_features_csv(x: &FeatureMatrix, path: &Path) -> Result<()> {
    let mut out = String::new();
    let header: Vec<String> = (0..x.cols()).map(|i| format!("f{i}")).collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for i in 0..x.rows() {
        let cells: Vec<String> = x.row(i).iter().map(|v| v.to_string()).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
