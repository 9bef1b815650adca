//! Row-major numeric matrices and the attribution simplex type.
//!
//! All matrices are dense `Vec<f64>` in row-major order. Rows index samples.
//! Constructors validate shape once; accessors can then hand out slices
//! without re-checking.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

fn check_shape(data_len: usize, rows: usize, cols: usize, what: &str) -> Result<()> {
    if rows == 0 || cols == 0 {
        return Err(Error::contract(format!(
            "{what} must be non-empty, got {rows}x{cols}"
        )));
    }
    if data_len != rows * cols {
        return Err(Error::DimensionMismatch {
            expected: rows * cols,
            actual: data_len,
            context: format!("{what} backing buffer for {rows}x{cols}"),
        });
    }
    Ok(())
}

macro_rules! matrix_type {
    ($(#[$doc:meta])* $name:ident, $what:literal) => {
        $(#[$doc])*
        #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
        pub struct $name {
            data: Vec<f64>,
            rows: usize,
            cols: usize,
        }

        impl $name {
            /// Wraps a row-major buffer; `data.len()` must equal `rows * cols`
            /// and both dimensions must be positive.
            pub fn new(data: Vec<f64>, rows: usize, cols: usize) -> Result<Self> {
                check_shape(data.len(), rows, cols, $what)?;
                Ok(Self { data, rows, cols })
            }

            /// Builds a matrix row by row; all rows must share one length.
            pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
                if rows.is_empty() {
                    return Err(Error::contract(concat!($what, " needs at least one row")));
                }
                let cols = rows[0].len();
                let mut data = Vec::with_capacity(rows.len() * cols);
                for (i, row) in rows.iter().enumerate() {
                    if row.len() != cols {
                        return Err(Error::DimensionMismatch {
                            expected: cols,
                            actual: row.len(),
                            context: format!(concat!($what, " row {}"), i),
                        });
                    }
                    data.extend_from_slice(row);
                }
                Self::new(data, rows.len(), cols)
            }

            pub fn rows(&self) -> usize {
                self.rows
            }

            pub fn cols(&self) -> usize {
                self.cols
            }

            /// Row `i` as a slice of length `cols`.
            pub fn row(&self, i: usize) -> &[f64] {
                &self.data[i * self.cols..(i + 1) * self.cols]
            }

            pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
                &mut self.data[i * self.cols..(i + 1) * self.cols]
            }

            /// The full row-major buffer.
            pub fn as_slice(&self) -> &[f64] {
                &self.data
            }

            pub fn into_vec(self) -> Vec<f64> {
                self.data
            }

            /// Copies out the rows at `indices` (repeats allowed), in order.
            pub fn gather_rows(&self, indices: &[usize]) -> Result<Self> {
                if indices.is_empty() {
                    return Err(Error::contract(concat!(
                        $what,
                        " row selection must be non-empty"
                    )));
                }
                let mut data = Vec::with_capacity(indices.len() * self.cols);
                for &i in indices {
                    if i >= self.rows {
                        return Err(Error::contract(format!(
                            concat!($what, " row index {} out of range (rows = {})"),
                            i, self.rows
                        )));
                    }
                    data.extend_from_slice(self.row(i));
                }
                Self::new(data, indices.len(), self.cols)
            }
        }
    };
}

matrix_type!(
    /// Input samples: one row per sample, one column per feature.
    FeatureMatrix,
    "feature matrix"
);
matrix_type!(
    /// Supervision targets: one row per sample, one column per output.
    TargetMatrix,
    "target matrix"
);
matrix_type!(
    /// Model outputs: one row per sample, one column per output.
    PredictionMatrix,
    "prediction matrix"
);

/// A per-feature importance distribution: non-negative, sums to 1.
///
/// The invariant is enforced at construction within `TOLERANCE` and the sum
/// is then exactly renormalized, so downstream code may rely on it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct AttributionVector(Vec<f64>);

impl AttributionVector {
    /// Max allowed drift of the sum from 1 before construction fails.
    pub const TOLERANCE: f64 = 1e-6;

    /// Validates non-negativity and unit sum (within `TOLERANCE`), then
    /// divides by the exact sum so the stored values sum to 1 as closely as
    /// floating point allows.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::contract("attribution vector must be non-empty"));
        }
        let mut sum = 0.0;
        for (i, &v) in values.iter().enumerate() {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::contract(format!(
                    "attribution value at index {i} must be finite and non-negative, got {v}"
                )));
            }
            sum += v;
        }
        if (sum - 1.0).abs() > Self::TOLERANCE {
            return Err(Error::contract(format!(
                "attribution values must sum to 1 within {} (sum = {sum})",
                Self::TOLERANCE
            )));
        }
        let mut values = values;
        if sum != 1.0 {
            for v in &mut values {
                *v /= sum;
            }
        }
        Ok(Self(values))
    }

    /// Uniform distribution over `p` features.
    pub fn uniform(p: usize) -> Result<Self> {
        if p == 0 {
            return Err(Error::contract("attribution vector must be non-empty"));
        }
        Ok(Self(vec![1.0 / p as f64; p]))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl std::ops::Deref for AttributionVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for AttributionVector {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<AttributionVector> for Vec<f64> {
    fn from(a: AttributionVector) -> Vec<f64> {
        a.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_empty_and_mismatched_shapes() {
        assert!(FeatureMatrix::new(vec![], 0, 0).is_err());
        assert!(FeatureMatrix::new(vec![1.0, 2.0, 3.0], 2, 2).is_err());
        assert!(FeatureMatrix::new(vec![1.0, 2.0], 1, 0).is_err());
        assert!(FeatureMatrix::from_rows(&[]).is_err());
        assert!(FeatureMatrix::from_rows(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn row_access_is_row_major() {
        let m = FeatureMatrix::new(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 2, 3).unwrap();
        assert_eq!(m.rows(), 2);
        assert_eq!(m.cols(), 3);
        assert_eq!(m.row(0), &[1.0, 2.0, 3.0]);
        assert_eq!(m.row(1), &[4.0, 5.0, 6.0]);
    }

    #[test]
    fn gather_rows_repeats_and_orders() {
        let m = FeatureMatrix::new(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 3, 2).unwrap();
        let g = m.gather_rows(&[2, 0, 2]).unwrap();
        assert_eq!(g.rows(), 3);
        assert_eq!(g.row(0), &[5.0, 6.0]);
        assert_eq!(g.row(1), &[1.0, 2.0]);
        assert_eq!(g.row(2), &[5.0, 6.0]);
        assert!(m.gather_rows(&[3]).is_err());
        assert!(m.gather_rows(&[]).is_err());
    }

    #[test]
    fn attribution_accepts_unit_sum_and_renormalizes_drift() {
        let a = AttributionVector::new(vec![0.25, 0.75]).unwrap();
        assert_eq!(a.as_slice(), &[0.25, 0.75]);

        // Within tolerance: accepted, then renormalized to an exact simplex point.
        let drift = vec![0.5 + 4e-7, 0.5];
        let a = AttributionVector::new(drift).unwrap();
        let sum: f64 = a.iter().sum();
        assert!((sum - 1.0).abs() < 1e-15);
    }

    #[test]
    fn attribution_rejects_bad_inputs() {
        assert!(AttributionVector::new(vec![]).is_err());
        assert!(AttributionVector::new(vec![0.5, 0.6]).is_err());
        assert!(AttributionVector::new(vec![-0.1, 1.1]).is_err());
        assert!(AttributionVector::new(vec![f64::NAN, 1.0]).is_err());
        assert!(AttributionVector::new(vec![0.3, 0.3]).is_err());
    }

    #[test]
    fn uniform_attribution() {
        let a = AttributionVector::uniform(4).unwrap();
        assert_eq!(a.as_slice(), &[0.25; 4]);
        assert!(AttributionVector::uniform(0).is_err());
    }

    #[test]
    fn attribution_serde_round_trip() {
        let a = AttributionVector::new(vec![0.2, 0.3, 0.5]).unwrap();
        let json = serde_json::to_string(&a).unwrap();
        assert_eq!(json, "[0.2,0.3,0.5]");
        let back: AttributionVector = serde_json::from_str(&json).unwrap();
        assert_eq!(back, a);
        // Deserializing a non-simplex vector must fail.
        assert!(serde_json::from_str::<AttributionVector>("[0.5,0.6]").is_err());
    }
}
