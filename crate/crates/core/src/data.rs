//! Domain types shared across the crate.
//!
//! Class identifiers are dense `u32` values. Seen classes occupy
//! `[0, seen_count)`; classes discovered on the target side occupy
//! `[seen_count, seen_count + discovered)`, so a classifier column index is
//! the class id it predicts.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rows whose norm is already this close to 1 are left untouched, which keeps
/// save/load bitwise lossless for data that was normalized once before.
const RENORM_SLACK: f64 = 1e-6;

/// An `n x d` matrix of unit-norm `f32` embeddings with optional class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    vectors: Array2<f32>,
    labels: Option<Vec<u32>>,
}

impl EmbeddingSet {
    /// Validates the shape, rescales every row to unit L2 norm and rejects
    /// zero or non-finite rows.
    pub fn new(mut vectors: Array2<f32>, labels: Option<Vec<u32>>) -> Result<Self> {
        if vectors.ncols() == 0 {
            return Err(Error::Shape("embedding dimension must be positive".into()));
        }
        if let Some(labels) = &labels {
            if labels.len() != vectors.nrows() {
                return Err(Error::Shape(format!(
                    "{} labels for {} rows",
                    labels.len(),
                    vectors.nrows()
                )));
            }
        }
        for (row, mut v) in vectors.axis_iter_mut(Axis(0)).enumerate() {
            let norm = v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
            if !norm.is_finite() || norm == 0.0 {
                return Err(Error::ZeroRow { row });
            }
            if (norm - 1.0).abs() > RENORM_SLACK {
                v.mapv_inplace(|x| (f64::from(x) / norm) as f32);
            }
        }
        Ok(Self { vectors, labels })
    }

    pub fn from_rows(rows: &[Vec<f32>], labels: Option<Vec<u32>>) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Shape("ragged rows".into()));
        }
        let flat: Vec<f32> = rows.iter().flatten().copied().collect();
        let vectors = Array2::from_shape_vec((rows.len(), dim), flat)
            .map_err(|e| Error::Shape(e.to_string()))?;
        Self::new(vectors, labels)
    }

    /// An empty set of the given dimension.
    pub fn empty(dim: usize, labeled: bool) -> Result<Self> {
        Self::new(Array2::zeros((0, dim)), labeled.then(Vec::new))
    }

    pub fn count(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn vectors(&self) -> ArrayView2<'_, f32> {
        self.vectors.view()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f32> {
        self.vectors.row(i)
    }

    pub fn labels(&self) -> Option<&[u32]> {
        self.labels.as_deref()
    }

    /// Labels, or an error naming `what` when the set is unlabeled.
    pub fn require_labels(&self, what: &str) -> Result<&[u32]> {
        self.labels()
            .ok_or_else(|| Error::InvalidArgument(format!("{what} must be labeled")))
    }

    /// `max_label + 1`, or 0 for unlabeled or empty sets.
    pub fn class_count(&self) -> usize {
        self.labels
            .as_ref()
            .and_then(|l| l.iter().max())
            .map_or(0, |&m| m as usize + 1)
    }

    /// The embeddings widened to `f64`.
    pub fn to_f64(&self) -> Array2<f64> {
        self.vectors.mapv(f64::from)
    }

    pub fn with_labels(&self, labels: Option<Vec<u32>>) -> Result<Self> {
        Self::new(self.vectors.clone(), labels)
    }

    pub fn without_labels(&self) -> Self {
        Self { vectors: self.vectors.clone(), labels: None }
    }

    /// Rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            vectors: self.vectors.select(Axis(0), indices),
            labels: self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect()),
        }
    }

    /// Stacks `self` on top of `other`. Labels survive only if both sides carry them.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        if self.dim() != other.dim() {
            return Err(Error::Shape(format!("dim {} vs {}", self.dim(), other.dim())));
        }
        let vectors = ndarray::concatenate(Axis(0), &[self.vectors.view(), other.vectors.view()])
            .map_err(|e| Error::Shape(e.to_string()))?;
        let labels = match (&self.labels, &other.labels) {
            (Some(a), Some(b)) => Some(a.iter().chain(b).copied().collect()),
            _ => None,
        };
        Ok(Self { vectors, labels })
    }
}

/// Seen and target class counts for one source/target pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCatalog {
    pub seen_count: usize,
    /// Known or estimated `|C_t|`. Partial-set splits may have it below `seen_count`.
    pub target_count: Option<usize>,
}

impl ClassCatalog {
    pub fn new(seen_count: usize, target_count: Option<usize>) -> Result<Self> {
        if seen_count == 0 {
            return Err(Error::InvalidArgument("seen_count must be at least 1".into()));
        }
        Ok(Self { seen_count, target_count })
    }

    pub fn novel_count(&self) -> Option<usize> {
        self.target_count.map(|t| t.saturating_sub(self.seen_count))
    }

    pub fn is_seen(&self, class: u32) -> bool {
        (class as usize) < self.seen_count
    }
}

/// One predicted class id and its max softmax probability per target sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub assignments: Vec<u32>,
    pub confidences: Vec<f64>,
}

impl PredictionSet {
    pub fn len(&self) -> usize {
        self.assignments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignments.is_empty()
    }

    /// Arg-max of each row; ties resolve to the lowest column.
    pub fn from_probabilities(probs: ArrayView2<'_, f64>) -> Self {
        let (assignments, confidences) = probs
            .axis_iter(Axis(0))
            .map(|row| {
                let (best, p) = row.iter().enumerate().fold((0usize, f64::NEG_INFINITY), |acc, (c, &p)| {
                    if p > acc.1 {
                        (c, p)
                    } else {
                        acc
                    }
                });
                (best as u32, p)
            })
            .unzip();
        Self { assignments, confidences }
    }
}
