//! Cluster-then-match: associate seen classes with target prototypes and
//! keep the unmatched prototypes as novel classes.
//!
//! The matching is deliberately not one-to-one. A seen class whose target
//! samples fall into two clusters matches both prototypes (over-clustering),
//! and two seen classes that share one cluster both match it
//! (under-clustering). A prototype is novel only if no seen class matches it.
//!
//! ```text
//!   counts  Γ[i][j]  = #source samples of class j whose nearest prototype is i
//!   D[.][j]          = softmax(Γ[.][j])          (column-wise)
//!   M[i][j]          = 1  iff  D[i][j] >= tau
//!   unseen           = { i : M[i][.] == 0 }
//! ```

use ndarray::{concatenate, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::EmbeddingSet;
use crate::error::{Error, Result};
use crate::prototypes::{BankKind, PrototypeBank};

/// Co-occurrence counts, distribution and match matrices for one
/// prototype bank against the seen classes. All matrices are
/// `prototypes x seen classes`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MatchRepr", into = "MatchRepr")]
pub struct MatchResult {
    pub cooccurrence: Array2<u64>,
    pub distribution: Array2<f64>,
    pub matches: Array2<u8>,
    pub unseen_prototype_indices: Vec<usize>,
    pub class_to_prototypes: Vec<Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
struct MatchRepr {
    cooccurrence: Vec<Vec<u64>>,
    distribution: Vec<Vec<f64>>,
    matches: Vec<Vec<u8>>,
    unseen_prototype_indices: Vec<usize>,
    class_to_prototypes: Vec<Vec<usize>>,
}

fn nested<T: Clone>(m: &Array2<T>) -> Vec<Vec<T>> {
    m.outer_iter().map(|r| r.to_vec()).collect()
}

fn from_nested<T: Clone>(rows: Vec<Vec<T>>, cols: usize) -> Result<Array2<T>> {
    let n = rows.len();
    if rows.iter().any(|r| r.len() != cols) {
        return Err(Error::Shape("ragged matrix".into()));
    }
    Array2::from_shape_vec((n, cols), rows.into_iter().flatten().collect()).map_err(|e| Error::Shape(e.to_string()))
}

impl From<MatchResult> for MatchRepr {
    fn from(m: MatchResult) -> Self {
        MatchRepr {
            cooccurrence: nested(&m.cooccurrence),
            distribution: nested(&m.distribution),
            matches: nested(&m.matches),
            unseen_prototype_indices: m.unseen_prototype_indices,
            class_to_prototypes: m.class_to_prototypes,
        }
    }
}

impl TryFrom<MatchRepr> for MatchResult {
    type Error = Error;

    fn try_from(r: MatchRepr) -> Result<Self> {
        let cols = r.class_to_prototypes.len();
        Ok(MatchResult {
            cooccurrence: from_nested(r.cooccurrence, cols)?,
            distribution: from_nested(r.distribution, cols)?,
            matches: from_nested(r.matches, cols)?,
            unseen_prototype_indices: r.unseen_prototype_indices,
            class_to_prototypes: r.class_to_prototypes,
        })
    }
}

impl MatchResult {
    pub fn prototype_count(&self) -> usize {
        self.matches.nrows()
    }

    pub fn seen_count(&self) -> usize {
        self.matches.ncols()
    }

    pub fn matched_prototype_count(&self) -> usize {
        self.prototype_count() - self.unseen_prototype_indices.len()
    }

    /// Counts of `D` entries in `bins` equal-width buckets over `[0, 1]`.
    pub fn distribution_histogram(&self, bins: usize) -> Vec<usize> {
        let mut hist = vec![0; bins];
        for &x in &self.distribution {
            let b = ((x * bins as f64) as usize).min(bins - 1);
            hist[b] += 1;
        }
        hist
    }
}

/// Runs every matching stage for a target prototype bank.
pub fn match_prototypes(source: &EmbeddingSet, target_protos: &PrototypeBank, tau: f64) -> Result<MatchResult> {
    let cooccurrence = co_occurrence(source, target_protos)?;
    let distribution = column_softmax(cooccurrence.view());
    let matches = threshold_match(distribution.view(), tau);
    let (class_to_prototypes, unseen_prototype_indices) = split_indices(matches.view());
    Ok(MatchResult { cooccurrence, distribution, matches, unseen_prototype_indices, class_to_prototypes })
}

/// `Γ[i][j]`: source samples of class `j` whose nearest target prototype (by
/// dot product, lowest index on ties) is `i`.
pub fn co_occurrence(source: &EmbeddingSet, target_protos: &PrototypeBank) -> Result<Array2<u64>> {
    let labels = source.require_labels("source")?;
    if source.dim() != target_protos.dim() {
        return Err(Error::Shape(format!(
            "source dim {} vs prototype dim {}",
            source.dim(),
            target_protos.dim()
        )));
    }
    let mut gamma = Array2::<u64>::zeros((target_protos.count(), source.class_count()));
    let z = source.to_f64();
    for (row, &y) in z.outer_iter().zip(labels) {
        gamma[[target_protos.nearest(row), y as usize]] += 1;
    }
    Ok(gamma)
}

/// Column-wise softmax of the raw counts, max-shifted per column.
pub fn column_softmax(gamma: ArrayView2<'_, u64>) -> Array2<f64> {
    let mut d = gamma.mapv(|x| x as f64);
    for mut col in d.axis_iter_mut(Axis(1)) {
        let max = col.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        col.mapv_inplace(|x| (x - max).exp());
        let sum = col.sum();
        col.mapv_inplace(|x| x / sum);
    }
    d
}

/// `M[i][j] = 1` iff `D[i][j] >= tau`.
pub fn threshold_match(distribution: ArrayView2<'_, f64>, tau: f64) -> Array2<u8> {
    distribution.mapv(|x| u8::from(x >= tau))
}

/// Per seen class, the matched prototype rows; and the rows nobody matched,
/// ascending.
pub fn split_indices(matches: ArrayView2<'_, u8>) -> (Vec<Vec<usize>>, Vec<usize>) {
    let class_to_prototypes = matches
        .axis_iter(Axis(1))
        .map(|col| col.iter().enumerate().filter(|&(_, &m)| m == 1).map(|(i, _)| i).collect())
        .collect();
    let unseen = matches
        .outer_iter()
        .enumerate()
        .filter(|(_, row)| row.iter().all(|&m| m == 0))
        .map(|(i, _)| i)
        .collect();
    (class_to_prototypes, unseen)
}

/// Splits `target_protos` by the match matrix: the class-to-prototype map and
/// the bank of unmatched (novel) prototypes in ascending index order.
pub fn split_prototypes(
    target_protos: &PrototypeBank,
    matches: ArrayView2<'_, u8>,
) -> Result<(Vec<Vec<usize>>, PrototypeBank)> {
    if matches.nrows() != target_protos.count() {
        return Err(Error::Shape(format!(
            "match matrix has {} rows for {} prototypes",
            matches.nrows(),
            target_protos.count()
        )));
    }
    let (class_to_prototypes, unseen) = split_indices(matches);
    Ok((class_to_prototypes, target_protos.select(BankKind::Unseen, &unseen)))
}

/// `W = [W_seen, W_unseen]`: seen prototypes first so that column `c < |C_s|`
/// predicts seen class `c`.
pub fn assemble_classifier(seen: &PrototypeBank, unseen: &PrototypeBank) -> Result<PrototypeBank> {
    if seen.dim() != unseen.dim() {
        return Err(Error::Shape(format!("seen dim {} vs unseen dim {}", seen.dim(), unseen.dim())));
    }
    let weights = concatenate(Axis(0), &[seen.weights(), unseen.weights()]).map_err(|e| Error::Shape(e.to_string()))?;
    PrototypeBank::from_unit_rows(BankKind::Combined, weights)
}
