//! Seen accuracy, Hungarian-matched unseen accuracy and the H-score.
//!
//! Seen classes keep their identity: a seen-truth sample counts as correct
//! only if it gets exactly its own id. Discovered classes have arbitrary ids,
//! so unseen accuracy first matches discovered ids to unseen truth classes
//! one-to-one, maximizing agreement, and then counts agreements. A seen id
//! predicted for an unseen-truth sample is always wrong.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::assignment::solve_max_assignment;
use crate::data::{ClassCatalog, PredictionSet};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub total: usize,
    pub hits: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `None` when the target has no seen-class samples.
    pub seen_accuracy: Option<f64>,
    /// `None` when the target has no unseen-class samples (closed or partial splits).
    pub unseen_accuracy: Option<f64>,
    /// Defined only when both accuracies are.
    pub h_score: Option<f64>,
    /// Distinct predicted ids at or above `seen_count`.
    pub discovered_class_count: usize,
    /// `[predicted_id, truth_id]` pairs chosen by the Hungarian matching.
    pub hungarian_map: Vec<(u32, u32)>,
    /// Per ground-truth class: sample total and hits (matched hits for unseen classes).
    pub per_class: BTreeMap<u32, ClassCounts>,
}

impl EvalReport {
    /// Fraction of all samples counted as hits: exact seen hits plus
    /// Hungarian-matched unseen hits.
    pub fn overall_accuracy(&self) -> f64 {
        let (hits, total) = self
            .per_class
            .values()
            .fold((0, 0), |(h, t), c| (h + c.hits, t + c.total));
        if total == 0 {
            0.0
        } else {
            hits as f64 / total as f64
        }
    }
}

/// `2 s u / (s + u)`, and 0 when `s + u = 0`.
pub fn h_score(seen: f64, unseen: f64) -> f64 {
    if seen + unseen == 0.0 {
        0.0
    } else {
        2.0 * seen * unseen / (seen + unseen)
    }
}

fn check_lengths(pred: &PredictionSet, truth: &[u32]) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!("{} predictions for {} truth labels", pred.len(), truth.len())));
    }
    Ok(())
}

/// Exact-id accuracy over seen-truth samples; `None` if there are none.
pub fn seen_accuracy(pred: &PredictionSet, truth: &[u32], catalog: &ClassCatalog) -> Result<Option<f64>> {
    check_lengths(pred, truth)?;
    let (hits, total) = pred
        .assignments
        .iter()
        .zip(truth)
        .filter(|(_, &t)| catalog.is_seen(t))
        .fold((0usize, 0usize), |(h, n), (&p, &t)| (h + usize::from(p == t), n + 1));
    Ok((total > 0).then(|| hits as f64 / total as f64))
}

/// Hungarian-matched accuracy over unseen-truth samples, with the chosen
/// `(predicted, truth)` pairs.
pub fn unseen_accuracy(pred: &PredictionSet, truth: &[u32], catalog: &ClassCatalog) -> Result<(f64, Vec<(u32, u32)>)> {
    let (acc, map, _) = unseen_matching(pred, truth, catalog)?;
    Ok((acc, map))
}

fn unseen_matching(
    pred: &PredictionSet,
    truth: &[u32],
    catalog: &ClassCatalog,
) -> Result<(f64, Vec<(u32, u32)>, BTreeMap<u32, usize>)> {
    check_lengths(pred, truth)?;
    let samples: Vec<(u32, u32)> = pred
        .assignments
        .iter()
        .zip(truth)
        .filter(|(_, &t)| !catalog.is_seen(t))
        .map(|(&p, &t)| (p, t))
        .collect();
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no unseen-class samples to evaluate".into()));
    }
    let discovered: Vec<u32> = samples
        .iter()
        .map(|&(p, _)| p)
        .filter(|&p| !catalog.is_seen(p))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let classes: Vec<u32> = samples.iter().map(|&(_, t)| t).collect::<BTreeSet<_>>().into_iter().collect();
    let mut hits_per_class: BTreeMap<u32, usize> = classes.iter().map(|&c| (c, 0)).collect();
    if discovered.is_empty() {
        return Ok((0.0, Vec::new(), hits_per_class));
    }

    let row_of: BTreeMap<u32, usize> = discovered.iter().enumerate().map(|(i, &p)| (p, i)).collect();
    let col_of: BTreeMap<u32, usize> = classes.iter().enumerate().map(|(j, &t)| (t, j)).collect();
    let mut contingency = Array2::<f64>::zeros((discovered.len(), classes.len()));
    for &(p, t) in &samples {
        if let Some(&r) = row_of.get(&p) {
            contingency[[r, col_of[&t]]] += 1.0;
        }
    }
    let result = solve_max_assignment(contingency.view())?;
    let mut hits = 0usize;
    let mut map = Vec::with_capacity(result.mapping.len());
    for &(r, c) in &result.mapping {
        let n = contingency[[r, c]] as usize;
        hits += n;
        *hits_per_class.get_mut(&classes[c]).unwrap() += n;
        map.push((discovered[r], classes[c]));
    }
    Ok((hits as f64 / samples.len() as f64, map, hits_per_class))
}

/// All metrics for one prediction set.
pub fn evaluate(pred: &PredictionSet, truth: &[u32], catalog: &ClassCatalog) -> Result<EvalReport> {
    check_lengths(pred, truth)?;
    let seen = seen_accuracy(pred, truth, catalog)?;
    let has_unseen = truth.iter().any(|&t| !catalog.is_seen(t));
    let (unseen, hungarian_map, unseen_hits) = if has_unseen {
        let (acc, map, hits) = unseen_matching(pred, truth, catalog)?;
        (Some(acc), map, hits)
    } else {
        (None, Vec::new(), BTreeMap::new())
    };

    let mut per_class: BTreeMap<u32, ClassCounts> = BTreeMap::new();
    for (&p, &t) in pred.assignments.iter().zip(truth) {
        let entry = per_class.entry(t).or_insert(ClassCounts { total: 0, hits: 0 });
        entry.total += 1;
        if catalog.is_seen(t) && p == t {
            entry.hits += 1;
        }
    }
    for (class, hits) in unseen_hits {
        per_class.get_mut(&class).unwrap().hits = hits;
    }

    let discovered_class_count = pred
        .assignments
        .iter()
        .filter(|&&p| !catalog.is_seen(p))
        .collect::<BTreeSet<_>>()
        .len();
    let h = match (seen, unseen) {
        (Some(s), Some(u)) => Some(h_score(s, u)),
        _ => None,
    };
    Ok(EvalReport {
        seen_accuracy: seen,
        unseen_accuracy: unseen,
        h_score: h,
        discovered_class_count,
        hungarian_map,
        per_class,
    })
}

/// Plain clustering accuracy: clusters matched one-to-one to truth classes
/// maximizing agreement, over all samples and ignoring class semantics.
pub fn clustering_accuracy(clusters: &[usize], truth: &[u32]) -> Result<f64> {
    if clusters.len() != truth.len() {
        return Err(Error::Shape(format!("{} cluster ids for {} labels", clusters.len(), truth.len())));
    }
    if truth.is_empty() {
        return Err(Error::InvalidArgument("no samples to score".into()));
    }
    let k = clusters.iter().max().map_or(0, |&m| m + 1);
    let classes: Vec<u32> = truth.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let col_of: BTreeMap<u32, usize> = classes.iter().enumerate().map(|(j, &t)| (t, j)).collect();
    let mut contingency = Array2::<f64>::zeros((k, classes.len()));
    for (&c, t) in clusters.iter().zip(truth) {
        contingency[[c, col_of[t]]] += 1.0;
    }
    let result = solve_max_assignment(contingency.view())?;
    Ok(result.total_cost / truth.len() as f64)
}
