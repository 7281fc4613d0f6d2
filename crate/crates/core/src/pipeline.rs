//! End-to-end runs: cluster-then-match discovery, the match-then-cluster
//! (SIMPLE) and pure K-means baselines, and target class-count estimation.
//!
//! Discovery is split into stage functions so that a run can resume from any
//! serialized intermediate:
//!
//! ```text
//! cluster_stage  -> (seen bank, target bank)
//! match_stage    -> MatchResult
//! build_model    -> DiscoveryModel (W = [W_seen, W_unseen])
//! finetune       -> DiscoveryModel
//! predict_stage  -> PredictionSet
//! ```

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::{AdapterKind, DiscoveryConfig};
use crate::data::{ClassCatalog, EmbeddingSet, PredictionSet};
use crate::error::{Error, Result};
use crate::evaluation::{clustering_accuracy, evaluate, EvalReport};
use crate::finetune::{finetune, DiscoveryModel, TrainLogEntry};
use crate::kmeans::{kmeans_with_config, normalize_centroids};
use crate::matching::{assemble_classifier, match_prototypes, split_prototypes, MatchResult};
use crate::prototypes::{target_prototypes, train_seen_prototypes, BankKind, PrototypeBank};

/// Bins of the `D` histogram in [`MatchSummary`].
pub const HISTOGRAM_BINS: usize = 50;

/// How `|C_t|` is chosen for a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassCount {
    Known(usize),
    Estimate { k_min: usize, k_max: usize, mode: EstimateMode },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum EstimateMode {
    /// Cluster source and target together and score clustering accuracy on
    /// the labeled source part.
    #[default]
    Union,
    /// Cluster the target alone, run matching, and score the fraction of
    /// source samples whose nearest prototype is matched to their class.
    TargetOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchSummary {
    pub target_prototypes: usize,
    pub matched_prototypes: usize,
    pub unseen_prototypes: usize,
    pub unseen_prototype_indices: Vec<usize>,
    pub class_to_prototypes: Vec<Vec<usize>>,
    /// Counts of `D` entries in equal-width bins over `[0, 1]`.
    pub distribution_histogram: Vec<usize>,
}

impl From<&MatchResult> for MatchSummary {
    fn from(m: &MatchResult) -> Self {
        MatchSummary {
            target_prototypes: m.prototype_count(),
            matched_prototypes: m.matched_prototype_count(),
            unseen_prototypes: m.unseen_prototype_indices.len(),
            unseen_prototype_indices: m.unseen_prototype_indices.clone(),
            class_to_prototypes: m.class_to_prototypes.clone(),
            distribution_histogram: m.distribution_histogram(HISTOGRAM_BINS),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KCandidate {
    pub k: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassCountEstimate {
    pub k: usize,
    pub mode: EstimateMode,
    pub candidates: Vec<KCandidate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub method: String,
    pub config: DiscoveryConfig,
    pub seen_count: usize,
    pub target_class_count: usize,
    pub class_count_estimate: Option<ClassCountEstimate>,
    pub match_summary: Option<MatchSummary>,
    /// SIMPLE only: entropy threshold and how many target samples exceeded it.
    pub entropy_threshold: Option<f64>,
    pub marked_unseen: Option<usize>,
    pub classifier_columns: usize,
    pub final_loss: Option<TrainLogEntry>,
    pub pre_finetune_eval: Option<EvalReport>,
    pub eval: Option<EvalReport>,
    pub timings: Vec<StageTiming>,
}

#[derive(Debug, Clone)]
pub struct DiscoveryOutcome {
    pub predictions: PredictionSet,
    pub report: RunReport,
    pub model: DiscoveryModel,
    pub match_result: Option<MatchResult>,
    pub training_log: Vec<TrainLogEntry>,
}

struct Timer {
    timings: Vec<StageTiming>,
}

impl Timer {
    fn new() -> Self {
        Self { timings: Vec::new() }
    }

    fn run<T>(&mut self, stage: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f().map_err(|e| e.in_stage(stage))?;
        self.timings.push(StageTiming { stage: stage.to_string(), seconds: start.elapsed().as_secs_f64() });
        Ok(out)
    }
}

fn seen_count_of(source: &EmbeddingSet) -> Result<usize> {
    source.require_labels("source")?;
    Ok(source.class_count())
}

/// Seen prototypes from the labeled source and `k` target prototypes.
pub fn cluster_stage(
    source: &EmbeddingSet,
    target: &EmbeddingSet,
    k: usize,
    config: &DiscoveryConfig,
) -> Result<(PrototypeBank, PrototypeBank)> {
    let seen = train_seen_prototypes(source, config)?;
    let target_protos = target_prototypes(target, k, config)?;
    Ok((seen, target_protos))
}

pub fn match_stage(source: &EmbeddingSet, target_protos: &PrototypeBank, config: &DiscoveryConfig) -> Result<MatchResult> {
    match_prototypes(source, target_protos, config.tau)
}

/// `W = [W_seen, W_unseen]` wrapped in a fresh model.
pub fn build_model(
    seen: &PrototypeBank,
    target_protos: &PrototypeBank,
    matched: &MatchResult,
    config: &DiscoveryConfig,
) -> Result<DiscoveryModel> {
    let (_, unseen) = split_prototypes(target_protos, matched.matches.view())?;
    let classifier = assemble_classifier(seen, &unseen)?;
    DiscoveryModel::new(classifier, seen.count(), config)
}

pub fn predict_stage(model: &DiscoveryModel, target: &EmbeddingSet) -> Result<PredictionSet> {
    let probs = model.predict(target)?;
    Ok(PredictionSet::from_probabilities(probs.view()))
}

fn maybe_eval(pred: &PredictionSet, truth: Option<&[u32]>, catalog: &ClassCatalog) -> Result<Option<EvalReport>> {
    truth.map(|t| evaluate(pred, t, catalog)).transpose()
}

/// Cluster-then-match discovery followed by fine-tuning.
///
/// With `truth`, the report carries evaluations before and after
/// fine-tuning. Truth labels never influence training.
pub fn crow_discover(
    source: &EmbeddingSet,
    target: &EmbeddingSet,
    class_count: ClassCount,
    config: &DiscoveryConfig,
    truth: Option<&[u32]>,
) -> Result<DiscoveryOutcome> {
    config.validate()?;
    let seen_count = seen_count_of(source)?;
    if target.is_empty() {
        return Err(Error::InvalidArgument("target set is empty".into()));
    }
    let mut timer = Timer::new();

    let estimate = match class_count {
        ClassCount::Known(_) => None,
        ClassCount::Estimate { k_min, k_max, mode } => Some(timer.run("estimate", || {
            estimate_num_classes(source, target, &(k_min..=k_max).collect::<Vec<_>>(), config, mode)
        })?),
    };
    let k = match class_count {
        ClassCount::Known(k) => k,
        ClassCount::Estimate { .. } => estimate.as_ref().unwrap().k,
    };
    let catalog = ClassCatalog::new(seen_count, Some(k))?;

    let (seen, target_protos) = timer.run("cluster", || cluster_stage(source, target, k, config))?;
    let matched = timer.run("match", || match_stage(source, &target_protos, config))?;
    let initial = timer.run("assemble", || build_model(&seen, &target_protos, &matched, config))?;
    let pre_eval = match truth {
        Some(_) => maybe_eval(&predict_stage(&initial, target)?, truth, &catalog).map_err(|e| e.in_stage("eval"))?,
        None => None,
    };
    let (model, log) = timer.run("finetune", || finetune(&initial, source, target, config))?;
    let predictions = timer.run("predict", || predict_stage(&model, target))?;
    let eval = timer.run("eval", || maybe_eval(&predictions, truth, &catalog))?;

    let report = RunReport {
        method: "crow".into(),
        config: config.clone(),
        seen_count,
        target_class_count: k,
        class_count_estimate: estimate,
        match_summary: Some(MatchSummary::from(&matched)),
        entropy_threshold: None,
        marked_unseen: None,
        classifier_columns: model.class_count(),
        final_loss: log.last().copied(),
        pre_finetune_eval: pre_eval,
        eval,
        timings: timer.timings,
    };
    Ok(DiscoveryOutcome { predictions, report, model, match_result: Some(matched), training_log: log })
}

/// Natural-log entropy of a probability vector, `0 ln 0 = 0`.
fn entropy(p: ndarray::ArrayView1<'_, f64>) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

/// Match-then-cluster baseline.
///
/// A source-trained classifier labels the target; samples whose prediction
/// entropy exceeds `entropy_threshold` are treated as unseen and clustered
/// into `|C_t| - |C_s|` groups, whose normalized centroids become the novel
/// classifier columns. The model is then fine-tuned with the same objective
/// as [`crow_discover`].
pub fn simple_baseline(
    source: &EmbeddingSet,
    target: &EmbeddingSet,
    target_class_count: usize,
    config: &DiscoveryConfig,
    entropy_threshold: f64,
    truth: Option<&[u32]>,
) -> Result<DiscoveryOutcome> {
    config.validate()?;
    let seen_count = seen_count_of(source)?;
    if target_class_count <= seen_count {
        return Err(Error::InvalidArgument(format!(
            "target class count {target_class_count} must exceed the {seen_count} seen classes"
        )));
    }
    let max_entropy = (seen_count as f64).ln();
    if !(entropy_threshold > 0.0 && entropy_threshold <= max_entropy) {
        return Err(Error::InvalidArgument(format!(
            "entropy threshold {entropy_threshold} outside (0, ln {seen_count} = {max_entropy}]"
        )));
    }
    let catalog = ClassCatalog::new(seen_count, Some(target_class_count))?;
    let mut timer = Timer::new();

    let seen = timer.run("cluster", || train_seen_prototypes(source, config))?;
    let unseen_idx = timer.run("match", || {
        let frozen_cfg = DiscoveryConfig { adapter_kind: AdapterKind::None, ..config.clone() };
        let frozen = DiscoveryModel::new(seen.clone(), seen_count, &frozen_cfg)?;
        let probs = frozen.predict(target)?;
        Ok(probs
            .outer_iter()
            .enumerate()
            .filter(|(_, p)| entropy(p.view()) > entropy_threshold)
            .map(|(i, _)| i)
            .collect::<Vec<_>>())
    })?;
    let unseen_bank = timer.run("cluster-unseen", || {
        let k = (target_class_count - seen_count).min(unseen_idx.len());
        if k == 0 {
            return Ok(PrototypeBank::empty(BankKind::Unseen, seen.dim()));
        }
        let rejected = target.select(&unseen_idx);
        let result = kmeans_with_config(rejected.to_f64().view(), k, config)?;
        let bank = normalize_centroids(&result)?;
        Ok(bank.select(BankKind::Unseen, &(0..bank.count()).collect::<Vec<_>>()))
    })?;
    let initial = timer.run("assemble", || {
        DiscoveryModel::new(assemble_classifier(&seen, &unseen_bank)?, seen_count, config)
    })?;
    let pre_eval = match truth {
        Some(_) => maybe_eval(&predict_stage(&initial, target)?, truth, &catalog).map_err(|e| e.in_stage("eval"))?,
        None => None,
    };
    let (model, log) = timer.run("finetune", || finetune(&initial, source, target, config))?;
    let predictions = timer.run("predict", || predict_stage(&model, target))?;
    let eval = timer.run("eval", || maybe_eval(&predictions, truth, &catalog))?;

    let report = RunReport {
        method: "simple".into(),
        config: config.clone(),
        seen_count,
        target_class_count,
        class_count_estimate: None,
        match_summary: None,
        entropy_threshold: Some(entropy_threshold),
        marked_unseen: Some(unseen_idx.len()),
        classifier_columns: model.class_count(),
        final_loss: log.last().copied(),
        pre_finetune_eval: pre_eval,
        eval,
        timings: timer.timings,
    };
    Ok(DiscoveryOutcome { predictions, report, model, match_result: None, training_log: log })
}

/// `ln|C_s| * i / 10` for `i = 1..=9`.
pub fn simple_threshold_grid(seen_count: usize) -> Vec<f64> {
    let max = (seen_count as f64).ln();
    (1..=9).map(|i| max * i as f64 / 10.0).collect()
}

/// Runs SIMPLE at every threshold of [`simple_threshold_grid`] and keeps the
/// best H-score against `truth`. This tunes on test labels, so it is an
/// upper bound for the baseline, not a deployable procedure.
pub fn simple_best_over_grid(
    source: &EmbeddingSet,
    target: &EmbeddingSet,
    target_class_count: usize,
    config: &DiscoveryConfig,
    truth: &[u32],
) -> Result<(f64, DiscoveryOutcome)> {
    let seen_count = seen_count_of(source)?;
    let mut best: Option<(f64, f64, DiscoveryOutcome)> = None;
    for threshold in simple_threshold_grid(seen_count) {
        let outcome = simple_baseline(source, target, target_class_count, config, threshold, Some(truth))?;
        let h = outcome.report.eval.as_ref().and_then(|e| e.h_score).unwrap_or(0.0);
        if best.as_ref().is_none_or(|(bh, _, _)| h > *bh) {
            best = Some((h, threshold, outcome));
        }
    }
    let (_, threshold, outcome) = best.expect("grid is non-empty");
    Ok((threshold, outcome))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansBaselineReport {
    pub k: usize,
    pub accuracy: f64,
    pub inertia: f64,
    pub assignments: Vec<usize>,
}

/// K-means on the target alone, scored by Hungarian clustering accuracy
/// over all classes with no seen/unseen semantics.
pub fn kmeans_baseline(
    target: &EmbeddingSet,
    k: usize,
    truth: &[u32],
    config: &DiscoveryConfig,
) -> Result<KMeansBaselineReport> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let result = kmeans_with_config(target.to_f64().view(), k, config)?;
    let accuracy = clustering_accuracy(&result.assignments, truth)?;
    Ok(KMeansBaselineReport { k, accuracy, inertia: result.inertia, assignments: result.assignments })
}

/// Picks `|C_t|` from `k_grid`, maximizing the mode's score; ties go to the
/// smallest `k`.
pub fn estimate_num_classes(
    source: &EmbeddingSet,
    target: &EmbeddingSet,
    k_grid: &[usize],
    config: &DiscoveryConfig,
    mode: EstimateMode,
) -> Result<ClassCountEstimate> {
    if k_grid.is_empty() {
        return Err(Error::InvalidArgument("empty k grid".into()));
    }
    let labels = source.require_labels("source")?;
    let seen_count = source.class_count();
    if let Some(&k) = k_grid.iter().find(|&&k| k < seen_count || k > target.count()) {
        return Err(Error::InvalidArgument(format!(
            "k = {k} outside [{seen_count}, {}]",
            target.count()
        )));
    }
    let mut grid = k_grid.to_vec();
    grid.sort_unstable();
    grid.dedup();

    let union = match mode {
        EstimateMode::Union => Some(source.without_labels().concat(&target.without_labels())?.to_f64()),
        EstimateMode::TargetOnly => None,
    };
    let mut candidates = Vec::with_capacity(grid.len());
    for &k in &grid {
        let score = match &union {
            Some(points) => {
                let result = kmeans_with_config(points.view(), k, config)?;
                clustering_accuracy(&result.assignments[..source.count()], labels)?
            }
            None => {
                let protos = target_prototypes(target, k, config)?;
                let matched = match_prototypes(source, &protos, config.tau)?;
                let z = source.to_f64();
                let hits = z
                    .outer_iter()
                    .zip(labels)
                    .filter(|(row, &y)| matched.matches[[protos.nearest(*row), y as usize]] == 1)
                    .count();
                hits as f64 / source.count() as f64
            }
        };
        candidates.push(KCandidate { k, score });
    }
    let best = candidates
        .iter()
        .fold(&candidates[0], |best, c| if c.score > best.score { c } else { best });
    Ok(ClassCountEstimate { k: best.k, mode, candidates: candidates.clone() })
}

/// Runs only the cluster and match stages, for inspection.
pub fn match_only(
    source: &EmbeddingSet,
    target: &EmbeddingSet,
    k: usize,
    config: &DiscoveryConfig,
) -> Result<(PrototypeBank, PrototypeBank, MatchResult)> {
    config.validate()?;
    let (seen, target_protos) = cluster_stage(source, target, k, config).map_err(|e| e.in_stage("cluster"))?;
    let matched = match_stage(source, &target_protos, config).map_err(|e| e.in_stage("match"))?;
    Ok((seen, target_protos, matched))
}
