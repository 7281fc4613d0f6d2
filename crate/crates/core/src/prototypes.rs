//! Prototype banks: seen-class prototypes trained on labeled source
//! embeddings, and target prototypes obtained by clustering.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::DiscoveryConfig;
use crate::data::EmbeddingSet;
use crate::error::{Error, Result};
use crate::kmeans::{kmeans_with_config, normalize_centroids};
use crate::linalg;

/// Tolerance on `| ||p|| - 1 |` for a prototype to count as unit norm.
pub const UNIT_NORM_TOL: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BankKind {
    Seen,
    Target,
    Unseen,
    Combined,
}

/// `count` unit-norm prototypes of dimension `dim`.
///
/// Prototypes double as classifier columns, so they are stored one per row of
/// a `count x dim` matrix: row `c` is the weight vector of class `c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BankRepr", into = "BankRepr")]
pub struct PrototypeBank {
    kind: BankKind,
    weights: Array2<f64>,
}

#[derive(Serialize, Deserialize)]
struct BankRepr {
    kind: BankKind,
    dim: usize,
    prototypes: Vec<Vec<f64>>,
}

impl From<PrototypeBank> for BankRepr {
    fn from(b: PrototypeBank) -> Self {
        BankRepr {
            kind: b.kind,
            dim: b.dim(),
            prototypes: b.weights.outer_iter().map(|r| r.to_vec()).collect(),
        }
    }
}

impl TryFrom<BankRepr> for PrototypeBank {
    type Error = Error;

    fn try_from(r: BankRepr) -> Result<Self> {
        let count = r.prototypes.len();
        if r.prototypes.iter().any(|p| p.len() != r.dim) {
            return Err(Error::Shape("ragged prototype bank".into()));
        }
        let flat = r.prototypes.into_iter().flatten().collect();
        let weights = Array2::from_shape_vec((count, r.dim), flat).map_err(|e| Error::Shape(e.to_string()))?;
        PrototypeBank::from_unit_rows(r.kind, weights)
    }
}

impl PrototypeBank {
    /// Scales each row to unit norm. Fails on a zero or non-finite row.
    pub fn from_rows(kind: BankKind, mut weights: Array2<f64>) -> Result<Self> {
        for (i, mut row) in weights.outer_iter_mut().enumerate() {
            let norm = linalg::norm(row.view());
            if !(norm.is_finite() && norm > 0.0) {
                return Err(Error::ZeroCentroid { cluster: i });
            }
            row.mapv_inplace(|x| x / norm);
        }
        Ok(Self { kind, weights })
    }

    /// Wraps rows that must already be unit norm; no rescaling happens.
    pub fn from_unit_rows(kind: BankKind, weights: Array2<f64>) -> Result<Self> {
        for (i, row) in weights.outer_iter().enumerate() {
            if (linalg::norm(row) - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::InvalidArgument(format!("prototype {i} is not unit norm")));
            }
        }
        if weights.ncols() == 0 {
            return Err(Error::Shape("prototype dimension must be positive".into()));
        }
        Ok(Self { kind, weights })
    }

    pub fn empty(kind: BankKind, dim: usize) -> Self {
        Self { kind, weights: Array2::zeros((0, dim)) }
    }

    pub fn kind(&self) -> BankKind {
        self.kind
    }

    pub fn count(&self) -> usize {
        self.weights.nrows()
    }

    pub fn dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn prototype(&self, i: usize) -> ArrayView1<'_, f64> {
        self.weights.row(i)
    }

    /// The `count x dim` weight matrix.
    pub fn weights(&self) -> ArrayView2<'_, f64> {
        self.weights.view()
    }

    pub(crate) fn weights_mut(&mut self) -> &mut Array2<f64> {
        &mut self.weights
    }

    pub fn select(&self, kind: BankKind, indices: &[usize]) -> Self {
        Self { kind, weights: self.weights.select(Axis(0), indices) }
    }

    /// Index of the prototype with the largest dot product against `z`,
    /// lowest index on ties.
    pub fn nearest(&self, z: ArrayView1<'_, f64>) -> usize {
        linalg::argmax(self.weights.dot(&z).view())
    }

    /// Prototypes as `f32` rows, for writing with the embedding file format.
    pub fn to_embedding_set(&self) -> Result<EmbeddingSet> {
        EmbeddingSet::new(self.weights.mapv(|x| x as f32), None)
    }
}

/// Trains a normalized linear classifier on labeled source embeddings.
///
/// Columns start at the normalized class means and are refined by projected
/// mini-batch SGD on the temperature-scaled softmax cross-entropy, with every
/// column renormalized after each step. If the refined classifier is less
/// accurate on the training data than the class-mean start, the start is
/// returned instead.
pub fn train_seen_prototypes(source: &EmbeddingSet, config: &DiscoveryConfig) -> Result<PrototypeBank> {
    config.validate()?;
    let labels = source.require_labels("source")?;
    let classes = source.class_count();
    if classes < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 seen classes, found {classes}")));
    }
    let z = source.to_f64();
    let init = class_means(z.view(), labels, classes)?;
    let init_acc = training_accuracy(init.weights(), z.view(), labels);

    let mut bank = init.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..source.count()).collect();
    let mut cursor = order.len();
    let batch = config.batch_size.min(order.len());
    for _ in 0..config.iterations {
        if cursor + batch > order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let idx = &order[cursor..cursor + batch];
        cursor += batch;

        let mut grad = Array2::<f64>::zeros(bank.weights.raw_dim());
        for &i in idx {
            let zi = z.row(i);
            let logits = bank.weights.dot(&zi) / config.temperature;
            let p = linalg::softmax(logits.view());
            for c in 0..classes {
                let delta = p[c] - f64::from(u8::from(labels[i] as usize == c));
                grad.row_mut(c).scaled_add(delta / (config.temperature * batch as f64), &zi);
            }
        }
        bank.weights.scaled_add(-config.lr_head, &grad);
        linalg::normalize_rows(&mut bank.weights);
    }

    if training_accuracy(bank.weights(), z.view(), labels) < init_acc {
        return Ok(init);
    }
    Ok(bank)
}

/// Normalized per-class means of `z`; fails on a class with no samples.
pub fn class_means(z: ArrayView2<'_, f64>, labels: &[u32], classes: usize) -> Result<PrototypeBank> {
    let mut sums = Array2::<f64>::zeros((classes, z.ncols()));
    let mut counts = vec![0usize; classes];
    for (row, &y) in z.outer_iter().zip(labels) {
        sums.row_mut(y as usize).scaled_add(1.0, &row);
        counts[y as usize] += 1;
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::EmptyClass { class: c as u32 });
    }
    PrototypeBank::from_rows(BankKind::Seen, sums).map_err(|e| match e {
        Error::ZeroCentroid { cluster } => Error::InvalidArgument(format!("class {cluster} has a zero mean")),
        other => other,
    })
}

fn training_accuracy(weights: ArrayView2<'_, f64>, z: ArrayView2<'_, f64>, labels: &[u32]) -> f64 {
    let scores = z.dot(&weights.t());
    let hits = scores
        .outer_iter()
        .zip(labels)
        .filter(|(row, &y)| linalg::argmax(row.view()) == y as usize)
        .count();
    hits as f64 / labels.len().max(1) as f64
}

/// K-means on the target embeddings with `k` clusters, centroids projected
/// back onto the unit sphere.
pub fn target_prototypes(target: &EmbeddingSet, k: usize, config: &DiscoveryConfig) -> Result<PrototypeBank> {
    let result = kmeans_with_config(target.to_f64().view(), k, config)?;
    normalize_centroids(&result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn orthogonal_source() -> EmbeddingSet {
        EmbeddingSet::new(
            array![[1.0f32, 0.0], [1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]],
            Some(vec![0, 0, 0, 1, 1]),
        )
        .unwrap()
    }

    #[test]
    fn class_mean_init_on_identical_samples() {
        let s = orthogonal_source();
        let bank = class_means(s.to_f64().view(), s.labels().unwrap(), 2).unwrap();
        assert_eq!(bank.weights(), array![[1.0, 0.0], [0.0, 1.0]].view());
    }

    #[test]
    fn orthogonal_classes_stay_put() {
        let s = orthogonal_source();
        let bank = train_seen_prototypes(&s, &DiscoveryConfig::default()).unwrap();
        let expect = [[1.0, 0.0], [0.0, 1.0]];
        for (c, e) in expect.iter().enumerate() {
            let cos = bank.prototype(c)[0] * e[0] + bank.prototype(c)[1] * e[1];
            assert!(cos.clamp(-1.0, 1.0).acos() < 1e-3);
        }
        assert_eq!(training_accuracy(bank.weights(), s.to_f64().view(), s.labels().unwrap()), 1.0);
    }

    #[test]
    fn columns_are_unit_norm() {
        let s = EmbeddingSet::new(
            array![[1.0f32, 0.2, 0.0], [0.9, 0.0, 0.3], [0.0, 1.0, 0.1], [0.1, 0.8, 0.0], [0.0, 0.1, 1.0]],
            Some(vec![0, 0, 1, 1, 2]),
        )
        .unwrap();
        let cfg = DiscoveryConfig { iterations: 50, lr_head: 0.5, batch_size: 2, ..Default::default() };
        let bank = train_seen_prototypes(&s, &cfg).unwrap();
        for row in bank.weights().outer_iter() {
            assert!((linalg::norm(row) - 1.0).abs() < UNIT_NORM_TOL);
        }
    }

    #[test]
    fn missing_class_is_an_error() {
        let s = EmbeddingSet::new(array![[1.0f32, 0.0], [0.0, 1.0]], Some(vec![0, 2])).unwrap();
        assert!(matches!(
            train_seen_prototypes(&s, &DiscoveryConfig::default()),
            Err(Error::EmptyClass { class: 1 })
        ));
    }

    #[test]
    fn single_class_is_an_error() {
        let s = EmbeddingSet::new(array![[1.0f32, 0.0], [0.0, 1.0]], Some(vec![0, 0])).unwrap();
        assert!(train_seen_prototypes(&s, &DiscoveryConfig::default()).is_err());
    }

    #[test]
    fn k_one_gives_normalized_grand_mean() {
        let t = EmbeddingSet::new(array![[1.0f32, 0.0], [0.0, 1.0]], None).unwrap();
        let bank = target_prototypes(&t, 1, &DiscoveryConfig::default()).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((bank.prototype(0)[0] - h).abs() < 1e-12);
        assert!((bank.prototype(0)[1] - h).abs() < 1e-12);
        assert_eq!(bank.kind(), BankKind::Target);
    }

    #[test]
    fn k_equal_n_gives_the_points() {
        let t = EmbeddingSet::new(array![[1.0f32, 0.0], [0.0, 1.0], [0.6, 0.8]], None).unwrap();
        let bank = target_prototypes(&t, 3, &DiscoveryConfig::default()).unwrap();
        let z = t.to_f64();
        for row in z.outer_iter() {
            let j = bank.nearest(row);
            assert!((bank.prototype(j).dot(&row) - 1.0).abs() < 1e-7);
        }
    }

    #[test]
    fn serde_round_trip_is_exact() {
        let bank = PrototypeBank::from_rows(BankKind::Combined, array![[0.3, 0.1], [1.0, 1.0]]).unwrap();
        let text = serde_json::to_string(&bank).unwrap();
        let back: PrototypeBank = serde_json::from_str(&text).unwrap();
        assert_eq!(back, bank);
    }
}
