//! Joint fine-tuning of the combined classifier and a residual adapter.
//!
//! The objective is `L_s + lambda * L_reg`:
//!
//! * `L_s` is the mean cross-entropy of labeled source samples. By default
//!   its softmax runs over the seen columns only, so novel columns receive no
//!   supervised gradient.
//! * `L_reg = sum_c pbar_c ln pbar_c`, where `pbar` is the mean predicted
//!   distribution over a batch of target samples. Minimizing it maximizes
//!   the entropy of `pbar`, spreading target predictions over all classes.
//!
//! Features pass through an adapter before the classifier. The
//! linear-residual adapter computes `normalize(z + A z)` with `A` starting at
//! zero, so an untrained adapter leaves the embeddings as they are.
//! Gradients are computed analytically; [`gradient_check`] compares them
//! against central finite differences.

use std::fs;
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{AdapterKind, DiscoveryConfig};
use crate::data::EmbeddingSet;
use crate::error::{Error, Result};
use crate::io::save_embeddings;
use crate::linalg;
use crate::prototypes::PrototypeBank;

/// Step used by [`gradient_check`].
pub const FD_STEP: f64 = 1e-5;

/// Denominator floor of the relative error in [`gradient_check`], so that
/// entries whose true gradient is ~0 are judged on absolute error.
pub const FD_REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "AdapterRepr", into = "AdapterRepr")]
pub struct Adapter {
    kind: AdapterKind,
    /// `d x d` for linear-residual; `0 x 0` for none.
    weights: Array2<f64>,
}

#[derive(Serialize, Deserialize)]
struct AdapterRepr {
    kind: AdapterKind,
    weights: Vec<Vec<f64>>,
}

impl From<Adapter> for AdapterRepr {
    fn from(a: Adapter) -> Self {
        AdapterRepr { kind: a.kind, weights: a.weights.outer_iter().map(|r| r.to_vec()).collect() }
    }
}

impl TryFrom<AdapterRepr> for Adapter {
    type Error = Error;

    fn try_from(r: AdapterRepr) -> Result<Self> {
        let n = r.weights.len();
        if r.weights.iter().any(|row| row.len() != n) {
            return Err(Error::Shape("adapter weights must be square".into()));
        }
        if r.kind == AdapterKind::None && n != 0 {
            return Err(Error::Shape("identity adapter carries no weights".into()));
        }
        let weights = Array2::from_shape_vec((n, n), r.weights.into_iter().flatten().collect())
            .map_err(|e| Error::Shape(e.to_string()))?;
        Ok(Adapter { kind: r.kind, weights })
    }
}

impl Adapter {
    pub fn new(kind: AdapterKind, dim: usize) -> Self {
        let weights = match kind {
            AdapterKind::None => Array2::zeros((0, 0)),
            AdapterKind::LinearResidual => Array2::zeros((dim, dim)),
        };
        Self { kind, weights }
    }

    pub fn kind(&self) -> AdapterKind {
        self.kind
    }

    pub fn weights(&self) -> ArrayView2<'_, f64> {
        self.weights.view()
    }

    pub fn set_weights(&mut self, weights: Array2<f64>) -> Result<()> {
        if weights.raw_dim() != self.weights.raw_dim() {
            return Err(Error::Shape("adapter weight shape mismatch".into()));
        }
        self.weights = weights;
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.len()
    }

    /// Adapted, unit-norm features for each row of `z`.
    pub fn apply(&self, z: ArrayView2<'_, f64>) -> Array2<f64> {
        self.forward(z).0
    }

    /// Adapted features and the pre-normalization norms `||z + A z||`.
    fn forward(&self, z: ArrayView2<'_, f64>) -> (Array2<f64>, Array1<f64>) {
        match self.kind {
            AdapterKind::None => (z.to_owned(), Array1::ones(z.nrows())),
            AdapterKind::LinearResidual => {
                let mut h = z.to_owned() + z.dot(&self.weights.t());
                let norms: Array1<f64> = h.outer_iter().map(linalg::norm).collect();
                for (mut row, &n) in h.outer_iter_mut().zip(&norms) {
                    row /= n;
                }
                (h, norms)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub lr_head: f64,
    pub lr_adapter: f64,
    pub step: usize,
}

/// Adapter, combined classifier and the loss hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscoveryModel {
    pub adapter: Adapter,
    /// Columns `0..seen_count` are seen classes; the rest are discovered.
    pub classifier: PrototypeBank,
    pub seen_count: usize,
    pub temperature: f64,
    pub lambda: f64,
    pub supervised_full_softmax: bool,
    pub optimizer: OptimizerState,
}

/// Gradients of the objective. `adapter` is `0 x 0` for the identity adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub classifier: Array2<f64>,
    pub adapter: Array2<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub supervised: f64,
    pub regularizer: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub step: usize,
    #[serde(rename = "L_s")]
    pub supervised: f64,
    #[serde(rename = "L_reg")]
    pub regularizer: f64,
    pub total: f64,
}

impl DiscoveryModel {
    pub fn new(classifier: PrototypeBank, seen_count: usize, config: &DiscoveryConfig) -> Result<Self> {
        if seen_count == 0 || seen_count > classifier.count() {
            return Err(Error::InvalidArgument(format!(
                "seen_count {seen_count} is incompatible with {} classifier columns",
                classifier.count()
            )));
        }
        Ok(Self {
            adapter: Adapter::new(config.adapter_kind, classifier.dim()),
            classifier,
            seen_count,
            temperature: config.temperature,
            lambda: config.lambda,
            supervised_full_softmax: config.supervised_full_softmax,
            optimizer: OptimizerState { lr_head: config.lr_head, lr_adapter: config.lr_adapter, step: 0 },
        })
    }

    pub fn class_count(&self) -> usize {
        self.classifier.count()
    }

    pub fn dim(&self) -> usize {
        self.classifier.dim()
    }

    fn check_dim(&self, set: &EmbeddingSet) -> Result<()> {
        if set.dim() != self.dim() {
            return Err(Error::Shape(format!("embedding dim {} vs model dim {}", set.dim(), self.dim())));
        }
        Ok(())
    }

    fn logits(&self, u: ArrayView2<'_, f64>) -> Array2<f64> {
        u.dot(&self.classifier.weights().t()) / self.temperature
    }

    /// `softmax(W^T a(z) / temperature)` for every row; `n x |W|`.
    pub fn predict(&self, batch: &EmbeddingSet) -> Result<Array2<f64>> {
        self.check_dim(batch)?;
        Ok(self.predict_matrix(batch.to_f64().view()))
    }

    pub fn predict_matrix(&self, z: ArrayView2<'_, f64>) -> Array2<f64> {
        let u = self.adapter.apply(z);
        linalg::softmax_rows(&self.logits(u.view()))
    }

    /// Mean negative log-likelihood of the source labels.
    pub fn loss_supervised(&self, batch: &EmbeddingSet) -> Result<f64> {
        self.check_dim(batch)?;
        let labels = batch.require_labels("supervised batch")?;
        self.check_labels(labels)?;
        let (loss, _) = self.supervised_terms(batch.to_f64().view(), labels, false);
        Ok(loss)
    }

    /// `sum_c pbar_c ln pbar_c` of the batch-mean prediction.
    pub fn loss_reg(&self, batch: &EmbeddingSet) -> Result<f64> {
        self.check_dim(batch)?;
        if batch.is_empty() {
            return Err(Error::InvalidArgument("regularizer needs a non-empty batch".into()));
        }
        Ok(self.regularizer_terms(batch.to_f64().view(), false).0)
    }

    fn check_labels(&self, labels: &[u32]) -> Result<()> {
        if let Some(&bad) = labels.iter().find(|&&y| y as usize >= self.seen_count) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} is outside the {} seen classes",
                self.seen_count
            )));
        }
        Ok(())
    }

    /// Supervised loss and, when requested, `(dL/dW, dL/du)` contributions.
    fn supervised_terms(
        &self,
        z: ArrayView2<'_, f64>,
        labels: &[u32],
        with_grad: bool,
    ) -> (f64, Option<(Array2<f64>, Array2<f64>, Array2<f64>, Array1<f64>)>) {
        let (u, norms) = self.adapter.forward(z);
        let n = z.nrows();
        let cols = if self.supervised_full_softmax { self.class_count() } else { self.seen_count };
        let logits = self.logits(u.view());
        let logits = logits.slice(s![.., ..cols]);
        let mut loss = 0.0;
        let mut dlogits = Array2::<f64>::zeros((n, self.class_count()));
        for (i, row) in logits.outer_iter().enumerate() {
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let lse = max + row.mapv(|x| (x - max).exp()).sum().ln();
            let y = labels[i] as usize;
            loss -= row[y] - lse;
            if with_grad {
                for c in 0..cols {
                    let p = (row[c] - lse).exp();
                    dlogits[[i, c]] = (p - f64::from(u8::from(c == y))) / n as f64;
                }
            }
        }
        loss /= n as f64;
        if !with_grad {
            return (loss, None);
        }
        let (dw, du) = self.backprop_logits(dlogits.view(), u.view());
        (loss, Some((dw, du, u, norms)))
    }

    fn regularizer_terms(
        &self,
        z: ArrayView2<'_, f64>,
        with_grad: bool,
    ) -> (f64, Option<(Array2<f64>, Array2<f64>, Array2<f64>, Array1<f64>)>) {
        let (u, norms) = self.adapter.forward(z);
        let n = z.nrows() as f64;
        let probs = linalg::softmax_rows(&self.logits(u.view()));
        let mean = probs.mean_axis(Axis(0)).expect("non-empty batch");
        let loss: f64 = mean.iter().map(|&p| if p > 0.0 { p * p.ln() } else { 0.0 }).sum();
        if !with_grad {
            return (loss, None);
        }
        // dL/dp_ic = (ln pbar_c + 1) / n, then through each row's softmax.
        let g = mean.mapv(|p| (p.max(f64::MIN_POSITIVE).ln() + 1.0) / n);
        let mut dlogits = probs.clone();
        for mut row in dlogits.outer_iter_mut() {
            let inner = row.dot(&g);
            row.zip_mut_with(&g, |p, &gc| *p *= gc - inner);
        }
        let (dw, du) = self.backprop_logits(dlogits.view(), u.view());
        (loss, Some((dw, du, u, norms)))
    }

    /// Given `dL/dlogits` (`n x K`), returns `(dL/dW, dL/du)`.
    fn backprop_logits(&self, dlogits: ArrayView2<'_, f64>, u: ArrayView2<'_, f64>) -> (Array2<f64>, Array2<f64>) {
        let dw = dlogits.t().dot(&u) / self.temperature;
        let du = dlogits.dot(&self.classifier.weights()) / self.temperature;
        (dw, du)
    }

    /// `dL/dA` from `dL/du` through `u = (z + A z) / ||z + A z||`.
    fn adapter_gradient(&self, z: ArrayView2<'_, f64>, u: ArrayView2<'_, f64>, norms: &Array1<f64>, du: &Array2<f64>) -> Array2<f64> {
        if self.adapter.kind == AdapterKind::None {
            return Array2::zeros((0, 0));
        }
        let mut dh = du.clone();
        for (i, mut row) in dh.outer_iter_mut().enumerate() {
            let ui = u.row(i);
            let radial = ui.dot(&row);
            row.scaled_add(-radial, &ui);
            row /= norms[i];
        }
        dh.t().dot(&z)
    }

    /// Objective value and gradients w.r.t. the classifier and adapter, before
    /// any projection. `L_reg` is evaluated on `target`.
    pub fn objective(
        &self,
        source: ArrayView2<'_, f64>,
        labels: &[u32],
        target: ArrayView2<'_, f64>,
    ) -> (LossBreakdown, Gradients) {
        let (ls, sup) = self.supervised_terms(source, labels, true);
        let (dw_s, du_s, u_s, n_s) = sup.expect("gradients requested");
        let mut grad_w = dw_s;
        let mut grad_a = self.adapter_gradient(source, u_s.view(), &n_s, &du_s);

        let (lreg, reg) = self.regularizer_terms(target, self.lambda != 0.0);
        if let Some((dw_t, du_t, u_t, n_t)) = reg {
            grad_w.scaled_add(self.lambda, &dw_t);
            let ga = self.adapter_gradient(target, u_t.view(), &n_t, &du_t);
            if !ga.is_empty() {
                grad_a.scaled_add(self.lambda, &ga);
            }
        }
        let losses = LossBreakdown { supervised: ls, regularizer: lreg, total: ls + self.lambda * lreg };
        (losses, Gradients { classifier: grad_w, adapter: grad_a })
    }

    /// One SGD step followed by renormalization of every classifier column
    /// that moved.
    pub fn apply_gradients(&mut self, grads: &Gradients) {
        let lr = self.optimizer.lr_head;
        let w = self.classifier.weights_mut();
        for (mut col, g) in w.outer_iter_mut().zip(grads.classifier.outer_iter()) {
            if g.iter().all(|&x| x == 0.0) {
                continue;
            }
            col.scaled_add(-lr, &g);
            let n = linalg::norm(col.view());
            col /= n;
        }
        if !grads.adapter.is_empty() {
            self.adapter.weights.scaled_add(-self.optimizer.lr_adapter, &grads.adapter);
        }
        self.optimizer.step += 1;
    }

    /// Classifier rows as CEF (`<stem>.cef`) plus the full-precision model as
    /// a JSON sidecar (`<stem>.json`).
    pub fn save_checkpoint(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        save_embeddings(&self.classifier.to_embedding_set()?, dir.join(format!("{stem}.cef")))?;
        let path = dir.join(format!("{stem}.json"));
        fs::write(&path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load_checkpoint(dir: impl AsRef<Path>, stem: &str) -> Result<Self> {
        let path = dir.as_ref().join(format!("{stem}.json"));
        let text = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_slice(&text)?)
    }
}

/// Cycles through `0..n` in a freshly shuffled order each epoch.
struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
}

impl BatchSampler {
    fn new(n: usize) -> Self {
        Self { order: (0..n).collect(), cursor: n }
    }

    fn next_batch(&mut self, size: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.cursor == self.order.len() {
                self.order.shuffle(rng);
                self.cursor = 0;
            }
            let take = (size - out.len()).min(self.order.len() - self.cursor);
            out.extend_from_slice(&self.order[self.cursor..self.cursor + take]);
            self.cursor += take;
        }
        out
    }
}

/// Runs `config.iterations` SGD steps on `L_s + lambda L_reg`, drawing a
/// source and a target mini-batch of `config.batch_size` each step.
pub fn finetune(
    model: &DiscoveryModel,
    source: &EmbeddingSet,
    target: &EmbeddingSet,
    config: &DiscoveryConfig,
) -> Result<(DiscoveryModel, Vec<TrainLogEntry>)> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::InvalidArgument("fine-tuning needs non-empty source and target".into()));
    }
    model.check_dim(source)?;
    model.check_dim(target)?;
    let labels = source.require_labels("source")?;
    model.check_labels(labels)?;

    let mut model = model.clone();
    model.optimizer.lr_head = config.lr_head;
    model.optimizer.lr_adapter = config.lr_adapter;
    let zs = source.to_f64();
    let zt = target.to_f64();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut src_sampler = BatchSampler::new(source.count());
    let mut tgt_sampler = BatchSampler::new(target.count());
    let mut log = Vec::with_capacity(config.iterations);

    for _ in 0..config.iterations {
        let si = src_sampler.next_batch(config.batch_size, &mut rng);
        let ti = tgt_sampler.next_batch(config.batch_size, &mut rng);
        let batch_z = zs.select(Axis(0), &si);
        let batch_y: Vec<u32> = si.iter().map(|&i| labels[i]).collect();
        let losses;
        let grads;
        if config.reg_full_target {
            (losses, grads) = model.objective(batch_z.view(), &batch_y, zt.view());
        } else {
            let tz = zt.select(Axis(0), &ti);
            (losses, grads) = model.objective(batch_z.view(), &batch_y, tz.view());
        }
        model.apply_gradients(&grads);
        log.push(TrainLogEntry {
            step: model.optimizer.step,
            supervised: losses.supervised,
            regularizer: losses.regularizer,
            total: losses.total,
        });
    }
    Ok((model, log))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientCheckReport {
    /// Max relative error over every parameter for `L_s`.
    pub supervised: f64,
    /// Max relative error over every parameter for `L_reg`.
    pub regularizer: f64,
    pub parameters: usize,
}

impl GradientCheckReport {
    pub fn max_relative_error(&self) -> f64 {
        self.supervised.max(self.regularizer)
    }
}

/// Compares analytic gradients of `L_s` and `L_reg` with central finite
/// differences (step [`FD_STEP`]) on every classifier and adapter weight.
/// The parameters are perturbed without renormalization.
pub fn gradient_check(
    model: &DiscoveryModel,
    batch_s: &EmbeddingSet,
    batch_t: &EmbeddingSet,
) -> Result<GradientCheckReport> {
    model.check_dim(batch_s)?;
    model.check_dim(batch_t)?;
    let labels = batch_s.require_labels("source batch")?;
    model.check_labels(labels)?;
    let zs = batch_s.to_f64();
    let zt = batch_t.to_f64();

    let mut sup_only = model.clone();
    sup_only.lambda = 0.0;
    let (_, g_sup) = sup_only.objective(zs.view(), labels, zt.view());
    let g_reg = {
        let (_, reg) = model.regularizer_terms(zt.view(), true);
        let (dw, du, u, norms) = reg.expect("gradients requested");
        Gradients { adapter: model.adapter_gradient(zt.view(), u.view(), &norms, &du), classifier: dw }
    };

    let sup_loss = |m: &DiscoveryModel| m.supervised_terms(zs.view(), labels, false).0;
    let reg_loss = |m: &DiscoveryModel| m.regularizer_terms(zt.view(), false).0;

    let supervised = max_rel_error(model, &g_sup, sup_loss);
    let regularizer = max_rel_error(model, &g_reg, reg_loss);
    Ok(GradientCheckReport {
        supervised,
        regularizer,
        parameters: model.classifier.weights().len() + model.adapter.parameter_count(),
    })
}

fn max_rel_error(model: &DiscoveryModel, analytic: &Gradients, loss: impl Fn(&DiscoveryModel) -> f64) -> f64 {
    let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(FD_REL_FLOOR);
    let mut worst = 0.0f64;
    let mut probe = model.clone();
    for idx in ndarray::indices(model.classifier.weights().raw_dim()) {
        let orig = probe.classifier.weights()[idx];
        probe.classifier.weights_mut()[idx] = orig + FD_STEP;
        let up = loss(&probe);
        probe.classifier.weights_mut()[idx] = orig - FD_STEP;
        let down = loss(&probe);
        probe.classifier.weights_mut()[idx] = orig;
        worst = worst.max(rel(analytic.classifier[idx], (up - down) / (2.0 * FD_STEP)));
    }
    for idx in ndarray::indices(model.adapter.weights.raw_dim()) {
        let orig = probe.adapter.weights[idx];
        probe.adapter.weights[idx] = orig + FD_STEP;
        let up = loss(&probe);
        probe.adapter.weights[idx] = orig - FD_STEP;
        let down = loss(&probe);
        probe.adapter.weights[idx] = orig;
        worst = worst.max(rel(analytic.adapter[idx], (up - down) / (2.0 * FD_STEP)));
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prototypes::BankKind;
    use ndarray::array;

    fn model_with(weights: Array2<f64>, seen: usize, kind: AdapterKind) -> DiscoveryModel {
        let cfg = DiscoveryConfig { adapter_kind: kind, ..Default::default() };
        let bank = PrototypeBank::from_rows(BankKind::Combined, weights).unwrap();
        DiscoveryModel::new(bank, seen, &cfg).unwrap()
    }

    #[test]
    fn self_similarity_wins() {
        let mut m = model_with(array![[1.0, 0.0], [0.6, 0.8], [0.0, 1.0]], 3, AdapterKind::None);
        m.temperature = 0.01;
        let z = EmbeddingSet::new(array![[0.6f32, 0.8]], None).unwrap();
        let p = m.predict(&z).unwrap();
        assert_eq!(linalg::argmax(p.row(0)), 1);
    }

    #[test]
    fn identical_columns_tie() {
        let m = model_with(array![[1.0, 0.0], [0.0, 1.0], [0.0, 1.0]], 1, AdapterKind::LinearResidual);
        let z = EmbeddingSet::new(array![[0.3f32, 0.7], [0.9, -0.1]], None).unwrap();
        let p = m.predict(&z).unwrap();
        for row in p.outer_iter() {
            assert!((row[1] - row[2]).abs() < 1e-9);
            assert!((row.sum() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn supervised_loss_cases() {
        // Perfect prediction.
        let mut m = model_with(array![[1.0, 0.0], [0.0, 1.0]], 2, AdapterKind::None);
        m.temperature = 1e-3;
        let s = EmbeddingSet::new(array![[1.0f32, 0.0]], Some(vec![0])).unwrap();
        assert_eq!(m.loss_supervised(&s).unwrap(), 0.0);

        // Uniform prediction over C identical columns.
        let m = model_with(array![[1.0, 0.0], [1.0, 0.0], [1.0, 0.0]], 3, AdapterKind::None);
        let s = EmbeddingSet::new(array![[0.0f32, 1.0]], Some(vec![2])).unwrap();
        assert!((m.loss_supervised(&s).unwrap() - 3f64.ln()).abs() < 1e-12);

        // Mean reduction.
        let m = model_with(array![[1.0, 0.0], [0.0, 1.0]], 2, AdapterKind::None);
        let a = EmbeddingSet::new(array![[0.6f32, 0.8]], Some(vec![0])).unwrap();
        let b = EmbeddingSet::new(array![[0.8f32, 0.6]], Some(vec![1])).unwrap();
        let both = a.concat(&b).unwrap();
        let mean = (m.loss_supervised(&a).unwrap() + m.loss_supervised(&b).unwrap()) / 2.0;
        assert!((m.loss_supervised(&both).unwrap() - mean).abs() < 1e-12);
    }

    #[test]
    fn supervised_label_range() {
        let m = model_with(array![[1.0, 0.0], [0.0, 1.0]], 1, AdapterKind::None);
        let s = EmbeddingSet::new(array![[1.0f32, 0.0]], Some(vec![1])).unwrap();
        assert!(m.loss_supervised(&s).is_err());
    }

    #[test]
    fn regularizer_cases() {
        // Uniform mean prediction: identical columns.
        let m = model_with(array![[1.0, 0.0], [1.0, 0.0], [1.0, 0.0], [1.0, 0.0]], 4, AdapterKind::None);
        let z = EmbeddingSet::new(array![[0.6f32, 0.8]], None).unwrap();
        assert!((m.loss_reg(&z).unwrap() + 4f64.ln()).abs() < 1e-12);

        // One-hot rows averaging to (0.5, 0.5), and a one-hot mean.
        let mut m = model_with(array![[1.0, 0.0], [0.0, 1.0]], 2, AdapterKind::None);
        m.temperature = 1e-4;
        let z = EmbeddingSet::new(array![[1.0f32, 0.0], [0.0, 1.0]], None).unwrap();
        assert!((m.loss_reg(&z).unwrap() + 2f64.ln()).abs() < 1e-12);
        let z = EmbeddingSet::new(array![[1.0f32, 0.0]], None).unwrap();
        assert_eq!(m.loss_reg(&z).unwrap(), 0.0);

        assert!(m.loss_reg(&EmbeddingSet::empty(2, false).unwrap()).is_err());
    }

    #[test]
    fn zero_lambda_means_zero_regularizer_gradient() {
        let mut m = model_with(array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], 2, AdapterKind::LinearResidual);
        m.lambda = 0.0;
        let zs = array![[0.6, 0.8, 0.0], [0.0, 0.6, 0.8]];
        let zt = array![[0.0, 0.0, 1.0]];
        let (_, g) = m.objective(zs.view(), &[0, 1], zt.view());
        assert!(g.classifier.row(2).iter().all(|&x| x == 0.0));
        let (_, sup) = m.supervised_terms(zs.view(), &[0, 1], true);
        assert_eq!(g.classifier, sup.unwrap().0);
    }

    #[test]
    fn identity_adapter_has_no_gradient_block() {
        let m = model_with(array![[1.0, 0.0], [0.0, 1.0]], 2, AdapterKind::None);
        let s = EmbeddingSet::new(array![[1.0f32, 0.0]], Some(vec![0])).unwrap();
        let (_, g) = m.objective(s.to_f64().view(), &[0], s.to_f64().view());
        assert!(g.adapter.is_empty());
        let report = gradient_check(&m, &s, &s).unwrap();
        assert_eq!(report.parameters, 4);
    }

    #[test]
    fn zero_iterations_is_a_no_op() {
        let m = model_with(array![[1.0, 0.0], [0.0, 1.0], [0.6, 0.8]], 2, AdapterKind::LinearResidual);
        let s = EmbeddingSet::new(array![[1.0f32, 0.0], [0.0, 1.0]], Some(vec![0, 1])).unwrap();
        let cfg = DiscoveryConfig { iterations: 0, ..Default::default() };
        let (out, log) = finetune(&m, &s, &s, &cfg).unwrap();
        assert_eq!(out, m);
        assert!(log.is_empty());
    }

    #[test]
    fn empty_sets_rejected() {
        let m = model_with(array![[1.0, 0.0], [0.0, 1.0]], 2, AdapterKind::None);
        let s = EmbeddingSet::new(array![[1.0f32, 0.0]], Some(vec![0])).unwrap();
        let empty = EmbeddingSet::empty(2, false).unwrap();
        assert!(finetune(&m, &s, &empty, &DiscoveryConfig::default()).is_err());
    }

    #[test]
    fn sampler_covers_each_epoch() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = BatchSampler::new(5);
        let mut a = s.next_batch(3, &mut rng);
        a.extend(s.next_batch(2, &mut rng));
        a.sort_unstable();
        assert_eq!(a, vec![0, 1, 2, 3, 4]);
        assert_eq!(s.next_batch(7, &mut rng).len(), 7);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut m = model_with(array![[1.0, 0.0], [0.0, 1.0], [0.6, 0.8]], 2, AdapterKind::LinearResidual);
        m.adapter.weights[[0, 1]] = 0.125;
        let dir = tempfile::tempdir().unwrap();
        m.save_checkpoint(dir.path(), "model").unwrap();
        let back = DiscoveryModel::load_checkpoint(dir.path(), "model").unwrap();
        assert_eq!(back, m);
        assert!(dir.path().join("model.cef").exists());
    }
}
