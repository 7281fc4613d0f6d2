//! Seeded Lloyd's K-means with greedy k-means++ initialization.
//!
//! Distances are squared Euclidean. On unit-norm inputs this orders points
//! exactly like cosine distance; centroids are projected back onto the sphere
//! by [`normalize_centroids`] when they are used as prototypes.

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::DiscoveryConfig;
use crate::data::EmbeddingSet;
use crate::error::{Error, Result};
use crate::linalg::squared_distance;
use crate::prototypes::{BankKind, PrototypeBank};

pub const DEFAULT_MAX_ITER: usize = 300;
pub const DEFAULT_TOL: f64 = 1e-6;
const RESTART_STRIDE: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    /// `k x d` centroids.
    pub centroids: Array2<f64>,
    /// Cluster index of each point, all `< k`. No cluster is empty.
    pub assignments: Vec<usize>,
    /// Sum of squared distances from each point to its assigned centroid.
    pub inertia: f64,
    pub iterations_run: usize,
    /// Inertia after the initial assignment and after every later step.
    pub inertia_history: Vec<f64>,
}

impl KMeansResult {
    pub fn k(&self) -> usize {
        self.centroids.nrows()
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k()];
        for &a in &self.assignments {
            sizes[a] += 1;
        }
        sizes
    }
}

pub fn kmeans_fit(points: &EmbeddingSet, k: usize, seed: u64, max_iter: usize, tol: f64) -> Result<KMeansResult> {
    kmeans_fit_matrix(points.to_f64().view(), k, seed, max_iter, tol)
}

/// K-means on the rows of `points`. Deterministic for a fixed `seed`.
pub fn kmeans_fit_matrix(
    points: ArrayView2<'_, f64>,
    k: usize,
    seed: u64,
    max_iter: usize,
    tol: f64,
) -> Result<KMeansResult> {
    let n = points.nrows();
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if k > n {
        return Err(Error::InvalidArgument(format!("k = {k} exceeds the {n} points")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_plus_plus(points, k, &mut rng);
    let (mut assignments, mut inertia) = assign(points, centroids.view());
    let mut history = vec![inertia];
    let mut iterations_run = 0;

    while iterations_run < max_iter {
        update_centroids(points, &mut centroids, &mut assignments);
        let (next, next_inertia) = assign(points, centroids.view());
        iterations_run += 1;
        let improvement = inertia - next_inertia;
        assignments = next;
        inertia = next_inertia;
        history.push(inertia);
        if improvement < tol && !has_empty(&assignments, k) {
            break;
        }
    }

    if has_empty(&assignments, k) {
        fill_empty_clusters(points, &mut centroids, &mut assignments, false);
        inertia = total_inertia(points, centroids.view(), &assignments);
        history.push(inertia);
    }

    Ok(KMeansResult { centroids, assignments, inertia, iterations_run, inertia_history: history })
}

/// The lowest-inertia result of `restarts` runs (at least one). Run `r` uses
/// seed `seed + r * 0x9E3779B97F4A7C15` (wrapping), so `restarts = 1` is a
/// single [`kmeans_fit_matrix`] call. Ties keep the earliest run.
pub fn kmeans_fit_restarts(
    points: ArrayView2<'_, f64>,
    k: usize,
    seed: u64,
    max_iter: usize,
    tol: f64,
    restarts: usize,
) -> Result<KMeansResult> {
    let mut best = kmeans_fit_matrix(points, k, seed, max_iter, tol)?;
    for r in 1..restarts as u64 {
        let run_seed = seed.wrapping_add(r.wrapping_mul(RESTART_STRIDE));
        let candidate = kmeans_fit_matrix(points, k, run_seed, max_iter, tol)?;
        if candidate.inertia < best.inertia {
            best = candidate;
        }
    }
    Ok(best)
}

/// [`kmeans_fit_restarts`] with the K-means settings of `config`.
pub fn kmeans_with_config(points: ArrayView2<'_, f64>, k: usize, config: &DiscoveryConfig) -> Result<KMeansResult> {
    kmeans_fit_restarts(points, k, config.seed, config.kmeans_max_iter, config.kmeans_tol, config.kmeans_restarts)
}

/// Each centroid scaled to unit norm, order preserved.
pub fn normalize_centroids(result: &KMeansResult) -> Result<PrototypeBank> {
    PrototypeBank::from_rows(BankKind::Target, result.centroids.clone())
}

/// Greedy k-means++: each new seed is the best of `2 + floor(ln k)`
/// D²-weighted candidates, judged by the potential it leaves behind.
fn kmeans_plus_plus(points: ArrayView2<'_, f64>, k: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let n = points.nrows();
    let trials = 2 + (k as f64).ln().floor() as usize;
    let mut chosen = Vec::with_capacity(k);
    chosen.push(rng.random_range(0..n));
    let mut d2: Vec<f64> = (0..n).map(|i| squared_distance(points.row(i), points.row(chosen[0]))).collect();

    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            // Every remaining point duplicates a chosen one.
            let free: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            let next = free[rng.random_range(0..free.len())];
            chosen.push(next);
            continue;
        }
        let mut best: Option<(usize, f64, Vec<f64>)> = None;
        for _ in 0..trials {
            let candidate = sample_d2(&d2, total, rng);
            let updated: Vec<f64> = d2
                .iter()
                .enumerate()
                .map(|(i, &d)| d.min(squared_distance(points.row(i), points.row(candidate))))
                .collect();
            let potential: f64 = updated.iter().sum();
            if best.as_ref().is_none_or(|(_, p, _)| potential < *p) {
                best = Some((candidate, potential, updated));
            }
        }
        let (next, _, updated) = best.expect("at least one trial");
        chosen.push(next);
        d2 = updated;
    }
    points.select(ndarray::Axis(0), &chosen)
}

fn sample_d2(d2: &[f64], total: f64, rng: &mut ChaCha8Rng) -> usize {
    let target = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (i, &w) in d2.iter().enumerate() {
        acc += w;
        if w > 0.0 && acc > target {
            return i;
        }
    }
    // Rounding can leave `target` just above the final partial sum.
    d2.iter().rposition(|&w| w > 0.0).unwrap()
}

/// Nearest centroid per point (lowest index on ties) and the total inertia.
fn assign(points: ArrayView2<'_, f64>, centroids: ArrayView2<'_, f64>) -> (Vec<usize>, f64) {
    let mut inertia = 0.0;
    let assignments = points
        .outer_iter()
        .map(|p| {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, centroid) in centroids.outer_iter().enumerate() {
                let d = squared_distance(p, centroid);
                if d < best_d {
                    best = c;
                    best_d = d;
                }
            }
            inertia += best_d;
            best
        })
        .collect();
    (assignments, inertia)
}

fn total_inertia(points: ArrayView2<'_, f64>, centroids: ArrayView2<'_, f64>, assignments: &[usize]) -> f64 {
    points
        .outer_iter()
        .zip(assignments)
        .map(|(p, &c)| squared_distance(p, centroids.row(c)))
        .sum()
}

fn has_empty(assignments: &[usize], k: usize) -> bool {
    let mut seen = vec![false; k];
    for &a in assignments {
        seen[a] = true;
    }
    seen.contains(&false)
}

fn update_centroids(points: ArrayView2<'_, f64>, centroids: &mut Array2<f64>, assignments: &mut [usize]) {
    let k = centroids.nrows();
    let mut sums = Array2::<f64>::zeros(centroids.raw_dim());
    let mut counts = vec![0usize; k];
    for (p, &c) in points.outer_iter().zip(assignments.iter()) {
        sums.row_mut(c).scaled_add(1.0, &p);
        counts[c] += 1;
    }
    for c in 0..k {
        if counts[c] > 0 {
            let mean = &sums.row(c) / counts[c] as f64;
            centroids.row_mut(c).assign(&mean);
        }
    }
    fill_empty_clusters(points, centroids, assignments, true);
}

/// Seeds every empty cluster with the point farthest from the centroid of the
/// currently largest cluster, moving that point over. With `recompute_mean`
/// the donor centroid is re-averaged over its remaining points.
fn fill_empty_clusters(
    points: ArrayView2<'_, f64>,
    centroids: &mut Array2<f64>,
    assignments: &mut [usize],
    recompute_mean: bool,
) {
    let k = centroids.nrows();
    loop {
        let mut counts = vec![0usize; k];
        for &a in assignments.iter() {
            counts[a] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return;
        };
        let largest = (0..k).fold(0, |best, c| if counts[c] > counts[best] { c } else { best });
        let mut far = None;
        let mut far_d = f64::NEG_INFINITY;
        for (i, &a) in assignments.iter().enumerate() {
            if a == largest {
                let d = squared_distance(points.row(i), centroids.row(largest));
                if d > far_d {
                    far = Some(i);
                    far_d = d;
                }
            }
        }
        let far = far.expect("largest cluster is non-empty");
        assignments[far] = empty;
        centroids.row_mut(empty).assign(&points.row(far));
        if recompute_mean {
            let members: Vec<usize> = (0..assignments.len()).filter(|&i| assignments[i] == largest).collect();
            let mean = points.select(ndarray::Axis(0), &members).mean_axis(ndarray::Axis(0)).unwrap();
            centroids.row_mut(largest).assign(&mean);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn pair() -> EmbeddingSet {
        EmbeddingSet::new(array![[1.0f32, 0.0], [0.0, 1.0]], None).unwrap()
    }

    #[test]
    fn separable_pair_k2() {
        let r = kmeans_fit(&pair(), 2, 1, DEFAULT_MAX_ITER, DEFAULT_TOL).unwrap();
        assert_eq!(r.inertia, 0.0);
        let mut rows: Vec<Vec<f64>> = r.centroids.outer_iter().map(|c| c.to_vec()).collect();
        rows.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(rows, vec![vec![0.0, 1.0], vec![1.0, 0.0]]);
    }

    #[test]
    fn restarts_never_raise_inertia() {
        let pts = Array2::from_shape_fn((40, 3), |(i, j)| ((i * 7 + j * 13) % 11) as f64);
        let single = kmeans_fit_matrix(pts.view(), 4, 9, 50, 0.0).unwrap();
        assert_eq!(kmeans_fit_restarts(pts.view(), 4, 9, 50, 0.0, 1).unwrap(), single);
        let best = kmeans_fit_restarts(pts.view(), 4, 9, 50, 0.0, 8).unwrap();
        assert!(best.inertia <= single.inertia);
    }

    #[test]
    fn pair_k1_is_the_mean() {
        let r = kmeans_fit(&pair(), 1, 1, DEFAULT_MAX_ITER, DEFAULT_TOL).unwrap();
        assert_eq!(r.centroids.row(0).to_vec(), vec![0.5, 0.5]);
        assert!((r.inertia - 1.0).abs() < 1e-12);
    }

    #[test]
    fn k_bounds() {
        assert!(kmeans_fit(&pair(), 0, 1, 10, 0.0).is_err());
        assert!(kmeans_fit(&pair(), 3, 1, 10, 0.0).is_err());
    }

    #[test]
    fn duplicates_with_k_equal_n() {
        let pts = array![[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
        let r = kmeans_fit_matrix(pts.view(), 3, 5, 50, 0.0).unwrap();
        assert_eq!(r.cluster_sizes(), vec![1, 1, 1]);
        assert_eq!(r.inertia, 0.0);
    }

    #[test]
    fn empty_cluster_gets_refilled() {
        // Two identical centroids force an empty cluster on the first assignment.
        let pts = array![[0.0, 0.0], [0.1, 0.0], [5.0, 0.0], [5.2, 0.0]];
        let mut centroids = array![[0.0, 0.0], [0.0, 0.0], [5.0, 0.0]];
        let (mut a, _) = assign(pts.view(), centroids.view());
        assert_eq!(a, vec![0, 0, 2, 2]);
        update_centroids(pts.view(), &mut centroids, &mut a);
        assert!(!has_empty(&a, 3));
    }

    #[test]
    fn normalize_scales_to_unit() {
        let r = kmeans_fit(&pair(), 1, 1, DEFAULT_MAX_ITER, DEFAULT_TOL).unwrap();
        let bank = normalize_centroids(&r).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((bank.prototype(0)[0] - h).abs() < 1e-6);
        assert!((bank.prototype(0)[1] - h).abs() < 1e-6);
    }

    #[test]
    fn normalize_is_idempotent_on_unit() {
        let r = kmeans_fit(&pair(), 2, 3, DEFAULT_MAX_ITER, DEFAULT_TOL).unwrap();
        let bank = normalize_centroids(&r).unwrap();
        for (a, b) in bank.weights().iter().zip(r.centroids.iter()) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn normalize_rejects_zero_centroid() {
        let r = KMeansResult {
            centroids: array![[1.0, 0.0], [0.0, 0.0]],
            assignments: vec![0, 1],
            inertia: 0.0,
            iterations_run: 0,
            inertia_history: vec![0.0],
        };
        assert!(matches!(normalize_centroids(&r), Err(Error::ZeroCentroid { cluster: 1 })));
    }
}
