//! Seeded synthetic source/target embedding scenarios with ground truth.
//!
//! Class means are drawn uniformly on the unit sphere, rejecting candidates
//! closer than `min_angle_degrees` to an existing mean. A sample is
//! `normalize(mean + N(0, sigma^2 I))`. The target domain rotates every mean
//! by `shift_angle_degrees` inside one random 2-plane, and contains the seen
//! classes (minus any `source_private` ones) plus `novel_count` classes that
//! never appear in the source.
//!
//! Two constructs reproduce clustering failure modes: a *bimodal* class is
//! drawn from two sub-means `bimodal_separation_degrees` apart, and an
//! *overlap pair* places the second class `overlap_angle_degrees` from the
//! first.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::EmbeddingSet;
use crate::error::{Error, Result};

const MAX_REJECTIONS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    pub dim: usize,
    pub seen_count: usize,
    pub novel_count: usize,
    pub samples_per_class: usize,
    pub noise_sigma: f64,
    /// Multiplies `noise_sigma` on the target side.
    pub target_noise_scale: f64,
    pub shift_angle_degrees: f64,
    pub min_angle_degrees: f64,
    pub bimodal_classes: Vec<u32>,
    pub bimodal_separation_degrees: f64,
    /// `(a, b)` with `a < b`: class `b`'s mean sits next to class `a`'s.
    pub overlap_pairs: Vec<(u32, u32)>,
    pub overlap_angle_degrees: f64,
    /// Seen classes that are left out of the target (partial-set splits).
    pub source_private: Vec<u32>,
    pub seed: u64,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            dim: 64,
            seen_count: 10,
            novel_count: 5,
            samples_per_class: 200,
            noise_sigma: 0.05,
            target_noise_scale: 1.0,
            shift_angle_degrees: 10.0,
            min_angle_degrees: 25.0,
            bimodal_classes: Vec::new(),
            bimodal_separation_degrees: 60.0,
            overlap_pairs: Vec::new(),
            overlap_angle_degrees: 3.0,
            source_private: Vec::new(),
            seed: 7,
        }
    }
}

impl Scenario {
    /// Named scenarios: `s1`, `s2`, `s1-closed`, `s1-partial`,
    /// `s1-open-partial` and `bimodal-overlap`.
    pub fn preset(name: &str) -> Option<Self> {
        let s1 = Self::default();
        let s = match name {
            "s1" => s1,
            "s2" => Self { noise_sigma: 0.15, shift_angle_degrees: 25.0, seed: 11, ..s1 },
            "s1-closed" => Self { novel_count: 0, ..s1 },
            "s1-partial" => Self { novel_count: 0, source_private: vec![7, 8, 9], ..s1 },
            "s1-open-partial" => Self { source_private: vec![7, 8, 9], ..s1 },
            "bimodal-overlap" => Self {
                seen_count: 3,
                novel_count: 2,
                bimodal_classes: vec![0],
                overlap_pairs: vec![(1, 2)],
                ..s1
            },
            _ => return None,
        };
        Some(s)
    }

    pub const PRESETS: [&'static str; 6] = ["s1", "s2", "s1-closed", "s1-partial", "s1-open-partial", "bimodal-overlap"];

    /// Ids of the classes present in the target, ascending.
    pub fn target_classes(&self) -> Vec<u32> {
        (0..(self.seen_count + self.novel_count) as u32)
            .filter(|c| !self.source_private.contains(c))
            .collect()
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.seen_count < 2 {
            return bad("a scenario needs at least 2 seen classes".into());
        }
        if self.dim < 2 {
            return bad("dim must be at least 2".into());
        }
        if self.samples_per_class == 0 {
            return bad("samples_per_class must be positive".into());
        }
        if !(self.noise_sigma >= 0.0 && self.target_noise_scale >= 0.0) {
            return bad("noise must be non-negative".into());
        }
        let total = (self.seen_count + self.novel_count) as u32;
        if self.bimodal_classes.iter().any(|&c| c >= total) {
            return bad("bimodal class out of range".into());
        }
        if self.overlap_pairs.iter().any(|&(a, b)| a >= b || b >= total) {
            return bad("overlap pairs must be (a, b) with a < b < class count".into());
        }
        if self.source_private.iter().any(|&c| c as usize >= self.seen_count) {
            return bad("source_private must name seen classes".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    /// Labeled source samples of the seen classes, class-major.
    pub source: EmbeddingSet,
    /// Unlabeled target samples in shuffled order.
    pub target: EmbeddingSet,
    pub target_truth: Vec<u32>,
    /// Source-domain class means, one row per class (seen then novel).
    pub source_means: Array2<f64>,
    /// The same means after the domain rotation.
    pub target_means: Array2<f64>,
}

pub fn generate(scenario: &Scenario) -> Result<SyntheticData> {
    scenario.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    let d = scenario.dim;
    let classes = scenario.seen_count + scenario.novel_count;
    let min_cos = scenario.min_angle_degrees.to_radians().cos();

    let mut means: Vec<Array1<f64>> = Vec::with_capacity(classes);
    for c in 0..classes as u32 {
        if let Some(&(a, _)) = scenario.overlap_pairs.iter().find(|&&(_, b)| b == c) {
            let base = means[a as usize].clone();
            let dir = orthogonal_direction(&base, &mut rng);
            means.push(tilt(&base, &dir, scenario.overlap_angle_degrees.to_radians()));
            continue;
        }
        let mut attempts = 0;
        let mean = loop {
            let candidate = random_unit(d, &mut rng);
            if means.iter().all(|m| m.dot(&candidate) <= min_cos) {
                break candidate;
            }
            attempts += 1;
            if attempts >= MAX_REJECTIONS {
                return Err(Error::Infeasible(format!(
                    "could not place class {c} at least {} degrees from the others in dim {d}",
                    scenario.min_angle_degrees
                )));
            }
        };
        means.push(mean);
    }

    // Each class has one or two modes.
    let modes: Vec<Vec<Array1<f64>>> = means
        .iter()
        .enumerate()
        .map(|(c, m)| {
            if scenario.bimodal_classes.contains(&(c as u32)) {
                let dir = orthogonal_direction(m, &mut rng);
                let half = scenario.bimodal_separation_degrees.to_radians() / 2.0;
                vec![tilt(m, &dir, half), tilt(m, &dir, -half)]
            } else {
                vec![m.clone()]
            }
        })
        .collect();

    let plane_u = random_unit(d, &mut rng);
    let plane_v = orthogonal_direction(&plane_u, &mut rng);
    let angle = scenario.shift_angle_degrees.to_radians();
    let rotate = |x: &Array1<f64>| rotate_in_plane(x, &plane_u, &plane_v, angle);

    let mut src_rows = Vec::new();
    let mut src_labels = Vec::new();
    for c in 0..scenario.seen_count {
        for i in 0..scenario.samples_per_class {
            let mode = &modes[c][i % modes[c].len()];
            src_rows.push(sample(mode, scenario.noise_sigma, &mut rng));
            src_labels.push(c as u32);
        }
    }

    let target_sigma = scenario.noise_sigma * scenario.target_noise_scale;
    let mut tgt: Vec<(Vec<f32>, u32)> = Vec::new();
    for c in scenario.target_classes() {
        let rotated: Vec<Array1<f64>> = modes[c as usize].iter().map(rotate).collect();
        for i in 0..scenario.samples_per_class {
            tgt.push((sample(&rotated[i % rotated.len()], target_sigma, &mut rng), c));
        }
    }
    tgt.shuffle(&mut rng);
    let (tgt_rows, target_truth): (Vec<Vec<f32>>, Vec<u32>) = tgt.into_iter().unzip();

    let source = EmbeddingSet::from_rows(&src_rows, Some(src_labels))?;
    let target = if tgt_rows.is_empty() {
        EmbeddingSet::empty(d, false)?
    } else {
        EmbeddingSet::from_rows(&tgt_rows, None)?
    };
    let stack = |rows: &[Array1<f64>]| {
        Array2::from_shape_vec((rows.len(), d), rows.iter().flatten().copied().collect()).unwrap()
    };
    let rotated_means: Vec<Array1<f64>> = means.iter().map(rotate).collect();
    Ok(SyntheticData {
        source,
        target,
        target_truth,
        source_means: stack(&means),
        target_means: stack(&rotated_means),
    })
}

fn random_unit(d: usize, rng: &mut ChaCha8Rng) -> Array1<f64> {
    loop {
        let v: Array1<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.dot(&v).sqrt();
        if n > 1e-12 {
            return v / n;
        }
    }
}

/// A random unit vector orthogonal to unit `x`.
fn orthogonal_direction(x: &Array1<f64>, rng: &mut ChaCha8Rng) -> Array1<f64> {
    loop {
        let mut v = random_unit(x.len(), rng);
        let proj = v.dot(x);
        v.scaled_add(-proj, x);
        let n = v.dot(&v).sqrt();
        if n > 1e-6 {
            return v / n;
        }
    }
}

/// Rotates unit `x` by `angle` toward the orthogonal unit direction `dir`.
fn tilt(x: &Array1<f64>, dir: &Array1<f64>, angle: f64) -> Array1<f64> {
    x * angle.cos() + dir * angle.sin()
}

/// Rotation by `angle` in the plane spanned by orthonormal `u`, `v`; the
/// orthogonal complement is left fixed.
pub fn rotate_in_plane(x: &Array1<f64>, u: &Array1<f64>, v: &Array1<f64>, angle: f64) -> Array1<f64> {
    let (a, b) = (x.dot(u), x.dot(v));
    let (sin, cos) = angle.sin_cos();
    let mut out = x.clone();
    out.scaled_add(a * (cos - 1.0) - b * sin, u);
    out.scaled_add(a * sin + b * (cos - 1.0), v);
    out
}

fn sample(mean: &Array1<f64>, sigma: f64, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let mut x = mean.clone();
    if sigma > 0.0 {
        for xi in x.iter_mut() {
            let e: f64 = StandardNormal.sample(rng);
            *xi += sigma * e;
        }
    }
    let n = x.dot(&x).sqrt();
    x.iter().map(|&xi| (xi / n) as f32).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Scenario {
        Scenario { dim: 16, seen_count: 3, novel_count: 2, samples_per_class: 20, ..Default::default() }
    }

    #[test]
    fn zero_noise_samples_are_means() {
        let data = generate(&Scenario { noise_sigma: 0.0, ..small() }).unwrap();
        let labels = data.source.labels().unwrap();
        for i in 0..data.source.count() {
            let mean = data.source_means.row(labels[i] as usize);
            let expect: Vec<f32> = sample(&mean.to_owned(), 0.0, &mut ChaCha8Rng::seed_from_u64(0));
            assert_eq!(data.source.row(i).to_vec(), expect);
        }
    }

    #[test]
    fn no_shift_closed_set_matches_source_distribution() {
        let data = generate(&Scenario { shift_angle_degrees: 0.0, novel_count: 0, ..small() }).unwrap();
        assert_eq!(data.source_means, data.target_means);
        let mut truth = data.target_truth.clone();
        truth.sort_unstable();
        assert_eq!(truth, data.source.labels().unwrap());
    }

    #[test]
    fn s1_counts() {
        let s1 = Scenario::preset("s1").unwrap();
        let data = generate(&s1).unwrap();
        assert_eq!(data.target.count(), 3000);
        assert_eq!(data.source.count(), 2000);
        let distinct: std::collections::BTreeSet<_> = data.target_truth.iter().collect();
        assert_eq!(distinct.len(), 15);
        assert_eq!(**distinct.iter().next_back().unwrap(), 14);
    }

    #[test]
    fn min_angle_is_honored() {
        let data = generate(&small()).unwrap();
        let m = &data.source_means;
        for i in 0..m.nrows() {
            for j in 0..i {
                let cos = m.row(i).dot(&m.row(j));
                assert!(cos.acos().to_degrees() >= 25.0);
            }
        }
    }

    #[test]
    fn overlap_pair_sits_close() {
        let s = Scenario { overlap_pairs: vec![(1, 2)], ..small() };
        let data = generate(&s).unwrap();
        let cos = data.source_means.row(1).dot(&data.source_means.row(2));
        assert!((cos.acos().to_degrees() - 3.0).abs() < 1e-9);
    }

    #[test]
    fn rotation_preserves_norm_and_angle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let u = random_unit(8, &mut rng);
        let v = orthogonal_direction(&u, &mut rng);
        let r = rotate_in_plane(&u, &u, &v, 0.3);
        assert!((r.dot(&r) - 1.0).abs() < 1e-12);
        assert!((r.dot(&u) - 0.3f64.cos()).abs() < 1e-12);
    }

    #[test]
    fn infeasible_separation() {
        let s = Scenario { dim: 2, seen_count: 20, novel_count: 0, min_angle_degrees: 40.0, ..small() };
        assert!(matches!(generate(&s), Err(Error::Infeasible(_))));
    }

    #[test]
    fn partial_split_drops_private_classes() {
        let s = Scenario::preset("s1-open-partial").unwrap();
        assert_eq!(s.target_classes(), vec![0, 1, 2, 3, 4, 5, 6, 10, 11, 12, 13, 14]);
        let data = generate(&Scenario { samples_per_class: 5, ..s }).unwrap();
        assert!(data.target_truth.iter().all(|t| ![7, 8, 9].contains(t)));
    }
}
