//! Synthetic compositional classification tasks.
//!
//! Classes are combinations of attribute values on a small grid. Novel
//! classes reuse only attribute values that appear among the base classes,
//! so a model that learns per-value structure can recognize them zero-shot;
//! a model that memorizes base classes cannot. Prototypes live in feature
//! space as sums of frozen per-attribute-value basis vectors plus a
//! class-specific offset (the non-compositional remainder); samples are
//! prototypes plus isotropic Gaussian noise.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::Tensor;
use crate::rng::rng_from_seed;

#[derive(Debug, Error)]
pub enum GenError {
    #[error("invalid generation parameter {key}: {why}")]
    InvalidParam { key: &'static str, why: String },
    #[error(
        "attribute grid too small: {needed} classes needed but only {available} \
         {what} available"
    )]
    GridTooSmall {
        needed: usize,
        available: usize,
        what: &'static str,
    },
    #[error("task violates the compositional split: {0}")]
    BadSplit(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("json error on {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

/// Generation parameters for one task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub c_base: usize,
    pub c_novel: usize,
    pub n_factors: usize,
    pub values_per_factor: usize,
    pub d_x: usize,
    /// intra-class sample noise std
    pub noise_std: f64,
    /// train shots per base class
    pub shots_k: usize,
    /// test samples per class (base and novel)
    pub test_per_class: usize,
    /// std of the per-class non-compositional offset
    pub class_offset_std: f64,
    /// optional per-class test-count overrides as (class, count) pairs
    pub test_count_override: Vec<(usize, usize)>,
}

/// A generated few-shot task. Classes 0..c_base are base, the rest novel.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SynthTask {
    pub seed: u64,
    pub spec: TaskSpec,
    /// attribute-value assignment per class, base classes first
    pub class_attrs: Vec<Vec<usize>>,
    /// class prototypes in feature space
    pub prototypes: Vec<Tensor>,
    /// k-shot training set over base classes
    pub train_x: Vec<Tensor>,
    pub train_y: Vec<usize>,
    /// test set over all classes
    pub test_x: Vec<Tensor>,
    pub test_y: Vec<usize>,
}

impl SynthTask {
    pub fn total_classes(&self) -> usize {
        self.spec.c_base + self.spec.c_novel
    }

    pub fn base_classes(&self) -> Vec<usize> {
        (0..self.spec.c_base).collect()
    }

    pub fn novel_classes(&self) -> Vec<usize> {
        (self.spec.c_base..self.total_classes()).collect()
    }

    /// Test samples whose labels fall in `class_set`.
    pub fn test_of<'a>(&'a self, class_set: &[usize]) -> Vec<(&'a Tensor, usize)> {
        self.test_x
            .iter()
            .zip(&self.test_y)
            .filter(|(_, y)| class_set.contains(y))
            .map(|(x, y)| (x, *y))
            .collect()
    }

    /// Verify the base/novel compositional split.
    pub fn check_compositional(&self) -> Result<(), GenError> {
        let nf = self.spec.n_factors;
        let mut seen = vec![std::collections::BTreeSet::new(); nf];
        for c in 0..self.spec.c_base {
            for (f, &v) in self.class_attrs[c].iter().enumerate() {
                seen[f].insert(v);
            }
        }
        for c in self.spec.c_base..self.total_classes() {
            for (f, &v) in self.class_attrs[c].iter().enumerate() {
                if !seen[f].contains(&v) {
                    return Err(GenError::BadSplit(format!(
                        "novel class {c} uses unseen value {v} of factor {f}"
                    )));
                }
            }
        }
        for (i, a) in self.class_attrs.iter().enumerate() {
            for (j, b) in self.class_attrs.iter().enumerate() {
                if i < j && a == b {
                    return Err(GenError::BadSplit(format!(
                        "classes {i} and {j} share the combination {a:?}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), GenError> {
        let json = serde_json::to_string_pretty(self).map_err(|source| GenError::Json {
            path: path.display().to_string(),
            source,
        })?;
        std::fs::write(path, json + "\n").map_err(|source| GenError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, GenError> {
        let raw = std::fs::read_to_string(path).map_err(|source| GenError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&raw).map_err(|source| GenError::Json {
            path: path.display().to_string(),
            source,
        })
    }
}

/// Test-set shift for the out-of-distribution probe.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftKind {
    MeanShift,
    LinearWarp,
}

impl ShiftKind {
    pub fn name(&self) -> &'static str {
        match self {
            ShiftKind::MeanShift => "mean_shift",
            ShiftKind::LinearWarp => "linear_warp",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "mean_shift" => Some(ShiftKind::MeanShift),
            "linear_warp" => Some(ShiftKind::LinearWarp),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ShiftSpec {
    pub kind: ShiftKind,
    pub magnitude: f64,
}

fn all_combos(n_factors: usize, values: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for _ in 0..n_factors {
        let mut next = Vec::with_capacity(out.len() * values);
        for c in &out {
            for v in 0..values {
                let mut c2 = c.clone();
                c2.push(v);
                next.push(c2);
            }
        }
        out = next;
    }
    out
}

/// Generate a task. Deterministic in (spec, seed).
pub fn generate_task(spec: &TaskSpec, seed: u64) -> Result<SynthTask, GenError> {
    if spec.c_base < 1 || spec.c_novel < 1 {
        return Err(GenError::InvalidParam {
            key: "c_base/c_novel",
            why: "both must be >= 1".into(),
        });
    }
    if spec.values_per_factor < 2 {
        return Err(GenError::InvalidParam {
            key: "values_per_factor",
            why: format!("must be >= 2, got {}", spec.values_per_factor),
        });
    }
    if spec.n_factors < 1 {
        return Err(GenError::InvalidParam {
            key: "n_factors",
            why: "must be >= 1".into(),
        });
    }
    let total = spec.values_per_factor.pow(spec.n_factors as u32);
    if spec.c_base + spec.c_novel > total {
        return Err(GenError::GridTooSmall {
            needed: spec.c_base + spec.c_novel,
            available: total,
            what: "attribute combinations",
        });
    }

    let mut rng = rng_from_seed(seed);
    let mut remaining = all_combos(spec.n_factors, spec.values_per_factor);
    remaining.shuffle(&mut rng);

    // Base assignment: greedily pick the combo introducing the most unseen
    // values (ties break toward the shuffled order), so base classes cover
    // the whole value grid whenever c_base >= values_per_factor.
    let mut base: Vec<Vec<usize>> = Vec::with_capacity(spec.c_base);
    let mut seen: Vec<std::collections::BTreeSet<usize>> =
        vec![std::collections::BTreeSet::new(); spec.n_factors];
    while base.len() < spec.c_base {
        let (pos, _) = remaining
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let new = c
                    .iter()
                    .enumerate()
                    .filter(|(f, v)| !seen[*f].contains(v))
                    .count();
                (i, new)
            })
            .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
            .expect("combos remain while base is unfilled");
        let pick = remaining.remove(pos);
        for (f, &v) in pick.iter().enumerate() {
            seen[f].insert(v);
        }
        base.push(pick);
    }

    // Novel classes: unseen combinations built entirely from seen values.
    let candidates: Vec<Vec<usize>> = remaining
        .iter()
        .filter(|c| c.iter().enumerate().all(|(f, v)| seen[f].contains(v)))
        .cloned()
        .collect();
    if candidates.len() < spec.c_novel {
        return Err(GenError::GridTooSmall {
            needed: spec.c_novel,
            available: candidates.len(),
            what: "compositional novel combinations",
        });
    }
    let novel: Vec<Vec<usize>> = candidates[..spec.c_novel].to_vec();

    let mut class_attrs = base;
    class_attrs.extend(novel);

    // Frozen per-attribute-value basis, drawn in fixed grid order.
    let basis: Vec<Vec<Tensor>> = (0..spec.n_factors)
        .map(|_| {
            (0..spec.values_per_factor)
                .map(|_| Tensor::randn(&[spec.d_x], 1.0, &mut rng))
                .collect()
        })
        .collect();

    let c_total = class_attrs.len();
    let mut prototypes = Vec::with_capacity(c_total);
    for attrs in &class_attrs {
        let mut p = Tensor::randn(&[spec.d_x], spec.class_offset_std, &mut rng);
        for (f, &v) in attrs.iter().enumerate() {
            for (a, b) in p.data_mut().iter_mut().zip(basis[f][v].data()) {
                *a += b;
            }
        }
        prototypes.push(p);
    }

    let draw_sample = |proto: &Tensor, rng: &mut crate::rng::RunRng| {
        let mut s = Tensor::randn(&[spec.d_x], spec.noise_std, rng);
        for (a, b) in s.data_mut().iter_mut().zip(proto.data()) {
            *a += b;
        }
        s
    };

    let mut train_x = Vec::new();
    let mut train_y = Vec::new();
    for c in 0..spec.c_base {
        for _ in 0..spec.shots_k {
            train_x.push(draw_sample(&prototypes[c], &mut rng));
            train_y.push(c);
        }
    }

    let test_count = |c: usize| -> usize {
        spec.test_count_override
            .iter()
            .find(|(cc, _)| *cc == c)
            .map(|(_, n)| *n)
            .unwrap_or(spec.test_per_class)
    };
    let mut test_x = Vec::new();
    let mut test_y = Vec::new();
    for c in 0..c_total {
        for _ in 0..test_count(c) {
            test_x.push(draw_sample(&prototypes[c], &mut rng));
            test_y.push(c);
        }
    }

    let task = SynthTask {
        seed,
        spec: spec.clone(),
        class_attrs,
        prototypes,
        train_x,
        train_y,
        test_x,
        test_y,
    };
    task.check_compositional()?;
    Ok(task)
}

/// Copy the task with shifted test sets. magnitude 0 returns a bit-identical
/// copy; the shift direction/matrix is a fixed draw from `rng`.
pub fn apply_shift<R: Rng>(task: &SynthTask, s: &ShiftSpec, rng: &mut R) -> SynthTask {
    let mut out = task.clone();
    if s.magnitude == 0.0 {
        return out;
    }
    let d = task.spec.d_x;
    match s.kind {
        ShiftKind::MeanShift => {
            let mut u = Tensor::randn(&[d], 1.0, rng);
            let norm = u.l2_norm();
            for v in u.data_mut() {
                *v = s.magnitude * *v / norm;
            }
            for x in out.test_x.iter_mut() {
                for (a, b) in x.data_mut().iter_mut().zip(u.data()) {
                    *a += b;
                }
            }
        }
        ShiftKind::LinearWarp => {
            let mut a = Tensor::randn(&[d, d], 1.0, rng);
            let fro = a.l2_norm();
            for v in a.data_mut() {
                *v /= fro;
            }
            for x in out.test_x.iter_mut() {
                let old = x.data().to_vec();
                for i in 0..d {
                    let mut acc = 0.0;
                    for j in 0..d {
                        acc += a.data()[i * d + j] * old[j];
                    }
                    x.data_mut()[i] = old[i] + s.magnitude * acc;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> TaskSpec {
        TaskSpec {
            c_base: 4,
            c_novel: 2,
            n_factors: 2,
            values_per_factor: 3,
            d_x: 8,
            noise_std: 0.3,
            shots_k: 16,
            test_per_class: 8,
            class_offset_std: 0.3,
            test_count_override: vec![],
        }
    }

    #[test]
    fn zero_noise_samples_equal_prototypes() {
        let mut spec = small_spec();
        spec.noise_std = 0.0;
        let task = generate_task(&spec, 1).unwrap();
        for (x, y) in task.train_x.iter().zip(&task.train_y) {
            assert_eq!(x, &task.prototypes[*y]);
        }
        for (x, y) in task.test_x.iter().zip(&task.test_y) {
            assert_eq!(x, &task.prototypes[*y]);
        }
    }

    #[test]
    fn training_split_counts() {
        let spec = small_spec();
        let task = generate_task(&spec, 2).unwrap();
        assert_eq!(task.train_x.len(), 4 * 16);
        assert_eq!(task.test_x.len(), 6 * 8);
        for c in 0..4 {
            assert_eq!(task.train_y.iter().filter(|y| **y == c).count(), 16);
        }
    }

    #[test]
    fn test_count_override_changes_only_named_classes() {
        let mut spec = small_spec();
        spec.test_count_override = vec![(0, 3), (5, 20)];
        let task = generate_task(&spec, 2).unwrap();
        assert_eq!(task.test_y.iter().filter(|y| **y == 0).count(), 3);
        assert_eq!(task.test_y.iter().filter(|y| **y == 5).count(), 20);
        assert_eq!(task.test_y.iter().filter(|y| **y == 1).count(), 8);
    }

    #[test]
    fn nearest_prototype_oracle_is_perfect_at_tiny_noise() {
        let mut spec = small_spec();
        spec.noise_std = 1e-3;
        let task = generate_task(&spec, 3).unwrap();
        let mut correct = 0;
        for (x, y) in task.test_x.iter().zip(&task.test_y) {
            let mut best = (usize::MAX, f64::INFINITY);
            for (c, p) in task.prototypes.iter().enumerate() {
                let d2: f64 = x
                    .data()
                    .iter()
                    .zip(p.data())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                if d2 < best.1 {
                    best = (c, d2);
                }
            }
            if best.0 == *y {
                correct += 1;
            }
        }
        assert_eq!(correct, task.test_x.len());
    }

    #[test]
    fn regeneration_is_bit_identical() {
        let spec = small_spec();
        let a = generate_task(&spec, 7).unwrap();
        let b = generate_task(&spec, 7).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
        let c = generate_task(&spec, 8).unwrap();
        assert_ne!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&c).unwrap()
        );
    }

    #[test]
    fn compositional_invariant_holds_across_seeds() {
        let spec = small_spec();
        for seed in 0..50 {
            let task = generate_task(&spec, seed).unwrap();
            task.check_compositional().unwrap();
        }
        // reference-sized grid: 8+8 classes on a 4x4 combo grid
        let ref_spec = TaskSpec {
            c_base: 8,
            c_novel: 8,
            n_factors: 2,
            values_per_factor: 4,
            d_x: 16,
            noise_std: 0.35,
            shots_k: 16,
            test_per_class: 64,
            class_offset_std: 0.3,
            test_count_override: vec![],
        };
        for seed in 0..50 {
            let task = generate_task(&ref_spec, seed).unwrap();
            task.check_compositional().unwrap();
            assert_eq!(task.total_classes(), 16);
        }
    }

    #[test]
    fn class_conditional_mean_converges_to_prototype() {
        let mut spec = small_spec();
        spec.c_base = 2;
        spec.c_novel = 1;
        spec.shots_k = 1;
        spec.test_per_class = 10_000;
        spec.noise_std = 0.5;
        let task = generate_task(&spec, 11).unwrap();
        let d = spec.d_x;
        let n = 10_000f64;
        let mut mean = vec![0.0; d];
        for (x, y) in task.test_x.iter().zip(&task.test_y) {
            if *y == 0 {
                for (m, v) in mean.iter_mut().zip(x.data()) {
                    *m += v / n;
                }
            }
        }
        let se = spec.noise_std / n.sqrt();
        for (m, p) in mean.iter().zip(task.prototypes[0].data()) {
            assert!((m - p).abs() < 3.0 * se, "{m} vs {p} (SE {se})");
        }
    }

    #[test]
    fn grid_too_small_is_rejected() {
        let mut spec = small_spec();
        spec.c_base = 8;
        spec.c_novel = 2;
        spec.values_per_factor = 3; // 9 combos < 10 classes
        match generate_task(&spec, 1) {
            Err(GenError::GridTooSmall { .. }) => {}
            other => panic!("expected grid error, got {other:?}"),
        }
    }

    #[test]
    fn invalid_params_are_rejected() {
        let mut spec = small_spec();
        spec.values_per_factor = 1;
        assert!(matches!(
            generate_task(&spec, 1),
            Err(GenError::InvalidParam { .. })
        ));
    }

    #[test]
    fn zero_magnitude_shift_is_bit_identical() {
        let task = generate_task(&small_spec(), 5).unwrap();
        for kind in [ShiftKind::MeanShift, ShiftKind::LinearWarp] {
            let shifted = apply_shift(
                &task,
                &ShiftSpec {
                    kind,
                    magnitude: 0.0,
                },
                &mut rng_from_seed(1),
            );
            assert_eq!(
                serde_json::to_string(&task).unwrap(),
                serde_json::to_string(&shifted).unwrap()
            );
        }
    }

    #[test]
    fn mean_shift_moves_every_sample_by_the_magnitude() {
        let task = generate_task(&small_spec(), 6).unwrap();
        let mag = 1.25;
        let shifted = apply_shift(
            &task,
            &ShiftSpec {
                kind: ShiftKind::MeanShift,
                magnitude: mag,
            },
            &mut rng_from_seed(2),
        );
        for (a, b) in task.test_x.iter().zip(&shifted.test_x) {
            let d: f64 = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            assert!((d - mag).abs() < 1e-12, "moved {d}, wanted {mag}");
        }
        // train split untouched
        assert_eq!(task.train_x, shifted.train_x);
    }

    #[test]
    fn linear_warp_stays_within_the_frobenius_bound() {
        let mut spec = small_spec();
        spec.noise_std = 0.0;
        spec.test_per_class = 1;
        let task = generate_task(&spec, 7).unwrap();
        let mag = 0.5;
        let shifted = apply_shift(
            &task,
            &ShiftSpec {
                kind: ShiftKind::LinearWarp,
                magnitude: mag,
            },
            &mut rng_from_seed(3),
        );
        // ||(M - I) x|| <= mag * ||A||_2 ||x|| <= mag * ||A||_F ||x|| = mag ||x||
        for (a, b) in task.test_x.iter().zip(&shifted.test_x) {
            let moved: f64 = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            assert!(moved <= mag * a.l2_norm() * (1.0 + 1e-9));
        }
    }

    #[test]
    fn json_roundtrip_preserves_the_task() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("task.json");
        let task = generate_task(&small_spec(), 12).unwrap();
        task.save(&path).unwrap();
        let back = SynthTask::load(&path).unwrap();
        assert_eq!(
            serde_json::to_string(&task).unwrap(),
            serde_json::to_string(&back).unwrap()
        );
    }
}
