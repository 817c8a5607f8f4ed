//! Synthetic embedding generator with analytically known ground truth.
//!
//! Classes are isotropic Gaussians. Base-class means are rejection-sampled to
//! keep every pair at least four within-class sigmas apart; each new-class
//! mean is a positively weighted mixture of `mixture_support` base means plus
//! a small perturbation, so the premise behind similarity-based calibration
//! holds exactly and its benefit can be measured against the true means.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::data::{ClassId, Dataset, EmbeddingRecord, FeatureVector, PrototypeRegistry, Split};
use crate::error::{Error, Result};

/// Coordinate scale of base means relative to sigma. Together with the 4
/// sigma separation floor this keeps rejection cheap at the default dim
/// while new-class mixtures stay well inside the base-mean region.
const MEAN_SCALE: f64 = 1.25;
const MIN_SEPARATION_SIGMAS: f64 = 4.0;
const PLACEMENT_ATTEMPTS: usize = 1000;

/// Generator parameters. New classes are divided evenly across the
/// incremental sessions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub base_classes: usize,
    pub new_classes: usize,
    pub sessions_after_base: usize,
    pub dim: usize,
    pub base_train_per_class: usize,
    pub shots: usize,
    pub test_per_class: usize,
    /// How many base means combine into each new-class mean.
    pub mixture_support: usize,
    /// Scale of the Gaussian perturbation added to each mixture mean.
    pub mixture_noise: f64,
    pub within_class_sigma: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            base_classes: 10,
            new_classes: 5,
            sessions_after_base: 1,
            dim: 16,
            base_train_per_class: 200,
            shots: 5,
            test_per_class: 50,
            mixture_support: 2,
            mixture_noise: 0.2,
            within_class_sigma: 1.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("base-classes", self.base_classes),
            ("new-classes", self.new_classes),
            ("sessions-after-base", self.sessions_after_base),
            ("dim", self.dim),
            ("base-train-per-class", self.base_train_per_class),
            ("shots", self.shots),
            ("test-per-class", self.test_per_class),
            ("mixture-support", self.mixture_support),
        ];
        for (name, value) in counts {
            if value == 0 {
                return Err(Error::InvalidParam(format!("{name} must be at least 1")));
            }
        }
        if self.new_classes % self.sessions_after_base != 0 {
            return Err(Error::InvalidParam(format!(
                "new-classes ({}) must be divisible by sessions-after-base ({})",
                self.new_classes, self.sessions_after_base
            )));
        }
        if self.mixture_support > self.base_classes {
            return Err(Error::InvalidParam(format!(
                "mixture-support ({}) cannot exceed base-classes ({})",
                self.mixture_support, self.base_classes
            )));
        }
        if !(self.within_class_sigma > 0.0 && self.within_class_sigma.is_finite()) {
            return Err(Error::InvalidParam(format!(
                "within-class-sigma must be positive, got {}",
                self.within_class_sigma
            )));
        }
        if !(self.mixture_noise >= 0.0 && self.mixture_noise.is_finite()) {
            return Err(Error::InvalidParam(format!(
                "mixture-noise must be non-negative, got {}",
                self.mixture_noise
            )));
        }
        Ok(())
    }
}

/// True class means and, for new classes, the mixture weights over base
/// classes that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub means: BTreeMap<ClassId, Vec<f64>>,
    pub mixtures: BTreeMap<ClassId, Vec<(ClassId, f64)>>,
}

impl GroundTruth {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut out, self)?;
        out.write_all(b"\n")?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<GroundTruth> {
        Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
    }
}

fn draw_vec(rng: &mut ChaCha8Rng, normal: &Normal<f64>, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim).map(|_| scale * rng.sample(normal)).collect()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Generates a session-structured dataset plus its ground truth,
/// deterministically in `spec.seed`.
pub fn gen_synthetic(spec: &SynthSpec) -> Result<(Dataset, GroundTruth)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let sigma = spec.within_class_sigma;
    let min_sep = MIN_SEPARATION_SIGMAS * sigma;

    let mut base_means: Vec<Vec<f64>> = Vec::with_capacity(spec.base_classes);
    for _ in 0..spec.base_classes {
        let mut placed = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let candidate = draw_vec(&mut rng, &normal, spec.dim, MEAN_SCALE * sigma);
            if base_means.iter().all(|m| dist(m, &candidate) >= min_sep) {
                base_means.push(candidate);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Protocol(format!(
                "failed to place {} base means at >= {MIN_SEPARATION_SIGMAS} sigma separation \
                 after {PLACEMENT_ATTEMPTS} attempts; try a larger dim or a smaller \
                 within-class sigma",
                spec.base_classes
            )));
        }
    }

    let weight_dist = Uniform::new(0.25, 1.0).expect("valid range");
    let mut means: BTreeMap<ClassId, Vec<f64>> = BTreeMap::new();
    let mut mixtures: BTreeMap<ClassId, Vec<(ClassId, f64)>> = BTreeMap::new();
    for (b, mean) in base_means.iter().enumerate() {
        means.insert(b as ClassId, mean.clone());
    }
    for j in 0..spec.new_classes {
        let class = (spec.base_classes + j) as ClassId;
        let mut parents: Vec<usize> =
            rand::seq::index::sample(&mut rng, spec.base_classes, spec.mixture_support).into_vec();
        parents.sort_unstable();
        let raw: Vec<f64> = (0..spec.mixture_support)
            .map(|_| rng.sample(weight_dist))
            .collect();
        let total: f64 = raw.iter().sum();
        let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
        let mut mean = vec![0.0f64; spec.dim];
        for (&p, &w) in parents.iter().zip(&weights) {
            for (acc, v) in mean.iter_mut().zip(&base_means[p]) {
                *acc += w * v;
            }
        }
        for v in &mut mean {
            *v += spec.mixture_noise * rng.sample(normal);
        }
        mixtures.insert(
            class,
            parents
                .iter()
                .zip(&weights)
                .map(|(&p, &w)| (p as ClassId, w))
                .collect(),
        );
        means.insert(class, mean);
    }

    let mut records = Vec::new();
    let mut emit = |rng: &mut ChaCha8Rng,
                    class: ClassId,
                    session: usize,
                    split: Split,
                    n: usize,
                    means: &BTreeMap<ClassId, Vec<f64>>| {
        let mean = &means[&class];
        for _ in 0..n {
            let values: Vec<f64> = mean
                .iter()
                .map(|m| m + sigma * rng.sample(normal))
                .collect();
            records.push(EmbeddingRecord {
                split,
                session,
                label: class,
                feature: FeatureVector::from_raw(values),
            });
        }
    };
    for b in 0..spec.base_classes {
        emit(
            &mut rng,
            b as ClassId,
            0,
            Split::Train,
            spec.base_train_per_class,
            &means,
        );
        emit(
            &mut rng,
            b as ClassId,
            0,
            Split::Test,
            spec.test_per_class,
            &means,
        );
    }
    let per_session = spec.new_classes / spec.sessions_after_base;
    for j in 0..spec.new_classes {
        let class = (spec.base_classes + j) as ClassId;
        let session = 1 + j / per_session;
        emit(&mut rng, class, session, Split::Train, spec.shots, &means);
        emit(
            &mut rng,
            class,
            session,
            Split::Test,
            spec.test_per_class,
            &means,
        );
    }

    let dataset = Dataset::from_records(records)?;
    Ok((dataset, GroundTruth { means, mixtures }))
}

/// Euclidean distance of each registry prototype to its true class mean.
pub fn prototype_error(
    registry: &PrototypeRegistry,
    ground_truth: &GroundTruth,
) -> Result<BTreeMap<ClassId, f64>> {
    let mut out = BTreeMap::new();
    for (class, entry) in registry.iter() {
        let mean = ground_truth
            .means
            .get(&class)
            .ok_or(Error::UnknownClass(class))?;
        out.insert(class, dist(entry.prototype.values(), mean));
    }
    Ok(out)
}
