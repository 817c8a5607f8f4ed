//! The two evaluation loops: the multi-session class-incremental protocol and
//! the episodic few-shot protocol.
//!
//! Sessions run strictly in order. Session 0 classifies with the empirical
//! base prototypes; every later session adds empirical prototypes for its new
//! classes, calibrates them against the session-0 base prototypes, and
//! re-classifies the cumulative test set over all classes seen so far.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::calib::{calibrate_registry, calibrated_prototype, CalibParams};
use crate::classify::{predict, predict_batch};
use crate::data::{
    compute_prototype, empirical_prototypes, ClassId, Dataset, EmbeddingRecord, FeatureVector,
    PrototypeRegistry, Provenance,
};
use crate::error::{Error, Result};
use crate::metrics::{confidence_interval, MetricBundle, MetricOptions};

/// Everything produced at one session: the cumulative test-set predictions,
/// the registry used to make them, and the metric suite.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionResults {
    pub session: usize,
    pub predictions: Vec<ClassId>,
    pub true_labels: Vec<ClassId>,
    pub registry_snapshot: PrototypeRegistry,
    pub metrics: MetricBundle,
}

/// Runs the full class-incremental evaluation. The registry grows by exactly
/// the session's label space each step and never shrinks; base prototypes
/// stay empirical throughout.
pub fn run_fscil(
    dataset: &Dataset,
    params: &CalibParams,
    opts: &MetricOptions,
) -> Result<Vec<SessionResults>> {
    params.validate()?;
    opts.validate()?;
    let layout = dataset.layout();
    let base_ids: BTreeSet<ClassId> = layout.label_space(0).clone();
    let mut registry = empirical_prototypes(dataset, 0)?;
    let mut results = Vec::with_capacity(layout.session_count());
    for session in 0..layout.session_count() {
        if session >= 1 {
            registry.merge(empirical_prototypes(dataset, session)?)?;
            registry =
                calibrate_registry(&registry, &base_ids, layout.label_space(session), params)?;
        }
        let test = dataset.test_records_up_to(session);
        if test.is_empty() {
            return Err(Error::Protocol(format!(
                "session {session} has no test records to evaluate"
            )));
        }
        let features: Vec<FeatureVector> = test.iter().map(|r| r.feature.clone()).collect();
        let true_labels: Vec<ClassId> = test.iter().map(|r| r.label).collect();
        let predictions = predict_batch(&features, &registry)?;
        let metrics =
            MetricBundle::compute(&predictions, &true_labels, &registry, &base_ids, opts)?;
        results.push(SessionResults {
            session,
            predictions,
            true_labels,
            registry_snapshot: registry.clone(),
            metrics,
        });
    }
    Ok(results)
}

/// Episodic task shape: `ways` classes, `shots` support and `queries` query
/// samples per class, repeated `episodes` times from `seed`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpisodeSpec {
    pub ways: usize,
    pub shots: usize,
    pub queries: usize,
    pub episodes: usize,
    pub seed: u64,
}

impl Default for EpisodeSpec {
    fn default() -> Self {
        EpisodeSpec {
            ways: 5,
            shots: 5,
            queries: 15,
            episodes: 600,
            seed: 0,
        }
    }
}

impl EpisodeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.ways < 2 {
            return Err(Error::InvalidParam(format!(
                "ways must be at least 2, got {}",
                self.ways
            )));
        }
        for (name, value) in [
            ("shots", self.shots),
            ("queries", self.queries),
            ("episodes", self.episodes),
        ] {
            if value == 0 {
                return Err(Error::InvalidParam(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }
}

/// One sampled task: disjoint support and query records restricted to the
/// sampled classes.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub support: Vec<EmbeddingRecord>,
    pub query: Vec<EmbeddingRecord>,
    pub class_ids: Vec<ClassId>,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

fn episode_rng(seed: u64, episode_index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(episode_index as u64)))
}

/// The classes available to episodes: everything outside the base session.
fn novel_pool(dataset: &Dataset) -> Vec<ClassId> {
    let layout = dataset.layout();
    (1..layout.session_count())
        .flat_map(|s| layout.label_space(s).iter().copied())
        .collect()
}

/// Draws episode `episode_index` deterministically from `(spec.seed,
/// episode_index)`: `ways` novel classes without replacement, then
/// `shots + queries` records per class without replacement.
pub fn sample_episode(
    dataset: &Dataset,
    spec: &EpisodeSpec,
    episode_index: usize,
) -> Result<Episode> {
    spec.validate()?;
    let pool = novel_pool(dataset);
    if pool.len() < spec.ways {
        return Err(Error::Protocol(format!(
            "novel pool has {} classes, episode needs {}",
            pool.len(),
            spec.ways
        )));
    }
    let mut rng = episode_rng(spec.seed, episode_index);
    let class_ids: Vec<ClassId> = rand::seq::index::sample(&mut rng, pool.len(), spec.ways)
        .iter()
        .map(|i| pool[i])
        .collect();
    let per_class = spec.shots + spec.queries;
    let mut support = Vec::with_capacity(spec.ways * spec.shots);
    let mut query = Vec::with_capacity(spec.ways * spec.queries);
    for &class in &class_ids {
        let records = dataset.class_records(class);
        if records.len() < per_class {
            return Err(Error::Protocol(format!(
                "class {class} has {} records, episode needs {per_class}",
                records.len()
            )));
        }
        let picks = rand::seq::index::sample(&mut rng, records.len(), per_class);
        for (j, idx) in picks.iter().enumerate() {
            let rec = records[idx].clone();
            if j < spec.shots {
                support.push(rec);
            } else {
                query.push(rec);
            }
        }
    }
    Ok(Episode {
        support,
        query,
        class_ids,
    })
}

/// Per-episode accuracies with their mean and 95% half-width (absent for a
/// single episode).
#[derive(Debug, Clone, PartialEq)]
pub struct FslSummary {
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub ci_half_width: Option<f64>,
}

fn episode_accuracy(
    dataset: &Dataset,
    spec: &EpisodeSpec,
    params: &CalibParams,
    base_protos: &[FeatureVector],
    episode_index: usize,
) -> Result<f64> {
    let episode = sample_episode(dataset, spec, episode_index)?;
    let mut registry = PrototypeRegistry::new();
    for &class in &episode.class_ids {
        let features: Vec<FeatureVector> = episode
            .support
            .iter()
            .filter(|r| r.label == class)
            .map(|r| r.feature.clone())
            .collect();
        let proto = compute_prototype(&features)?;
        let calibrated = calibrated_prototype(&proto, base_protos, params)?;
        registry.insert(class, calibrated, Provenance::Empirical)?;
    }
    let mut hits = 0usize;
    for rec in &episode.query {
        hits += (predict(&rec.feature, &registry)? == rec.label) as usize;
    }
    Ok(100.0 * hits as f64 / episode.query.len() as f64)
}

/// Episodic evaluation on the novel classes. Support prototypes are
/// calibrated against the base session's train prototypes; queries are
/// classified among the episode's classes only. Episodes run independently;
/// the accuracy list is ordered by episode index.
pub fn run_fsl(dataset: &Dataset, spec: &EpisodeSpec, params: &CalibParams) -> Result<FslSummary> {
    spec.validate()?;
    params.validate()?;
    let base_registry = empirical_prototypes(dataset, 0)?;
    let base_protos: Vec<FeatureVector> = base_registry
        .iter()
        .map(|(_, e)| e.prototype.clone())
        .collect();
    let results: Vec<Result<f64>> = (0..spec.episodes)
        .into_par_iter()
        .map(|i| episode_accuracy(dataset, spec, params, &base_protos, i))
        .collect();
    let mut accuracies = Vec::with_capacity(results.len());
    for res in results {
        accuracies.push(res?);
    }
    let (mean, ci) = if accuracies.len() >= 2 {
        let (m, h) = confidence_interval(&accuracies)?;
        (m, Some(h))
    } else {
        (accuracies[0], None)
    };
    Ok(FslSummary {
        accuracies,
        mean,
        ci_half_width: ci,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calib::Strategy;
    use crate::data::Split;
    use crate::synth::{gen_synthetic, SynthSpec};
    use rand::Rng;

    fn record(split: Split, session: usize, label: ClassId, values: Vec<f64>) -> EmbeddingRecord {
        EmbeddingRecord {
            split,
            session,
            label,
            feature: FeatureVector::new(values).unwrap(),
        }
    }

    fn axis(i: usize, dim: usize, scale: f64) -> Vec<f64> {
        let mut v = vec![0.0; dim];
        v[i] = scale;
        v
    }

    #[test]
    fn single_session_run_is_base_only() {
        let mut records = Vec::new();
        for class in 0..3u32 {
            for _ in 0..4 {
                records.push(record(Split::Train, 0, class, axis(class as usize, 3, 1.0)));
            }
            records.push(record(Split::Test, 0, class, axis(class as usize, 3, 2.0)));
        }
        let ds = Dataset::from_records(records).unwrap();
        let results = run_fscil(&ds, &CalibParams::default(), &MetricOptions::default()).unwrap();
        assert_eq!(results.len(), 1);
        let r = &results[0];
        assert_eq!(r.predictions.len(), 3);
        assert_eq!(r.metrics.avg_acc, 100.0);
        assert!(r
            .registry_snapshot
            .iter()
            .all(|(_, e)| e.provenance == Provenance::Empirical));
    }

    #[test]
    fn session_zero_identical_across_strategies() {
        let (ds, _) = gen_synthetic(&SynthSpec::default()).unwrap();
        let teen = run_fscil(&ds, &CalibParams::default(), &MetricOptions::default()).unwrap();
        let protonet_params = CalibParams {
            strategy: Strategy::Protonet,
            ..CalibParams::default()
        };
        let protonet = run_fscil(&ds, &protonet_params, &MetricOptions::default()).unwrap();
        assert_eq!(teen[0], protonet[0]);
        assert!(protonet
            .iter()
            .flat_map(|r| r.registry_snapshot.iter())
            .all(|(_, e)| e.provenance == Provenance::Empirical));
    }

    #[test]
    fn registry_grows_by_session_spaces() {
        let spec = SynthSpec {
            new_classes: 6,
            sessions_after_base: 3,
            test_per_class: 10,
            base_train_per_class: 20,
            ..SynthSpec::default()
        };
        let (ds, _) = gen_synthetic(&spec).unwrap();
        let results = run_fscil(&ds, &CalibParams::default(), &MetricOptions::default()).unwrap();
        assert_eq!(results.len(), 4);
        for (i, r) in results.iter().enumerate() {
            let expect: BTreeSet<ClassId> = ds.layout().cumulative_space(i);
            let got: BTreeSet<ClassId> = r.registry_snapshot.class_ids().collect();
            assert_eq!(got, expect);
            assert_eq!(r.predictions.len(), r.true_labels.len());
            assert_eq!(r.predictions.len(), ds.test_records_up_to(i).len());
        }
    }

    #[test]
    fn rerunning_from_snapshot_reproduces_predictions() {
        let spec = SynthSpec {
            test_per_class: 10,
            base_train_per_class: 20,
            ..SynthSpec::default()
        };
        let (ds, _) = gen_synthetic(&spec).unwrap();
        let results = run_fscil(&ds, &CalibParams::default(), &MetricOptions::default()).unwrap();
        for r in &results {
            let features: Vec<FeatureVector> = ds
                .test_records_up_to(r.session)
                .iter()
                .map(|rec| rec.feature.clone())
                .collect();
            let again = predict_batch(&features, &r.registry_snapshot).unwrap();
            assert_eq!(again, r.predictions);
        }
    }

    #[test]
    fn missing_test_records_is_an_error() {
        let records = vec![
            record(Split::Train, 0, 0, vec![1.0, 0.0]),
            record(Split::Train, 0, 1, vec![0.0, 1.0]),
        ];
        let ds = Dataset::from_records(records).unwrap();
        match run_fscil(&ds, &CalibParams::default(), &MetricOptions::default()).unwrap_err() {
            Error::Protocol(msg) => assert!(msg.contains("no test records"), "{msg}"),
            other => panic!("expected protocol error, got {other:?}"),
        }
    }

    #[test]
    fn episodes_are_deterministic_per_index() {
        let (ds, _) = gen_synthetic(&SynthSpec::default()).unwrap();
        let spec = EpisodeSpec {
            ways: 3,
            shots: 2,
            queries: 5,
            episodes: 10,
            seed: 42,
        };
        let a = sample_episode(&ds, &spec, 7).unwrap();
        let b = sample_episode(&ds, &spec, 7).unwrap();
        assert_eq!(a, b);
        let c = sample_episode(&ds, &spec, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn episode_shape_and_disjointness() {
        let (ds, _) = gen_synthetic(&SynthSpec::default()).unwrap();
        let spec = EpisodeSpec {
            ways: 5,
            shots: 1,
            queries: 15,
            episodes: 1,
            seed: 3,
        };
        let ep = sample_episode(&ds, &spec, 0).unwrap();
        assert_eq!(ep.support.len(), 5);
        assert_eq!(ep.query.len(), 75);
        assert_eq!(ep.class_ids.len(), 5);
        for rec in ep.support.iter().chain(&ep.query) {
            assert!(ep.class_ids.contains(&rec.label));
        }
        // no record appears in both support and query
        for s in &ep.support {
            assert!(!ep.query.iter().any(|q| q == s));
        }
    }

    #[test]
    fn episodes_cover_the_whole_pool() {
        let spec = SynthSpec {
            new_classes: 20,
            test_per_class: 15,
            base_train_per_class: 20,
            ..SynthSpec::default()
        };
        let (ds, _) = gen_synthetic(&spec).unwrap();
        let espec = EpisodeSpec {
            ways: 5,
            shots: 1,
            queries: 15,
            episodes: 1000,
            seed: 0,
        };
        let mut seen = BTreeSet::new();
        for i in 0..1000 {
            let ep = sample_episode(&ds, &espec, i).unwrap();
            seen.extend(ep.class_ids);
        }
        assert_eq!(seen.len(), 20);
    }

    #[test]
    fn episode_pool_shortfalls_are_reported() {
        let (ds, _) = gen_synthetic(&SynthSpec::default()).unwrap();
        let too_many_ways = EpisodeSpec {
            ways: 6,
            shots: 1,
            queries: 1,
            episodes: 1,
            seed: 0,
        };
        match sample_episode(&ds, &too_many_ways, 0).unwrap_err() {
            Error::Protocol(msg) => assert!(msg.contains("novel pool"), "{msg}"),
            other => panic!("expected protocol error, got {other:?}"),
        }
        let too_many_records = EpisodeSpec {
            ways: 5,
            shots: 40,
            queries: 16,
            episodes: 1,
            seed: 0,
        };
        match sample_episode(&ds, &too_many_records, 0).unwrap_err() {
            Error::Protocol(msg) => assert!(msg.contains("records"), "{msg}"),
            other => panic!("expected protocol error, got {other:?}"),
        }
    }

    #[test]
    fn fsl_separable_construction_is_perfect() {
        // every record of a novel class is the same axis vector, so the
        // support mean reproduces it and all classes are orthogonal
        let mut records = vec![
            record(Split::Train, 0, 0, axis(6, 7, 1.0)),
            record(Split::Train, 0, 0, axis(6, 7, 1.0)),
        ];
        for class in 1..=6u32 {
            for i in 0..20 {
                let split = if i < 4 { Split::Train } else { Split::Test };
                records.push(record(split, 1, class, axis(class as usize - 1, 7, 1.0)));
            }
        }
        let ds = Dataset::from_records(records).unwrap();
        let spec = EpisodeSpec {
            ways: 5,
            shots: 2,
            queries: 10,
            episodes: 20,
            seed: 1,
        };
        let params = CalibParams {
            strategy: Strategy::Protonet,
            ..CalibParams::default()
        };
        let summary = run_fsl(&ds, &spec, &params).unwrap();
        assert!(summary.accuracies.iter().all(|&a| a == 100.0));
        assert_eq!(summary.mean, 100.0);
        assert_eq!(summary.ci_half_width, Some(0.0));
    }

    #[test]
    fn fsl_large_shot_well_separated_gaussians() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let dim = 7;
        let mut records = Vec::new();
        for i in 0..20 {
            let noise: Vec<f64> = (0..dim).map(|_| rng.random_range(-0.01..0.01)).collect();
            let mut v = axis(6, dim, 10.0);
            for (a, n) in v.iter_mut().zip(&noise) {
                *a += n;
            }
            let _ = i;
            records.push(record(Split::Train, 0, 0, v));
        }
        for class in 1..=6u32 {
            for _ in 0..80 {
                let mut v = axis(class as usize - 1, dim, 10.0);
                for a in v.iter_mut() {
                    *a += rng.random_range(-3.0..3.0);
                }
                records.push(record(Split::Train, 1, class, v));
            }
        }
        let ds = Dataset::from_records(records).unwrap();
        let spec = EpisodeSpec {
            ways: 5,
            shots: 50,
            queries: 15,
            episodes: 50,
            seed: 5,
        };
        let params = CalibParams {
            strategy: Strategy::Protonet,
            ..CalibParams::default()
        };
        let summary = run_fsl(&ds, &spec, &params).unwrap();
        assert!(summary.mean > 99.0, "mean {}", summary.mean);
        let arithmetic = summary.accuracies.iter().sum::<f64>() / summary.accuracies.len() as f64;
        assert!((summary.mean - arithmetic).abs() < 1e-12);
    }

    #[test]
    fn fsl_is_a_pure_function_of_inputs() {
        let (ds, _) = gen_synthetic(&SynthSpec::default()).unwrap();
        let spec = EpisodeSpec {
            episodes: 40,
            ..EpisodeSpec::default()
        };
        let a = run_fsl(&ds, &spec, &CalibParams::default()).unwrap();
        let b = run_fsl(&ds, &spec, &CalibParams::default()).unwrap();
        assert_eq!(a, b);
    }
}
