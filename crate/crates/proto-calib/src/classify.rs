//! Nearest-prototype classification under cosine similarity.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::data::{ClassId, FeatureVector, PrototypeRegistry};
use crate::error::{Error, Result};

/// Per-class similarity scores for one sample; covers exactly the registry's
/// classes.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitVector {
    scores: BTreeMap<ClassId, f64>,
}

impl LogitVector {
    pub fn score(&self, class: ClassId) -> Option<f64> {
        self.scores.get(&class).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ClassId, f64)> + '_ {
        self.scores.iter().map(|(&k, &v)| (k, v))
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Highest-scoring class; exact ties go to the lowest class id.
    pub fn argmax(&self) -> Option<ClassId> {
        let mut best: Option<(ClassId, f64)> = None;
        for (&class, &score) in &self.scores {
            match best {
                Some((_, s)) if score <= s => {}
                _ => best = Some((class, score)),
            }
        }
        best.map(|(class, _)| class)
    }
}

/// Cosine similarity of the sample to every prototype in the registry.
pub fn logits(feature: &FeatureVector, registry: &PrototypeRegistry) -> Result<LogitVector> {
    if registry.is_empty() {
        return Err(Error::EmptyInput("empty prototype registry"));
    }
    let mut scores = BTreeMap::new();
    for (class, entry) in registry.iter() {
        scores.insert(class, feature.cosine(&entry.prototype)?);
    }
    Ok(LogitVector { scores })
}

/// Most similar class by cosine; ties broken by lowest class id.
pub fn predict(feature: &FeatureVector, registry: &PrototypeRegistry) -> Result<ClassId> {
    Ok(logits(feature, registry)?.argmax().unwrap())
}

/// Order-preserving batch prediction. Fails on the first erroring element,
/// reporting its index, regardless of internal parallelism.
pub fn predict_batch(
    features: &[FeatureVector],
    registry: &PrototypeRegistry,
) -> Result<Vec<ClassId>> {
    let results: Vec<Result<ClassId>> = features.par_iter().map(|f| predict(f, registry)).collect();
    let mut out = Vec::with_capacity(results.len());
    for (index, res) in results.into_iter().enumerate() {
        match res {
            Ok(class) => out.push(class),
            Err(source) => {
                return Err(Error::BatchElement {
                    index,
                    source: Box::new(source),
                })
            }
        }
    }
    Ok(out)
}
