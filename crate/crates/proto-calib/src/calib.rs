//! Similarity-weighted prototype calibration.
//!
//! A few-shot class prototype is pulled toward the base prototypes it
//! resembles: `calibrated = alpha * proto + (1 - alpha) * delta`, where
//! `delta` is a softmax-of-scaled-cosine weighted combination of all base
//! prototypes. The `simteen` ablation replaces the soft weights with the
//! unweighted sum (or mean) of the k most similar base prototypes.

use std::collections::BTreeSet;
use std::str::FromStr;

use crate::data::{ClassId, FeatureVector, PrototypeRegistry, Provenance};
use crate::error::{Error, Result};

/// Which calibration to apply to incremental-session prototypes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    /// No calibration: empirical prototypes are used as-is.
    Protonet,
    /// Softmax-of-scaled-cosine weighted fusion with the base prototypes.
    Teen,
    /// Hard top-k fusion without similarity weights.
    SimTeen,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Protonet => "protonet",
            Strategy::Teen => "teen",
            Strategy::SimTeen => "simteen",
        }
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "protonet" => Ok(Strategy::Protonet),
            "teen" => Ok(Strategy::Teen),
            "simteen" => Ok(Strategy::SimTeen),
            other => Err(format!(
                "invalid strategy {other:?} (expected protonet, teen, or simteen)"
            )),
        }
    }
}

/// Calibration hyperparameters. `alpha` is the fusion coefficient (1 keeps the
/// empirical prototype untouched), `tau` sharpens the similarity weights, and
/// `simteen_k`/`simteen_mean` only apply to the simteen strategy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibParams {
    pub strategy: Strategy,
    pub alpha: f64,
    pub tau: f64,
    pub simteen_k: usize,
    pub simteen_mean: bool,
}

impl Default for CalibParams {
    fn default() -> Self {
        CalibParams {
            strategy: Strategy::Teen,
            alpha: 0.5,
            tau: 16.0,
            simteen_k: 1,
            simteen_mean: false,
        }
    }
}

impl CalibParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) || self.alpha.is_nan() {
            return Err(Error::InvalidParam(format!(
                "alpha must be in [0, 1], got {}",
                self.alpha
            )));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidParam(format!(
                "tau must be positive, got {}",
                self.tau
            )));
        }
        if self.simteen_k == 0 {
            return Err(Error::InvalidParam("simteen-k must be at least 1".into()));
        }
        Ok(())
    }
}

/// Softmax weights over the base prototypes, ordered by base class position.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector {
    weights: Vec<f64>,
}

impl WeightVector {
    pub fn values(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// Cosine similarity scaled by `tau`; result lies in [-tau, tau].
pub fn scaled_cosine(a: &FeatureVector, b: &FeatureVector, tau: f64) -> Result<f64> {
    check_tau(tau)?;
    Ok(a.cosine(b)? * tau)
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::InvalidParam(format!(
            "tau must be positive, got {tau}"
        )));
    }
    Ok(())
}

/// Softmax over tau-scaled cosine similarities to every base prototype.
/// Computed with max-subtraction so large tau does not overflow.
pub fn softmax_weights(
    new_proto: &FeatureVector,
    base_protos: &[FeatureVector],
    tau: f64,
) -> Result<WeightVector> {
    if base_protos.is_empty() {
        return Err(Error::EmptyInput("no base prototypes"));
    }
    let mut scores = Vec::with_capacity(base_protos.len());
    for base in base_protos {
        scores.push(scaled_cosine(new_proto, base, tau)?);
    }
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut weights: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }
    Ok(WeightVector { weights })
}

/// The fusion target: the weighted combination of base prototypes, which lies
/// in their convex hull.
pub fn calibration_item(
    new_proto: &FeatureVector,
    base_protos: &[FeatureVector],
    tau: f64,
) -> Result<FeatureVector> {
    let weights = softmax_weights(new_proto, base_protos, tau)?;
    let dim = base_protos[0].dim();
    let mut out = vec![0.0f64; dim];
    for (w, base) in weights.values().iter().zip(base_protos) {
        for (acc, v) in out.iter_mut().zip(base.values()) {
            *acc += w * v;
        }
    }
    Ok(FeatureVector::from_raw(out))
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) || alpha.is_nan() {
        return Err(Error::InvalidParam(format!(
            "alpha must be in [0, 1], got {alpha}"
        )));
    }
    Ok(())
}

fn fuse(proto: &FeatureVector, target: &FeatureVector, alpha: f64) -> FeatureVector {
    FeatureVector::from_raw(
        proto
            .values()
            .iter()
            .zip(target.values())
            .map(|(p, t)| alpha * p + (1.0 - alpha) * t)
            .collect(),
    )
}

/// Soft calibration: `alpha * proto + (1 - alpha) * calibration_item(...)`.
/// The endpoints are exact: alpha 1 returns the prototype unchanged, alpha 0
/// returns the calibration item.
pub fn calibrate_teen(
    new_proto: &FeatureVector,
    base_protos: &[FeatureVector],
    alpha: f64,
    tau: f64,
) -> Result<FeatureVector> {
    check_alpha(alpha)?;
    if alpha == 1.0 {
        check_tau(tau)?;
        return Ok(new_proto.clone());
    }
    let item = calibration_item(new_proto, base_protos, tau)?;
    if alpha == 0.0 {
        return Ok(item);
    }
    Ok(fuse(new_proto, &item, alpha))
}

/// Hard-weight ablation: fuses with the unweighted sum of the `k` base
/// prototypes most similar by cosine (mean instead of sum when `mean` is
/// set). Similarity ties go to the lower index.
pub fn calibrate_simteen(
    new_proto: &FeatureVector,
    base_protos: &[FeatureVector],
    alpha: f64,
    k: usize,
    mean: bool,
) -> Result<FeatureVector> {
    check_alpha(alpha)?;
    if base_protos.is_empty() {
        return Err(Error::EmptyInput("no base prototypes"));
    }
    if k == 0 || k > base_protos.len() {
        return Err(Error::InvalidParam(format!(
            "simteen-k must be in 1..={}, got {k}",
            base_protos.len()
        )));
    }
    let mut sims = Vec::with_capacity(base_protos.len());
    for (i, base) in base_protos.iter().enumerate() {
        sims.push((new_proto.cosine(base)?, i));
    }
    if alpha == 1.0 {
        return Ok(new_proto.clone());
    }
    // Descending similarity; equal similarities keep ascending index order.
    sims.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let dim = base_protos[0].dim();
    let mut combined = vec![0.0f64; dim];
    for &(_, idx) in &sims[..k] {
        for (acc, v) in combined.iter_mut().zip(base_protos[idx].values()) {
            *acc += v;
        }
    }
    if mean {
        for v in &mut combined {
            *v /= k as f64;
        }
    }
    let target = FeatureVector::from_raw(combined);
    if alpha == 0.0 {
        return Ok(target);
    }
    Ok(fuse(new_proto, &target, alpha))
}

/// Applies the configured calibration to one prototype given the ordered base
/// prototypes.
pub(crate) fn calibrated_prototype(
    proto: &FeatureVector,
    base_protos: &[FeatureVector],
    params: &CalibParams,
) -> Result<FeatureVector> {
    match params.strategy {
        Strategy::Protonet => Ok(proto.clone()),
        Strategy::Teen => calibrate_teen(proto, base_protos, params.alpha, params.tau),
        Strategy::SimTeen => calibrate_simteen(
            proto,
            base_protos,
            params.alpha,
            params.simteen_k,
            params.simteen_mean,
        ),
    }
}

/// Calibrates every `new_ids` entry against the `base_ids` prototypes and
/// marks it as calibrated. Base entries pass through bit-identical; the
/// protonet strategy returns the registry unchanged.
pub fn calibrate_registry(
    registry: &PrototypeRegistry,
    base_ids: &BTreeSet<ClassId>,
    new_ids: &BTreeSet<ClassId>,
    params: &CalibParams,
) -> Result<PrototypeRegistry> {
    params.validate()?;
    if let Some(&overlap) = base_ids.intersection(new_ids).next() {
        return Err(Error::InvalidParam(format!(
            "class {overlap} is listed as both base and new"
        )));
    }
    for &id in base_ids.iter().chain(new_ids) {
        if !registry.contains(id) {
            return Err(Error::UnknownClass(id));
        }
    }
    let mut out = registry.clone();
    if params.strategy == Strategy::Protonet {
        return Ok(out);
    }
    let base_protos: Vec<FeatureVector> = base_ids
        .iter()
        .map(|&id| registry.prototype(id).cloned())
        .collect::<Result<_>>()?;
    for &id in new_ids {
        let calibrated = calibrated_prototype(registry.prototype(id)?, &base_protos, params)?;
        out.replace(id, calibrated, Provenance::Calibrated)?;
    }
    Ok(out)
}
