//! Performance measures and diagnostics: accuracy decomposition, harmonic
//! mean, performance drop, base-vs-new confusion rates, similar-class
//! misclassification ratios, and the prediction-change taxonomy.
//!
//! All rates are percentages. A rate whose denominator is empty is reported
//! as absent (`None`), never as 0 or 100.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::data::{ClassId, PrototypeRegistry};
use crate::error::{Error, Result};

/// Similar-set sizes for the misclassification-ratio diagnostics: each new
/// class gets its `m_new_similar` most similar base classes; each base class
/// gets its `floor(base_fraction * |new classes|)` most similar new classes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricOptions {
    pub m_new_similar: usize,
    pub base_fraction: f64,
}

impl Default for MetricOptions {
    fn default() -> Self {
        MetricOptions {
            m_new_similar: 10,
            base_fraction: 0.20,
        }
    }
}

impl MetricOptions {
    pub fn validate(&self) -> Result<()> {
        if self.m_new_similar == 0 {
            return Err(Error::InvalidParam(
                "m-new-similar must be at least 1".into(),
            ));
        }
        if !(self.base_fraction > 0.0 && self.base_fraction <= 1.0) {
            return Err(Error::InvalidParam(format!(
                "base-fraction must be in (0, 1], got {}",
                self.base_fraction
            )));
        }
        Ok(())
    }
}

/// The per-session metric suite. Accuracy splits are by TRUE label side;
/// rates with an empty denominator are absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricBundle {
    pub avg_acc: f64,
    pub base_acc: Option<f64>,
    pub new_acc: Option<f64>,
    pub hmean: Option<f64>,
    pub fnr: Option<f64>,
    pub fpr: Option<f64>,
    pub tbr: Option<f64>,
    pub tnr: Option<f64>,
}

impl MetricBundle {
    /// Computes every metric for one prediction set. The registry supplies
    /// the prototypes whose similarities define the tbr/tnr sets; it must
    /// cover every class appearing in the predictions and labels.
    pub fn compute(
        preds: &[ClassId],
        labels: &[ClassId],
        registry: &PrototypeRegistry,
        base_ids: &BTreeSet<ClassId>,
        opts: &MetricOptions,
    ) -> Result<MetricBundle> {
        let (avg_acc, base_acc, new_acc) = accuracy_decomposition(preds, labels, base_ids)?;
        let hmean = match (base_acc, new_acc) {
            (Some(b), Some(n)) => Some(harmonic_mean(b, n)),
            _ => None,
        };
        let (fnr, fpr) = fnr_fpr(preds, labels, base_ids)?;
        let (tbr, tnr) = tbr_tnr(
            preds,
            labels,
            registry,
            base_ids,
            opts.m_new_similar,
            opts.base_fraction,
        )?;
        Ok(MetricBundle {
            avg_acc,
            base_acc,
            new_acc,
            hmean,
            fnr,
            fpr,
            tbr,
            tnr,
        })
    }
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::InvalidParam(format!(
            "prediction/label length mismatch: {a} vs {b}"
        )));
    }
    Ok(())
}

fn percent(hits: usize, total: usize) -> f64 {
    100.0 * hits as f64 / total as f64
}

/// Accuracy over all samples, over samples whose true label is in `base_ids`,
/// and over the rest. A group with no samples yields an absent accuracy.
pub fn accuracy_decomposition(
    preds: &[ClassId],
    labels: &[ClassId],
    base_ids: &BTreeSet<ClassId>,
) -> Result<(f64, Option<f64>, Option<f64>)> {
    check_lengths(preds.len(), labels.len())?;
    if preds.is_empty() {
        return Err(Error::EmptyInput("no samples to score"));
    }
    let mut hits = 0usize;
    let mut base = (0usize, 0usize);
    let mut new = (0usize, 0usize);
    for (&p, &l) in preds.iter().zip(labels) {
        let correct = p == l;
        hits += correct as usize;
        let group = if base_ids.contains(&l) {
            &mut base
        } else {
            &mut new
        };
        group.0 += correct as usize;
        group.1 += 1;
    }
    let rate = |(h, t): (usize, usize)| (t > 0).then(|| percent(h, t));
    Ok((percent(hits, preds.len()), rate(base), rate(new)))
}

/// Harmonic mean of two accuracy percentages: `2bn / (b + n)`, and 0 when
/// either side is 0.
pub fn harmonic_mean(base_acc: f64, new_acc: f64) -> f64 {
    if base_acc == 0.0 || new_acc == 0.0 {
        return 0.0;
    }
    2.0 * base_acc * new_acc / (base_acc + new_acc)
}

/// First-session accuracy minus last-session accuracy.
pub fn performance_drop(acc_sequence: &[f64]) -> Result<f64> {
    match (acc_sequence.first(), acc_sequence.last()) {
        (Some(first), Some(last)) => Ok(first - last),
        _ => Err(Error::EmptyInput("empty accuracy sequence")),
    }
}

/// Binarizes predictions by base/new membership with base as the positive
/// class: FNR = FN/(TP+FN), FPR = FP/(FP+TN), both scaled to percent.
/// A side with no samples yields an absent rate.
pub fn fnr_fpr(
    preds: &[ClassId],
    labels: &[ClassId],
    base_ids: &BTreeSet<ClassId>,
) -> Result<(Option<f64>, Option<f64>)> {
    check_lengths(preds.len(), labels.len())?;
    let mut tp = 0usize;
    let mut fn_ = 0usize;
    let mut fp = 0usize;
    let mut tn = 0usize;
    for (&p, &l) in preds.iter().zip(labels) {
        match (base_ids.contains(&l), base_ids.contains(&p)) {
            (true, true) => tp += 1,
            (true, false) => fn_ += 1,
            (false, true) => fp += 1,
            (false, false) => tn += 1,
        }
    }
    let fnr = (tp + fn_ > 0).then(|| percent(fn_, tp + fn_));
    let fpr = (fp + tn > 0).then(|| percent(fp, fp + tn));
    Ok((fnr, fpr))
}

/// The `k` ids from `candidates` most similar to `target`'s prototype, ties
/// to the lower class id. `k` is clamped to the candidate count.
fn most_similar(
    target: ClassId,
    candidates: &[ClassId],
    registry: &PrototypeRegistry,
    k: usize,
) -> Result<BTreeSet<ClassId>> {
    let proto = registry.prototype(target)?;
    let mut sims = Vec::with_capacity(candidates.len());
    for &c in candidates {
        sims.push((proto.cosine(registry.prototype(c)?)?, c));
    }
    sims.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    Ok(sims[..k.min(sims.len())].iter().map(|&(_, c)| c).collect())
}

/// Among misclassified new samples, the percentage predicted into their true
/// class's most-similar base set; symmetrically for misclassified base
/// samples and most-similar new sets. Absent when the respective
/// misclassified pool is empty, and both absent when there are no new
/// classes yet.
pub fn tbr_tnr(
    preds: &[ClassId],
    labels: &[ClassId],
    registry: &PrototypeRegistry,
    base_ids: &BTreeSet<ClassId>,
    m_new_similar: usize,
    base_fraction: f64,
) -> Result<(Option<f64>, Option<f64>)> {
    check_lengths(preds.len(), labels.len())?;
    MetricOptions {
        m_new_similar,
        base_fraction,
    }
    .validate()?;
    for &c in preds.iter().chain(labels) {
        if !registry.contains(c) {
            return Err(Error::UnknownClass(c));
        }
    }
    let base: Vec<ClassId> = registry
        .class_ids()
        .filter(|c| base_ids.contains(c))
        .collect();
    let new: Vec<ClassId> = registry
        .class_ids()
        .filter(|c| !base_ids.contains(c))
        .collect();
    if new.is_empty() || base.is_empty() {
        return Ok((None, None));
    }

    let mut similar_base: BTreeMap<ClassId, BTreeSet<ClassId>> = BTreeMap::new();
    for &n in &new {
        similar_base.insert(n, most_similar(n, &base, registry, m_new_similar)?);
    }
    let new_set_size = (base_fraction * new.len() as f64).floor() as usize;
    let mut similar_new: BTreeMap<ClassId, BTreeSet<ClassId>> = BTreeMap::new();
    for &b in &base {
        similar_new.insert(b, most_similar(b, &new, registry, new_set_size)?);
    }

    let mut new_mis = 0usize;
    let mut new_to_similar_base = 0usize;
    let mut base_mis = 0usize;
    let mut base_to_similar_new = 0usize;
    for (&p, &l) in preds.iter().zip(labels) {
        if p == l {
            continue;
        }
        if base_ids.contains(&l) {
            base_mis += 1;
            base_to_similar_new += similar_new[&l].contains(&p) as usize;
        } else {
            new_mis += 1;
            new_to_similar_base += similar_base[&l].contains(&p) as usize;
        }
    }
    let tbr = (new_mis > 0).then(|| percent(new_to_similar_base, new_mis));
    let tnr = (base_mis > 0).then(|| percent(base_to_similar_new, base_mis));
    Ok((tbr, tnr))
}

/// Counts for one prediction-change category with its base/new composition
/// by true label.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CategoryStats {
    pub count: usize,
    pub base_count: usize,
    pub new_count: usize,
}

impl CategoryStats {
    fn add(&mut self, is_base: bool) {
        self.count += 1;
        if is_base {
            self.base_count += 1;
        } else {
            self.new_count += 1;
        }
    }

    /// Percentage of the category coming from base-class samples; absent for
    /// an empty category.
    pub fn base_pct(&self) -> Option<f64> {
        (self.count > 0).then(|| percent(self.base_count, self.count))
    }

    pub fn new_pct(&self) -> Option<f64> {
        (self.count > 0).then(|| percent(self.new_count, self.count))
    }
}

/// Partition of the test set by how predictions moved between two runs:
/// unchanged, wrong-to-right, right-to-wrong, and changed-but-still-wrong.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ChangeAnalysis {
    pub uc: CategoryStats,
    pub wr: CategoryStats,
    pub rw: CategoryStats,
    pub ww: CategoryStats,
    pub total: usize,
}

/// Assigns every sample to exactly one of UC / WR / RW / WW and records the
/// base/new composition of each category.
pub fn prediction_change(
    preds_before: &[ClassId],
    preds_after: &[ClassId],
    labels: &[ClassId],
    base_ids: &BTreeSet<ClassId>,
) -> Result<ChangeAnalysis> {
    check_lengths(preds_before.len(), preds_after.len())?;
    check_lengths(preds_before.len(), labels.len())?;
    let mut out = ChangeAnalysis {
        total: labels.len(),
        ..ChangeAnalysis::default()
    };
    for ((&b, &a), &l) in preds_before.iter().zip(preds_after).zip(labels) {
        let is_base = base_ids.contains(&l);
        let cat = if b == a {
            &mut out.uc
        } else if a == l {
            &mut out.wr
        } else if b == l {
            &mut out.rw
        } else {
            &mut out.ww
        };
        cat.add(is_base);
    }
    Ok(out)
}

/// Mean and 95% half-width (1.96 standard errors, sample standard deviation).
pub fn confidence_interval(values: &[f64]) -> Result<(f64, f64)> {
    if values.len() < 2 {
        return Err(Error::EmptyInput(
            "confidence interval needs at least 2 values",
        ));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    Ok((mean, 1.96 * var.sqrt() / n.sqrt()))
}
