//! Domain data model: embedding records, session layouts, datasets, and
//! per-class prototype registries, plus the embedding CSV format.
//!
//! The embedding file is a CSV with header `split,session,label,f0,...,f{d-1}`.
//! `split` is `train` or `test`, `session` and `label` are non-negative decimal
//! integers, and the remaining columns are the feature coordinates. The layout
//! (session count, per-session label spaces, incremental shot counts) is
//! inferred from the records and validated on load.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Dense non-negative class identifier.
pub type ClassId = u32;

/// Which split a record belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(format!("invalid split {other:?} (expected train or test)")),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A d-dimensional embedding with finite coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    values: Vec<f64>,
}

impl FeatureVector {
    /// Builds a vector, rejecting NaN and infinite coordinates.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(FeatureVector { values })
    }

    /// Internal constructor for arithmetic results already known to be finite.
    pub(crate) fn from_raw(values: Vec<f64>) -> Self {
        debug_assert!(values.iter().all(|v| v.is_finite()));
        FeatureVector { values }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dot(&self, other: &FeatureVector) -> Result<f64> {
        self.check_dim(other)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum())
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Cosine similarity. Errors on zero vectors, where it is undefined.
    pub fn cosine(&self, other: &FeatureVector) -> Result<f64> {
        let dot = self.dot(other)?;
        let na = self.norm();
        let nb = other.norm();
        if na == 0.0 || nb == 0.0 {
            return Err(Error::ZeroVector);
        }
        Ok(dot / (na * nb))
    }

    pub fn distance(&self, other: &FeatureVector) -> Result<f64> {
        self.check_dim(other)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt())
    }

    pub fn scale(&self, factor: f64) -> FeatureVector {
        FeatureVector::from_raw(self.values.iter().map(|v| v * factor).collect())
    }

    fn check_dim(&self, other: &FeatureVector) -> Result<()> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: other.dim(),
            });
        }
        Ok(())
    }
}

/// One labelled embedding with its split and session assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub split: Split,
    pub session: usize,
    pub label: ClassId,
    pub feature: FeatureVector,
}

/// Session structure inferred from the records: disjoint per-session label
/// spaces plus the uniform N-way K-shot shape of the incremental sessions.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionLayout {
    session_count: usize,
    dim: usize,
    label_spaces: Vec<BTreeSet<ClassId>>,
    ways: Option<usize>,
    shots: Option<usize>,
}

impl SessionLayout {
    pub fn session_count(&self) -> usize {
        self.session_count
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn label_space(&self, session: usize) -> &BTreeSet<ClassId> {
        &self.label_spaces[session]
    }

    /// All classes seen up to and including `session`.
    pub fn cumulative_space(&self, session: usize) -> BTreeSet<ClassId> {
        self.label_spaces[..=session]
            .iter()
            .flatten()
            .copied()
            .collect()
    }

    /// Classes per incremental session (absent when there are none).
    pub fn ways(&self) -> Option<usize> {
        self.ways
    }

    /// Train records per incremental-session class (absent when there are none).
    pub fn shots(&self) -> Option<usize> {
        self.shots
    }
}

/// Immutable collection of embedding records with a validated layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    layout: SessionLayout,
    records: Vec<EmbeddingRecord>,
}

impl Dataset {
    /// Infers the layout from the records and validates it: consistent
    /// dimensions, contiguous sessions, disjoint label spaces, and uniform
    /// N-way K-shot incremental sessions.
    pub fn from_records(records: Vec<EmbeddingRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::EmptyInput("dataset has no records"));
        }
        let dim = records[0].feature.dim();
        for rec in &records {
            if rec.feature.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: rec.feature.dim(),
                });
            }
        }

        let session_count = records.iter().map(|r| r.session).max().unwrap() + 1;

        // Assign each label to the session where it first appears; a second
        // session claiming the same label is an overlap.
        let mut label_session: BTreeMap<ClassId, usize> = BTreeMap::new();
        for rec in &records {
            match label_session.get(&rec.label) {
                None => {
                    label_session.insert(rec.label, rec.session);
                }
                Some(&s) if s != rec.session => {
                    return Err(Error::Layout(format!(
                        "label space overlap: class {} appears in sessions {} and {}",
                        rec.label,
                        s.min(rec.session),
                        s.max(rec.session)
                    )));
                }
                Some(_) => {}
            }
        }

        let mut label_spaces = vec![BTreeSet::new(); session_count];
        for (&label, &session) in &label_session {
            label_spaces[session].insert(label);
        }
        for (session, space) in label_spaces.iter().enumerate() {
            if space.is_empty() {
                return Err(Error::Layout(format!("session {session} has no records")));
            }
        }

        // Uniform shape of the incremental sessions.
        let mut ways = None;
        let mut shots = None;
        if session_count > 1 {
            let mut train_counts: BTreeMap<ClassId, usize> = BTreeMap::new();
            for rec in &records {
                if rec.session >= 1 && rec.split == Split::Train {
                    *train_counts.entry(rec.label).or_insert(0) += 1;
                }
            }
            let n = label_spaces[1].len();
            for (session, space) in label_spaces.iter().enumerate().skip(1) {
                if space.len() != n {
                    return Err(Error::Layout(format!(
                        "session {session} has {} classes, expected {n} (ways mismatch)",
                        space.len()
                    )));
                }
            }
            let first_class = *label_spaces[1].iter().next().unwrap();
            let k = train_counts.get(&first_class).copied().unwrap_or(0);
            if k == 0 {
                return Err(Error::Layout(format!(
                    "class {first_class} in session 1 has no train records"
                )));
            }
            for (session, space) in label_spaces.iter().enumerate().skip(1) {
                for &class in space {
                    let count = train_counts.get(&class).copied().unwrap_or(0);
                    if count != k {
                        return Err(Error::Layout(format!(
                            "class {class} in session {session} has {count} train records, expected {k} (shot-count mismatch)"
                        )));
                    }
                }
            }
            ways = Some(n);
            shots = Some(k);
        }

        Ok(Dataset {
            layout: SessionLayout {
                session_count,
                dim,
                label_spaces,
                ways,
                shots,
            },
            records,
        })
    }

    pub fn layout(&self) -> &SessionLayout {
        &self.layout
    }

    pub fn records(&self) -> &[EmbeddingRecord] {
        &self.records
    }

    pub fn train_records(&self, session: usize) -> impl Iterator<Item = &EmbeddingRecord> {
        self.records
            .iter()
            .filter(move |r| r.split == Split::Train && r.session == session)
    }

    /// Test records of sessions `0..=session`, in file order. This is the
    /// cumulative test set evaluated at that session.
    pub fn test_records_up_to(&self, session: usize) -> Vec<&EmbeddingRecord> {
        self.records
            .iter()
            .filter(|r| r.split == Split::Test && r.session <= session)
            .collect()
    }

    /// Every record of one class regardless of split, in file order.
    pub fn class_records(&self, class: ClassId) -> Vec<&EmbeddingRecord> {
        self.records.iter().filter(|r| r.label == class).collect()
    }
}

/// Reads an embedding CSV. Parse errors carry the 1-based line number
/// (the header is line 1); layout violations name the offending class or
/// session.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let file = File::open(path)?;
    let mut lines = BufReader::new(file).lines();

    let header = lines.next().ok_or(Error::Parse {
        line: 1,
        message: "missing header row".into(),
    })??;
    let dim = parse_header(&header)?;

    let mut records = Vec::new();
    for (idx, line) in lines.enumerate() {
        let line_no = idx + 2;
        let line = line?;
        if line.is_empty() {
            continue;
        }
        records.push(parse_row(&line, dim, line_no)?);
    }
    Dataset::from_records(records)
}

fn parse_header(header: &str) -> Result<usize> {
    let cols: Vec<&str> = header.split(',').collect();
    let err = |message: String| Error::Parse { line: 1, message };
    if cols.len() < 4 {
        return Err(err(format!(
            "header has {} columns, expected split,session,label,f0,...",
            cols.len()
        )));
    }
    if cols[0] != "split" || cols[1] != "session" || cols[2] != "label" {
        return Err(err(format!(
            "header must start with split,session,label (got {},{},{})",
            cols[0], cols[1], cols[2]
        )));
    }
    for (i, col) in cols[3..].iter().enumerate() {
        if *col != format!("f{i}") {
            return Err(err(format!(
                "feature column {} named {col:?}, expected f{i}",
                i + 4
            )));
        }
    }
    Ok(cols.len() - 3)
}

fn parse_row(line: &str, dim: usize, line_no: usize) -> Result<EmbeddingRecord> {
    let err = |message: String| Error::Parse {
        line: line_no,
        message,
    };
    let cols: Vec<&str> = line.split(',').collect();
    if cols.len() != dim + 3 {
        return Err(err(format!(
            "row has {} columns, expected {}",
            cols.len(),
            dim + 3
        )));
    }
    let split = Split::from_str(cols[0]).map_err(err)?;
    let session = parse_index(cols[1], "session").map_err(err)?;
    let label = parse_index(cols[2], "label").map_err(err)? as ClassId;
    let mut values = Vec::with_capacity(dim);
    for col in &cols[3..] {
        let v: f64 = col
            .parse()
            .map_err(|_| err(format!("invalid feature value {col:?}")))?;
        if !v.is_finite() {
            return Err(err(format!("non-finite feature value {col:?}")));
        }
        values.push(v);
    }
    Ok(EmbeddingRecord {
        split,
        session,
        label,
        feature: FeatureVector::from_raw(values),
    })
}

fn parse_index(s: &str, field: &str) -> std::result::Result<usize, String> {
    if s.is_empty() || !s.bytes().all(|b| b.is_ascii_digit()) {
        return Err(format!(
            "invalid {field} {s:?} (expected non-negative integer)"
        ));
    }
    s.parse()
        .map_err(|_| format!("invalid {field} {s:?} (out of range)"))
}

/// Writes the embedding CSV format read by [`load_dataset`]. Floats use the
/// shortest round-trip decimal form, so write-then-load reproduces the
/// dataset exactly.
pub fn write_dataset<W: Write>(dataset: &Dataset, out: &mut W) -> Result<()> {
    let dim = dataset.layout().dim();
    let mut header = String::from("split,session,label");
    for i in 0..dim {
        header.push_str(&format!(",f{i}"));
    }
    writeln!(out, "{header}")?;
    for rec in dataset.records() {
        write!(out, "{},{},{}", rec.split, rec.session, rec.label)?;
        for v in rec.feature.values() {
            write!(out, ",{v}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_dataset(dataset, &mut out)?;
    out.flush()?;
    Ok(())
}

/// How a prototype was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Empirical,
    Calibrated,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeEntry {
    pub prototype: FeatureVector,
    pub provenance: Provenance,
}

/// Per-class prototype vectors keyed by class id. All entries share one
/// dimension; iteration order is ascending class id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PrototypeRegistry {
    entries: BTreeMap<ClassId, PrototypeEntry>,
}

impl PrototypeRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(
        &mut self,
        class: ClassId,
        prototype: FeatureVector,
        provenance: Provenance,
    ) -> Result<()> {
        if let Some(dim) = self.dim() {
            if prototype.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: prototype.dim(),
                });
            }
        }
        if self.entries.contains_key(&class) {
            return Err(Error::DuplicateClass(class));
        }
        self.entries.insert(
            class,
            PrototypeEntry {
                prototype,
                provenance,
            },
        );
        Ok(())
    }

    /// Replaces an existing entry, keeping dimension consistency.
    pub(crate) fn replace(
        &mut self,
        class: ClassId,
        prototype: FeatureVector,
        provenance: Provenance,
    ) -> Result<()> {
        if !self.entries.contains_key(&class) {
            return Err(Error::UnknownClass(class));
        }
        if prototype.dim() != self.dim().unwrap() {
            return Err(Error::DimensionMismatch {
                expected: self.dim().unwrap(),
                actual: prototype.dim(),
            });
        }
        self.entries.insert(
            class,
            PrototypeEntry {
                prototype,
                provenance,
            },
        );
        Ok(())
    }

    pub fn get(&self, class: ClassId) -> Option<&PrototypeEntry> {
        self.entries.get(&class)
    }

    pub fn prototype(&self, class: ClassId) -> Result<&FeatureVector> {
        self.entries
            .get(&class)
            .map(|e| &e.prototype)
            .ok_or(Error::UnknownClass(class))
    }

    pub fn contains(&self, class: ClassId) -> bool {
        self.entries.contains_key(&class)
    }

    pub fn class_ids(&self) -> impl Iterator<Item = ClassId> + '_ {
        self.entries.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ClassId, &PrototypeEntry)> {
        self.entries.iter().map(|(&k, v)| (k, v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.entries.values().next().map(|e| e.prototype.dim())
    }

    /// Adds every entry of `other`; duplicate class ids are rejected.
    pub fn merge(&mut self, other: PrototypeRegistry) -> Result<()> {
        for (class, entry) in other.entries {
            if let Some(dim) = self.dim() {
                if entry.prototype.dim() != dim {
                    return Err(Error::DimensionMismatch {
                        expected: dim,
                        actual: entry.prototype.dim(),
                    });
                }
            }
            if self.entries.contains_key(&class) {
                return Err(Error::DuplicateClass(class));
            }
            self.entries.insert(class, entry);
        }
        Ok(())
    }
}

/// Element-wise mean of the given vectors, accumulated in f64.
pub fn compute_prototype(features: &[FeatureVector]) -> Result<FeatureVector> {
    let first = features
        .first()
        .ok_or(Error::EmptyInput("no samples for class"))?;
    let dim = first.dim();
    let mut sum = vec![0.0f64; dim];
    for f in features {
        if f.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: f.dim(),
            });
        }
        for (acc, v) in sum.iter_mut().zip(f.values()) {
            *acc += v;
        }
    }
    let n = features.len() as f64;
    Ok(FeatureVector::from_raw(
        sum.into_iter().map(|s| s / n).collect(),
    ))
}

/// Builds empirical prototypes for every class of one session from that
/// session's train records.
pub fn empirical_prototypes(dataset: &Dataset, session: usize) -> Result<PrototypeRegistry> {
    if session >= dataset.layout().session_count() {
        return Err(Error::Protocol(format!(
            "session {session} out of range (dataset has {} sessions)",
            dataset.layout().session_count()
        )));
    }
    let mut per_class: BTreeMap<ClassId, Vec<FeatureVector>> = BTreeMap::new();
    for rec in dataset.train_records(session) {
        per_class
            .entry(rec.label)
            .or_default()
            .push(rec.feature.clone());
    }
    let mut registry = PrototypeRegistry::new();
    for &class in dataset.layout().label_space(session) {
        let features = per_class.remove(&class).ok_or(Error::EmptyClass(class))?;
        registry.insert(class, compute_prototype(&features)?, Provenance::Empirical)?;
    }
    Ok(registry)
}
