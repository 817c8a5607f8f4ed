//! Report assembly and serialization.
//!
//! Reports are byte-stable for identical inputs. CSV leaves absent values as
//! empty cells; JSON uses null. Floats serialize in the shortest decimal form
//! that round-trips.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{ClassId, PrototypeRegistry};
use crate::error::{Error, Result};
use crate::metrics::{
    fnr_fpr, performance_drop, prediction_change, tbr_tnr, CategoryStats, MetricBundle,
    MetricOptions,
};
use crate::protocol::{FslSummary, SessionResults};

/// Output encoding for every report type.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(format!("invalid format {other:?} (expected csv or json)")),
        }
    }
}

fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One session's metrics keyed by session index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRow {
    pub session: usize,
    #[serde(flatten)]
    pub metrics: MetricBundle,
}

/// Per-session metric rows plus the first-to-last accuracy drop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FscilReport {
    pub sessions: Vec<SessionRow>,
    pub pd: f64,
}

impl FscilReport {
    pub fn from_results(results: &[SessionResults]) -> Result<FscilReport> {
        let accs: Vec<f64> = results.iter().map(|r| r.metrics.avg_acc).collect();
        Ok(FscilReport {
            sessions: results
                .iter()
                .map(|r| SessionRow {
                    session: r.session,
                    metrics: r.metrics.clone(),
                })
                .collect(),
            pd: performance_drop(&accs)?,
        })
    }

    pub fn write(&self, format: ReportFormat, out: &mut dyn Write) -> Result<()> {
        match format {
            ReportFormat::Csv => {
                writeln!(
                    out,
                    "session,avg_acc,base_acc,new_acc,hmean,fnr,fpr,tbr,tnr"
                )?;
                for row in &self.sessions {
                    let m = &row.metrics;
                    writeln!(
                        out,
                        "{},{},{},{},{},{},{},{},{}",
                        row.session,
                        m.avg_acc,
                        opt_cell(m.base_acc),
                        opt_cell(m.new_acc),
                        opt_cell(m.hmean),
                        opt_cell(m.fnr),
                        opt_cell(m.fpr),
                        opt_cell(m.tbr),
                        opt_cell(m.tnr)
                    )?;
                }
                writeln!(out, "pd,{},,,,,,,", self.pd)?;
            }
            ReportFormat::Json => write_json(self, out)?,
        }
        Ok(())
    }
}

/// Per-episode accuracies plus their mean and 95% half-width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FslReport {
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub ci95: Option<f64>,
}

impl FslReport {
    pub fn from_summary(summary: &FslSummary) -> FslReport {
        FslReport {
            accuracies: summary.accuracies.clone(),
            mean: summary.mean,
            ci95: summary.ci_half_width,
        }
    }

    pub fn write(&self, format: ReportFormat, out: &mut dyn Write) -> Result<()> {
        match format {
            ReportFormat::Csv => {
                writeln!(out, "episode,accuracy")?;
                for (i, acc) in self.accuracies.iter().enumerate() {
                    writeln!(out, "{i},{acc}")?;
                }
                writeln!(out, "mean,{}", self.mean)?;
                writeln!(out, "ci95,{}", opt_cell(self.ci95))?;
            }
            ReportFormat::Json => write_json(self, out)?,
        }
        Ok(())
    }
}

fn write_json<T: Serialize>(value: &T, out: &mut dyn Write) -> Result<()> {
    serde_json::to_writer_pretty(&mut *out, value)?;
    out.write_all(b"\n")?;
    Ok(())
}

/// One prediction-change category with its composition by true-label side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryRow {
    pub category: String,
    pub count: usize,
    pub base_pct: Option<f64>,
    pub new_pct: Option<f64>,
}

impl CategoryRow {
    fn from_stats(category: &str, stats: CategoryStats) -> CategoryRow {
        CategoryRow {
            category: category.to_string(),
            count: stats.count,
            base_pct: stats.base_pct(),
            new_pct: stats.new_pct(),
        }
    }
}

/// Base/new confusion rates of one prediction set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticRates {
    pub fnr: Option<f64>,
    pub fpr: Option<f64>,
    pub tbr: Option<f64>,
    pub tnr: Option<f64>,
}

/// Full diagnostic comparison of two prediction files over one test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyzeReport {
    pub total: usize,
    pub categories: Vec<CategoryRow>,
    pub before: DiagnosticRates,
    pub after: DiagnosticRates,
}

impl AnalyzeReport {
    pub fn write(&self, format: ReportFormat, out: &mut dyn Write) -> Result<()> {
        match format {
            ReportFormat::Csv => {
                writeln!(out, "key,value")?;
                writeln!(out, "total,{}", self.total)?;
                for row in &self.categories {
                    writeln!(out, "{}_count,{}", row.category, row.count)?;
                    writeln!(out, "{}_base_pct,{}", row.category, opt_cell(row.base_pct))?;
                    writeln!(out, "{}_new_pct,{}", row.category, opt_cell(row.new_pct))?;
                }
                for (tag, rates) in [("before", &self.before), ("after", &self.after)] {
                    writeln!(out, "fnr_{tag},{}", opt_cell(rates.fnr))?;
                    writeln!(out, "fpr_{tag},{}", opt_cell(rates.fpr))?;
                    writeln!(out, "tbr_{tag},{}", opt_cell(rates.tbr))?;
                    writeln!(out, "tnr_{tag},{}", opt_cell(rates.tnr))?;
                }
            }
            ReportFormat::Json => write_json(self, out)?,
        }
        Ok(())
    }
}

fn rates_for(
    preds: &[ClassId],
    labels: &[ClassId],
    registry: &PrototypeRegistry,
    base_ids: &BTreeSet<ClassId>,
    opts: &MetricOptions,
) -> Result<DiagnosticRates> {
    let (fnr, fpr) = fnr_fpr(preds, labels, base_ids)?;
    let (tbr, tnr) = tbr_tnr(
        preds,
        labels,
        registry,
        base_ids,
        opts.m_new_similar,
        opts.base_fraction,
    )?;
    Ok(DiagnosticRates { fnr, fpr, tbr, tnr })
}

/// Compares two aligned prediction sets. With `collapse_ww` the
/// changed-but-still-wrong samples are folded into the right-to-wrong
/// category (both end wrong after the change); otherwise they are listed
/// separately.
pub fn build_analyze_report(
    before: &[(ClassId, ClassId)],
    after: &[(ClassId, ClassId)],
    registry: &PrototypeRegistry,
    base_ids: &BTreeSet<ClassId>,
    opts: &MetricOptions,
    collapse_ww: bool,
) -> Result<AnalyzeReport> {
    let n = before.len().min(after.len());
    for i in 0..n {
        if before[i].0 != after[i].0 {
            return Err(Error::Protocol(format!(
                "prediction files disagree at index {i}: true labels {} vs {}",
                before[i].0, after[i].0
            )));
        }
    }
    if before.len() != after.len() {
        return Err(Error::Protocol(format!(
            "prediction files disagree at index {n}: lengths {} vs {}",
            before.len(),
            after.len()
        )));
    }
    let labels: Vec<ClassId> = before.iter().map(|&(t, _)| t).collect();
    let preds_before: Vec<ClassId> = before.iter().map(|&(_, p)| p).collect();
    let preds_after: Vec<ClassId> = after.iter().map(|&(_, p)| p).collect();
    let change = prediction_change(&preds_before, &preds_after, &labels, base_ids)?;
    let mut categories = vec![
        CategoryRow::from_stats("uc", change.uc),
        CategoryRow::from_stats("wr", change.wr),
    ];
    if collapse_ww {
        let mut merged = change.rw;
        merged.count += change.ww.count;
        merged.base_count += change.ww.base_count;
        merged.new_count += change.ww.new_count;
        categories.push(CategoryRow::from_stats("rw", merged));
    } else {
        categories.push(CategoryRow::from_stats("rw", change.rw));
        categories.push(CategoryRow::from_stats("ww", change.ww));
    }
    Ok(AnalyzeReport {
        total: change.total,
        categories,
        before: rates_for(&preds_before, &labels, registry, base_ids, opts)?,
        after: rates_for(&preds_after, &labels, registry, base_ids, opts)?,
    })
}

/// Writes predictions as `index,true_label,pred_label` rows.
pub fn write_predictions(
    predictions: &[ClassId],
    true_labels: &[ClassId],
    out: &mut dyn Write,
) -> Result<()> {
    if predictions.len() != true_labels.len() {
        return Err(Error::InvalidParam(format!(
            "prediction/label length mismatch: {} vs {}",
            predictions.len(),
            true_labels.len()
        )));
    }
    writeln!(out, "index,true_label,pred_label")?;
    for (i, (&p, &t)) in predictions.iter().zip(true_labels).enumerate() {
        writeln!(out, "{i},{t},{p}")?;
    }
    Ok(())
}

/// Reads a prediction file back as `(true_label, pred_label)` pairs, in
/// index order. The index column must count up from 0.
pub fn read_predictions(path: &Path) -> Result<Vec<(ClassId, ClassId)>> {
    let mut lines = BufReader::new(File::open(path)?).lines();
    let header = lines.next().ok_or(Error::Parse {
        line: 1,
        message: "missing header row".into(),
    })??;
    if header != "index,true_label,pred_label" {
        return Err(Error::Parse {
            line: 1,
            message: format!("unexpected header {header:?}"),
        });
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse {
            line: line_no,
            message,
        };
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 3 {
            return Err(err(format!("row has {} columns, expected 3", cols.len())));
        }
        let index: usize = cols[0]
            .parse()
            .map_err(|_| err(format!("invalid index {:?}", cols[0])))?;
        if index != out.len() {
            return Err(err(format!(
                "index {index} out of order, expected {}",
                out.len()
            )));
        }
        let parse_id = |s: &str, field: &str| -> Result<ClassId> {
            s.parse().map_err(|_| err(format!("invalid {field} {s:?}")))
        };
        out.push((
            parse_id(cols[1], "true_label")?,
            parse_id(cols[2], "pred_label")?,
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calib::CalibParams;
    use crate::data::{FeatureVector, Provenance};
    use crate::protocol::run_fscil;
    use crate::synth::{gen_synthetic, SynthSpec};

    fn small_results() -> Vec<SessionResults> {
        let spec = SynthSpec {
            test_per_class: 10,
            base_train_per_class: 20,
            new_classes: 4,
            sessions_after_base: 2,
            ..SynthSpec::default()
        };
        let (ds, _) = gen_synthetic(&spec).unwrap();
        run_fscil(&ds, &CalibParams::default(), &MetricOptions::default()).unwrap()
    }

    #[test]
    fn fscil_csv_shape() {
        let report = FscilReport::from_results(&small_results()).unwrap();
        let mut buf = Vec::new();
        report.write(ReportFormat::Csv, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 1 + 3 + 1);
        assert_eq!(
            lines[0],
            "session,avg_acc,base_acc,new_acc,hmean,fnr,fpr,tbr,tnr"
        );
        assert!(lines[4].starts_with("pd,"));
        for line in &lines {
            assert_eq!(line.matches(',').count(), 8);
        }
        // session 0 has no new classes: new_acc, hmean, fpr, tbr, tnr empty
        let row0: Vec<&str> = lines[1].split(',').collect();
        assert_eq!(row0[0], "0");
        assert_eq!(row0[3], "");
        assert_eq!(row0[4], "");
    }

    #[test]
    fn fscil_json_round_trips() {
        let report = FscilReport::from_results(&small_results()).unwrap();
        let mut buf = Vec::new();
        report.write(ReportFormat::Json, &mut buf).unwrap();
        let parsed: FscilReport = serde_json::from_slice(&buf).unwrap();
        assert_eq!(parsed, report);
    }

    #[test]
    fn reports_are_byte_stable() {
        let results = small_results();
        let report = FscilReport::from_results(&results).unwrap();
        for format in [ReportFormat::Csv, ReportFormat::Json] {
            let mut a = Vec::new();
            let mut b = Vec::new();
            report.write(format, &mut a).unwrap();
            FscilReport::from_results(&results)
                .unwrap()
                .write(format, &mut b)
                .unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn fsl_csv_shape() {
        let report = FslReport {
            accuracies: vec![50.0, 75.0],
            mean: 62.5,
            ci95: Some(24.5),
        };
        let mut buf = Vec::new();
        report.write(ReportFormat::Csv, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "episode,accuracy\n0,50\n1,75\nmean,62.5\nci95,24.5\n");
        let mut buf = Vec::new();
        report.write(ReportFormat::Json, &mut buf).unwrap();
        let parsed: FslReport = serde_json::from_slice(&buf).unwrap();
        assert_eq!(parsed, report);
    }

    #[test]
    fn prediction_file_round_trips() {
        let preds = vec![3, 0, 4];
        let labels = vec![3, 1, 2];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("preds.csv");
        let mut f = File::create(&path).unwrap();
        write_predictions(&preds, &labels, &mut f).unwrap();
        f.flush().unwrap();
        let pairs = read_predictions(&path).unwrap();
        assert_eq!(pairs, vec![(3, 3), (1, 0), (2, 4)]);
    }

    #[test]
    fn prediction_file_rejects_out_of_order_index() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "index,true_label,pred_label\n0,1,1\n2,1,1\n").unwrap();
        match read_predictions(&path).unwrap_err() {
            Error::Parse { line, message } => {
                assert_eq!(line, 3);
                assert!(message.contains("out of order"), "{message}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    fn toy_registry() -> PrototypeRegistry {
        let mut reg = PrototypeRegistry::new();
        for id in 0..4u32 {
            let mut v = vec![0.0; 4];
            v[id as usize] = 1.0;
            reg.insert(id, FeatureVector::new(v).unwrap(), Provenance::Empirical)
                .unwrap();
        }
        reg
    }

    #[test]
    fn analyze_report_collapse_folds_ww_into_rw() {
        let reg = toy_registry();
        let base: BTreeSet<ClassId> = [0, 1].into();
        // labels 0,1,2,3; before 0,2,3,2; after 0,3,2,1:
        // UC(0), WW(1), WR(2), RW->wrong(3): before right? labels[3]=3,
        // before=2 wrong, after=1 wrong, changed -> WW
        let before = vec![(0, 0), (1, 2), (2, 3), (3, 2)];
        let after = vec![(0, 0), (1, 3), (2, 2), (3, 1)];
        let opts = MetricOptions {
            m_new_similar: 1,
            base_fraction: 0.5,
        };
        let separate = build_analyze_report(&before, &after, &reg, &base, &opts, false).unwrap();
        assert_eq!(separate.categories.len(), 4);
        let ww = separate
            .categories
            .iter()
            .find(|c| c.category == "ww")
            .unwrap();
        assert_eq!(ww.count, 2);
        let collapsed = build_analyze_report(&before, &after, &reg, &base, &opts, true).unwrap();
        assert_eq!(collapsed.categories.len(), 3);
        let rw = collapsed
            .categories
            .iter()
            .find(|c| c.category == "rw")
            .unwrap();
        assert_eq!(rw.count, 2);
        let total_counted: usize = collapsed.categories.iter().map(|c| c.count).sum();
        assert_eq!(total_counted, collapsed.total);
    }

    #[test]
    fn analyze_report_rejects_misaligned_labels() {
        let reg = toy_registry();
        let base: BTreeSet<ClassId> = [0, 1].into();
        let opts = MetricOptions::default();
        let before = vec![(0, 0), (1, 2)];
        let after = vec![(0, 0), (2, 2)];
        match build_analyze_report(&before, &after, &reg, &base, &opts, false).unwrap_err() {
            Error::Protocol(msg) => assert!(msg.contains("index 1"), "{msg}"),
            other => panic!("expected protocol error, got {other:?}"),
        }
        let shorter = vec![(0, 0)];
        match build_analyze_report(&before, &shorter, &reg, &base, &opts, false).unwrap_err() {
            Error::Protocol(msg) => assert!(msg.contains("index 1"), "{msg}"),
            other => panic!("expected protocol error, got {other:?}"),
        }
    }

    #[test]
    fn analyze_csv_lists_flat_keys() {
        let reg = toy_registry();
        let base: BTreeSet<ClassId> = [0, 1].into();
        let before = vec![(0, 0), (2, 0), (3, 2)];
        let after = vec![(0, 0), (2, 2), (3, 2)];
        let opts = MetricOptions {
            m_new_similar: 1,
            base_fraction: 0.5,
        };
        let report = build_analyze_report(&before, &after, &reg, &base, &opts, false).unwrap();
        let mut buf = Vec::new();
        report.write(ReportFormat::Csv, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("key,value\ntotal,3\n"));
        assert!(text.contains("\nwr_count,1\n"));
        assert!(text.contains("\nfnr_before,"));
        assert!(text.contains("\ntnr_after,"));
        let mut buf2 = Vec::new();
        report.write(ReportFormat::Json, &mut buf2).unwrap();
        let parsed: AnalyzeReport = serde_json::from_slice(&buf2).unwrap();
        assert_eq!(parsed, report);
    }
}
