//! The report document and its plain-text rendering.
//!
//! Reports are JSON with a `schema_version`. Every metric is written as
//! `{"value": <full precision>, "display": "<4 decimals>"}`, or `null` when it
//! is undefined. Maps are ordered so identical inputs serialize to identical
//! bytes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ensemble::SearchResult;
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub value: f64,
    pub display: String,
}

impl Metric {
    pub fn new(value: f64) -> Self {
        Self {
            value,
            display: format!("{value:.4}"),
        }
    }

    pub fn of(value: Option<f64>) -> Option<Self> {
        value.map(Self::new)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetricsDoc {
    pub class: String,
    pub precision: Option<Metric>,
    pub recall: Option<Metric>,
    pub f1: Option<Metric>,
    pub fbeta: Option<Metric>,
    pub ap: Metric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsDoc {
    pub n_samples: usize,
    pub rejected: usize,
    pub positive_class: String,
    pub beta: f64,
    pub accuracy: Metric,
    /// Precision, recall and F-scores of the positive class.
    pub precision: Option<Metric>,
    pub recall: Option<Metric>,
    pub f1: Option<Metric>,
    pub fbeta: Option<Metric>,
    pub map: Metric,
    /// Rows are output classes, columns target classes.
    pub confusion: Vec<Vec<u64>>,
    pub per_class: Vec<ClassMetricsDoc>,
}

impl From<&MetricsReport> for MetricsDoc {
    fn from(r: &MetricsReport) -> Self {
        let pos = r.positive();
        Self {
            n_samples: r.n_samples,
            rejected: r.rejected,
            positive_class: r.classes[r.positive_class].clone(),
            beta: r.beta,
            accuracy: Metric::new(r.accuracy),
            precision: Metric::of(pos.precision),
            recall: Metric::of(pos.recall),
            f1: Metric::of(pos.f1),
            fbeta: Metric::of(pos.fbeta),
            map: Metric::new(r.map),
            confusion: r.confusion.rows(),
            per_class: r
                .classes
                .iter()
                .zip(&r.per_class)
                .zip(&r.ap)
                .map(|((class, s), &ap)| ClassMetricsDoc {
                    class: class.clone(),
                    precision: Metric::of(s.precision),
                    recall: Metric::of(s.recall),
                    f1: Metric::of(s.f1),
                    fbeta: Metric::of(s.fbeta),
                    ap: Metric::new(ap),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightDoc {
    pub model_id: String,
    pub value: f64,
    /// Exact grid fraction such as `37/100`, when the weight came from a grid search.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub fraction: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchDoc {
    pub step: String,
    pub evaluated_count: u64,
    pub tie_count: u64,
    /// Validation accuracy of the winning weights.
    pub best_objective: Metric,
    pub objective: String,
}

impl SearchDoc {
    pub fn new(r: &SearchResult) -> Self {
        Self {
            step: r.step.to_string(),
            evaluated_count: r.evaluated_count,
            tie_count: r.tie_count,
            best_objective: Metric::new(r.best_objective),
            objective: "accuracy".into(),
        }
    }
}

/// Weight entries for a search winner, with exact grid fractions.
pub fn grid_weights(model_ids: &[String], r: &SearchResult) -> Vec<WeightDoc> {
    model_ids
        .iter()
        .zip(r.best_weights.as_slice())
        .zip(&r.best_units)
        .map(|((id, &value), &units)| WeightDoc {
            model_id: id.clone(),
            value,
            fraction: Some(format!("{units}/{}", r.step.divisions())),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportDoc {
    pub schema_version: u32,
    /// Subcommand that produced the report.
    pub command: String,
    /// Split the metrics were computed on.
    pub split: Option<String>,
    pub classes: Vec<String>,
    pub models: Vec<String>,
    pub per_model_metrics: BTreeMap<String, MetricsDoc>,
    pub ensemble_mode: Option<String>,
    pub ensemble_metrics: Option<MetricsDoc>,
    pub weights: Vec<WeightDoc>,
    pub search: Option<SearchDoc>,
    pub seeds: BTreeMap<String, u64>,
    /// SHA-256 of every input file, keyed by the path as given.
    pub input_digests: BTreeMap<String, String>,
}

impl ReportDoc {
    pub fn new(command: &str, classes: &[String]) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            command: command.to_string(),
            split: None,
            classes: classes.to_vec(),
            models: Vec::new(),
            per_model_metrics: BTreeMap::new(),
            ensemble_mode: None,
            ensemble_metrics: None,
            weights: Vec::new(),
            search: None,
            seeds: BTreeMap::new(),
            input_digests: BTreeMap::new(),
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: Self = serde_json::from_str(text).map_err(|e| Error::InvalidReport(e.to_string()))?;
        if doc.schema_version != SCHEMA_VERSION {
            return Err(Error::InvalidReport(format!(
                "schema version {} is not supported (expected {SCHEMA_VERSION})",
                doc.schema_version
            )));
        }
        Ok(doc)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::InvalidReport(m) => Error::InvalidReport(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_digest(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// One row of the comparison table.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub name: String,
    pub metrics: MetricsDoc,
}

/// Collects per-model rows (first occurrence of each model id wins) followed
/// by one row per ensemble, in input order.
pub fn merge_reports(reports: &[ReportDoc]) -> Result<Vec<ComparisonRow>> {
    let first = reports
        .first()
        .ok_or_else(|| Error::InvalidReport("no reports to merge".into()))?;
    let mut rows: Vec<ComparisonRow> = Vec::new();
    let mut ensembles = Vec::new();
    for r in reports {
        if r.classes != first.classes {
            return Err(Error::InvalidReport(format!(
                "class vocabularies differ: {:?} vs {:?}",
                first.classes, r.classes
            )));
        }
        for id in &r.models {
            if let Some(m) = r.per_model_metrics.get(id) {
                if !rows.iter().any(|row| &row.name == id) {
                    rows.push(ComparisonRow {
                        name: id.clone(),
                        metrics: m.clone(),
                    });
                }
            }
        }
        if let Some(m) = &r.ensemble_metrics {
            let mode = r.ensemble_mode.as_deref().unwrap_or("ensemble");
            ensembles.push(ComparisonRow {
                name: format!("Ensemble ({mode})"),
                metrics: m.clone(),
            });
        }
    }
    rows.extend(ensembles);
    Ok(rows)
}

fn percent(m: &Option<Metric>) -> String {
    m.as_ref().map_or_else(|| "-".to_string(), |m| format!("{:.2}", m.value * 100.0))
}

/// Comparison table in percent: model, accuracy, precision, recall, F1, mAP.
pub fn render_table(rows: &[ComparisonRow]) -> String {
    let header = ["Model", "Accuracy", "Precision", "Recall", "F1-score", "mAP"];
    let mut cells: Vec<[String; 6]> = vec![header.map(String::from)];
    for row in rows {
        let m = &row.metrics;
        cells.push([
            row.name.clone(),
            percent(&Some(m.accuracy.clone())),
            percent(&m.precision),
            percent(&m.recall),
            percent(&m.f1),
            percent(&Some(m.map.clone())),
        ]);
    }
    let widths: Vec<usize> = (0..6).map(|i| cells.iter().map(|c| c[i].chars().count()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for (r, row) in cells.iter().enumerate() {
        for (i, cell) in row.iter().enumerate() {
            if i == 0 {
                let _ = write!(out, "{cell:<w$}", w = widths[0]);
            } else {
                let _ = write!(out, "  {cell:>w$}", w = widths[i]);
            }
        }
        out.push('\n');
        if r == 0 {
            let total: usize = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
            out.push_str(&"-".repeat(total));
            out.push('\n');
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::evaluate;

    fn sample_report(acc_flip: bool) -> MetricsReport {
        let classes = vec!["benign".to_string(), "malignant".to_string()];
        let ids: Vec<String> = (0..4).map(|i| format!("s{i}")).collect();
        let scores = vec![vec![0.9, 0.1], vec![0.3, 0.7], vec![0.6, 0.4], vec![0.2, 0.8]];
        let decisions = if acc_flip {
            vec![Some(0), Some(1), Some(1), Some(1)]
        } else {
            vec![Some(0), Some(1), Some(0), Some(1)]
        };
        evaluate(&decisions, &scores, &[0, 1, 0, 1], &ids, &classes, 0, 1.0).unwrap()
    }

    #[test]
    fn json_round_trip_and_display_fields() {
        let mut doc = ReportDoc::new("evaluate", &["benign".into(), "malignant".into()]);
        doc.models.push("m1".into());
        doc.per_model_metrics.insert("m1".into(), MetricsDoc::from(&sample_report(true)));
        let json = doc.to_json();
        assert!(json.contains("\"display\": \"0.7500\""));
        assert_eq!(ReportDoc::from_json(&json).unwrap(), doc);
    }

    #[test]
    fn undefined_metrics_serialize_as_null() {
        let classes = vec!["benign".to_string(), "malignant".to_string()];
        let ids: Vec<String> = (0..2).map(|i| format!("s{i}")).collect();
        let r = evaluate(&[Some(1), Some(1)], &[vec![0.4, 0.6], vec![0.1, 0.9]], &[0, 1], &ids, &classes, 0, 1.0).unwrap();
        let doc = MetricsDoc::from(&r);
        assert_eq!(doc.precision, None);
        assert!(serde_json::to_string(&doc).unwrap().contains("\"precision\":null"));
    }

    #[test]
    fn schema_version_is_checked() {
        let mut doc = ReportDoc::new("evaluate", &["a".into(), "b".into()]);
        doc.schema_version = 99;
        assert!(ReportDoc::from_json(&doc.to_json()).is_err());
        assert!(ReportDoc::from_json("{}").is_err());
    }

    #[test]
    fn merged_table_lists_models_then_ensembles() {
        let classes = vec!["benign".to_string(), "malignant".to_string()];
        let mut a = ReportDoc::new("evaluate", &classes);
        a.models.push("vgg16".into());
        a.per_model_metrics.insert("vgg16".into(), MetricsDoc::from(&sample_report(true)));
        let mut b = ReportDoc::new("search", &classes);
        b.models = vec!["vgg16".into(), "resnet50".into()];
        b.per_model_metrics.insert("vgg16".into(), MetricsDoc::from(&sample_report(false)));
        b.per_model_metrics.insert("resnet50".into(), MetricsDoc::from(&sample_report(false)));
        b.ensemble_mode = Some("soft".into());
        b.ensemble_metrics = Some(MetricsDoc::from(&sample_report(false)));

        let rows = merge_reports(&[a, b]).unwrap();
        let names: Vec<&str> = rows.iter().map(|r| r.name.as_str()).collect();
        assert_eq!(names, ["vgg16", "resnet50", "Ensemble (soft)"]);
        assert_eq!(rows[0].metrics.accuracy.value, 0.75);
        let table = render_table(&rows);
        assert!(table.starts_with("Model"));
        assert!(table.contains("Ensemble (soft)"));
        assert!(table.contains("75.00"));
        assert!(merge_reports(&[]).is_err());
    }

    #[test]
    fn digest_is_sha256() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
