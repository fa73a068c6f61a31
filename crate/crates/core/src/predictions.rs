//! Per-classifier prediction tables and their alignment against a manifest.
//!
//! A prediction file looks like
//!
//! ```text
//! # model_id=resnet50
//! sample_id,score_benign,score_malignant
//! SOB_B_A-14-22549AB-40-001,0.93,0.07
//! ```
//!
//! Every row must be a probability vector: non-negative scores summing to one
//! within [`ROW_SUM_TOLERANCE`]. Exporters working with logits must apply a
//! softmax first.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::manifest::{Manifest, Split};

pub const ROW_SUM_TOLERANCE: f64 = 1e-6;

const MODEL_PREFIX: &str = "# model_id=";

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionTable {
    pub model_id: String,
    pub classes: Vec<String>,
    /// Score vectors keyed by sample id, one entry per class.
    pub rows: BTreeMap<String, Vec<f64>>,
}

impl PredictionTable {
    /// Builds a table, checking that every row is a probability vector of the
    /// right length.
    pub fn new(model_id: impl Into<String>, classes: Vec<String>, rows: BTreeMap<String, Vec<f64>>) -> Result<Self> {
        for (sample, scores) in &rows {
            check_row(sample, scores, classes.len())?;
        }
        Ok(Self {
            model_id: model_id.into(),
            classes,
            rows,
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

fn check_row(sample: &str, scores: &[f64], n_classes: usize) -> Result<()> {
    if scores.len() != n_classes {
        return Err(Error::Misaligned(format!(
            "sample `{sample}` has {} scores for {n_classes} classes",
            scores.len()
        )));
    }
    if let Some(&bad) = scores.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(Error::BadScore {
            sample: sample.to_string(),
            value: bad,
        });
    }
    let sum: f64 = scores.iter().sum();
    if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
        return Err(Error::RowSum {
            sample: sample.to_string(),
            sum,
        });
    }
    Ok(())
}

/// Parses a prediction file and validates it against `m`.
///
/// With `split` set, rows for samples of other splits are dropped and every
/// sample of that split must be present. Without it, every manifest sample
/// must be present.
pub fn parse_predictions(text: &str, origin: &str, m: &Manifest, split: Option<Split>) -> Result<PredictionTable> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: origin.to_string(),
        line,
        message,
    };
    let mut lines = text.split('\n').enumerate().map(|(i, l)| (i + 1, l.trim_end_matches('\r')));

    let model_id = match lines.next() {
        Some((_, l)) if l.starts_with(MODEL_PREFIX) && l.len() > MODEL_PREFIX.len() => l[MODEL_PREFIX.len()..].to_string(),
        _ => return Err(parse_err(1, format!("expected `{MODEL_PREFIX}<id>` as the first line"))),
    };
    let (_, header) = lines.next().ok_or_else(|| parse_err(2, "missing header".into()))?;
    let mut columns = header.split(',');
    if columns.next() != Some("sample_id") {
        return Err(parse_err(2, "header must start with `sample_id`".into()));
    }
    let classes = columns
        .map(|c| {
            c.strip_prefix("score_")
                .map(str::to_string)
                .ok_or_else(|| parse_err(2, format!("column `{c}` is not of the form score_<class>")))
        })
        .collect::<Result<Vec<_>>>()?;
    if classes != m.classes() {
        return Err(Error::ClassMismatch {
            expected: m.classes().to_vec(),
            found: classes,
        });
    }

    let splits: HashMap<&str, Option<Split>> = m.records().iter().map(|r| (r.sample_id.as_str(), r.split)).collect();
    let mut rows = BTreeMap::new();
    for (line, l) in lines {
        if l.is_empty() {
            continue;
        }
        let mut fields = l.split(',');
        let sample = fields.next().unwrap_or_default();
        let scores = fields
            .map(|f| f.trim().parse::<f64>().map_err(|e| parse_err(line, format!("bad score `{f}`: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        if scores.len() != classes.len() {
            return Err(parse_err(line, format!("expected {} scores, found {}", classes.len(), scores.len())));
        }
        let sample_split = *splits.get(sample).ok_or_else(|| Error::UnknownSample(sample.to_string()))?;
        check_row(sample, &scores, classes.len())?;
        if split.is_some() && sample_split != split {
            continue;
        }
        if rows.insert(sample.to_string(), scores).is_some() {
            return Err(Error::DuplicateSample(sample.to_string()));
        }
    }

    let mut expected: Vec<&str> = m
        .records()
        .iter()
        .filter(|r| split.is_none() || r.split == split)
        .map(|r| r.sample_id.as_str())
        .collect();
    expected.sort_unstable();
    if let Some(missing) = expected.iter().find(|id| !rows.contains_key(**id)) {
        return Err(Error::MissingSample(missing.to_string()));
    }

    Ok(PredictionTable {
        model_id,
        classes,
        rows,
    })
}

pub fn load_predictions(path: impl AsRef<Path>, m: &Manifest, split: Option<Split>) -> Result<PredictionTable> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_predictions(&text, &path.display().to_string(), m, split)
}

/// Serializes a table with rows in sample-id order. Scores use the shortest
/// representation that parses back to the same `f64`.
pub fn render_predictions(t: &PredictionTable) -> String {
    let mut out = format!("{MODEL_PREFIX}{}\nsample_id", t.model_id);
    for c in &t.classes {
        out.push_str(",score_");
        out.push_str(c);
    }
    out.push('\n');
    for (sample, scores) in &t.rows {
        out.push_str(sample);
        for s in scores {
            out.push(',');
            out.push_str(&s.to_string());
        }
        out.push('\n');
    }
    out
}

pub fn write_predictions(t: &PredictionTable, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, render_predictions(t)).map_err(|e| Error::io(path, e))
}

/// Several prediction tables over one canonical, sorted sample order.
///
/// Scores are stored densely as `[sample][model][class]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedPredictions {
    classes: Vec<String>,
    model_ids: Vec<String>,
    sample_ids: Vec<String>,
    truth: Vec<usize>,
    scores: Vec<f64>,
}

impl AlignedPredictions {
    /// Assembles aligned predictions from raw parts.
    ///
    /// `per_model[t][i]` is model `t`'s score vector for `sample_ids[i]`.
    /// Rows are checked like table rows; sample ids must be strictly
    /// increasing.
    pub fn from_parts(
        classes: Vec<String>,
        model_ids: Vec<String>,
        sample_ids: Vec<String>,
        truth: Vec<usize>,
        per_model: &[Vec<Vec<f64>>],
    ) -> Result<Self> {
        let n = sample_ids.len();
        let c = classes.len();
        if model_ids.is_empty() || model_ids.len() != per_model.len() {
            return Err(Error::Misaligned(format!(
                "{} model ids for {} score tables",
                model_ids.len(),
                per_model.len()
            )));
        }
        if truth.len() != n {
            return Err(Error::LengthMismatch {
                predicted: n,
                truth: truth.len(),
            });
        }
        if let Some(&label) = truth.iter().find(|&&t| t >= c) {
            return Err(Error::LabelOutOfRange { label, n_classes: c });
        }
        if sample_ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Misaligned("sample ids must be unique and sorted".into()));
        }
        let mut scores = Vec::with_capacity(n * per_model.len() * c);
        for (i, sample) in sample_ids.iter().enumerate() {
            for table in per_model {
                let row = table
                    .get(i)
                    .ok_or_else(|| Error::Misaligned(format!("score table shorter than {n} samples")))?;
                check_row(sample, row, c)?;
                scores.extend_from_slice(row);
            }
        }
        if per_model.iter().any(|t| t.len() != n) {
            return Err(Error::Misaligned(format!("score tables must each have {n} rows")));
        }
        Ok(Self {
            classes,
            model_ids,
            sample_ids,
            truth,
            scores,
        })
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn model_ids(&self) -> &[String] {
        &self.model_ids
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    pub fn truth(&self) -> &[usize] {
        &self.truth
    }

    pub fn n_models(&self) -> usize {
        self.model_ids.len()
    }

    pub fn n_samples(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    /// Score vector of `model` for the `sample`-th sample.
    pub fn scores(&self, sample: usize, model: usize) -> &[f64] {
        let c = self.n_classes();
        let start = (sample * self.n_models() + model) * c;
        &self.scores[start..start + c]
    }

    /// All models' score vectors for one sample, concatenated.
    pub fn sample_block(&self, sample: usize) -> &[f64] {
        let width = self.n_models() * self.n_classes();
        &self.scores[sample * width..(sample + 1) * width]
    }

    /// Score vectors of one model in sample order.
    pub fn model_scores(&self, model: usize) -> Vec<Vec<f64>> {
        (0..self.n_samples()).map(|i| self.scores(i, model).to_vec()).collect()
    }

    /// Keeps only the listed models, in the given order.
    pub fn select(&self, models: &[usize]) -> Result<Self> {
        if models.is_empty() || models.iter().any(|&m| m >= self.n_models()) {
            return Err(Error::Misaligned(format!("invalid model selection {models:?}")));
        }
        let mut scores = Vec::with_capacity(self.n_samples() * models.len() * self.n_classes());
        for i in 0..self.n_samples() {
            for &m in models {
                scores.extend_from_slice(self.scores(i, m));
            }
        }
        Ok(Self {
            classes: self.classes.clone(),
            model_ids: models.iter().map(|&m| self.model_ids[m].clone()).collect(),
            sample_ids: self.sample_ids.clone(),
            truth: self.truth.clone(),
            scores,
        })
    }
}

/// Aligns validated tables on the samples of `split` (or the whole manifest).
pub fn align(tables: &[PredictionTable], m: &Manifest, split: Option<Split>) -> Result<AlignedPredictions> {
    let first = tables
        .first()
        .ok_or_else(|| Error::Misaligned("at least one prediction table is required".into()))?;
    for t in tables {
        if t.classes != m.classes() {
            return Err(Error::ClassMismatch {
                expected: m.classes().to_vec(),
                found: t.classes.clone(),
            });
        }
        if t.rows.len() != first.rows.len() || t.rows.keys().ne(first.rows.keys()) {
            return Err(Error::Misaligned(format!(
                "`{}` and `{}` cover different samples",
                first.model_id, t.model_id
            )));
        }
    }

    let labels: HashMap<&str, (usize, Option<Split>)> = m
        .records()
        .iter()
        .map(|r| (r.sample_id.as_str(), (r.class_label, r.split)))
        .collect();
    let mut expected: Vec<&str> = m
        .records()
        .iter()
        .filter(|r| split.is_none() || r.split == split)
        .map(|r| r.sample_id.as_str())
        .collect();
    expected.sort_unstable();
    if expected.len() != first.rows.len() || first.rows.keys().map(String::as_str).ne(expected.iter().copied()) {
        let missing = expected.iter().find(|id| !first.rows.contains_key(**id));
        return Err(match missing {
            Some(id) => Error::MissingSample(id.to_string()),
            None => {
                let extra = first.rows.keys().find(|id| labels.get(id.as_str()).is_none_or(|(_, s)| split.is_some() && *s != split));
                Error::UnknownSample(extra.cloned().unwrap_or_default())
            }
        });
    }

    let sample_ids: Vec<String> = first.rows.keys().cloned().collect();
    let truth = sample_ids.iter().map(|id| labels[id.as_str()].0).collect();
    let c = m.classes().len();
    let mut scores = Vec::with_capacity(sample_ids.len() * tables.len() * c);
    for id in &sample_ids {
        for t in tables {
            scores.extend_from_slice(&t.rows[id]);
        }
    }
    Ok(AlignedPredictions {
        classes: m.classes().to_vec(),
        model_ids: tables.iter().map(|t| t.model_id.clone()).collect(),
        sample_ids,
        truth,
        scores,
    })
}
