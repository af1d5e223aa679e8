//! Exact-match micro-F1 scoring and the reports built on it.
//!
//! Matching is multiset intersection over normalized tuples: `(label,
//! surface)` for entities, `(subject, relation, object)` for relations.
//! Counts are pooled over all examples before precision and recall are
//! taken. Reports keep the raw counts so other averages can be derived.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::iter::Sum;
use std::ops::{Add, AddAssign};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Annotation, Example, Task};
use crate::parse::{parse, LabelSet, ParseMode};
use crate::scalar::{mean, Real};

/// Declared in every report so consumers know which F1 they are reading.
pub const SCORING: &str = "micro-averaged exact-match F1";

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error("task mismatch: expected {expected}, found {found}")]
    TaskMismatch { expected: Task, found: Task },
    #[error("prediction for unknown example id `{0}`")]
    UnknownId(String),
    #[error("duplicate prediction id `{0}`")]
    DuplicatePredictionId(String),
    #[error("line {line}: malformed prediction record: {reason}")]
    MalformedPrediction { line: usize, reason: String },
    #[error("reports disagree on dataset pair or scope: {0}")]
    PairMismatch(String),
    #[error("two reports for cell {0} -> {1}")]
    DuplicateCell(String, String),
    #[error("no report pairs to average")]
    Empty,
    #[error("malformed F1 grid: {0}")]
    MalformedGrid(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Add for Counts {
    type Output = Counts;

    fn add(self, o: Counts) -> Counts {
        Counts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
        }
    }
}

impl AddAssign for Counts {
    fn add_assign(&mut self, o: Counts) {
        *self = *self + o;
    }
}

impl Sum for Counts {
    fn sum<I: Iterator<Item = Counts>>(iter: I) -> Counts {
        iter.fold(Counts::default(), Add::add)
    }
}

impl Counts {
    /// Precision, recall and F1, each 0 when its denominator is 0.
    pub fn prf<T: Real>(&self) -> (T, T, T) {
        let ratio = |num: usize, den: usize| {
            if den == 0 {
                T::zero()
            } else {
                T::from_count(num) / T::from_count(den)
            }
        };
        let p = ratio(self.tp, self.tp + self.fp);
        let r = ratio(self.tp, self.tp + self.fn_);
        // 2tp / (2tp + fp + fn) equals 2pr / (p + r) with one rounding step
        let f1 = ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_);
        (p, r, f1)
    }
}

fn check_task(items: &[Annotation], task: Task) -> Result<(), ScoreError> {
    match items.iter().find(|a| a.task() != task) {
        Some(a) => Err(ScoreError::TaskMismatch {
            expected: task,
            found: a.task(),
        }),
        None => Ok(()),
    }
}

/// Multiset intersection of gold and predicted tuples.
pub fn match_and_count(gold: &[Annotation], pred: &[Annotation], task: Task) -> Result<Counts, ScoreError> {
    check_task(gold, task)?;
    check_task(pred, task)?;
    let mut remaining: HashMap<&Annotation, usize> = HashMap::new();
    for g in gold {
        *remaining.entry(g).or_default() += 1;
    }
    let mut tp = 0;
    for p in pred {
        if let Some(n) = remaining.get_mut(p) {
            if *n > 0 {
                *n -= 1;
                tp += 1;
            }
        }
    }
    Ok(Counts {
        tp,
        fp: pred.len() - tp,
        fn_: gold.len() - tp,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport<T> {
    pub train: String,
    pub test: String,
    pub scoring: String,
    /// Absent for reports loaded from published F1 values.
    #[serde(default, flatten, skip_serializing_if = "Option::is_none")]
    pub counts: Option<Counts>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub precision: Option<T>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recall: Option<T>,
    pub f1: T,
    pub label_scope: Vec<String>,
    /// Prediction fragments dropped by the lenient parser.
    #[serde(default)]
    pub rejects: usize,
}

impl<T: Real> EvalReport<T> {
    pub fn from_counts(train: &str, test: &str, counts: Counts, label_scope: Vec<String>) -> Self {
        let (p, r, f1) = counts.prf();
        Self {
            train: train.to_string(),
            test: test.to_string(),
            scoring: SCORING.to_string(),
            counts: Some(counts),
            precision: Some(p),
            recall: Some(r),
            f1,
            label_scope,
            rejects: 0,
        }
    }

    /// A report carrying only a published F1, given in points (0-100).
    pub fn published(train: &str, test: &str, f1_points: T) -> Self {
        Self {
            train: train.to_string(),
            test: test.to_string(),
            scoring: SCORING.to_string(),
            counts: None,
            precision: None,
            recall: None,
            f1: f1_points / T::lit(100.0),
            label_scope: Vec::new(),
            rejects: 0,
        }
    }

    fn same_pair(&self, other: &Self) -> bool {
        self.train == other.train && self.test == other.test && self.label_scope == other.label_scope
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PredictionBody {
    Raw(String),
    Parsed(Vec<Annotation>),
    Failed(String),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PredictionRecord {
    pub id: String,
    pub body: PredictionBody,
}

#[derive(Serialize, Deserialize)]
struct PredictionWire {
    id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    raw: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    annotations: Option<Vec<Annotation>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

impl PredictionRecord {
    pub fn raw(id: impl Into<String>, raw: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            body: PredictionBody::Raw(raw.into()),
        }
    }

    pub fn failed(id: impl Into<String>, error: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            body: PredictionBody::Failed(error.into()),
        }
    }

    pub fn to_json_line(&self) -> String {
        let wire = match &self.body {
            PredictionBody::Raw(r) => PredictionWire {
                id: self.id.clone(),
                raw: Some(r.clone()),
                annotations: None,
                error: None,
            },
            PredictionBody::Parsed(a) => PredictionWire {
                id: self.id.clone(),
                raw: None,
                annotations: Some(a.clone()),
                error: None,
            },
            PredictionBody::Failed(e) => PredictionWire {
                id: self.id.clone(),
                raw: None,
                annotations: None,
                error: Some(e.clone()),
            },
        };
        serde_json::to_string(&wire).expect("prediction serializes")
    }
}

/// Reads a predictions file: JSONL `{"id", "raw"}`, `{"id", "annotations"}`
/// or `{"id", "error"}` records.
pub fn read_predictions(text: &str) -> Result<Vec<PredictionRecord>, ScoreError> {
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |reason: String| ScoreError::MalformedPrediction { line: idx + 1, reason };
        let wire: PredictionWire = serde_json::from_str(line).map_err(|e| malformed(e.to_string()))?;
        let body = match (wire.raw, wire.annotations, wire.error) {
            (_, _, Some(e)) => PredictionBody::Failed(e),
            (Some(r), None, None) => PredictionBody::Raw(r),
            (None, Some(a), None) => PredictionBody::Parsed(a),
            (None, None, None) => return Err(malformed("record has neither `raw` nor `annotations`".into())),
            (Some(_), Some(_), None) => return Err(malformed("record has both `raw` and `annotations`".into())),
        };
        out.push(PredictionRecord { id: wire.id, body });
    }
    Ok(out)
}

pub fn load_predictions(path: &Path) -> Result<Vec<PredictionRecord>, ScoreError> {
    let text = std::fs::read_to_string(path).map_err(|source| ScoreError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_predictions(&text)
}

/// Merges predictions for decomposed instructions (ids `<example>::<k>`)
/// back into one record per example, keeping first-seen order. Raw outputs
/// are parsed leniently before merging; any failed part fails the example.
pub fn merge_decomposed(records: &[PredictionRecord], task: Task, allowed: &LabelSet) -> Vec<PredictionRecord> {
    let mut order: Vec<String> = Vec::new();
    let mut merged: HashMap<String, PredictionBody> = HashMap::new();
    for r in records {
        let base = r.id.split_once("::").map_or(r.id.as_str(), |(b, _)| b).to_string();
        let parsed = match &r.body {
            PredictionBody::Raw(raw) => PredictionBody::Parsed(
                parse(raw, task, allowed, ParseMode::Lenient)
                    .map(|o| o.annotations)
                    .unwrap_or_default(),
            ),
            other => other.clone(),
        };
        match merged.get_mut(&base) {
            None => {
                order.push(base.clone());
                merged.insert(base, parsed);
            }
            Some(slot) => {
                if let (PredictionBody::Parsed(acc), PredictionBody::Parsed(more)) = (&mut *slot, &parsed) {
                    acc.extend(more.iter().cloned());
                } else if matches!(parsed, PredictionBody::Failed(_)) {
                    *slot = parsed;
                }
            }
        }
    }
    order
        .into_iter()
        .map(|id| {
            let body = merged.remove(&id).expect("every ordered id was inserted");
            PredictionRecord { id, body }
        })
        .collect()
}

/// Micro-aggregated counts of `predictions` against `gold_set`, both sides
/// restricted to `label_scope`. Gold examples without a prediction count all
/// their in-scope items as false negatives; failed predictions count as empty.
pub fn evaluate<T: Real>(
    gold_set: &[Example],
    predictions: &[PredictionRecord],
    label_scope: &[String],
    train: &str,
    test: &str,
) -> Result<EvalReport<T>, ScoreError> {
    let task = gold_set.first().map_or(Task::Ner, |e| e.task);
    let gold_ids: HashMap<&str, usize> = gold_set.iter().enumerate().map(|(i, e)| (e.id.as_str(), i)).collect();
    let mut by_example: Vec<Option<&PredictionRecord>> = vec![None; gold_set.len()];
    for p in predictions {
        let idx = *gold_ids
            .get(p.id.as_str())
            .ok_or_else(|| ScoreError::UnknownId(p.id.clone()))?;
        if by_example[idx].replace(p).is_some() {
            return Err(ScoreError::DuplicatePredictionId(p.id.clone()));
        }
    }
    let scope: BTreeSet<&str> = label_scope.iter().map(String::as_str).collect();
    let allowed = LabelSet::of(label_scope);
    let in_scope = |a: &&Annotation| scope.contains(a.label());

    let per_example: Vec<(Counts, usize)> = gold_set
        .par_iter()
        .zip(by_example.par_iter())
        .map(|(gold, pred)| -> Result<(Counts, usize), ScoreError> {
            if gold.task != task {
                return Err(ScoreError::TaskMismatch {
                    expected: task,
                    found: gold.task,
                });
            }
            let gold_items: Vec<Annotation> = gold.annotations.iter().filter(in_scope).cloned().collect();
            let (pred_items, rejects) = match pred.map(|p| &p.body) {
                None | Some(PredictionBody::Failed(_)) => (Vec::new(), 0),
                Some(PredictionBody::Parsed(items)) => (items.iter().filter(in_scope).cloned().collect(), 0),
                Some(PredictionBody::Raw(raw)) => {
                    let out = parse(raw, task, &allowed, ParseMode::Lenient).expect("lenient parsing is infallible");
                    (out.annotations, out.rejects.len())
                }
            };
            Ok((match_and_count(&gold_items, &pred_items, task)?, rejects))
        })
        .collect::<Result<_, _>>()?;

    let counts = per_example.iter().map(|(c, _)| *c).sum();
    let mut report = EvalReport::from_counts(train, test, counts, label_scope.to_vec());
    report.rejects = per_example.iter().map(|(_, r)| r).sum();
    Ok(report)
}

/// `variant.f1 - truth.f1` in F1 points.
pub fn source_delta<T: Real>(truth: &EvalReport<T>, variant: &EvalReport<T>) -> Result<T, ScoreError> {
    if !truth.same_pair(variant) {
        return Err(ScoreError::PairMismatch(format!(
            "{} -> {} vs {} -> {}",
            truth.train, truth.test, variant.train, variant.test
        )));
    }
    Ok((variant.f1 - truth.f1) * T::lit(100.0))
}

/// Macro average of [`source_delta`] over `(truth, variant)` pairs.
pub fn mean_source_delta<T: Real>(pairs: &[(EvalReport<T>, EvalReport<T>)]) -> Result<T, ScoreError> {
    let deltas = pairs
        .iter()
        .map(|(t, v)| source_delta(t, v))
        .collect::<Result<Vec<T>, _>>()?;
    mean(&deltas).ok_or(ScoreError::Empty)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatrixCell<T> {
    pub report: EvalReport<T>,
    /// `f1 / f1(col, col)`; absent when the column has no nonzero diagonal.
    pub relative: Option<T>,
}

/// Train-by-test grid of reports. Rows are training datasets, columns test
/// datasets; each column's diagonal cell is its reference.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossValMatrix<T> {
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    cells: Vec<Vec<Option<MatrixCell<T>>>>,
}

fn push_unique(list: &mut Vec<String>, name: &str) -> usize {
    match list.iter().position(|n| n == name) {
        Some(i) => i,
        None => {
            list.push(name.to_string());
            list.len() - 1
        }
    }
}

pub fn build_matrix<T: Real>(reports: &[EvalReport<T>]) -> Result<CrossValMatrix<T>, ScoreError> {
    let mut rows = Vec::new();
    let mut cols = Vec::new();
    for r in reports {
        push_unique(&mut rows, &r.train);
        push_unique(&mut cols, &r.test);
    }
    let mut cells: Vec<Vec<Option<MatrixCell<T>>>> = vec![vec![None; cols.len()]; rows.len()];
    for r in reports {
        let (i, j) = (push_unique(&mut rows, &r.train), push_unique(&mut cols, &r.test));
        if cells[i][j].is_some() {
            return Err(ScoreError::DuplicateCell(r.train.clone(), r.test.clone()));
        }
        cells[i][j] = Some(MatrixCell {
            report: r.clone(),
            relative: None,
        });
    }
    for (j, col) in cols.iter().enumerate() {
        let reference = rows
            .iter()
            .position(|r| r == col)
            .and_then(|i| cells[i][j].as_ref())
            .map(|c| c.report.f1)
            .filter(|f1| *f1 > T::zero());
        for row in cells.iter_mut() {
            if let Some(cell) = row[j].as_mut() {
                cell.relative = reference.map(|reference| cell.report.f1 / reference);
            }
        }
    }
    Ok(CrossValMatrix { rows, cols, cells })
}

fn html_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

impl<T: Real> CrossValMatrix<T> {
    pub fn cell(&self, train: &str, test: &str) -> Option<&MatrixCell<T>> {
        let i = self.rows.iter().position(|r| r == train)?;
        let j = self.cols.iter().position(|c| c == test)?;
        self.cells[i][j].as_ref()
    }

    /// Columns whose relative values are undefined (no diagonal, or a zero one).
    pub fn missing_references(&self) -> Vec<&str> {
        (0..self.cols.len())
            .filter(|&j| {
                self.cells
                    .iter()
                    .all(|row| row[j].as_ref().is_none_or(|c| c.relative.is_none()))
            })
            .map(|j| self.cols[j].as_str())
            .collect()
    }

    /// Header row of test datasets, then one row per training dataset with
    /// `f1|relative` cells (F1 in points); `-` marks absent values.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("train\\test");
        for c in &self.cols {
            out.push('\t');
            out.push_str(c);
        }
        out.push('\n');
        for (i, row) in self.rows.iter().enumerate() {
            out.push_str(row);
            for cell in &self.cells[i] {
                out.push('\t');
                match cell {
                    None => out.push('-'),
                    Some(c) => {
                        let rel = c.relative.map_or("-".to_string(), |r| format!("{:.4}", r.as_f64()));
                        let _ = write!(out, "{:.2}|{rel}", c.report.f1.as_f64() * 100.0);
                    }
                }
            }
            out.push('\n');
        }
        out
    }

    /// Heat table: cell opacity proportional to the relative value.
    pub fn to_html(&self) -> String {
        let mut out = String::from("<table class=\"crossval\">\n");
        let _ = writeln!(
            out,
            "<caption>{} (rows: train, columns: test)</caption>",
            html_escape(SCORING)
        );
        out.push_str("<tr><th></th>");
        for c in &self.cols {
            let _ = write!(out, "<th>{}</th>", html_escape(c));
        }
        out.push_str("</tr>\n");
        for (i, row) in self.rows.iter().enumerate() {
            let _ = write!(out, "<tr><th>{}</th>", html_escape(row));
            for cell in &self.cells[i] {
                match cell {
                    None => out.push_str("<td>-</td>"),
                    Some(c) => {
                        let f1 = c.report.f1.as_f64() * 100.0;
                        match c.relative {
                            Some(r) => {
                                let alpha = r.as_f64().clamp(0.0, 1.0);
                                let _ = write!(
                                    out,
                                    "<td style=\"background-color: rgba(128, 0, 128, {alpha:.3})\" title=\"relative {:.4}\">{f1:.2}</td>",
                                    r.as_f64()
                                );
                            }
                            None => {
                                let _ = write!(out, "<td>{f1:.2}</td>");
                            }
                        }
                    }
                }
            }
            out.push_str("</tr>\n");
        }
        out.push_str("</table>\n");
        out
    }
}

/// Reads a grid of published F1 points: header `<corner>\t<test>...`, then
/// `<train>\t<f1>...` rows; `-` or an empty field marks a missing cell.
pub fn reports_from_f1_grid<T: Real>(text: &str) -> Result<Vec<EvalReport<T>>, ScoreError> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| ScoreError::MalformedGrid("empty grid".into()))?
        .split('\t')
        .collect();
    let cols = &header[1..];
    let mut out = Vec::new();
    for line in lines {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != header.len() {
            return Err(ScoreError::MalformedGrid(format!(
                "row `{}` has {} fields, header has {}",
                fields[0],
                fields.len(),
                header.len()
            )));
        }
        for (col, field) in cols.iter().zip(&fields[1..]) {
            let field = field.trim();
            if field.is_empty() || field == "-" {
                continue;
            }
            let f1: f64 = field
                .parse()
                .map_err(|_| ScoreError::MalformedGrid(format!("`{field}` is not a number")))?;
            out.push(EvalReport::published(fields[0].trim(), col.trim(), T::lit(f1)));
        }
    }
    Ok(out)
}
