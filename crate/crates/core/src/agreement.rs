//! Fleiss' kappa and the two definition-bias measurements built on it.
//!
//! Extraction outputs are not categorical ratings, so they are reduced to a
//! rating table first: the items of a case are the distinct annotation keys
//! produced by any source, and each source rates every item with the
//! category it assigned, or [`NONE_CATEGORY`] if it did not extract it.
//!
//! * dataset bias (kappa_D): gold annotations vs. one model's output, over
//!   all declared label types plus `none`;
//! * type bias (kappa_T): any number of sources, restricted to one shared
//!   type, over the binary categories `{type, none}`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Annotation, Dataset, DatasetDescriptor, Task};
use crate::parse::{parse, LabelSet, ParseMode};
use crate::scalar::{mean, Real};
use crate::score::{PredictionBody, PredictionRecord};

/// Category given by a source that did not extract an item.
pub const NONE_CATEGORY: &str = "none";

/// `|1 - p_e|` at or below this is treated as `p_e = 1`.
pub const DEGENERATE_PE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum AgreementError {
    #[error("invalid rating matrix: {0}")]
    InvalidMatrix(String),
    #[error("expected agreement p_e = 1 (all ratings in one category); kappa is undefined")]
    DegeneratePe,
    #[error("at least two annotation sources are required, got {0}")]
    TooFewSources(usize),
    #[error("no source produced any item for the given cases")]
    EmptyUniverse,
    #[error("source `{source_id}` used label `{label}` outside the category set")]
    UnknownCategory { source_id: String, label: String },
    #[error("no reference constant for `{0}`")]
    MissingConstant(String),
    #[error("reference constants: {0}")]
    Constants(String),
}

/// N items by k categories; `n_ij` raters put item i in category j.
/// Every row sums to the same rater count n.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RatingMatrix {
    counts: Vec<u32>,
    n_items: usize,
    raters: u32,
    categories: Vec<String>,
}

impl RatingMatrix {
    pub fn new(rows: Vec<Vec<u32>>, categories: Vec<String>) -> Result<Self, AgreementError> {
        let invalid = |m: String| Err(AgreementError::InvalidMatrix(m));
        let k = categories.len();
        if k < 2 {
            return invalid(format!("need at least 2 categories, got {k}"));
        }
        if rows.is_empty() {
            return invalid("need at least one item".into());
        }
        let raters: u32 = rows[0].iter().sum();
        if raters < 2 {
            return invalid(format!("need at least 2 raters per item, got {raters}"));
        }
        let mut counts = Vec::with_capacity(rows.len() * k);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != k {
                return invalid(format!("row {i} has {} columns, expected {k}", row.len()));
            }
            let sum: u32 = row.iter().sum();
            if sum != raters {
                return invalid(format!("row {i} sums to {sum}, expected {raters}"));
            }
            counts.extend_from_slice(row);
        }
        Ok(Self {
            counts,
            n_items: rows.len(),
            raters,
            categories,
        })
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn raters(&self) -> u32 {
        self.raters
    }

    pub fn categories(&self) -> &[String] {
        &self.categories
    }

    pub fn row(&self, i: usize) -> &[u32] {
        let k = self.categories.len();
        &self.counts[i * k..(i + 1) * k]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[u32]> {
        self.counts.chunks(self.categories.len())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KappaReport<T> {
    /// `None` when p_e = 1: every rating fell into one category, which is
    /// unanimous agreement but leaves kappa undefined.
    pub kappa: Option<T>,
    pub p_o: T,
    pub p_e: T,
    pub per_category_pj: Vec<T>,
    pub categories: Vec<String>,
    pub n_items: usize,
    pub n_raters: u32,
}

impl<T: Real> KappaReport<T> {
    pub fn is_degenerate(&self) -> bool {
        self.kappa.is_none()
    }

    pub fn value(&self) -> Result<T, AgreementError> {
        self.kappa.ok_or(AgreementError::DegeneratePe)
    }

    pub fn to_json(&self) -> serde_json::Value {
        let p_j: serde_json::Map<String, serde_json::Value> = self
            .categories
            .iter()
            .zip(&self.per_category_pj)
            .map(|(c, p)| (c.clone(), serde_json::json!(p.as_f64())))
            .collect();
        serde_json::json!({
            "kappa": self.kappa.map(Real::as_f64),
            "degenerate": self.is_degenerate(),
            "p_o": self.p_o.as_f64(),
            "p_e": self.p_e.as_f64(),
            "p_j": p_j,
            "n_items": self.n_items,
            "n_raters": self.n_raters,
        })
    }
}

/// Fleiss' kappa: `(p_o - p_e) / (1 - p_e)` with `p_j` the category shares,
/// `p_e = sum p_j^2` and `p_o` the mean per-item pairwise agreement.
pub fn fleiss_kappa<T: Real>(m: &RatingMatrix) -> KappaReport<T> {
    let k = m.categories.len();
    let n = u64::from(m.raters);
    let big_n = m.n_items as u64;

    let mut column_totals = vec![0u64; k];
    let mut agreeing_pairs = 0u64;
    for row in m.rows() {
        for (j, &c) in row.iter().enumerate() {
            let c = u64::from(c);
            column_totals[j] += c;
            agreeing_pairs += c * c.saturating_sub(1);
        }
    }
    let total_ratings = T::from_u64(big_n * n).expect("rating count fits scalar");
    let p_j: Vec<T> = column_totals
        .iter()
        .map(|&c| T::from_u64(c).expect("count fits scalar") / total_ratings)
        .collect();
    let p_e: T = p_j.iter().map(|&p| p * p).sum();
    let p_o = T::from_u64(agreeing_pairs).expect("count fits scalar")
        / T::from_u64(big_n * n * (n - 1)).expect("count fits scalar");

    let degenerate = (T::one() - p_e).abs() <= T::lit(DEGENERATE_PE_TOLERANCE);
    let kappa = (!degenerate).then(|| (p_o - p_e) / (T::one() - p_e));
    KappaReport {
        kappa,
        p_o,
        p_e,
        per_category_pj: p_j,
        categories: m.categories.clone(),
        n_items: m.n_items,
        n_raters: m.raters,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SourceKind {
    Gold,
    ModelPrediction,
    LlmOutput,
}

/// One rater: a map from example id to the multiset it extracted there.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnnotationSource {
    pub id: String,
    pub kind: SourceKind,
    pub annotations: BTreeMap<String, Vec<Annotation>>,
}

impl AnnotationSource {
    pub fn from_dataset(id: &str, dataset: &Dataset) -> Self {
        Self {
            id: id.to_string(),
            kind: SourceKind::Gold,
            annotations: dataset
                .examples()
                .iter()
                .map(|e| (e.id.clone(), e.annotations.clone()))
                .collect(),
        }
    }

    /// Raw outputs are parsed leniently against `allowed`; failed records
    /// rate every item `none`.
    pub fn from_predictions(
        id: &str,
        kind: SourceKind,
        records: &[PredictionRecord],
        task: Task,
        allowed: &LabelSet,
    ) -> Self {
        let annotations = records
            .iter()
            .map(|r| {
                let items = match &r.body {
                    PredictionBody::Raw(raw) => parse(raw, task, allowed, ParseMode::Lenient)
                        .map(|o| o.annotations)
                        .unwrap_or_default(),
                    PredictionBody::Parsed(items) => items.clone(),
                    PredictionBody::Failed(_) => Vec::new(),
                };
                (r.id.clone(), items)
            })
            .collect();
        Self {
            id: id.to_string(),
            kind,
            annotations,
        }
    }

    fn on(&self, case: &str) -> &[Annotation] {
        self.annotations.get(case).map_or(&[], Vec::as_slice)
    }

    fn restricted_to(&self, label: &str) -> Self {
        Self {
            id: self.id.clone(),
            kind: self.kind,
            annotations: self
                .annotations
                .iter()
                .map(|(k, v)| (k.clone(), v.iter().filter(|a| a.label() == label).cloned().collect()))
                .collect(),
        }
    }
}

/// How rating items are formed from extracted annotations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum UniversePolicy {
    /// One item per distinct full tuple; a source rates it with the tuple's
    /// label if it extracted that exact tuple, else `none`.
    #[default]
    ExactKey,
    /// One item per distinct span (entity surface, or subject/object pair);
    /// a source rates it with the label it gave that span (the first in
    /// category order if it gave several), else `none`.
    Span,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum ItemKey {
    Exact(Annotation),
    Span(Vec<String>),
}

fn item_key(a: &Annotation, policy: UniversePolicy) -> ItemKey {
    match policy {
        UniversePolicy::ExactKey => ItemKey::Exact(a.clone()),
        UniversePolicy::Span => ItemKey::Span(match a {
            Annotation::Entity(m) => vec![m.surface.clone()],
            Annotation::Relation(t) => vec![t.subject.clone(), t.object.clone()],
        }),
    }
}

/// Reduces extraction outputs on `case_ids` to a rating table. Cases a
/// source never mentions count as empty; ids outside `case_ids` are ignored.
/// `none` is appended to `categories` when missing. Items are ordered by
/// case, then by key, so the table is reproducible.
pub fn build_rating_matrix(
    sources: &[&AnnotationSource],
    case_ids: &[String],
    policy: UniversePolicy,
    categories: &[String],
) -> Result<RatingMatrix, AgreementError> {
    if sources.len() < 2 {
        return Err(AgreementError::TooFewSources(sources.len()));
    }
    let mut categories = categories.to_vec();
    if !categories.iter().any(|c| c == NONE_CATEGORY) {
        categories.push(NONE_CATEGORY.to_string());
    }
    let index: BTreeMap<&str, usize> = categories.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    let none = index[NONE_CATEGORY];

    for s in sources {
        for case in case_ids {
            if let Some(bad) = s.on(case).iter().find(|a| !index.contains_key(a.label())) {
                return Err(AgreementError::UnknownCategory {
                    source_id: s.id.clone(),
                    label: bad.label().to_string(),
                });
            }
        }
    }

    let per_case: Vec<Vec<Vec<u32>>> = case_ids
        .par_iter()
        .map(|case| {
            // key -> category chosen by each source
            let ratings: Vec<BTreeMap<ItemKey, usize>> = sources
                .iter()
                .map(|s| {
                    let mut chosen: BTreeMap<ItemKey, usize> = BTreeMap::new();
                    for a in s.on(case) {
                        let cat = index[a.label()];
                        chosen
                            .entry(item_key(a, policy))
                            .and_modify(|c| *c = (*c).min(cat))
                            .or_insert(cat);
                    }
                    chosen
                })
                .collect();
            let universe: BTreeSet<&ItemKey> = ratings.iter().flat_map(|r| r.keys()).collect();
            universe
                .into_iter()
                .map(|key| {
                    let mut row = vec![0u32; categories.len()];
                    for r in &ratings {
                        row[r.get(key).copied().unwrap_or(none)] += 1;
                    }
                    row
                })
                .collect()
        })
        .collect();

    let rows: Vec<Vec<u32>> = per_case.into_iter().flatten().collect();
    if rows.is_empty() {
        return Err(AgreementError::EmptyUniverse);
    }
    RatingMatrix::new(rows, categories)
}

/// kappa_D: agreement between gold annotations and one model's output over
/// the dataset's label types plus `none`.
pub fn dataset_bias<T: Real>(
    gold: &AnnotationSource,
    model: &AnnotationSource,
    cases: &[String],
    label_types: &[String],
) -> Result<KappaReport<T>, AgreementError> {
    let m = build_rating_matrix(&[gold, model], cases, UniversePolicy::ExactKey, label_types)?;
    Ok(fleiss_kappa(&m))
}

/// kappa_T: agreement among sources on the mentions of one shared type.
pub fn type_bias<T: Real>(
    sources: &[&AnnotationSource],
    shared_type: &str,
    cases: &[String],
) -> Result<KappaReport<T>, AgreementError> {
    let restricted: Vec<AnnotationSource> = sources.iter().map(|s| s.restricted_to(shared_type)).collect();
    let refs: Vec<&AnnotationSource> = restricted.iter().collect();
    let m = build_rating_matrix(&refs, cases, UniversePolicy::ExactKey, &[shared_type.to_string()])?;
    Ok(fleiss_kappa(&m))
}

const BUNDLED_CONSTANTS: &str = include_str!("../assets/reference_constants.json");

/// Published kappa values: kappa_D per dataset, kappa_T per label type and
/// task. Lookups ignore case, whitespace and punctuation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReferenceConstants {
    pub kappa_d: BTreeMap<String, f64>,
    pub kappa_t: BTreeMap<Task, BTreeMap<String, f64>>,
}

fn fold(s: &str) -> String {
    s.chars()
        .filter(|c| c.is_alphanumeric())
        .flat_map(char::to_lowercase)
        .collect()
}

impl ReferenceConstants {
    pub fn bundled() -> Self {
        Self::from_json(BUNDLED_CONSTANTS).expect("bundled constants are valid")
    }

    pub fn from_json(json: &str) -> Result<Self, AgreementError> {
        serde_json::from_str(json).map_err(|e| AgreementError::Constants(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, AgreementError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| AgreementError::Constants(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// kappa_D for a dataset, matched on its name or any alias.
    pub fn dataset_kappa(&self, dataset: &DatasetDescriptor) -> Result<f64, AgreementError> {
        let wanted: Vec<String> = std::iter::once(&dataset.name)
            .chain(dataset.aliases.iter())
            .map(|n| fold(n))
            .collect();
        self.kappa_d
            .iter()
            .find(|(k, _)| wanted.contains(&fold(k)))
            .map(|(_, v)| *v)
            .ok_or_else(|| AgreementError::MissingConstant(dataset.name.clone()))
    }

    pub fn type_kappa(&self, task: Task, label: &str) -> Option<f64> {
        let wanted = fold(label);
        self.kappa_t
            .get(&task)?
            .iter()
            .find(|(k, _)| fold(k) == wanted)
            .map(|(_, v)| *v)
    }

    /// Mean of the measured kappa_T values of one task.
    pub fn type_kappa_mean(&self, task: Task) -> Option<f64> {
        let values: Vec<f64> = self.kappa_t.get(&task)?.values().copied().collect();
        mean(&values)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn cats(names: &[&str]) -> Vec<String> {
        names.iter().map(|s| s.to_string()).collect()
    }

    fn source(id: &str, cases: &[(&str, Vec<Annotation>)]) -> AnnotationSource {
        AnnotationSource {
            id: id.into(),
            kind: SourceKind::ModelPrediction,
            annotations: cases.iter().map(|(k, v)| (k.to_string(), v.clone())).collect(),
        }
    }

    fn person(s: &str) -> Annotation {
        Annotation::entity("person", s).unwrap()
    }

    #[test]
    fn hand_worked_two_by_two() {
        let m = RatingMatrix::new(vec![vec![2, 0], vec![1, 1]], cats(&["A", "B"])).unwrap();
        let r: KappaReport<f64> = fleiss_kappa(&m);
        assert_abs_diff_eq!(r.p_o, 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(r.p_e, 0.625, epsilon = 1e-15);
        assert_abs_diff_eq!(r.value().unwrap(), -1.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn unanimity_in_one_category_is_degenerate() {
        let m = RatingMatrix::new(vec![vec![3, 0]; 10], cats(&["A", "B"])).unwrap();
        let r: KappaReport<f64> = fleiss_kappa(&m);
        assert!(r.is_degenerate());
        assert_eq!(r.p_o, 1.0);
        assert_eq!(r.p_e, 1.0);
        assert_eq!(r.value(), Err(AgreementError::DegeneratePe));
        assert_eq!(r.to_json()["kappa"], serde_json::Value::Null);
    }

    #[test]
    fn f32_instantiation() {
        let m = RatingMatrix::new(vec![vec![2, 0], vec![1, 1]], cats(&["A", "B"])).unwrap();
        let r: KappaReport<f32> = fleiss_kappa(&m);
        assert!((r.value().unwrap() + 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn matrix_invariants() {
        assert!(RatingMatrix::new(vec![vec![2, 0], vec![1, 0]], cats(&["A", "B"])).is_err());
        assert!(RatingMatrix::new(vec![vec![1, 0]], cats(&["A", "B"])).is_err());
        assert!(RatingMatrix::new(vec![vec![2]], cats(&["A"])).is_err());
        assert!(RatingMatrix::new(vec![], cats(&["A", "B"])).is_err());
    }

    #[test]
    fn one_sided_extraction_splits_the_item() {
        let a = source("a", &[("c1", vec![person("X")])]);
        let b = source("b", &[("c1", vec![])]);
        let m = build_rating_matrix(&[&a, &b], &cats(&["c1"]), UniversePolicy::ExactKey, &cats(&["person"])).unwrap();
        assert_eq!(m.n_items(), 1);
        assert_eq!(m.categories(), ["person", "none"]);
        assert_eq!(m.row(0), [1, 1]);
    }

    #[test]
    fn row_sums_equal_source_count() {
        let a = source(
            "a",
            &[("c1", vec![person("X"), person("Y")]), ("c2", vec![person("Z")])],
        );
        let b = source("b", &[("c1", vec![person("X")]), ("c3", vec![person("W")])]);
        let c = source("c", &[("c2", vec![person("Z"), person("Q")])]);
        let case_ids = cats(&["c1", "c2", "c3", "c4", "c5"]);
        let m = build_rating_matrix(&[&a, &b, &c], &case_ids, UniversePolicy::ExactKey, &cats(&["person"])).unwrap();
        assert_eq!(m.raters(), 3);
        assert!(m.rows().all(|r| r.iter().sum::<u32>() == 3));
        assert_eq!(m.n_items(), 5);
    }

    #[test]
    fn identical_sources_reach_maximal_agreement() {
        let a = source("gold", &[("c1", vec![person("X")]), ("c2", vec![person("Y")])]);
        let r: KappaReport<f64> = dataset_bias(&a, &a, &cats(&["c1", "c2"]), &cats(&["person"])).unwrap();
        assert!(r.is_degenerate());

        let loc = Annotation::entity("location", "Paris").unwrap();
        let b = source("gold", &[("c1", vec![person("X"), loc])]);
        let r: KappaReport<f64> = dataset_bias(&b, &b, &cats(&["c1"]), &cats(&["person", "location"])).unwrap();
        assert_eq!(r.value().unwrap(), 1.0);
    }

    #[test]
    fn disjoint_extractions_disagree() {
        let gold = source("gold", &[("c1", vec![person("A"), person("B")])]);
        let llm = source("llm", &[("c1", vec![person("C"), person("D")])]);
        let r: KappaReport<f64> = dataset_bias(&gold, &llm, &cats(&["c1"]), &cats(&["person"])).unwrap();
        assert_eq!(r.n_items, 4);
        assert!(r.value().unwrap() < 0.0);
        assert_abs_diff_eq!(r.value().unwrap(), -1.0, epsilon = 1e-12);
    }

    #[test]
    fn type_bias_overlapping_sets() {
        let loc = Annotation::entity("location", "L").unwrap();
        let s1 = source("s1", &[("c", vec![person("A"), person("B"), loc.clone()])]);
        let s2 = source("s2", &[("c", vec![person("B"), person("C")])]);
        let r: KappaReport<f64> = type_bias(&[&s1, &s2], "person", &cats(&["c"])).unwrap();
        assert_eq!(r.n_items, 3);
        // rows [1,1], [2,0], [1,1]: p_o = 1/3, p_e = (2/3)^2 + (1/3)^2 = 5/9
        assert_abs_diff_eq!(r.p_o, 1.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.p_e, 5.0 / 9.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.value().unwrap(), -0.5, epsilon = 1e-12);

        let same: KappaReport<f64> = type_bias(&[&s2, &s2], "person", &cats(&["c"])).unwrap();
        assert!(same.is_degenerate());
        assert_eq!(
            type_bias::<f64>(&[&s1, &s2], "weapon", &cats(&["c"])),
            Err(AgreementError::EmptyUniverse)
        );
    }

    #[test]
    fn span_policy_compares_labels_on_the_same_mention() {
        let a = source("a", &[("c", vec![person("Paris")])]);
        let b = source("b", &[("c", vec![Annotation::entity("location", "Paris").unwrap()])]);
        let cats_ = cats(&["person", "location"]);
        let exact = build_rating_matrix(&[&a, &b], &cats(&["c"]), UniversePolicy::ExactKey, &cats_).unwrap();
        assert_eq!(exact.n_items(), 2);
        let span = build_rating_matrix(&[&a, &b], &cats(&["c"]), UniversePolicy::Span, &cats_).unwrap();
        assert_eq!(span.n_items(), 1);
        assert_eq!(span.row(0), [1, 1, 0]);
    }

    #[test]
    fn construction_errors() {
        let a = source("a", &[("c", vec![person("X")])]);
        assert_eq!(
            build_rating_matrix(&[&a], &cats(&["c"]), UniversePolicy::ExactKey, &cats(&["person"])),
            Err(AgreementError::TooFewSources(1))
        );
        let empty = source("e", &[]);
        assert_eq!(
            build_rating_matrix(
                &[&empty, &empty],
                &cats(&["c"]),
                UniversePolicy::ExactKey,
                &cats(&["person"])
            ),
            Err(AgreementError::EmptyUniverse)
        );
        assert!(matches!(
            build_rating_matrix(
                &[&a, &empty],
                &cats(&["c"]),
                UniversePolicy::ExactKey,
                &cats(&["location"])
            ),
            Err(AgreementError::UnknownCategory { .. })
        ));
    }

    #[test]
    fn bundled_constants() {
        let c = ReferenceConstants::bundled();
        let registry = crate::corpus::Registry::bundled();
        assert_eq!(c.dataset_kappa(registry.get("CoNLL 2003").unwrap()).unwrap(), -0.350);
        for d in &registry.datasets {
            assert!(c.dataset_kappa(d).is_ok(), "{} lacks kappa_D", d.name);
        }
        assert_eq!(c.type_kappa(Task::Ner, "person"), Some(0.414));
        assert_eq!(c.type_kappa(Task::Ner, "Location"), Some(0.428));
        assert_eq!(c.type_kappa(Task::Re, "person"), None);
        assert_abs_diff_eq!(
            c.type_kappa_mean(Task::Ner).unwrap(),
            (0.414 + 0.428 + 0.364 + 0.021) / 4.0
        );
    }
}
