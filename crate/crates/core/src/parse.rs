//! Parsing of generated extraction strings.
//!
//! NER output grammar: `type1: entity1; type2: entity2; ...`
//! RE output grammar: `(subject1, relation1, object1), (subject2, relation2, object2), ...`
//!
//! Strict mode accepts exactly what [`serialize`] produces and fails on the
//! first bad item. Lenient mode is for model output: it strips Markdown
//! fences, list bullets and prose lines, matches labels case-insensitively,
//! and records every dropped fragment as a [`Reject`].

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{normalize_ws, Annotation, Task};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ParseError {
    #[error("malformed item `{0}`")]
    MalformedItem(String),
    #[error("unknown entity type `{0}`")]
    UnknownType(String),
    #[error("malformed group `{0}`")]
    MalformedGroup(String),
    #[error("unknown relation `{0}`")]
    UnknownRelation(String),
    #[error("annotation of task {found} in a {expected} serialization")]
    TaskMismatch { expected: Task, found: Task },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParseMode {
    Strict,
    Lenient,
}

/// The label vocabulary a parse may produce. `any()` accepts every label.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LabelSet {
    only: Option<Vec<String>>,
}

impl LabelSet {
    pub fn any() -> Self {
        Self { only: None }
    }

    pub fn of<I, S>(labels: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        Self {
            only: Some(labels.into_iter().map(|l| normalize_ws(l.as_ref())).collect()),
        }
    }

    pub fn contains(&self, label: &str) -> bool {
        self.only.as_ref().is_none_or(|set| set.iter().any(|l| l == label))
    }

    /// Canonical spelling of `label` under `mode`; `None` if not allowed.
    fn resolve(&self, label: &str, mode: ParseMode) -> Option<String> {
        let label = normalize_ws(label);
        match (&self.only, mode) {
            (None, _) => (!label.is_empty()).then_some(label),
            (Some(set), ParseMode::Strict) => set.iter().find(|l| **l == label).cloned(),
            (Some(set), ParseMode::Lenient) => {
                let folded = label.to_lowercase();
                set.iter().find(|l| l.to_lowercase() == folded).cloned()
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RejectReason {
    Malformed,
    UnknownType,
    FieldCount,
    EmptyField,
    UnknownRelation,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reject {
    pub fragment: String,
    pub reason: RejectReason,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParseOutcome {
    pub annotations: Vec<Annotation>,
    pub rejects: Vec<Reject>,
    pub mode: ParseMode,
}

impl ParseOutcome {
    fn strict(annotations: Vec<Annotation>) -> Self {
        Self {
            annotations,
            rejects: Vec::new(),
            mode: ParseMode::Strict,
        }
    }
}

pub fn parse(text: &str, task: Task, allowed: &LabelSet, mode: ParseMode) -> Result<ParseOutcome, ParseError> {
    match task {
        Task::Ner => parse_ner(text, allowed, mode),
        Task::Re => parse_re(text, allowed, mode),
    }
}

pub fn parse_ner(text: &str, allowed: &LabelSet, mode: ParseMode) -> Result<ParseOutcome, ParseError> {
    let strict = strict_ner(text, allowed);
    match mode {
        ParseMode::Strict => strict,
        ParseMode::Lenient => Ok(match strict {
            Ok(outcome) => ParseOutcome {
                mode: ParseMode::Lenient,
                ..outcome
            },
            Err(_) => lenient_ner(text, allowed),
        }),
    }
}

pub fn parse_re(text: &str, allowed: &LabelSet, mode: ParseMode) -> Result<ParseOutcome, ParseError> {
    let strict = strict_re(text, allowed);
    match mode {
        ParseMode::Strict => strict,
        ParseMode::Lenient => Ok(match strict {
            Ok(outcome) => ParseOutcome {
                mode: ParseMode::Lenient,
                ..outcome
            },
            Err(_) => lenient_re(text, allowed),
        }),
    }
}

/// Canonical serialization: `label: surface` joined by `"; "` for NER,
/// `(subject, relation, object)` joined by `", "` for RE, in input order.
pub fn serialize(annotations: &[Annotation], task: Task) -> Result<String, ParseError> {
    let mut parts = Vec::with_capacity(annotations.len());
    for a in annotations {
        match (task, a) {
            (Task::Ner, Annotation::Entity(m)) => parts.push(format!("{}: {}", m.label, m.surface)),
            (Task::Re, Annotation::Relation(t)) => parts.push(format!("({}, {}, {})", t.subject, t.relation, t.object)),
            _ => {
                return Err(ParseError::TaskMismatch {
                    expected: task,
                    found: a.task(),
                })
            }
        }
    }
    Ok(parts.join(match task {
        Task::Ner => "; ",
        Task::Re => ", ",
    }))
}

fn strict_ner(text: &str, allowed: &LabelSet) -> Result<ParseOutcome, ParseError> {
    if text.trim().is_empty() {
        return Ok(ParseOutcome::strict(Vec::new()));
    }
    let mut out = Vec::new();
    for item in text.split(';') {
        let (label, surface) = item
            .split_once(':')
            .ok_or_else(|| ParseError::MalformedItem(item.trim().to_string()))?;
        let label = normalize_ws(label);
        let surface = normalize_ws(surface);
        if label.is_empty() || surface.is_empty() {
            return Err(ParseError::MalformedItem(item.trim().to_string()));
        }
        let label = allowed
            .resolve(&label, ParseMode::Strict)
            .ok_or(ParseError::UnknownType(label))?;
        out.push(Annotation::entity(&label, &surface).expect("fields checked non-empty"));
    }
    Ok(ParseOutcome::strict(out))
}

fn strict_re(text: &str, allowed: &LabelSet) -> Result<ParseOutcome, ParseError> {
    let mut rest = text.trim();
    let mut out = Vec::new();
    while !rest.is_empty() {
        let malformed = |r: &str| ParseError::MalformedGroup(r.chars().take(80).collect());
        let body = rest.strip_prefix('(').ok_or_else(|| malformed(rest))?;
        let close = body.find(')').ok_or_else(|| malformed(rest))?;
        let inner = &body[..close];
        if inner.contains('(') {
            return Err(malformed(rest));
        }
        let fields: Vec<String> = inner.split(',').map(normalize_ws).collect();
        if fields.len() != 3 || fields.iter().any(String::is_empty) {
            return Err(ParseError::MalformedGroup(format!("({inner})")));
        }
        let relation = allowed
            .resolve(&fields[1], ParseMode::Strict)
            .ok_or_else(|| ParseError::UnknownRelation(fields[1].clone()))?;
        out.push(Annotation::relation(&fields[0], &relation, &fields[2]).expect("fields checked non-empty"));
        rest = body[close + 1..].trim_start();
        if let Some(next) = rest.strip_prefix(',') {
            rest = next.trim_start();
            if rest.is_empty() {
                return Err(ParseError::MalformedGroup(",".into()));
            }
        } else if !rest.is_empty() {
            return Err(malformed(rest));
        }
    }
    Ok(ParseOutcome::strict(out))
}

/// Drops fence lines (with optional language tag) and inline backtick runs.
fn strip_fences(text: &str) -> Vec<String> {
    let mut lines = Vec::new();
    for line in text.lines() {
        let trimmed = line.trim();
        if let Some(rest) = trimmed.strip_prefix("```") {
            let rest = rest.trim_end_matches('`').trim();
            if rest.is_empty() || rest.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
                continue;
            }
        }
        lines.push(trimmed.replace("```", ""));
    }
    lines
}

fn list_marker() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^(?:[-*\u{2022}]\s+|\d+[.)]\s+)").unwrap())
}

fn output_prefix() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)^(?:output|answer|result)\s*:\s*").unwrap())
}

fn lenient_ner(text: &str, allowed: &LabelSet) -> ParseOutcome {
    let mut annotations = Vec::new();
    let mut rejects = Vec::new();
    for line in strip_fences(text) {
        let line = list_marker().replace(&line, "");
        let line = output_prefix().replace(&line, "");
        if !line.contains(':') {
            continue;
        }
        for item in line.split(';') {
            let item = item.trim();
            if item.is_empty() {
                continue;
            }
            let reject = |reason| Reject {
                fragment: item.to_string(),
                reason,
            };
            let Some((label, surface)) = item.split_once(':') else {
                rejects.push(reject(RejectReason::Malformed));
                continue;
            };
            let surface = normalize_ws(surface);
            if normalize_ws(label).is_empty() || surface.is_empty() {
                rejects.push(reject(RejectReason::EmptyField));
                continue;
            }
            match allowed.resolve(label, ParseMode::Lenient) {
                Some(label) => annotations.push(Annotation::entity(&label, &surface).expect("non-empty fields")),
                None => rejects.push(reject(RejectReason::UnknownType)),
            }
        }
    }
    ParseOutcome {
        annotations,
        rejects,
        mode: ParseMode::Lenient,
    }
}

fn paren_group() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\(([^()]*)\)").unwrap())
}

fn lenient_re(text: &str, allowed: &LabelSet) -> ParseOutcome {
    let mut annotations = Vec::new();
    let mut rejects = Vec::new();
    let cleaned = strip_fences(text).join("\n");
    for cap in paren_group().captures_iter(&cleaned) {
        let fragment = cap[0].to_string();
        let fields: Vec<String> = cap[1].split(',').map(normalize_ws).collect();
        let reason = if fields.len() != 3 {
            Some(RejectReason::FieldCount)
        } else if fields.iter().any(String::is_empty) {
            Some(RejectReason::EmptyField)
        } else {
            None
        };
        if let Some(reason) = reason {
            rejects.push(Reject { fragment, reason });
            continue;
        }
        match allowed.resolve(&fields[1], ParseMode::Lenient) {
            Some(rel) => {
                annotations.push(Annotation::relation(&fields[0], &rel, &fields[2]).expect("non-empty fields"))
            }
            None => rejects.push(Reject {
                fragment,
                reason: RejectReason::UnknownRelation,
            }),
        }
    }
    ParseOutcome {
        annotations,
        rejects,
        mode: ParseMode::Lenient,
    }
}
