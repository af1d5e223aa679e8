//! Canonical corpus representation, dataset registry and ingest.
//!
//! Every source format is flattened to [`Example`]s whose annotations are
//! surface strings (no character offsets). Whitespace inside labels and
//! surfaces is collapsed at construction time; case is preserved.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: input is not valid UTF-8")]
    NotUtf8 { path: PathBuf },
    #[error("line {line}: malformed record: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("line {line}: label `{label}` is not declared for dataset `{dataset}`")]
    UnknownLabel {
        line: usize,
        label: String,
        dataset: String,
    },
    #[error("duplicate example id `{0}`")]
    DuplicateId(String),
    #[error("task mismatch: expected {expected}, found {found}")]
    TaskMismatch { expected: Task, found: Task },
    #[error("unknown split `{0}`")]
    UnknownSplit(String),
    #[error("unknown task `{0}`")]
    UnknownTask(String),
    #[error("unknown input format `{0}`")]
    UnknownFormat(String),
    #[error("invalid dataset descriptor: {0}")]
    InvalidDescriptor(String),
    #[error("dataset `{0}` is not in the registry")]
    UnknownDataset(String),
    #[error("invalid annotation: {0}")]
    InvalidAnnotation(String),
}

pub type Result<T, E = CorpusError> = std::result::Result<T, E>;

/// Collapses whitespace runs to a single space and trims both ends.
pub fn normalize_ws(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for word in s.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(word);
    }
    out
}

/// Character-reversed dataset name used as a non-natural-language source tag.
pub fn make_nickname(name: &str) -> String {
    name.chars().rev().collect()
}

/// Lowercase alphanumeric fold used to match registry names and aliases.
fn slug(s: &str) -> String {
    s.chars()
        .filter(|c| c.is_alphanumeric())
        .flat_map(char::to_lowercase)
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Ner,
    Re,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Ner => "ner",
            Task::Re => "re",
        })
    }
}

impl FromStr for Task {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ner" => Ok(Task::Ner),
            "re" => Ok(Task::Re),
            _ => Err(CorpusError::UnknownTask(s.to_string())),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "valid" | "dev" | "validation" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            _ => Err(CorpusError::UnknownSplit(s.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EntityMention {
    pub label: String,
    pub surface: String,
}

impl EntityMention {
    pub fn new(label: &str, surface: &str) -> Result<Self> {
        let label = normalize_ws(label);
        let surface = normalize_ws(surface);
        if label.is_empty() || surface.is_empty() {
            return Err(CorpusError::InvalidAnnotation(format!(
                "entity needs a label and a surface, got ({label:?}, {surface:?})"
            )));
        }
        Ok(Self { label, surface })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelationTriple {
    pub subject: String,
    pub relation: String,
    pub object: String,
}

impl RelationTriple {
    pub fn new(subject: &str, relation: &str, object: &str) -> Result<Self> {
        let subject = normalize_ws(subject);
        let relation = normalize_ws(relation);
        let object = normalize_ws(object);
        if subject.is_empty() || relation.is_empty() || object.is_empty() {
            return Err(CorpusError::InvalidAnnotation(format!(
                "triple fields must be non-empty, got ({subject:?}, {relation:?}, {object:?})"
            )));
        }
        Ok(Self {
            subject,
            relation,
            object,
        })
    }
}

/// One extracted item. Ordering and hashing are over the full normalized
/// tuple, which is what exact-match scoring and agreement keys rely on.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Annotation {
    Entity(EntityMention),
    Relation(RelationTriple),
}

impl Annotation {
    pub fn entity(label: &str, surface: &str) -> Result<Self> {
        EntityMention::new(label, surface).map(Annotation::Entity)
    }

    pub fn relation(subject: &str, relation: &str, object: &str) -> Result<Self> {
        RelationTriple::new(subject, relation, object).map(Annotation::Relation)
    }

    pub fn task(&self) -> Task {
        match self {
            Annotation::Entity(_) => Task::Ner,
            Annotation::Relation(_) => Task::Re,
        }
    }

    /// Entity type or relation name.
    pub fn label(&self) -> &str {
        match self {
            Annotation::Entity(m) => &m.label,
            Annotation::Relation(t) => &t.relation,
        }
    }

    fn is_normalized(&self) -> bool {
        let ok = |s: &str| !s.is_empty() && normalize_ws(s) == s;
        match self {
            Annotation::Entity(m) => ok(&m.label) && ok(&m.surface),
            Annotation::Relation(t) => ok(&t.subject) && ok(&t.relation) && ok(&t.object),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Example {
    pub id: String,
    pub text: String,
    pub task: Task,
    pub annotations: Vec<Annotation>,
    pub split: Split,
}

impl Example {
    pub fn new(
        id: impl Into<String>,
        text: impl Into<String>,
        task: Task,
        annotations: Vec<Annotation>,
        split: Split,
    ) -> Result<Self> {
        let example = Self {
            id: id.into(),
            text: text.into(),
            task,
            annotations,
            split,
        };
        example.validate()?;
        Ok(example)
    }

    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(CorpusError::InvalidAnnotation("empty example id".into()));
        }
        for a in &self.annotations {
            if a.task() != self.task {
                return Err(CorpusError::TaskMismatch {
                    expected: self.task,
                    found: a.task(),
                });
            }
            if !a.is_normalized() {
                return Err(CorpusError::InvalidAnnotation(format!(
                    "annotation {a:?} in `{}` is empty or not whitespace-normalized",
                    self.id
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Valid => self.valid,
            Split::Test => self.test,
        }
    }

    fn bump(&mut self, split: Split) {
        match split {
            Split::Train => self.train += 1,
            Split::Valid => self.valid += 1,
            Split::Test => self.test += 1,
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DescriptorRecord {
    name: String,
    #[serde(default)]
    nickname: Option<String>,
    task: Task,
    label_types: Vec<String>,
    #[serde(default)]
    aliases: Vec<String>,
    #[serde(default)]
    splits: SplitCounts,
}

impl TryFrom<DescriptorRecord> for DatasetDescriptor {
    type Error = CorpusError;

    fn try_from(r: DescriptorRecord) -> Result<Self> {
        let mut d = DatasetDescriptor::new(&r.name, r.task, r.label_types)?;
        if let Some(nick) = r.nickname {
            if nick != d.nickname {
                return Err(CorpusError::InvalidDescriptor(format!(
                    "nickname `{nick}` of `{}` is not its reversal",
                    d.name
                )));
            }
        }
        d.aliases = r.aliases;
        d.splits = r.splits;
        Ok(d)
    }
}

/// Static metadata for one dataset: its name, derived nickname, task and
/// declared label types (ordered, duplicate-free).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "DescriptorRecord")]
pub struct DatasetDescriptor {
    pub name: String,
    pub nickname: String,
    pub task: Task,
    pub label_types: Vec<String>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub aliases: Vec<String>,
    pub splits: SplitCounts,
}

impl DatasetDescriptor {
    pub fn new(name: &str, task: Task, label_types: Vec<String>) -> Result<Self> {
        if name.trim().is_empty() {
            return Err(CorpusError::InvalidDescriptor("empty dataset name".into()));
        }
        let label_types: Vec<String> = label_types.iter().map(|l| normalize_ws(l)).collect();
        if label_types.is_empty() {
            return Err(CorpusError::InvalidDescriptor(format!(
                "`{name}` declares no label types"
            )));
        }
        let mut seen = HashSet::new();
        for l in &label_types {
            if l.is_empty() || !seen.insert(l.as_str()) {
                return Err(CorpusError::InvalidDescriptor(format!(
                    "`{name}` has an empty or duplicate label type `{l}`"
                )));
            }
        }
        Ok(Self {
            name: name.to_string(),
            nickname: make_nickname(name),
            task,
            label_types,
            aliases: Vec::new(),
            splits: SplitCounts::default(),
        })
    }

    pub fn declares(&self, label: &str) -> bool {
        self.label_types.iter().any(|l| l == label)
    }

    fn answers_to(&self, query: &str) -> bool {
        let q = slug(query);
        !q.is_empty()
            && std::iter::once(&self.name)
                .chain(std::iter::once(&self.nickname))
                .chain(self.aliases.iter())
                .any(|n| slug(n) == q)
    }
}

/// Label types declared by both datasets, in `a`'s order.
pub fn shared_label_types(a: &DatasetDescriptor, b: &DatasetDescriptor) -> Result<Vec<String>> {
    if a.task != b.task {
        return Err(CorpusError::TaskMismatch {
            expected: a.task,
            found: b.task,
        });
    }
    Ok(a.label_types.iter().filter(|l| b.declares(l)).cloned().collect())
}

/// Known datasets. The bundled registry covers the thirteen NER/RE corpora
/// the toolkit was built around; user registries use the same JSON layout.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Registry {
    pub datasets: Vec<DatasetDescriptor>,
}

const BUNDLED_REGISTRY: &str = include_str!("../assets/registry.json");

impl Registry {
    pub fn bundled() -> Self {
        Self::from_json(BUNDLED_REGISTRY).expect("bundled registry is valid")
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let registry: Registry =
            serde_json::from_str(json).map_err(|e| CorpusError::InvalidDescriptor(e.to_string()))?;
        let mut names = HashSet::new();
        for d in &registry.datasets {
            if !names.insert(slug(&d.name)) {
                return Err(CorpusError::InvalidDescriptor(format!(
                    "dataset `{}` registered twice",
                    d.name
                )));
            }
        }
        Ok(registry)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&read_utf8(path)?)
    }

    /// Looks a dataset up by name, nickname or alias, ignoring case,
    /// whitespace and punctuation.
    pub fn get(&self, name: &str) -> Result<&DatasetDescriptor> {
        self.datasets
            .iter()
            .find(|d| d.answers_to(name))
            .ok_or_else(|| CorpusError::UnknownDataset(name.to_string()))
    }

    /// Other registered datasets of the same task, in registry order.
    pub fn peers<'a>(&'a self, of: &'a DatasetDescriptor) -> impl Iterator<Item = &'a DatasetDescriptor> {
        self.datasets
            .iter()
            .filter(move |d| d.task == of.task && d.name != of.name)
    }
}

/// An immutable, validated collection of examples for one dataset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub descriptor: DatasetDescriptor,
    examples: Vec<Example>,
}

impl Dataset {
    pub fn new(descriptor: DatasetDescriptor, examples: Vec<Example>) -> Result<Self> {
        let mut ids = HashSet::new();
        for e in &examples {
            e.validate()?;
            if e.task != descriptor.task {
                return Err(CorpusError::TaskMismatch {
                    expected: descriptor.task,
                    found: e.task,
                });
            }
            if !ids.insert(e.id.as_str()) {
                return Err(CorpusError::DuplicateId(e.id.clone()));
            }
        }
        Ok(Self { descriptor, examples })
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Example> {
        self.examples.iter().find(|e| e.id == id)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Example> {
        self.examples.iter().filter(move |e| e.split == split)
    }

    pub fn split_counts(&self) -> SplitCounts {
        let mut counts = SplitCounts::default();
        for e in &self.examples {
            counts.bump(e.split);
        }
        counts
    }

    /// Writes the canonical JSONL form: one example per line, LF endings.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for e in &self.examples {
            serde_json::to_writer(&mut out, e)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("serde_json emits UTF-8")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputFormat {
    CanonicalJsonl,
    ConllColumn,
    JsonTriples,
}

impl FromStr for InputFormat {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "canonical-jsonl" | "jsonl" => Ok(InputFormat::CanonicalJsonl),
            "conll-column" | "conll" => Ok(InputFormat::ConllColumn),
            "json-triples" | "triples" => Ok(InputFormat::JsonTriples),
            _ => Err(CorpusError::UnknownFormat(s.to_string())),
        }
    }
}

#[derive(Clone, Debug)]
pub struct IngestOptions {
    pub format: InputFormat,
    /// Split assigned to records whose source format carries none.
    pub split: Split,
    /// Reject undeclared labels instead of dropping them.
    pub strict: bool,
    /// Source tag or relation name -> declared label type.
    pub label_map: BTreeMap<String, String>,
}

impl IngestOptions {
    pub fn new(format: InputFormat) -> Self {
        let label_map = [
            ("PER", "person"),
            ("LOC", "location"),
            ("ORG", "organization"),
            ("MISC", "else"),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
        Self {
            format,
            split: Split::Train,
            strict: true,
            label_map,
        }
    }

    fn map_label(&self, raw: &str) -> String {
        self.label_map.get(raw).cloned().unwrap_or_else(|| normalize_ws(raw))
    }
}

#[derive(Clone, Debug)]
pub struct Ingested {
    pub dataset: Dataset,
    /// Annotations dropped in permissive mode because their label is undeclared.
    pub dropped: usize,
}

fn read_utf8(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut text = String::from_utf8(bytes).map_err(|_| CorpusError::NotUtf8 {
        path: path.to_path_buf(),
    })?;
    if text.starts_with('\u{feff}') {
        text.drain(..3);
    }
    Ok(text)
}

pub fn ingest(path: &Path, descriptor: &DatasetDescriptor, opts: &IngestOptions) -> Result<Ingested> {
    ingest_str(&read_utf8(path)?, descriptor, opts)
}

pub fn ingest_str(text: &str, descriptor: &DatasetDescriptor, opts: &IngestOptions) -> Result<Ingested> {
    let mut builder = Builder::new(descriptor, opts);
    match opts.format {
        InputFormat::CanonicalJsonl => read_canonical(text, &mut builder)?,
        InputFormat::ConllColumn => read_conll(text, &mut builder)?,
        InputFormat::JsonTriples => read_triples(text, &mut builder)?,
    }
    builder.finish()
}

struct Builder<'a> {
    descriptor: &'a DatasetDescriptor,
    opts: &'a IngestOptions,
    examples: Vec<Example>,
    ids: HashSet<String>,
    dropped: usize,
}

impl<'a> Builder<'a> {
    fn new(descriptor: &'a DatasetDescriptor, opts: &'a IngestOptions) -> Self {
        Self {
            descriptor,
            opts,
            examples: Vec::new(),
            ids: HashSet::new(),
            dropped: 0,
        }
    }

    /// Checks labels against the descriptor, then records the example.
    fn push(&mut self, line: usize, mut example: Example) -> Result<()> {
        if example.task != self.descriptor.task {
            return Err(CorpusError::TaskMismatch {
                expected: self.descriptor.task,
                found: example.task,
            });
        }
        let before = example.annotations.len();
        if self.opts.strict {
            if let Some(bad) = example
                .annotations
                .iter()
                .find(|a| !self.descriptor.declares(a.label()))
            {
                return Err(CorpusError::UnknownLabel {
                    line,
                    label: bad.label().to_string(),
                    dataset: self.descriptor.name.clone(),
                });
            }
        } else {
            example.annotations.retain(|a| self.descriptor.declares(a.label()));
            self.dropped += before - example.annotations.len();
        }
        example.validate().map_err(|e| CorpusError::Malformed {
            line,
            reason: e.to_string(),
        })?;
        if !self.ids.insert(example.id.clone()) {
            return Err(CorpusError::DuplicateId(example.id));
        }
        self.examples.push(example);
        Ok(())
    }

    fn next_id(&self, split: Split) -> String {
        format!("{split}-{}", self.examples.len())
    }

    fn finish(self) -> Result<Ingested> {
        Ok(Ingested {
            dataset: Dataset::new(self.descriptor.clone(), self.examples)?,
            dropped: self.dropped,
        })
    }
}

fn read_canonical(text: &str, b: &mut Builder<'_>) -> Result<()> {
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let example: Example = serde_json::from_str(line).map_err(|e| CorpusError::Malformed {
            line: line_no,
            reason: e.to_string(),
        })?;
        b.push(line_no, example)?;
    }
    Ok(())
}

/// Whitespace-separated columns, first column the token, last column a
/// BIO/IOB1/BIOES tag; blank lines end sentences.
fn read_conll(text: &str, b: &mut Builder<'_>) -> Result<()> {
    let mut tokens: Vec<(String, String)> = Vec::new();
    let mut start_line = 0;
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.is_empty() {
            flush_sentence(&mut tokens, start_line, b)?;
            continue;
        }
        if cols[0] == "-DOCSTART-" {
            flush_sentence(&mut tokens, start_line, b)?;
            continue;
        }
        if cols.len() < 2 {
            return Err(CorpusError::Malformed {
                line: line_no,
                reason: "expected a token column and a tag column".into(),
            });
        }
        if tokens.is_empty() {
            start_line = line_no;
        }
        tokens.push((cols[0].to_string(), cols[cols.len() - 1].to_string()));
    }
    flush_sentence(&mut tokens, start_line, b)
}

fn flush_sentence(tokens: &mut Vec<(String, String)>, line: usize, b: &mut Builder<'_>) -> Result<()> {
    if tokens.is_empty() {
        return Ok(());
    }
    let mut spans: Vec<(String, Vec<&str>)> = Vec::new();
    let mut open = false;
    for (offset, (token, tag)) in tokens.iter().enumerate() {
        if tag == "O" {
            open = false;
            continue;
        }
        let (prefix, kind) = tag.split_once('-').ok_or_else(|| CorpusError::Malformed {
            line: line + offset,
            reason: format!("unrecognized tag `{tag}`"),
        })?;
        let continues = open && matches!(prefix, "I" | "E") && spans.last().is_some_and(|(k, _)| k == kind);
        match prefix {
            "B" | "S" | "U" => spans.push((kind.to_string(), vec![token])),
            "I" | "E" | "L" if continues => spans.last_mut().unwrap().1.push(token),
            "I" | "E" | "L" => spans.push((kind.to_string(), vec![token])),
            _ => {
                return Err(CorpusError::Malformed {
                    line: line + offset,
                    reason: format!("unrecognized tag prefix in `{tag}`"),
                })
            }
        }
        open = matches!(prefix, "B" | "I");
    }
    let text = tokens.iter().map(|(t, _)| t.as_str()).collect::<Vec<_>>().join(" ");
    let annotations = spans
        .into_iter()
        .map(|(kind, toks)| Annotation::entity(&b.opts.map_label(&kind), &toks.join(" ")))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| CorpusError::Malformed {
            line,
            reason: e.to_string(),
        })?;
    let split = b.opts.split;
    let example = Example {
        id: b.next_id(split),
        text,
        task: Task::Ner,
        annotations,
        split,
    };
    tokens.clear();
    b.push(line, example)
}

#[derive(Deserialize)]
#[serde(untagged)]
enum TripleRecord {
    Positional(String, String, String),
    Named {
        subject: String,
        relation: String,
        object: String,
    },
    Mention {
        #[serde(rename = "em1Text")]
        subject: String,
        #[serde(rename = "label")]
        relation: String,
        #[serde(rename = "em2Text")]
        object: String,
    },
}

#[derive(Deserialize)]
struct TriplesLine {
    #[serde(default)]
    id: Option<String>,
    #[serde(alias = "sentText")]
    text: String,
    #[serde(alias = "relationMentions", default)]
    triples: Vec<TripleRecord>,
    #[serde(default)]
    split: Option<String>,
}

/// JSON objects with `text` and `triples` (positional `[s, r, o]`, named
/// fields, or NYT-style `em1Text`/`label`/`em2Text`), either one per line or
/// as a single top-level array.
fn read_triples(text: &str, b: &mut Builder<'_>) -> Result<()> {
    let records: Vec<(usize, serde_json::Value)> = if text.trim_start().starts_with('[') {
        let all: Vec<serde_json::Value> = serde_json::from_str(text).map_err(|e| CorpusError::Malformed {
            line: e.line(),
            reason: e.to_string(),
        })?;
        all.into_iter().enumerate().map(|(i, v)| (i + 1, v)).collect()
    } else {
        let mut out = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let v = serde_json::from_str(line).map_err(|e| CorpusError::Malformed {
                line: idx + 1,
                reason: e.to_string(),
            })?;
            out.push((idx + 1, v));
        }
        out
    };
    for (line, value) in records {
        let rec: TriplesLine = serde_json::from_value(value).map_err(|e| CorpusError::Malformed {
            line,
            reason: e.to_string(),
        })?;
        let split = match rec.split {
            Some(s) => s.parse()?,
            None => b.opts.split,
        };
        let annotations = rec
            .triples
            .into_iter()
            .map(|t| {
                let (s, r, o) = match t {
                    TripleRecord::Positional(s, r, o) => (s, r, o),
                    TripleRecord::Named {
                        subject,
                        relation,
                        object,
                    }
                    | TripleRecord::Mention {
                        subject,
                        relation,
                        object,
                    } => (subject, relation, object),
                };
                Annotation::relation(&s, &b.opts.map_label(&r), &o)
            })
            .collect::<Result<Vec<_>>>()
            .map_err(|e| CorpusError::Malformed {
                line,
                reason: e.to_string(),
            })?;
        let id = rec.id.unwrap_or_else(|| b.next_id(split));
        let example = Example {
            id,
            text: rec.text,
            task: Task::Re,
            annotations,
            split,
        };
        b.push(line, example)?;
    }
    Ok(())
}

/// Result of [`sample_cases`]: the drawn examples in draw order.
#[derive(Clone, Debug)]
pub struct Sample<'a> {
    pub examples: Vec<&'a Example>,
    /// Set when fewer examples than requested were available.
    pub truncated: bool,
}

/// Seeded sampling without replacement from one split. ChaCha8 keeps the
/// draw identical across platforms for a given seed.
pub fn sample_cases(dataset: &Dataset, split: Split, count: usize, seed: u64) -> Sample<'_> {
    let pool: Vec<&Example> = dataset.split(split).collect();
    if count >= pool.len() {
        return Sample {
            truncated: count > pool.len(),
            examples: pool,
        };
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let examples = rand::seq::index::sample(&mut rng, pool.len(), count)
        .into_iter()
        .map(|i| pool[i])
        .collect();
    Sample {
        examples,
        truncated: false,
    }
}
