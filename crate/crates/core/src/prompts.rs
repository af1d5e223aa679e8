//! Prompt rendering: base NER/RE instructions, per-type decomposition,
//! source-name prefixes and few-shot demonstrations.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{make_nickname, Dataset, DatasetDescriptor, Example, Registry, Split, Task};
use crate::parse::{serialize, ParseError};

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error("type list is empty")]
    EmptyTypeList,
    #[error("template placeholder `{{{name}}}` must occur {expected}, found {found}")]
    Placeholder {
        name: &'static str,
        expected: &'static str,
        found: usize,
    },
    #[error("source kind `{0}` needs a non-empty name")]
    MissingSourceName(SourceKind),
    #[error("no other registered {0} dataset to use as a fake source")]
    NoFakeCandidate(Task),
    #[error("training pool has {available} usable examples, {requested} shots requested")]
    InsufficientPool { requested: usize, available: usize },
    #[error("example `{0}` was drawn as its own demonstration")]
    SelfContamination(String),
    #[error("unknown source kind `{0}`")]
    UnknownSourceKind(String),
    #[error(transparent)]
    Serialize(#[from] ParseError),
}

const NER_INSTRUCTION: &str = "Instruction: Please list all entity words in the text that fit the category. \
Here's the category list: \n{types}\n{format}\n{shots}\nInput: {input}\nOutput:";
const NER_FORMAT: &str = "And then output the result in the format of ```type1: entity1; type2: entity2; ...```";
const RE_INSTRUCTION: &str = "Instruction: Given a sentence or paragraph, and a given relationship set that \
describe the relation between entities. Here's the relation set: \n{types}\n{format}\n{shots}\nInput: {input}\nOutput:";
const RE_FORMAT: &str =
    "Output the result in the format of ```(subject1, relation1, object1), (subject2, relation2, object2), ...```";

/// An instruction with `{types}` and `{input}` placeholders (exactly once
/// each) and optional `{format}` and `{shots}` placeholders (at most once).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub task: Task,
    pub instruction_text: String,
    pub output_format_text: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Slot {
    Types,
    Input,
    Format,
    Shots,
}

const SLOTS: [(&str, Slot); 4] = [
    ("{types}", Slot::Types),
    ("{input}", Slot::Input),
    ("{format}", Slot::Format),
    ("{shots}", Slot::Shots),
];

impl PromptTemplate {
    pub fn new(task: Task, instruction_text: &str, output_format_text: &str) -> Result<Self, PromptError> {
        let t = Self {
            task,
            instruction_text: instruction_text.to_string(),
            output_format_text: output_format_text.to_string(),
        };
        for (name, slot) in SLOTS {
            let found = instruction_text.matches(name).count();
            let exactly_once = matches!(slot, Slot::Types | Slot::Input);
            if (exactly_once && found != 1) || found > 1 {
                return Err(PromptError::Placeholder {
                    name: &name[1..name.len() - 1],
                    expected: if exactly_once { "exactly once" } else { "at most once" },
                    found,
                });
            }
        }
        Ok(t)
    }

    pub fn ner() -> Self {
        Self::new(Task::Ner, NER_INSTRUCTION, NER_FORMAT).expect("built-in template is valid")
    }

    pub fn re() -> Self {
        Self::new(Task::Re, RE_INSTRUCTION, RE_FORMAT).expect("built-in template is valid")
    }

    pub fn for_task(task: Task) -> Self {
        match task {
            Task::Ner => Self::ner(),
            Task::Re => Self::re(),
        }
    }

    /// Single-pass substitution so placeholder-like text inside the
    /// substituted values is never expanded.
    fn fill(&self, types: &str, input: &str, shots: &str) -> String {
        let mut out = String::with_capacity(self.instruction_text.len() + input.len() + shots.len());
        let mut rest = self.instruction_text.as_str();
        while let Some(open) = rest.find('{') {
            let hit = SLOTS.iter().find(|(name, _)| rest[open..].starts_with(name));
            match hit {
                Some((name, slot)) => {
                    out.push_str(&rest[..open]);
                    out.push_str(match slot {
                        Slot::Types => types,
                        Slot::Input => input,
                        Slot::Format => &self.output_format_text,
                        Slot::Shots => shots,
                    });
                    rest = &rest[open + name.len()..];
                }
                None => {
                    out.push_str(&rest[..=open]);
                    rest = &rest[open + 1..];
                }
            }
        }
        out.push_str(rest);
        out
    }
}

/// Renders a type list as `[a, b, c]`.
pub fn format_type_list<S: AsRef<str>>(types: &[S]) -> String {
    let inner: Vec<&str> = types.iter().map(|t| t.as_ref()).collect();
    format!("[{}]", inner.join(", "))
}

/// Recovers the type list from an instruction rendered with a built-in
/// template (the first bracketed line).
pub fn rendered_type_list(rendered: &str) -> Option<Vec<String>> {
    rendered.lines().find_map(|line| {
        let inner = line.trim().strip_prefix('[')?.strip_suffix(']')?;
        Some(inner.split(", ").map(str::to_string).collect())
    })
}

fn check_types<S: AsRef<str>>(types: &[S]) -> Result<(), PromptError> {
    if types.is_empty() {
        Err(PromptError::EmptyTypeList)
    } else {
        Ok(())
    }
}

pub fn render_base<S: AsRef<str>>(
    template: &PromptTemplate,
    types: &[S],
    input_text: &str,
) -> Result<String, PromptError> {
    render_with_shots(template, types, input_text, &[])
}

/// Demonstrations are written as `Input: ...\nOutput: ...` blocks in place
/// of the `{shots}` placeholder.
pub fn render_with_shots<S: AsRef<str>>(
    template: &PromptTemplate,
    types: &[S],
    input_text: &str,
    shots: &[Shot],
) -> Result<String, PromptError> {
    check_types(types)?;
    let demos: Vec<String> = shots
        .iter()
        .map(|s| format!("Input: {}\nOutput: {}\n", s.input, s.output))
        .collect();
    Ok(template.fill(&format_type_list(types), input_text, &demos.concat()))
}

/// One instruction per type, in the given order.
pub fn decompose<S: AsRef<str>>(
    template: &PromptTemplate,
    types: &[S],
    input_text: &str,
) -> Result<Vec<String>, PromptError> {
    check_types(types)?;
    types
        .iter()
        .map(|t| render_base(template, &[t.as_ref()], input_text))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceKind {
    True,
    Nickname,
    Fake,
    None,
}

impl fmt::Display for SourceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SourceKind::True => "true",
            SourceKind::Nickname => "nickname",
            SourceKind::Fake => "fake",
            SourceKind::None => "none",
        })
    }
}

impl FromStr for SourceKind {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "true" => Ok(SourceKind::True),
            "nickname" => Ok(SourceKind::Nickname),
            "fake" => Ok(SourceKind::Fake),
            "none" => Ok(SourceKind::None),
            other => Err(PromptError::UnknownSourceKind(other.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceTag {
    pub kind: SourceKind,
    pub name: String,
}

impl SourceTag {
    pub fn truth(d: &DatasetDescriptor) -> Self {
        Self {
            kind: SourceKind::True,
            name: d.name.clone(),
        }
    }

    pub fn nickname(d: &DatasetDescriptor) -> Self {
        Self {
            kind: SourceKind::Nickname,
            name: make_nickname(&d.name),
        }
    }

    pub fn none() -> Self {
        Self {
            kind: SourceKind::None,
            name: String::new(),
        }
    }

    /// A uniformly drawn name of another registered dataset of the same task.
    pub fn fake<R: Rng>(d: &DatasetDescriptor, registry: &Registry, rng: &mut R) -> Result<Self, PromptError> {
        let peers: Vec<&DatasetDescriptor> = registry.peers(d).collect();
        if peers.is_empty() {
            return Err(PromptError::NoFakeCandidate(d.task));
        }
        Ok(Self {
            kind: SourceKind::Fake,
            name: peers[rng.gen_range(0..peers.len())].name.clone(),
        })
    }

    /// Training-time tag: the true name or its nickname with equal odds.
    pub fn training<R: Rng>(d: &DatasetDescriptor, rng: &mut R) -> Self {
        if rng.gen_bool(0.5) {
            Self::truth(d)
        } else {
            Self::nickname(d)
        }
    }

    pub fn of_kind<R: Rng>(
        kind: SourceKind,
        d: &DatasetDescriptor,
        registry: &Registry,
        rng: &mut R,
    ) -> Result<Self, PromptError> {
        Ok(match kind {
            SourceKind::True => Self::truth(d),
            SourceKind::Nickname => Self::nickname(d),
            SourceKind::Fake => Self::fake(d, registry, rng)?,
            SourceKind::None => Self::none(),
        })
    }
}

pub fn attach_source(instruction: &str, source: &SourceTag) -> Result<String, PromptError> {
    if source.kind == SourceKind::None {
        return Ok(instruction.to_string());
    }
    if source.name.trim().is_empty() {
        return Err(PromptError::MissingSourceName(source.kind));
    }
    Ok(format!("Here's a dataset from {}, {instruction}", source.name))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shot {
    pub input: String,
    pub output: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptInstance {
    pub dataset: String,
    pub example_id: String,
    pub source: SourceTag,
    pub shots: Vec<Shot>,
    pub rendered: String,
    pub expected_output: String,
}

impl PromptInstance {
    pub fn record(&self) -> PromptRecord {
        PromptRecord {
            id: self.example_id.clone(),
            dataset: self.dataset.clone(),
            source_kind: self.source.kind,
            source_name: self.source.name.clone(),
            shots: self.shots.len(),
            prompt: self.rendered.clone(),
            expected: self.expected_output.clone(),
        }
    }
}

/// JSONL wire form of a rendered prompt.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptRecord {
    pub id: String,
    pub dataset: String,
    pub source_kind: SourceKind,
    pub source_name: String,
    pub shots: usize,
    pub prompt: String,
    pub expected: String,
}

pub fn write_records(records: &[PromptRecord]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("records serialize") + "\n")
        .collect()
}

pub fn read_records(text: &str) -> Result<Vec<PromptRecord>, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}

/// Per-example RNG: the run seed mixed with the example id, so one example's
/// draw does not depend on which others are rendered alongside it.
pub fn example_rng(seed: u64, example_id: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(example_id.as_bytes());
    let mut bytes = [0u8; 32];
    bytes.copy_from_slice(&h.finalize());
    ChaCha8Rng::from_seed(bytes)
}

fn gold_output(example: &Example, types: &[String]) -> Result<String, PromptError> {
    let kept: Vec<_> = example
        .annotations
        .iter()
        .filter(|a| types.iter().any(|t| t == a.label()))
        .cloned()
        .collect();
    Ok(serialize(&kept, example.task)?)
}

/// Few-shot (or, with `shots == 0`, zero-shot) prompt for `example` with
/// demonstrations sampled from the training split of `train_pool`. The
/// query example and any training example with identical text are never
/// eligible as demonstrations.
pub fn build_fewshot(
    example: &Example,
    train_pool: &Dataset,
    shots: usize,
    seed: u64,
    template: &PromptTemplate,
    source: &SourceTag,
) -> Result<PromptInstance, PromptError> {
    let types = &train_pool.descriptor.label_types;
    let pool: Vec<&Example> = train_pool
        .split(Split::Train)
        .filter(|e| e.id != example.id && e.text != example.text)
        .collect();
    if pool.len() < shots {
        return Err(PromptError::InsufficientPool {
            requested: shots,
            available: pool.len(),
        });
    }
    let mut rng = example_rng(seed, &example.id);
    let picked: Vec<&Example> = rand::seq::index::sample(&mut rng, pool.len(), shots)
        .into_iter()
        .map(|i| pool[i])
        .collect();
    if picked.iter().any(|e| e.id == example.id) {
        return Err(PromptError::SelfContamination(example.id.clone()));
    }
    let demos = picked
        .iter()
        .map(|e| {
            Ok(Shot {
                input: e.text.clone(),
                output: gold_output(e, types)?,
            })
        })
        .collect::<Result<Vec<_>, PromptError>>()?;
    let body = render_with_shots(template, types, &example.text, &demos)?;
    Ok(PromptInstance {
        dataset: train_pool.descriptor.name.clone(),
        example_id: example.id.clone(),
        source: source.clone(),
        shots: demos,
        rendered: attach_source(&body, source)?,
        expected_output: gold_output(example, types)?,
    })
}

/// One zero-shot instance per declared type, ids `<example>::<k>`, each
/// expecting only the gold items of its type.
pub fn decomposed_instances(
    example: &Example,
    descriptor: &DatasetDescriptor,
    template: &PromptTemplate,
    source: &SourceTag,
) -> Result<Vec<PromptInstance>, PromptError> {
    let bodies = decompose(template, &descriptor.label_types, &example.text)?;
    bodies
        .into_iter()
        .zip(&descriptor.label_types)
        .enumerate()
        .map(|(k, (body, t))| {
            Ok(PromptInstance {
                dataset: descriptor.name.clone(),
                example_id: format!("{}::{k}", example.id),
                source: source.clone(),
                shots: Vec::new(),
                rendered: attach_source(&body, source)?,
                expected_output: gold_output(example, std::slice::from_ref(t))?,
            })
        })
        .collect()
}
