//! Coarse-grained case rewards and the reward-weighted stage-1 export.
//!
//! A case's reward is `(1 + kappa_D) * mean(kappa_T)` where kappa_D is the
//! dataset-level agreement and the mean runs over the kappa_T of each of the
//! case's annotation types (one entry per annotation, so repeated types
//! weigh more).

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agreement::{AgreementError, ReferenceConstants};
use crate::corpus::{sample_cases, Annotation, Dataset, Split, Task};
use crate::parse::{serialize, ParseError};
use crate::prompts::{example_rng, render_base, PromptError, PromptTemplate};
use crate::scalar::{mean, Real};

pub const DEFAULT_SAMPLES_PER_DATASET: usize = 10_000;

#[derive(Debug, Error)]
pub enum RewardError {
    #[error("no kappa_T for type `{0}`")]
    MissingType(String),
    #[error("no kappa_T values for {0} at all; nothing to fall back on")]
    NoFallback(Task),
    #[error(transparent)]
    Constants(#[from] AgreementError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("reward export line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("stage config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn fold(s: &str) -> String {
    s.chars()
        .filter(|c| c.is_alphanumeric())
        .flat_map(char::to_lowercase)
        .collect()
}

/// kappa_T per type, plus the value used for types without an entry.
#[derive(Clone, Debug, PartialEq)]
pub struct TypeKappaTable<T> {
    values: BTreeMap<String, T>,
    fallback: Option<T>,
}

impl<T: Real> TypeKappaTable<T> {
    /// The fallback is the mean of the given values.
    pub fn new<I, S>(entries: I) -> Self
    where
        I: IntoIterator<Item = (S, T)>,
        S: AsRef<str>,
    {
        let values: BTreeMap<String, T> = entries.into_iter().map(|(k, v)| (fold(k.as_ref()), v)).collect();
        let fallback = mean(&values.values().copied().collect::<Vec<_>>());
        Self { values, fallback }
    }

    pub fn from_constants(constants: &ReferenceConstants, task: Task) -> Self {
        let entries = constants
            .kappa_t
            .get(&task)
            .into_iter()
            .flatten()
            .map(|(k, v)| (k.as_str(), T::lit(*v)));
        Self::new(entries)
    }

    pub fn get(&self, label: &str) -> Option<T> {
        self.values.get(&fold(label)).copied()
    }

    pub fn fallback(&self) -> Option<T> {
        self.fallback
    }

    /// Looks `label` up; a miss falls back unless `strict`. The flag says
    /// whether the fallback was used.
    fn resolve(&self, label: &str, strict: bool) -> Result<(T, bool), RewardError> {
        match self.get(label) {
            Some(v) => Ok((v, false)),
            None if strict => Err(RewardError::MissingType(label.to_string())),
            None => self
                .fallback
                .map(|v| (v, true))
                .ok_or_else(|| RewardError::MissingType(label.to_string())),
        }
    }
}

/// Everything needed to reward the cases of one dataset.
#[derive(Clone, Debug)]
pub struct RewardContext<T> {
    pub kappa_d: T,
    pub table: TypeKappaTable<T>,
    /// Used for cases with no annotations.
    pub declared_types: Vec<String>,
    pub strict: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseReward<T> {
    pub reward: T,
    pub kappa_t_values: Vec<T>,
    pub fallbacks: usize,
    pub zero_annotation: bool,
}

pub fn case_reward_detail<T: Real>(
    annotations: &[Annotation],
    ctx: &RewardContext<T>,
) -> Result<CaseReward<T>, RewardError> {
    let zero_annotation = annotations.is_empty();
    let labels: Vec<&str> = if zero_annotation {
        ctx.declared_types.iter().map(String::as_str).collect()
    } else {
        annotations.iter().map(Annotation::label).collect()
    };
    let mut kappa_t_values = Vec::with_capacity(labels.len());
    let mut fallbacks = 0;
    for l in labels {
        let (v, fell_back) = ctx.table.resolve(l, ctx.strict)?;
        fallbacks += usize::from(fell_back);
        kappa_t_values.push(v);
    }
    let mean_t = match kappa_t_values.split_first() {
        None => return Err(RewardError::MissingType("<no types>".into())),
        // a sum-then-divide mean of identical values can drift by an ulp
        Some((&first, rest)) if rest.iter().all(|&v| v == first) => first,
        Some(_) => mean(&kappa_t_values).expect("non-empty"),
    };
    Ok(CaseReward {
        reward: (T::one() + ctx.kappa_d) * mean_t,
        kappa_t_values,
        fallbacks,
        zero_annotation,
    })
}

pub fn case_reward<T: Real>(annotations: &[Annotation], ctx: &RewardContext<T>) -> Result<T, RewardError> {
    case_reward_detail(annotations, ctx).map(|r| r.reward)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RewardedInstance<T> {
    pub prompt: String,
    pub completion: String,
    pub reward: T,
    pub dataset: String,
    pub kappa_d: T,
    pub kappa_t_values: Vec<T>,
    pub fallbacks: usize,
    pub zero_annotation: bool,
}

pub fn reward_context(
    dataset: &Dataset,
    constants: &ReferenceConstants,
    strict: bool,
) -> Result<RewardContext<f64>, RewardError> {
    let d = &dataset.descriptor;
    let table = TypeKappaTable::from_constants(constants, d.task);
    if table.fallback().is_none() {
        return Err(RewardError::NoFallback(d.task));
    }
    Ok(RewardContext {
        kappa_d: constants.dataset_kappa(d)?,
        table,
        declared_types: d.label_types.clone(),
        strict,
    })
}

/// Samples up to `samples_per_dataset` training cases from each dataset,
/// rewards them and shuffles the mixture. Each dataset draws with its own
/// seed derived from `seed` and its name.
pub fn build_stage1_dataset(
    datasets: &[Dataset],
    constants: &ReferenceConstants,
    samples_per_dataset: usize,
    seed: u64,
    strict: bool,
) -> Result<Vec<RewardedInstance<f64>>, RewardError> {
    let mut out = Vec::new();
    for ds in datasets {
        let ctx = reward_context(ds, constants, strict)?;
        let d = &ds.descriptor;
        let template = PromptTemplate::for_task(d.task);
        let per_seed = rand::RngCore::next_u64(&mut example_rng(seed, &d.name));
        for ex in sample_cases(ds, Split::Train, samples_per_dataset, per_seed).examples {
            let r = case_reward_detail(&ex.annotations, &ctx)?;
            out.push(RewardedInstance {
                prompt: render_base(&template, &d.label_types, &ex.text)?,
                completion: serialize(&ex.annotations, d.task)?,
                reward: r.reward,
                dataset: d.name.clone(),
                kappa_d: ctx.kappa_d,
                kappa_t_values: r.kappa_t_values,
                fallbacks: r.fallbacks,
                zero_annotation: r.zero_annotation,
            });
        }
    }
    out.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(out)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExportMeta {
    dataset: String,
    kappa_d: f64,
    kappa_t: Vec<f64>,
    fallbacks: usize,
    #[serde(default)]
    zero_annotation: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExportLine {
    prompt: String,
    completion: String,
    weight: f64,
    meta: ExportMeta,
}

pub fn export_line(inst: &RewardedInstance<f64>) -> String {
    let line = ExportLine {
        prompt: inst.prompt.clone(),
        completion: inst.completion.clone(),
        weight: inst.reward,
        meta: ExportMeta {
            dataset: inst.dataset.clone(),
            kappa_d: inst.kappa_d,
            kappa_t: inst.kappa_t_values.clone(),
            fallbacks: inst.fallbacks,
            zero_annotation: inst.zero_annotation,
        },
    };
    serde_json::to_string(&line).expect("export lines serialize")
}

pub fn write_export<W: Write>(instances: &[RewardedInstance<f64>], mut out: W) -> std::io::Result<()> {
    for inst in instances {
        writeln!(out, "{}", export_line(inst))?;
    }
    Ok(())
}

pub fn read_export(text: &str) -> Result<Vec<RewardedInstance<f64>>, RewardError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let e: ExportLine = serde_json::from_str(l).map_err(|err| RewardError::Malformed {
                line: i + 1,
                reason: err.to_string(),
            })?;
            Ok(RewardedInstance {
                prompt: e.prompt,
                completion: e.completion,
                reward: e.weight,
                dataset: e.meta.dataset,
                kappa_d: e.meta.kappa_d,
                kappa_t_values: e.meta.kappa_t,
                fallbacks: e.meta.fallbacks,
                zero_annotation: e.meta.zero_annotation,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    BiasAwareFt,
    TaskSpecific,
}

/// Training hyper-parameters for one stage, written as a flat TOML file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub stage: Stage,
    pub learning_rate: f64,
    pub epochs: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub small_dataset_epochs: Option<u32>,
    pub batch_size: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lora_rank: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lora_targets: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples_per_dataset: Option<usize>,
}

impl StageConfig {
    pub fn validate(&self) -> Result<(), RewardError> {
        let bad = |m: &str| Err(RewardError::Config(m.to_string()));
        match self.stage {
            Stage::TaskSpecific if self.lora_rank.is_none() || self.lora_targets.is_none() => {
                bad("task-specific stage needs lora_rank and lora_targets")
            }
            Stage::BiasAwareFt if self.samples_per_dataset.is_none() => {
                bad("bias-aware-ft stage needs samples_per_dataset")
            }
            _ if self.learning_rate.is_nan()
                || self.learning_rate <= 0.0
                || self.epochs == 0
                || self.batch_size == 0 =>
            {
                bad("learning_rate, epochs and batch_size must be positive")
            }
            _ => Ok(()),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("stage configs serialize")
    }

    pub fn from_toml(text: &str) -> Result<Self, RewardError> {
        let c: StageConfig = toml::from_str(text).map_err(|e| RewardError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn write(&self, path: &Path) -> Result<(), RewardError> {
        std::fs::write(path, self.to_toml())?;
        Ok(())
    }
}

/// Default hyper-parameters for the bias-aware stage and the task-specific
/// LoRA stage.
pub fn export_stage_configs() -> (StageConfig, StageConfig) {
    (
        StageConfig {
            stage: Stage::BiasAwareFt,
            learning_rate: 1e-5,
            epochs: 5,
            small_dataset_epochs: None,
            batch_size: 384,
            lora_rank: None,
            lora_targets: None,
            samples_per_dataset: Some(DEFAULT_SAMPLES_PER_DATASET),
        },
        StageConfig {
            stage: Stage::TaskSpecific,
            learning_rate: 1e-5,
            epochs: 10,
            small_dataset_epochs: Some(30),
            batch_size: 256,
            lora_rank: Some(8),
            lora_targets: Some(vec!["q".into(), "v".into()]),
            samples_per_dataset: None,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{DatasetDescriptor, Example};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn ent(l: &str, s: &str) -> Annotation {
        Annotation::entity(l, s).unwrap()
    }

    fn reference_ctx(kappa_d: f64) -> RewardContext<f64> {
        RewardContext {
            kappa_d,
            table: TypeKappaTable::from_constants(&ReferenceConstants::bundled(), Task::Ner),
            declared_types: vec!["person".into(), "location".into(), "organization".into(), "else".into()],
            strict: false,
        }
    }

    #[test]
    fn worked_conll_case() {
        let r = case_reward(&[ent("person", "Wu"), ent("location", "Beijing")], &reference_ctx(-0.350)).unwrap();
        assert_abs_diff_eq!(r, 0.27365, epsilon = 1e-12);
    }

    #[test]
    fn trivial_rewards() {
        let ctx = RewardContext {
            kappa_d: 0.0,
            table: TypeKappaTable::new([("person", 1.0), ("location", 1.0)]),
            declared_types: vec!["person".into()],
            strict: true,
        };
        assert_eq!(
            case_reward(&[ent("person", "a"), ent("location", "b")], &ctx).unwrap(),
            1.0
        );
        let dead = RewardContext {
            kappa_d: -1.0,
            ..ctx.clone()
        };
        assert_eq!(case_reward(&[ent("person", "a")], &dead).unwrap(), 0.0);
        assert!(matches!(
            case_reward(&[ent("weapon", "a")], &ctx),
            Err(RewardError::MissingType(t)) if t == "weapon"
        ));
    }

    #[test]
    fn fallbacks_and_empty_cases() {
        let ctx = reference_ctx(0.0);
        let measured_mean = (0.414 + 0.428 + 0.364 + 0.021) / 4.0;
        let r = case_reward_detail(&[ent("else", "x")], &ctx).unwrap();
        assert_eq!(r.fallbacks, 1);
        assert_abs_diff_eq!(r.reward, measured_mean, epsilon = 1e-12);
        let empty = case_reward_detail(&[], &ctx).unwrap();
        assert!(empty.zero_annotation);
        assert_eq!(empty.kappa_t_values.len(), 4);
        assert_abs_diff_eq!(
            empty.reward,
            (0.414 + 0.428 + 0.364 + measured_mean) / 4.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn generic_over_f32() {
        let ctx = RewardContext {
            kappa_d: -0.35f32,
            table: TypeKappaTable::new([("person", 0.414f32), ("location", 0.428)]),
            declared_types: vec![],
            strict: true,
        };
        let r = case_reward(&[ent("person", "a"), ent("location", "b")], &ctx).unwrap();
        assert!((r - 0.27365).abs() < 1e-6);
    }

    fn toy(name: &str, n: usize) -> Dataset {
        let d = DatasetDescriptor::new(name, Task::Ner, vec!["person".into(), "location".into()]).unwrap();
        let examples = (0..n)
            .map(|i| {
                let anns = if i % 3 == 0 {
                    vec![]
                } else {
                    vec![ent("person", &format!("P{i}"))]
                };
                Example::new(
                    format!("{i}"),
                    format!("text {i} of {name}"),
                    Task::Ner,
                    anns,
                    Split::Train,
                )
                .unwrap()
            })
            .collect();
        Dataset::new(d, examples).unwrap()
    }

    fn toy_constants() -> ReferenceConstants {
        let mut c = ReferenceConstants::bundled();
        c.kappa_d.insert("Toy A".into(), -0.2);
        c.kappa_d.insert("Toy B".into(), -0.5);
        c
    }

    #[test]
    fn stage1_mixture() {
        let sets = [toy("Toy A", 5), toy("Toy B", 2)];
        let c = toy_constants();
        let out = build_stage1_dataset(&sets, &c, 3, 11, false).unwrap();
        assert_eq!(out.len(), 5);
        assert_eq!(out.iter().filter(|i| i.dataset == "Toy A").count(), 3);
        for inst in &out {
            let kd = if inst.dataset == "Toy A" { -0.2 } else { -0.5 };
            let mean_t = inst.kappa_t_values.iter().sum::<f64>() / inst.kappa_t_values.len() as f64;
            assert_abs_diff_eq!(inst.reward, (1.0 + kd) * mean_t, epsilon = 1e-12);
        }
        assert_eq!(out, build_stage1_dataset(&sets, &c, 3, 11, false).unwrap());
        assert!(build_stage1_dataset(&sets, &c, 0, 11, false).unwrap().is_empty());
        assert!(matches!(
            build_stage1_dataset(&sets, &ReferenceConstants::bundled(), 3, 11, false),
            Err(RewardError::Constants(_))
        ));
    }

    #[test]
    fn export_round_trip_is_bit_identical() {
        let out = build_stage1_dataset(&[toy("Toy A", 9)], &toy_constants(), 9, 2, false).unwrap();
        let mut buf = Vec::new();
        write_export(&out, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.lines().next().unwrap().contains("\"meta\":{\"dataset\":\"Toy A\""));
        let back = read_export(&text).unwrap();
        assert_eq!(back.len(), out.len());
        for (a, b) in out.iter().zip(&back) {
            assert_eq!(a.reward.to_bits(), b.reward.to_bits());
            assert_eq!(a, b);
        }
    }

    #[test]
    fn stage_configs() {
        let (s1, s2) = export_stage_configs();
        assert_eq!(s1.learning_rate, 1e-5);
        assert_eq!((s1.epochs, s1.batch_size), (5, 384));
        assert_eq!(s1.samples_per_dataset, Some(10_000));
        assert_eq!(s2.lora_rank, Some(8));
        assert_eq!(
            s2.lora_targets.as_deref(),
            Some(&["q".to_string(), "v".to_string()][..])
        );
        assert_eq!((s2.epochs, s2.small_dataset_epochs, s2.batch_size), (10, Some(30), 256));
        for s in [&s1, &s2] {
            s.validate().unwrap();
            assert_eq!(&StageConfig::from_toml(&s.to_toml()).unwrap(), s);
        }
        assert!(s1.to_toml().contains("stage = \"bias-aware-ft\""));
        let broken = StageConfig { lora_rank: None, ..s2 };
        assert!(broken.validate().is_err());
    }

    proptest! {
        #[test]
        fn reward_monotone_and_linear(
            kd in -1.0f64..1.0, bump in 0.0f64..0.5, c in 0.1f64..4.0,
            kp in -1.0f64..1.0, kl in -1.0f64..1.0, n_person in 1usize..4, n_loc in 0usize..4,
        ) {
            let mut anns: Vec<Annotation> = (0..n_person).map(|i| ent("person", &format!("p{i}"))).collect();
            anns.extend((0..n_loc).map(|i| ent("location", &format!("l{i}"))));
            let mk = |kd: f64, kp: f64, kl: f64| RewardContext {
                kappa_d: kd,
                table: TypeKappaTable::new([("person", kp), ("location", kl)]),
                declared_types: vec![],
                strict: true,
            };
            let base = case_reward(&anns, &mk(kd, kp, kl)).unwrap();
            let mean_t = (n_person as f64 * kp + n_loc as f64 * kl) / (n_person + n_loc) as f64;
            prop_assert!((base - (1.0 + kd) * mean_t).abs() < 1e-12);
            if mean_t >= 0.0 {
                prop_assert!(case_reward(&anns, &mk(kd + bump, kp, kl)).unwrap() >= base - 1e-15);
            }
            prop_assert!(case_reward(&anns, &mk(kd, kp + bump, kl)).unwrap() >= base - 1e-15);
            let scaled = case_reward(&anns, &mk(kd, kp * c, kl * c)).unwrap();
            prop_assert!((scaled - c * base).abs() < 1e-12);
            if n_loc == 0 {
                prop_assert_eq!(base, (1.0 + kd) * kp);
            }
        }
    }
}
