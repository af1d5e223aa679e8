use std::collections::{BTreeMap, HashSet};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::anyhow;
use serde_json::{json, Value};

use defbias_core::agreement::{
    build_rating_matrix, fleiss_kappa, type_bias, AnnotationSource, ReferenceConstants, SourceKind as RaterKind,
    UniversePolicy,
};
use defbias_core::corpus::{ingest_str, sample_cases, IngestOptions, InputFormat};
use defbias_core::embed::{embed_all, filter_report_tsv, filter_similar, EmbeddingProvider, HashEmbedder};
use defbias_core::llm::{
    import_recordings, read_recordings, run_probe, CachedEmbedder, CompletionClient, DiskCache, Endpoint, HttpBackend,
    HttpEmbedder, LlmError, Mode, ProbeDefaults, ReqwestTransport, RetryPolicy, ENV_CACHE_DIR,
};
use defbias_core::parse::LabelSet;
use defbias_core::prompts::{
    build_fewshot, decomposed_instances, example_rng, read_records, write_records, PromptTemplate, SourceKind,
    SourceTag,
};
use defbias_core::rewards::{build_stage1_dataset, export_stage_configs, write_export, DEFAULT_SAMPLES_PER_DATASET};
use defbias_core::score::{
    build_matrix, evaluate, merge_decomposed, read_predictions, reports_from_f1_grid, PredictionRecord,
};
use defbias_core::{
    Dataset, DatasetDescriptor, EmbeddingVector, EvalReport, FilterConfig, KappaReport, Registry, Split, Task,
};

use crate::config::Config;
use crate::manifest::{load_manifest, Run};
use crate::{
    CacheImportArgs, Cli, Command, EmbedderKind, FilterArgs, GlobalArgs, IngestArgs, KappaArgs, KappaMode, MatrixArgs,
    PolicyArg, ProbeArgs, PromptsArgs, RewardsArgs, ScoreArgs, VerifyArgs,
};

pub const DEFAULT_SEED: u64 = 42;
pub const DEFAULT_PARALLELISM: usize = 4;
pub const DEFAULT_MODEL: &str = "gpt-3.5-turbo";
pub const DEFAULT_SAMPLE: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Input,
    Runtime,
}

impl ErrorKind {
    pub fn code(self) -> u8 {
        match self {
            ErrorKind::Usage => 2,
            ErrorKind::Input => 3,
            ErrorKind::Runtime => 4,
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ErrorKind,
    pub source: anyhow::Error,
}

type CmdResult<T> = Result<T, CliError>;

trait Classify<T> {
    fn with_kind(self, kind: ErrorKind) -> CmdResult<T>;

    fn input(self) -> CmdResult<T>
    where
        Self: Sized,
    {
        self.with_kind(ErrorKind::Input)
    }

    fn runtime(self) -> CmdResult<T>
    where
        Self: Sized,
    {
        self.with_kind(ErrorKind::Runtime)
    }
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn with_kind(self, kind: ErrorKind) -> CmdResult<T> {
        self.map_err(|e| CliError { kind, source: e.into() })
    }
}

fn usage<T>(msg: impl Into<String>) -> CmdResult<T> {
    Err(CliError {
        kind: ErrorKind::Usage,
        source: anyhow!(msg.into()),
    })
}

fn input_err<T>(msg: impl Into<String>) -> CmdResult<T> {
    Err(CliError {
        kind: ErrorKind::Input,
        source: anyhow!(msg.into()),
    })
}

struct Ctx {
    global: GlobalArgs,
    config: Config,
    registry: Registry,
    seed: u64,
    out_dir: PathBuf,
    parallelism: usize,
}

impl Ctx {
    fn new(global: GlobalArgs) -> CmdResult<Self> {
        let config = match &global.config {
            Some(p) => Config::load(p).input()?,
            None => Config::default(),
        };
        let mut registry = Registry::bundled();
        if let Some(p) = &global.registry {
            let extra = Registry::load(p).input()?;
            registry.datasets.extend(extra.datasets);
            let text = serde_json::to_string(&registry).expect("registries serialize");
            registry = Registry::from_json(&text).input()?;
        }
        Ok(Self {
            seed: global.seed.or(config.seed).unwrap_or(DEFAULT_SEED),
            out_dir: global
                .out_dir
                .clone()
                .or_else(|| config.out_dir.clone())
                .unwrap_or_else(|| PathBuf::from(".")),
            parallelism: global
                .parallelism
                .or(config.parallelism)
                .unwrap_or(DEFAULT_PARALLELISM)
                .max(1),
            global,
            config,
            registry,
        })
    }

    fn descriptor(&self, path: &Path, name: Option<&str>) -> CmdResult<DatasetDescriptor> {
        let key = match name {
            Some(n) => n.to_string(),
            None => path
                .file_stem()
                .map(|s| s.to_string_lossy().to_string())
                .unwrap_or_default(),
        };
        self.registry.get(&key).cloned().map_err(|_| CliError {
            kind: ErrorKind::Input,
            source: anyhow!(
                "cannot tell which dataset {} holds (looked up `{key}`); pass --name or --registry",
                path.display()
            ),
        })
    }

    fn load(&self, run: &mut Run, path: &Path, name: Option<&str>) -> CmdResult<Dataset> {
        let descriptor = self.descriptor(path, name)?;
        self.load_as(run, path, &descriptor)
    }

    fn load_as(&self, run: &mut Run, path: &Path, descriptor: &DatasetDescriptor) -> CmdResult<Dataset> {
        let text = run.read_input_text(path).input()?;
        let opts = IngestOptions::new(InputFormat::CanonicalJsonl);
        Ok(ingest_str(&text, descriptor, &opts).input()?.dataset)
    }

    fn cache_dir(&self, flag: &Option<PathBuf>) -> PathBuf {
        flag.clone()
            .or_else(|| self.config.cache_dir.clone())
            .or_else(|| std::env::var_os(ENV_CACHE_DIR).map(PathBuf::from))
            .unwrap_or_else(|| self.out_dir.join(".cache"))
    }
}

pub fn run(cli: Cli) -> CmdResult<()> {
    let ctx = Ctx::new(cli.global)?;
    let (run, summary) = match cli.command {
        Command::Ingest(a) => cmd_ingest(&ctx, a)?,
        Command::Filter(a) => cmd_filter(&ctx, a)?,
        Command::Prompts(a) => cmd_prompts(&ctx, a)?,
        Command::Probe(a) => cmd_probe(&ctx, a)?,
        Command::Score(a) => cmd_score(&ctx, a)?,
        Command::Matrix(a) => cmd_matrix(&ctx, a)?,
        Command::Kappa(a) => cmd_kappa(&ctx, a)?,
        Command::Rewards(a) => cmd_rewards(&ctx, a)?,
        Command::StageConfigs => cmd_stage_configs()?,
        Command::CacheImport(a) => cmd_cache_import(&ctx, a)?,
        Command::VerifyManifest(a) => return cmd_verify(&ctx, a),
    };
    let outputs = run.output_names();
    let (manifest_path, manifest) = run.commit(&ctx.out_dir).runtime()?;
    let mut summary = summary;
    summary["command"] = json!(manifest.command);
    summary["outputs"] = json!(outputs);
    summary["manifest"] = json!(manifest_path.display().to_string());
    report(&ctx, &summary);
    Ok(())
}

fn report(ctx: &Ctx, summary: &Value) {
    if ctx.global.json {
        let _ = writeln!(
            std::io::stdout(),
            "{}",
            serde_json::to_string_pretty(summary).expect("summaries serialize")
        );
        return;
    }
    if let Value::Object(map) = summary {
        let parts: Vec<String> = map
            .iter()
            .filter(|(k, _)| k.as_str() != "command")
            .map(|(k, v)| match v {
                Value::String(s) => format!("{k}={s}"),
                other => format!("{k}={other}"),
            })
            .collect();
        let _ = writeln!(
            std::io::stdout(),
            "{}: {}",
            summary["command"].as_str().unwrap_or("?"),
            parts.join(" ")
        );
    }
}

fn slug(name: &str) -> String {
    let s: String = name
        .chars()
        .map(|c| {
            if c.is_alphanumeric() {
                c.to_ascii_lowercase()
            } else {
                '_'
            }
        })
        .collect();
    s.split('_').filter(|p| !p.is_empty()).collect::<Vec<_>>().join("_")
}

fn parse_split(s: &str) -> CmdResult<Split> {
    s.parse::<Split>().with_kind(ErrorKind::Usage)
}

fn cmd_ingest(ctx: &Ctx, a: IngestArgs) -> CmdResult<(Run, Value)> {
    let mut run = Run::new("ingest");
    let descriptor = ctx.registry.get(&a.name).input()?.clone();
    let format: InputFormat = a.format.parse().with_kind(ErrorKind::Usage)?;
    let mut opts = IngestOptions::new(format);
    opts.strict = !a.permissive;
    for m in &a.label_map {
        let Some((k, v)) = m.split_once('=') else {
            return usage(format!("--map expects SOURCE=LABEL, got `{m}`"));
        };
        opts.label_map.insert(k.trim().to_string(), v.trim().to_string());
    }
    run.setting("dataset", &descriptor.name);
    run.setting("format", &a.format);
    run.setting("strict", opts.strict);
    run.setting("label_map", &opts.label_map);

    let parts = [
        (Split::Train, &a.train),
        (Split::Valid, &a.valid),
        (Split::Test, &a.test),
    ];
    if parts.iter().all(|(_, p)| p.is_none()) {
        return usage("give at least one of --train, --valid, --test");
    }
    let mut examples = Vec::new();
    let mut dropped = 0;
    for (split, path) in parts {
        let Some(path) = path else { continue };
        let text = run.read_input_text(path).input()?;
        opts.split = split;
        let got = ingest_str(&text, &descriptor, &opts).input()?;
        dropped += got.dropped;
        examples.extend(got.dataset.examples().iter().cloned());
    }
    let dataset = Dataset::new(descriptor, examples).input()?;
    let name = a
        .output
        .unwrap_or_else(|| format!("{}.jsonl", slug(&dataset.descriptor.name)));
    run.output(&name, dataset.to_jsonl());
    let counts = dataset.split_counts();
    Ok((
        run,
        json!({
            "dataset": dataset.descriptor.name,
            "examples": dataset.len(),
            "dropped": dropped,
            "splits": counts,
        }),
    ))
}

fn cmd_filter(ctx: &Ctx, a: FilterArgs) -> CmdResult<(Run, Value)> {
    let mut run = Run::new("filter");
    let cands = ctx.load(&mut run, &a.candidates, a.candidates_name.as_deref())?;
    let target = ctx.load(&mut run, &a.target, a.target_name.as_deref())?;
    let sigma = a
        .sigma
        .or(ctx.config.sigma)
        .unwrap_or(defbias_core::embed::DEFAULT_SIGMA);
    let ref_split = parse_split(&a.ref_split)?;
    let ref_texts: Vec<String> = target.split(ref_split).map(|e| e.text.clone()).collect();
    if ref_texts.len() < 2 {
        return input_err(format!(
            "{} has {} {ref_split} sentences; the threshold needs at least 2",
            target.descriptor.name,
            ref_texts.len()
        ));
    }
    let provider: Box<dyn EmbeddingProvider> = match a.embedder {
        EmbedderKind::Hash => Box::new(HashEmbedder::new(a.dim)),
        EmbedderKind::Http => {
            let Some(model) = a.embed_model.clone() else {
                return usage("--embedder http needs --embed-model");
            };
            let endpoint = Endpoint::from_env().ok_or(LlmError::NotConfigured).runtime()?;
            let transport = Arc::new(ReqwestTransport::new(Duration::from_secs(120)).runtime()?);
            let inner = HttpEmbedder {
                backend: HttpBackend::new(endpoint, transport, RetryPolicy::default()),
                model,
            };
            Box::new(CachedEmbedder {
                inner,
                cache: DiskCache::open(ctx.cache_dir(&a.cache_dir)).runtime()?,
                mode: Mode::Live,
            })
        }
    };
    let config = FilterConfig::new(sigma, provider.id(), a.batch_size).with_kind(ErrorKind::Usage)?;
    run.setting("sigma", sigma);
    run.setting("provider", &config.provider);
    run.setting("ref_split", ref_split.to_string());

    let cand_texts: Vec<String> = cands.examples().iter().map(|e| e.text.clone()).collect();
    let cand_vecs: Vec<EmbeddingVector> = embed_all(provider.as_ref(), &cand_texts, config.batch_size).runtime()?;
    let refs = embed_all(provider.as_ref(), &ref_texts, config.batch_size).runtime()?;
    let pairs: Vec<_> = cands.examples().iter().cloned().zip(cand_vecs).collect();
    let outcome = filter_similar(&pairs, &refs, &config).input()?;

    let kept = Dataset::new(cands.descriptor.clone(), outcome.kept.clone()).input()?;
    run.output("kept.jsonl", kept.to_jsonl());
    run.output(
        "filter_report.tsv",
        filter_report_tsv(&[(
            cands.descriptor.name.clone(),
            target.descriptor.name.clone(),
            outcome.kept.len(),
            outcome.total,
        )]),
    );
    Ok((
        run,
        json!({"kept": outcome.kept.len(), "total": outcome.total, "threshold": outcome.threshold}),
    ))
}

fn cmd_prompts(ctx: &Ctx, a: PromptsArgs) -> CmdResult<(Run, Value)> {
    let mut run = Run::new("prompts");
    let data = ctx.load(&mut run, &a.data, a.name.as_deref())?;
    let pool = match &a.train_pool {
        Some(p) => ctx.load_as(&mut run, p, &data.descriptor)?,
        None => data.clone(),
    };
    let split = parse_split(&a.split)?;
    let sample = a.sample.or(ctx.config.sample).unwrap_or(DEFAULT_SAMPLE);
    let shots = a.shots.or(ctx.config.shots).unwrap_or(0);
    let kind: SourceKind = a.source.parse().with_kind(ErrorKind::Usage)?;
    if a.decompose && shots > 0 {
        return usage("--decompose renders zero-shot instructions; drop --shots");
    }
    run.seed("seed", ctx.seed);
    run.setting("dataset", &data.descriptor.name);
    run.setting("split", split.to_string());
    run.setting("sample", sample);
    run.setting("shots", shots);
    run.setting("source", kind.to_string());
    run.setting("decompose", a.decompose);

    let drawn = if sample == 0 {
        data.split(split).collect()
    } else {
        sample_cases(&data, split, sample, ctx.seed).examples
    };
    let d = &data.descriptor;
    let template = PromptTemplate::for_task(d.task);
    let mut records = Vec::new();
    for ex in &drawn {
        let mut rng = example_rng(ctx.seed, &format!("source:{}", ex.id));
        let source = SourceTag::of_kind(kind, d, &ctx.registry, &mut rng).input()?;
        if a.decompose {
            for inst in decomposed_instances(ex, d, &template, &source).input()? {
                records.push(inst.record());
            }
        } else {
            records.push(
                build_fewshot(ex, &pool, shots, ctx.seed, &template, &source)
                    .input()?
                    .record(),
            );
        }
    }
    run.output("prompts.jsonl", write_records(&records));
    Ok((run, json!({"cases": drawn.len(), "prompts": records.len()})))
}

fn cmd_probe(ctx: &Ctx, a: ProbeArgs) -> CmdResult<(Run, Value)> {
    let mut run = Run::new("probe");
    let text = run.read_input_text(&a.prompts).input()?;
    let records = read_records(&text).input()?;
    let defaults = ProbeDefaults {
        model: a
            .model
            .or_else(|| ctx.config.model.clone())
            .unwrap_or_else(|| DEFAULT_MODEL.to_string()),
        temperature: a.temperature.or(ctx.config.temperature).unwrap_or(0.0),
        max_tokens: a
            .max_tokens
            .or(ctx.config.max_tokens)
            .unwrap_or(defbias_core::llm::DEFAULT_MAX_TOKENS),
    };
    run.setting("model", &defaults.model);
    run.setting("temperature", defaults.temperature);
    run.setting("max_tokens", defaults.max_tokens);
    run.setting("replay", a.replay);

    let cache = DiskCache::open(ctx.cache_dir(&a.cache_dir)).runtime()?;
    if let Some(p) = &a.recordings {
        let text = run.read_input_text(p).input()?;
        let recs = read_recordings(&text).input()?;
        import_recordings(&cache, &recs, "recording").runtime()?;
    }
    let client = if a.replay {
        CompletionClient::replay(cache)
    } else {
        let endpoint = Endpoint::from_env().ok_or(LlmError::NotConfigured).runtime()?;
        let transport = Arc::new(ReqwestTransport::new(Duration::from_secs(120)).runtime()?);
        CompletionClient::live(
            HttpBackend::new(endpoint, transport, RetryPolicy::default()),
            Some(cache),
        )
    };
    let probe = run_probe(&client, &records, &defaults, ctx.parallelism).input()?;
    let summary = json!({"model": defaults.model, "summary": probe.summary});
    run.output("predictions.jsonl", probe.to_jsonl());
    run.output(
        "probe_summary.json",
        serde_json::to_string_pretty(&summary).expect("summaries serialize") + "\n",
    );
    Ok((run, summary))
}

fn load_predictions(run: &mut Run, path: &Path, task: Task, allowed: &LabelSet) -> CmdResult<Vec<PredictionRecord>> {
    let text = run.read_input_text(path).input()?;
    let records = read_predictions(&text).input()?;
    Ok(if records.iter().any(|r| r.id.contains("::")) {
        merge_decomposed(&records, task, allowed)
    } else {
        records
    })
}

fn cmd_score(ctx: &Ctx, a: ScoreArgs) -> CmdResult<(Run, Value)> {
    let mut run = Run::new("score");
    let gold = ctx.load(&mut run, &a.gold, a.name.as_deref())?;
    let d = &gold.descriptor;
    let allowed = LabelSet::of(d.label_types.clone());
    let preds = load_predictions(&mut run, &a.pred, d.task, &allowed)?;
    let scope = if a.scope.is_empty() {
        d.label_types.clone()
    } else {
        a.scope.clone()
    };
    if let Some(bad) = scope.iter().find(|t| !d.declares(t)) {
        return input_err(format!("`{bad}` is not a label type of {}", d.name));
    }
    run.setting("train", &a.train);
    run.setting("scope", &scope);

    let predicted: HashSet<&str> = preds.iter().map(|p| p.id.as_str()).collect();
    let gold_set: Vec<_> = gold
        .examples()
        .iter()
        .filter(|e| predicted.contains(e.id.as_str()))
        .cloned()
        .collect();
    let report: EvalReport = evaluate(&gold_set, &preds, &scope, &a.train, &d.name).input()?;
    run.output(
        &a.output,
        serde_json::to_string_pretty(&report).expect("reports serialize") + "\n",
    );
    Ok((
        run,
        json!({"examples": gold_set.len(), "f1": report.f1, "precision": report.precision, "recall": report.recall}),
    ))
}

fn cmd_matrix(_ctx: &Ctx, a: MatrixArgs) -> CmdResult<(Run, Value)> {
    let mut run = Run::new("matrix");
    let reports: Vec<EvalReport> = if let Some(g) = &a.grid {
        let text = run.read_input_text(g).input()?;
        reports_from_f1_grid(&text).input()?
    } else {
        if a.reports.is_empty() {
            return usage("give --grid or at least one --report");
        }
        let mut out = Vec::new();
        for p in &a.reports {
            let text = run.read_input_text(p).input()?;
            out.push(
                serde_json::from_str(&text)
                    .map_err(|e| anyhow!("{}: {e}", p.display()))
                    .input()?,
            );
        }
        out
    };
    let m = build_matrix(&reports).input()?;
    run.output("matrix.tsv", m.to_tsv());
    run.output("matrix.html", m.to_html());
    Ok((
        run,
        json!({"rows": m.rows.len(), "cols": m.cols.len(), "missing_references": m.missing_references()}),
    ))
}

fn cmd_kappa(ctx: &Ctx, a: KappaArgs) -> CmdResult<(Run, Value)> {
    let mut run = Run::new("kappa");
    let gold = ctx.load(&mut run, &a.gold, a.name.as_deref())?;
    let d = gold.descriptor.clone();
    let allowed = LabelSet::of(d.label_types.clone());
    let mut sources = vec![AnnotationSource::from_dataset("gold", &gold)];
    for p in &a.preds {
        let records = load_predictions(&mut run, p, d.task, &allowed)?;
        sources.push(AnnotationSource::from_predictions(
            &p.display().to_string(),
            RaterKind::ModelPrediction,
            &records,
            d.task,
            &allowed,
        ));
    }
    let cases: Vec<String> = gold
        .examples()
        .iter()
        .map(|e| e.id.clone())
        .filter(|id| sources[1..].iter().all(|s| s.annotations.contains_key(id)))
        .collect();
    if cases.is_empty() {
        return input_err("no example id is shared by the gold file and every prediction file");
    }
    let policy = match a.policy {
        PolicyArg::Exact => UniversePolicy::ExactKey,
        PolicyArg::Span => UniversePolicy::Span,
    };
    run.setting("mode", format!("{:?}", a.mode).to_lowercase());
    run.setting("policy", format!("{policy:?}"));
    let refs: Vec<&AnnotationSource> = sources.iter().collect();
    let (report, shared): (KappaReport, Option<String>) = match a.mode {
        KappaMode::Dataset => {
            if a.preds.len() != 1 {
                return usage("--mode dataset compares gold with exactly one --pred");
            }
            let m = build_rating_matrix(&refs, &cases, policy, &d.label_types).input()?;
            (fleiss_kappa(&m), None)
        }
        KappaMode::Type => {
            let Some(t) = a.shared_type.clone() else {
                return usage("--mode type needs --type");
            };
            if policy != UniversePolicy::ExactKey {
                return usage("--mode type supports only --policy exact");
            }
            if !d.declares(&t) {
                return input_err(format!("`{t}` is not a label type of {}", d.name));
            }
            run.setting("type", &t);
            (type_bias(&refs, &t, &cases).input()?, Some(t))
        }
    };
    let body = json!({
        "dataset": d.name,
        "mode": format!("{:?}", a.mode).to_lowercase(),
        "type": shared,
        "cases": cases.len(),
        "sources": sources.iter().map(|s| s.id.clone()).collect::<Vec<_>>(),
        "degenerate": report.is_degenerate(),
        "report": report.to_json(),
    });
    run.output(
        "kappa.json",
        serde_json::to_string_pretty(&body).expect("reports serialize") + "\n",
    );
    Ok((
        run,
        json!({"kappa": report.kappa, "degenerate": report.is_degenerate(), "items": report.n_items}),
    ))
}

fn cmd_rewards(ctx: &Ctx, a: RewardsArgs) -> CmdResult<(Run, Value)> {
    let mut run = Run::new("rewards");
    if a.name.is_some() && a.inputs.len() > 1 {
        return usage("--name applies to a single --in file");
    }
    let mut datasets = Vec::new();
    for p in &a.inputs {
        datasets.push(ctx.load(&mut run, p, a.name.as_deref())?);
    }
    let mut constants = ReferenceConstants::bundled();
    if let Some(p) = &a.constants {
        let text = run.read_input_text(p).input()?;
        let extra = ReferenceConstants::from_json(&text).input()?;
        constants.kappa_d.extend(extra.kappa_d);
        for (task, table) in extra.kappa_t {
            constants.kappa_t.entry(task).or_default().extend(table);
        }
    }
    let samples = a
        .samples
        .or(ctx.config.samples_per_dataset)
        .unwrap_or(DEFAULT_SAMPLES_PER_DATASET);
    run.seed("seed", ctx.seed);
    run.setting("samples_per_dataset", samples);
    run.setting("strict", a.strict);
    run.setting(
        "constants",
        serde_json::to_value(&constants).expect("constants serialize"),
    );

    let instances = build_stage1_dataset(&datasets, &constants, samples, ctx.seed, a.strict).input()?;
    let mut buf = Vec::new();
    write_export(&instances, &mut buf).runtime()?;
    run.output("stage1.jsonl", buf);
    let mut per_dataset: BTreeMap<&str, usize> = BTreeMap::new();
    for i in &instances {
        *per_dataset.entry(i.dataset.as_str()).or_default() += 1;
    }
    Ok((
        run,
        json!({
            "instances": instances.len(),
            "per_dataset": per_dataset,
            "fallbacks": instances.iter().map(|i| i.fallbacks).sum::<usize>(),
            "zero_annotation": instances.iter().filter(|i| i.zero_annotation).count(),
        }),
    ))
}

fn cmd_stage_configs() -> CmdResult<(Run, Value)> {
    let mut run = Run::new("stage-configs");
    let (s1, s2) = export_stage_configs();
    run.output("stage1.toml", s1.to_toml());
    run.output("stage2.toml", s2.to_toml());
    Ok((run, json!({})))
}

fn cmd_cache_import(ctx: &Ctx, a: CacheImportArgs) -> CmdResult<(Run, Value)> {
    let mut run = Run::new("cache-import");
    let text = run.read_input_text(&a.recordings).input()?;
    let recs = read_recordings(&text).input()?;
    let dir = ctx.cache_dir(&a.cache_dir);
    let cache = DiskCache::open(&dir).runtime()?;
    let added = import_recordings(&cache, &recs, "recording").runtime()?;
    Ok((
        run,
        json!({"recordings": recs.len(), "added": added, "cache_dir": dir.display().to_string()}),
    ))
}

fn cmd_verify(ctx: &Ctx, a: VerifyArgs) -> CmdResult<()> {
    let manifest = load_manifest(&a.manifest).input()?;
    let dir = a.manifest.parent().unwrap_or(Path::new("."));
    let problems = manifest.verify(dir);
    let summary = json!({
        "command": "verify-manifest",
        "manifest": a.manifest.display().to_string(),
        "ok": problems.is_empty(),
        "problems": problems,
    });
    report(ctx, &summary);
    if problems.is_empty() {
        Ok(())
    } else {
        Err(CliError {
            kind: ErrorKind::Runtime,
            source: anyhow!("manifest verification failed: {}", problems.join("; ")),
        })
    }
}
