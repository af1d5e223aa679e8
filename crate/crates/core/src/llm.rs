//! OpenAI-compatible completion and embedding client with a
//! content-addressed disk cache, retries and an offline replay mode.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::embed::{EmbedError, EmbeddingProvider, EmbeddingVector};
use crate::prompts::PromptRecord;
use crate::score::PredictionRecord;

pub const ENV_API_BASE: &str = "DEFBIAS_API_BASE";
pub const ENV_API_KEY: &str = "DEFBIAS_API_KEY";
pub const ENV_CACHE_DIR: &str = "DEFBIAS_CACHE_DIR";

pub const DEFAULT_MAX_TOKENS: u32 = 512;

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("network failure after {attempts} attempts: {message}")]
    Network { attempts: u32, message: String },
    #[error("still rate-limited after {attempts} attempts")]
    RateLimited { attempts: u32 },
    #[error("endpoint returned HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("replay mode: no cached response for key {0}")]
    ReplayMiss(String),
    #[error("no endpoint configured; set {ENV_API_BASE} or use replay mode")]
    NotConfigured,
    #[error("unexpected response shape: {0}")]
    Protocol(String),
    #[error("duplicate instance id `{0}`")]
    DuplicateId(String),
    #[error("cache {path}: {source}")]
    Cache {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("recorded completions line {line}: {reason}")]
    Recording { line: usize, reason: String },
    #[error("thread pool: {0}")]
    Pool(String),
}

fn cache_err(path: &Path) -> impl FnOnce(std::io::Error) -> LlmError + '_ {
    move |source| LlmError::Cache {
        path: path.to_path_buf(),
        source,
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub model: String,
    pub prompt: String,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl CompletionRequest {
    /// Temperature 0 and the default token budget.
    pub fn new(model: impl Into<String>, prompt: impl Into<String>) -> Self {
        Self {
            model: model.into(),
            prompt: prompt.into(),
            temperature: 0.0,
            max_tokens: DEFAULT_MAX_TOKENS,
        }
    }

    /// SHA-256 over the canonical JSON of the request fields.
    pub fn cache_key(&self) -> String {
        let canonical = json!({
            "kind": "chat",
            "max_tokens": self.max_tokens,
            "model": self.model,
            "prompt": self.prompt,
            "temperature": self.temperature,
        });
        sha256_hex(canonical.to_string().as_bytes())
    }

    fn wire_body(&self) -> Value {
        json!({
            "model": self.model,
            "messages": [{"role": "user", "content": self.prompt}],
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: String,
    pub response_text: String,
    /// Seconds since the Unix epoch at write time.
    pub timestamp: u64,
    pub provider: String,
}

/// Write-once entries under `root/<k[0..2]>/<k[2..4]>/<k>.json`.
#[derive(Clone, Debug)]
pub struct DiskCache {
    root: PathBuf,
}

static TEMP_COUNTER: AtomicU64 = AtomicU64::new(0);

impl DiskCache {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, LlmError> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(cache_err(&root))?;
        Ok(Self { root })
    }

    pub fn from_env() -> Result<Option<Self>, LlmError> {
        std::env::var_os(ENV_CACHE_DIR).map(Self::open).transpose()
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path_for(&self, key: &str) -> PathBuf {
        let (a, b) = (&key[..2.min(key.len())], &key[2.min(key.len())..4.min(key.len())]);
        self.root.join(a).join(b).join(format!("{key}.json"))
    }

    pub fn get(&self, key: &str) -> Result<Option<CacheEntry>, LlmError> {
        let path = self.path_for(key);
        match fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str(&text).map(Some).map_err(|e| LlmError::Cache {
                path,
                source: std::io::Error::new(std::io::ErrorKind::InvalidData, e),
            }),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(cache_err(&path)(e)),
        }
    }

    /// Stores `entry` unless its key is already present, and returns
    /// whichever entry ends up on disk. The hard link makes the final
    /// publish atomic and refuses to replace an existing file.
    pub fn put(&self, entry: CacheEntry) -> Result<CacheEntry, LlmError> {
        let path = self.path_for(&entry.key);
        if let Some(existing) = self.get(&entry.key)? {
            return Ok(existing);
        }
        let dir = path.parent().expect("cache paths have a parent");
        fs::create_dir_all(dir).map_err(cache_err(dir))?;
        let tmp = dir.join(format!(
            ".{}.{}.{}.tmp",
            entry.key,
            std::process::id(),
            TEMP_COUNTER.fetch_add(1, Ordering::Relaxed)
        ));
        let body = serde_json::to_vec(&entry).expect("cache entries serialize");
        let written = fs::File::create(&tmp)
            .and_then(|mut f| f.write_all(&body).and_then(|_| f.sync_all()))
            .and_then(|_| fs::hard_link(&tmp, &path));
        let _ = fs::remove_file(&tmp);
        match written {
            Ok(()) => Ok(entry),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Ok(self.get(&entry.key)?.expect("entry exists after a lost race"))
            }
            Err(e) => Err(cache_err(&path)(e)),
        }
    }
}

fn now_secs() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

#[derive(Clone, Debug, PartialEq)]
pub struct HttpResponse {
    pub status: u16,
    pub retry_after: Option<Duration>,
    pub body: String,
}

/// Sends one JSON POST. Errors are connection-level failures only; HTTP
/// error statuses come back as responses.
pub trait Transport: Send + Sync {
    fn post_json(&self, url: &str, api_key: Option<&str>, body: &Value) -> Result<HttpResponse, String>;
}

pub struct ReqwestTransport {
    client: reqwest::blocking::Client,
}

impl ReqwestTransport {
    pub fn new(timeout: Duration) -> Result<Self, LlmError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| LlmError::Network {
                attempts: 0,
                message: e.to_string(),
            })?;
        Ok(Self { client })
    }
}

impl Transport for ReqwestTransport {
    fn post_json(&self, url: &str, api_key: Option<&str>, body: &Value) -> Result<HttpResponse, String> {
        let mut req = self.client.post(url).json(body);
        if let Some(k) = api_key {
            req = req.bearer_auth(k);
        }
        let resp = req.send().map_err(|e| e.to_string())?;
        let status = resp.status().as_u16();
        let retry_after = resp
            .headers()
            .get(reqwest::header::RETRY_AFTER)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.trim().parse::<f64>().ok())
            .filter(|s| s.is_finite() && *s >= 0.0)
            .map(Duration::from_secs_f64);
        let body = resp.text().map_err(|e| e.to_string())?;
        Ok(HttpResponse {
            status,
            retry_after,
            body,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 5,
            base_delay: Duration::from_millis(500),
            max_delay: Duration::from_secs(30),
        }
    }
}

impl RetryPolicy {
    /// Wait before retry number `attempt` (1-based): exponential backoff
    /// with jitter in [50%, 100%], or the server's hint when it gave one.
    pub fn delay(&self, attempt: u32, hint: Option<Duration>) -> Duration {
        if let Some(h) = hint {
            return h;
        }
        let exp = self
            .base_delay
            .saturating_mul(1u32 << attempt.saturating_sub(1).min(20));
        exp.min(self.max_delay).mul_f64(rand::thread_rng().gen_range(0.5..=1.0))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Endpoint {
    pub base_url: String,
    pub api_key: Option<String>,
}

impl Endpoint {
    pub fn new(base_url: impl Into<String>, api_key: Option<String>) -> Self {
        Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            api_key,
        }
    }

    pub fn from_env() -> Option<Self> {
        let base = std::env::var(ENV_API_BASE).ok().filter(|b| !b.trim().is_empty())?;
        Some(Self::new(base, std::env::var(ENV_API_KEY).ok()))
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base_url)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Live,
    /// Cache only; a miss is an error and nothing touches the network.
    Replay,
}

#[derive(Clone)]
pub struct HttpBackend {
    pub endpoint: Endpoint,
    pub transport: Arc<dyn Transport>,
    pub retry: RetryPolicy,
}

impl HttpBackend {
    pub fn new(endpoint: Endpoint, transport: Arc<dyn Transport>, retry: RetryPolicy) -> Self {
        Self {
            endpoint,
            transport,
            retry,
        }
    }

    pub fn post(&self, path: &str, body: &Value) -> Result<Value, LlmError> {
        let url = self.endpoint.url(path);
        let attempts = self.retry.max_attempts.max(1);
        let mut last_network = None;
        for attempt in 1..=attempts {
            let hint = match self.transport.post_json(&url, self.endpoint.api_key.as_deref(), body) {
                Ok(r) if (200..300).contains(&r.status) => {
                    return serde_json::from_str(&r.body).map_err(|e| LlmError::Protocol(e.to_string()));
                }
                Ok(r) if r.status == 429 || r.status >= 500 => {
                    last_network = (r.status >= 500).then(|| format!("HTTP {}: {}", r.status, r.body));
                    r.retry_after
                }
                Ok(r) => {
                    return Err(LlmError::Http {
                        status: r.status,
                        body: r.body,
                    })
                }
                Err(msg) => {
                    last_network = Some(msg);
                    None
                }
            };
            if attempt < attempts {
                std::thread::sleep(self.retry.delay(attempt, hint));
            }
        }
        Err(match last_network {
            Some(message) => LlmError::Network { attempts, message },
            None => LlmError::RateLimited { attempts },
        })
    }
}

pub struct CompletionClient {
    pub backend: Option<HttpBackend>,
    pub cache: Option<DiskCache>,
    pub mode: Mode,
    pub provider: String,
}

impl CompletionClient {
    pub fn replay(cache: DiskCache) -> Self {
        Self {
            backend: None,
            cache: Some(cache),
            mode: Mode::Replay,
            provider: "replay".into(),
        }
    }

    pub fn live(backend: HttpBackend, cache: Option<DiskCache>) -> Self {
        let provider = backend.endpoint.base_url.clone();
        Self {
            backend: Some(backend),
            cache,
            mode: Mode::Live,
            provider,
        }
    }

    pub fn complete(&self, req: &CompletionRequest) -> Result<String, LlmError> {
        let key = req.cache_key();
        if let Some(cache) = &self.cache {
            if let Some(hit) = cache.get(&key)? {
                return Ok(hit.response_text);
            }
        }
        if self.mode == Mode::Replay {
            return Err(LlmError::ReplayMiss(key));
        }
        let backend = self.backend.as_ref().ok_or(LlmError::NotConfigured)?;
        let resp = backend.post("/v1/chat/completions", &req.wire_body())?;
        let text = resp
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .ok_or_else(|| LlmError::Protocol("missing choices[0].message.content".into()))?
            .to_string();
        match &self.cache {
            Some(cache) => Ok(cache
                .put(CacheEntry {
                    key,
                    response_text: text,
                    timestamp: now_secs(),
                    provider: self.provider.clone(),
                })?
                .response_text),
            None => Ok(text),
        }
    }
}

/// Decoding settings applied to every probe request.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeDefaults {
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl ProbeDefaults {
    pub fn new(model: impl Into<String>) -> Self {
        Self {
            model: model.into(),
            temperature: 0.0,
            max_tokens: DEFAULT_MAX_TOKENS,
        }
    }

    pub fn request(&self, prompt: &str) -> CompletionRequest {
        CompletionRequest {
            model: self.model.clone(),
            prompt: prompt.to_string(),
            temperature: self.temperature,
            max_tokens: self.max_tokens,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeSummary {
    pub total: usize,
    pub ok: usize,
    pub failed: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeRun {
    pub records: Vec<PredictionRecord>,
    pub summary: ProbeSummary,
}

impl ProbeRun {
    pub fn to_jsonl(&self) -> String {
        self.records.iter().map(|r| r.to_json_line() + "\n").collect()
    }
}

/// Completes every prompt on a pool of `parallelism` threads. Output order
/// is input order; a failed request becomes an error record.
pub fn run_probe(
    client: &CompletionClient,
    instances: &[PromptRecord],
    defaults: &ProbeDefaults,
    parallelism: usize,
) -> Result<ProbeRun, LlmError> {
    let mut seen = HashSet::new();
    if let Some(dup) = instances.iter().find(|i| !seen.insert(i.id.as_str())) {
        return Err(LlmError::DuplicateId(dup.id.clone()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .map_err(|e| LlmError::Pool(e.to_string()))?;
    let records: Vec<PredictionRecord> = pool.install(|| {
        instances
            .par_iter()
            .map(|inst| match client.complete(&defaults.request(&inst.prompt)) {
                Ok(text) => PredictionRecord::raw(&inst.id, text),
                Err(e) => PredictionRecord::failed(&inst.id, e.to_string()),
            })
            .collect()
    });
    let failed = records
        .iter()
        .filter(|r| matches!(r.body, crate::score::PredictionBody::Failed(_)))
        .count();
    Ok(ProbeRun {
        summary: ProbeSummary {
            total: records.len(),
            ok: records.len() - failed,
            failed,
        },
        records,
    })
}

/// One previously observed completion, as stored in fixture files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordedCompletion {
    pub model: String,
    pub prompt: String,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    pub response: String,
}

fn default_max_tokens() -> u32 {
    DEFAULT_MAX_TOKENS
}

pub fn read_recordings(text: &str) -> Result<Vec<RecordedCompletion>, LlmError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| LlmError::Recording {
                line: i + 1,
                reason: e.to_string(),
            })
        })
        .collect()
}

/// Loads recorded completions into the cache so a replay run can serve
/// them. Returns how many were new.
pub fn import_recordings(
    cache: &DiskCache,
    recordings: &[RecordedCompletion],
    provider: &str,
) -> Result<usize, LlmError> {
    let mut added = 0;
    for r in recordings {
        let req = CompletionRequest {
            model: r.model.clone(),
            prompt: r.prompt.clone(),
            temperature: r.temperature,
            max_tokens: r.max_tokens,
        };
        let key = req.cache_key();
        if cache.get(&key)?.is_none() {
            cache.put(CacheEntry {
                key,
                response_text: r.response.clone(),
                timestamp: 0,
                provider: provider.to_string(),
            })?;
            added += 1;
        }
    }
    Ok(added)
}

/// Embeddings from `POST {base}/v1/embeddings`.
pub struct HttpEmbedder {
    pub backend: HttpBackend,
    pub model: String,
}

impl EmbeddingProvider for HttpEmbedder {
    fn id(&self) -> String {
        format!("{}#{}", self.backend.endpoint.base_url, self.model)
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector<f64>>, EmbedError> {
        let resp = self
            .backend
            .post("/v1/embeddings", &json!({"model": self.model, "input": texts}))
            .map_err(|e| EmbedError::Provider(e.to_string()))?;
        let data = resp
            .get("data")
            .and_then(Value::as_array)
            .ok_or_else(|| EmbedError::Provider("missing `data` array".into()))?;
        let mut rows: Vec<(usize, EmbeddingVector<f64>)> = data
            .iter()
            .enumerate()
            .map(|(pos, item)| {
                let index = item.get("index").and_then(Value::as_u64).map_or(pos, |i| i as usize);
                let values: Vec<f64> = item
                    .get("embedding")
                    .and_then(Value::as_array)
                    .ok_or_else(|| EmbedError::Provider("missing `embedding`".into()))?
                    .iter()
                    .map(|v| {
                        v.as_f64()
                            .ok_or_else(|| EmbedError::Provider("non-numeric component".into()))
                    })
                    .collect::<Result<_, _>>()?;
                Ok((index, EmbeddingVector::new(values)?))
            })
            .collect::<Result<_, EmbedError>>()?;
        rows.sort_by_key(|(i, _)| *i);
        Ok(rows.into_iter().map(|(_, v)| v).collect())
    }
}

/// Wraps a provider with the disk cache, keyed on provider id and text.
pub struct CachedEmbedder<P> {
    pub inner: P,
    pub cache: DiskCache,
    pub mode: Mode,
}

impl<P: EmbeddingProvider> CachedEmbedder<P> {
    fn key(&self, text: &str) -> String {
        sha256_hex(
            json!({"kind": "embedding", "provider": self.inner.id(), "text": text})
                .to_string()
                .as_bytes(),
        )
    }
}

impl<P: EmbeddingProvider> EmbeddingProvider for CachedEmbedder<P> {
    fn id(&self) -> String {
        self.inner.id()
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector<f64>>, EmbedError> {
        let provider_err = |e: LlmError| EmbedError::Provider(e.to_string());
        let keys: Vec<String> = texts.iter().map(|t| self.key(t)).collect();
        let mut found: Vec<Option<EmbeddingVector<f64>>> = Vec::with_capacity(texts.len());
        for k in &keys {
            let hit = match self.cache.get(k).map_err(provider_err)? {
                Some(e) => {
                    let values: Vec<f64> = serde_json::from_str(&e.response_text)
                        .map_err(|err| EmbedError::Provider(format!("cached embedding {k}: {err}")))?;
                    Some(EmbeddingVector::new(values)?)
                }
                None => None,
            };
            found.push(hit);
        }
        let missing: Vec<usize> = (0..texts.len()).filter(|&i| found[i].is_none()).collect();
        if !missing.is_empty() {
            if self.mode == Mode::Replay {
                return Err(provider_err(LlmError::ReplayMiss(keys[missing[0]].clone())));
            }
            let batch: Vec<String> = missing.iter().map(|&i| texts[i].clone()).collect();
            let fresh = self.inner.embed(&batch)?;
            if fresh.len() != batch.len() {
                return Err(EmbedError::Provider("provider returned a short batch".into()));
            }
            for (&i, v) in missing.iter().zip(fresh) {
                self.cache
                    .put(CacheEntry {
                        key: keys[i].clone(),
                        response_text: serde_json::to_string(v.values()).expect("vectors serialize"),
                        timestamp: now_secs(),
                        provider: self.inner.id(),
                    })
                    .map_err(provider_err)?;
                found[i] = Some(v);
            }
        }
        Ok(found.into_iter().map(|v| v.expect("all filled")).collect())
    }
}
