//! Textual representations: prompts dispatched to a chat-completion backend
//! (or the offline summarizer), with a content-addressed response cache.

mod offline;

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use log::{info, warn};
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{read_jsonl, write_jsonl, CorpusError};
use crate::http::{self, HttpError, RetryPolicy};
use crate::promptgen::{PromptSpec, SubjectKind};

pub use offline::{offline_summarize, OFFLINE_MODEL};

#[derive(Debug, Error)]
pub enum GenerationError {
    #[error("backend request failed: {0}")]
    Backend(#[from] HttpError),
    #[error("response for {subject} has no choices[0].message.content")]
    MissingContent { subject: String },
    #[error("response for {subject} is empty")]
    EmptyContent { subject: String },
    #[error("cache error at {path}: {message}")]
    Cache { path: PathBuf, message: String },
    #[error(transparent)]
    Io(#[from] CorpusError),
}

impl GenerationError {
    pub fn is_retriable(&self) -> bool {
        matches!(self, GenerationError::Backend(e) if e.is_retriable())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RepSource {
    RemoteLlm,
    OfflineOracle,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextualRepresentation {
    pub subject_id: String,
    pub subject_kind: SubjectKind,
    pub text: String,
    pub source: RepSource,
    pub model_name: String,
    /// Unix seconds; zero for offline output so reruns are byte-identical.
    pub created_at: u64,
    /// Set when the text does not carry every labeled field.
    #[serde(default)]
    pub nonconforming: bool,
}

/// True when every label appears at the start of some line as `Label:`.
pub fn is_conforming(text: &str, fields: &[String]) -> bool {
    let lines: Vec<String> =
        text.lines().map(|l| l.trim_start_matches(|c: char| c.is_whitespace() || matches!(c, '-' | '*' | '#')).to_lowercase()).collect();
    fields.iter().all(|f| {
        let label = format!("{}:", f.to_lowercase());
        let label_cjk = format!("{}：", f.to_lowercase());
        lines.iter().any(|l| l.starts_with(&label) || l.starts_with(&label_cjk))
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub endpoint: String,
    pub model: String,
    pub temperature: f64,
    pub max_in_flight: usize,
    pub retry: RetryPolicy,
    pub cache_dir: Option<PathBuf>,
    /// One extra request re-appending the format indicator when the first
    /// answer misses a labeled field.
    #[serde(default)]
    pub strict: bool,
    pub timeout_secs: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            endpoint: "https://api.openai.com/v1".into(),
            model: "gpt-3.5-turbo".into(),
            temperature: 0.0,
            max_in_flight: 4,
            retry: RetryPolicy::default(),
            cache_dir: None,
            strict: false,
            timeout_secs: 120,
        }
    }
}

/// Something that answers a single-message chat prompt. `Ok(None)` means
/// the response arrived but carried no message content.
pub trait ChatBackend: Sync {
    fn model_name(&self) -> &str;
    fn complete(&self, prompt: &str) -> Result<Option<String>, HttpError>;
}

/// OpenAI-style `POST {endpoint}/chat/completions`.
pub struct HttpChatBackend {
    url: String,
    model: String,
    temperature: f64,
    api_key: Option<String>,
    timeout: Duration,
}

impl HttpChatBackend {
    pub fn new(cfg: &GenerationConfig, api_key: Option<String>) -> Self {
        HttpChatBackend {
            url: http::join_url(&cfg.endpoint, "chat/completions"),
            model: cfg.model.clone(),
            temperature: cfg.temperature,
            api_key,
            timeout: Duration::from_secs(cfg.timeout_secs),
        }
    }
}

impl ChatBackend for HttpChatBackend {
    fn model_name(&self) -> &str {
        &self.model
    }

    fn complete(&self, prompt: &str) -> Result<Option<String>, HttpError> {
        let body = json!({
            "model": self.model,
            "temperature": self.temperature,
            "messages": [{"role": "user", "content": prompt}],
        });
        let resp = http::post_json(&self.url, self.api_key.as_deref(), &body, self.timeout)?;
        Ok(resp.pointer("/choices/0/message/content").and_then(|v| v.as_str()).map(str::to_string))
    }
}

/// On-disk cache keyed by SHA-256 of model name and rendered prompt. Each
/// entry is written to a temp file and renamed into place, so concurrent
/// writers of the same key never expose a partial file.
#[derive(Debug, Clone)]
pub struct ResponseCache {
    dir: PathBuf,
}

impl ResponseCache {
    pub fn open(dir: &Path) -> Result<Self, GenerationError> {
        fs::create_dir_all(dir).map_err(|e| cache_err(dir, e))?;
        Ok(ResponseCache { dir: dir.to_path_buf() })
    }

    pub fn key(model: &str, rendered: &str) -> String {
        let mut h = Sha256::new();
        h.update(model.as_bytes());
        h.update([0u8]);
        h.update(rendered.as_bytes());
        hex::encode(h.finalize())
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    pub fn get(&self, key: &str) -> Option<TextualRepresentation> {
        let text = fs::read_to_string(self.path(key)).ok()?;
        serde_json::from_str(&text).ok()
    }

    pub fn put(&self, key: &str, rep: &TextualRepresentation) -> Result<(), GenerationError> {
        let final_path = self.path(key);
        let tmp = self.dir.join(format!(".{key}.{:?}.tmp", thread::current().id()));
        let body = serde_json::to_vec(rep).map_err(|e| cache_err(&tmp, e))?;
        let mut f = fs::File::create(&tmp).map_err(|e| cache_err(&tmp, e))?;
        f.write_all(&body).map_err(|e| cache_err(&tmp, e))?;
        drop(f);
        fs::rename(&tmp, &final_path).map_err(|e| cache_err(&final_path, e))
    }
}

fn cache_err(path: &Path, e: impl std::fmt::Display) -> GenerationError {
    GenerationError::Cache { path: path.to_path_buf(), message: e.to_string() }
}

fn now_secs() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Asks the backend for one representation, consulting the cache first.
pub fn generate(
    prompt: &PromptSpec,
    backend: &dyn ChatBackend,
    cache: Option<&ResponseCache>,
    cfg: &GenerationConfig,
) -> Result<TextualRepresentation, GenerationError> {
    let rendered = prompt.render();
    let key = ResponseCache::key(backend.model_name(), &rendered);
    if let Some(hit) = cache.and_then(|c| c.get(&key)) {
        return Ok(hit);
    }

    let ask = |text: &str| -> Result<String, GenerationError> {
        let content = cfg.retry.run(|| backend.complete(text))?;
        let content = content.ok_or_else(|| GenerationError::MissingContent { subject: prompt.subject_id.clone() })?;
        if content.trim().is_empty() {
            return Err(GenerationError::EmptyContent { subject: prompt.subject_id.clone() });
        }
        Ok(content)
    };

    let mut text = ask(&rendered)?;
    let mut conforming = is_conforming(&text, &prompt.fields);
    if !conforming && cfg.strict {
        let again = format!("{rendered}\n\n{}", prompt.format_indicator);
        let retry = ask(&again)?;
        if is_conforming(&retry, &prompt.fields) {
            text = retry;
            conforming = true;
        }
    }
    if !conforming {
        warn!("{} {}: response does not follow the format indicator", prompt.subject_kind, prompt.subject_id);
    }
    let rep = TextualRepresentation {
        subject_id: prompt.subject_id.clone(),
        subject_kind: prompt.subject_kind,
        text,
        source: RepSource::RemoteLlm,
        model_name: backend.model_name().to_string(),
        created_at: now_secs(),
        nonconforming: !conforming,
    };
    if let Some(c) = cache {
        c.put(&key, &rep)?;
    }
    Ok(rep)
}

pub enum Backend<'a> {
    Remote { chat: &'a dyn ChatBackend, cache: Option<&'a ResponseCache> },
    Offline,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Deferred {
    pub subject_id: String,
    pub subject_kind: SubjectKind,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GenerationOutcome {
    /// In prompt order, failures omitted.
    pub representations: Vec<TextualRepresentation>,
    pub deferred: Vec<Deferred>,
}

/// Generates one representation per prompt with up to `max_in_flight`
/// concurrent requests. Prompts that render identically share one request.
/// Permanent failures land in `deferred`; rerunning with the same cache only
/// pays for those.
pub fn generate_all(prompts: &[PromptSpec], backend: &Backend<'_>, cfg: &GenerationConfig) -> GenerationOutcome {
    let results: Vec<Mutex<Option<Result<TextualRepresentation, String>>>> = prompts.iter().map(|_| Mutex::new(None)).collect();
    match backend {
        Backend::Offline => {
            for (slot, p) in results.iter().zip(prompts) {
                *slot.lock().unwrap() = Some(Ok(offline_summarize(p)));
            }
        }
        Backend::Remote { chat, cache } => {
            let mut groups: Vec<Vec<usize>> = Vec::new();
            let mut seen: HashMap<String, usize> = HashMap::new();
            for (i, p) in prompts.iter().enumerate() {
                let g = *seen.entry(p.render()).or_insert_with(|| {
                    groups.push(Vec::new());
                    groups.len() - 1
                });
                groups[g].push(i);
            }
            let next = AtomicUsize::new(0);
            let workers = cfg.max_in_flight.clamp(1, groups.len().max(1));
            thread::scope(|s| {
                for _ in 0..workers {
                    s.spawn(|| loop {
                        let g = next.fetch_add(1, Ordering::Relaxed);
                        let Some(members) = groups.get(g) else { break };
                        let r = generate(&prompts[members[0]], *chat, *cache, cfg).map_err(|e| e.to_string());
                        for &i in members {
                            let own = r.as_ref().map(|rep| TextualRepresentation {
                                subject_id: prompts[i].subject_id.clone(),
                                subject_kind: prompts[i].subject_kind,
                                ..rep.clone()
                            });
                            *results[i].lock().unwrap() = Some(own.map_err(Clone::clone));
                        }
                    });
                }
            });
        }
    }

    let mut out = GenerationOutcome::default();
    for (slot, p) in results.into_iter().zip(prompts) {
        match slot.into_inner().unwrap().expect("every prompt is visited") {
            Ok(rep) => out.representations.push(rep),
            Err(e) => {
                warn!("deferring {} {}: {e}", p.subject_kind, p.subject_id);
                out.deferred.push(Deferred { subject_id: p.subject_id.clone(), subject_kind: p.subject_kind, error: e });
            }
        }
    }
    info!("generated {} representations, {} deferred", out.representations.len(), out.deferred.len());
    out
}

pub fn save_representations(path: &Path, reps: &[TextualRepresentation]) -> Result<(), GenerationError> {
    Ok(write_jsonl(path, reps.iter())?)
}

pub fn load_representations(path: &Path) -> Result<Vec<TextualRepresentation>, GenerationError> {
    Ok(read_jsonl(path)?)
}

pub fn save_prompts(path: &Path, prompts: &[PromptSpec]) -> Result<(), GenerationError> {
    Ok(write_jsonl(path, prompts.iter())?)
}

pub fn load_prompts(path: &Path) -> Result<Vec<PromptSpec>, GenerationError> {
    Ok(read_jsonl(path)?)
}

/// Subjects of `prompts` that have no representation in `reps`.
pub fn missing_subjects(prompts: &[PromptSpec], reps: &[TextualRepresentation]) -> Vec<(SubjectKind, String)> {
    let have: HashSet<(SubjectKind, &str)> = reps.iter().map(|r| (r.subject_kind, r.subject_id.as_str())).collect();
    prompts
        .iter()
        .filter(|p| !have.contains(&(p.subject_kind, p.subject_id.as_str())))
        .map(|p| (p.subject_kind, p.subject_id.clone()))
        .collect()
}
