//! Text → vector under the four dataset variants
//! ({representation, raw reviews} × {1,024-d, 200-d}).
//!
//! Two embedders are available: an OpenAI-style `/embeddings` service and a
//! seeded feature-hashing fallback. Raw-review ("control") vectors are built
//! by concatenating a subject's reviews, embedding fixed-size chunks and
//! pooling the chunk vectors.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::corpus::{read_jsonl, write_jsonl, CorpusError, Interaction, SplitBundle};
use crate::http::{self, HttpError, RetryPolicy};
use crate::promptgen::{normalize_token, unit_spans, unit_tokens, SubjectKind};
use crate::repgen::TextualRepresentation;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("text has no tokens to embed")]
    EmptyText,
    #[error("embedding service failed: {0}")]
    Remote(#[from] HttpError),
    #[error("embedding service returned {got} dimensions, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("malformed embedding response: {0}")]
    BadResponse(String),
    #[error("non-finite value in embedding for {0}")]
    NonFinite(String),
    #[error("unknown variant {0:?}")]
    UnknownVariant(String),
    #[error("embedding set mismatch: {0}")]
    SetMismatch(String),
    #[error(transparent)]
    Io(#[from] CorpusError),
    #[error("cannot access {path}: {source}")]
    Fs {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad manifest: {0}")]
    Manifest(#[from] serde_json::Error),
}

impl EmbedError {
    pub fn is_retriable(&self) -> bool {
        matches!(self, EmbedError::Remote(e) if e.is_retriable())
    }
}

pub const BERT_DIM: usize = 1024;
pub const W2V_DIM: usize = 200;

/// Seed of the hash embedder. Fixed so vectors are identical everywhere.
pub const HASH_SEED: u64 = 0x6a09_e667_f3bc_c908;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "rep+bert")]
    RepBert,
    #[serde(rename = "raw+bert")]
    RawBert,
    #[serde(rename = "rep+w2v")]
    RepW2v,
    #[serde(rename = "raw+w2v")]
    RawW2v,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::RepBert, Variant::RawBert, Variant::RepW2v, Variant::RawW2v];

    pub fn dim(self) -> usize {
        match self {
            Variant::RepBert | Variant::RawBert => BERT_DIM,
            Variant::RepW2v | Variant::RawW2v => W2V_DIM,
        }
    }

    /// Whether the variant embeds generated representations (as opposed to
    /// the raw reviews).
    pub fn uses_representations(self) -> bool {
        matches!(self, Variant::RepBert | Variant::RepW2v)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::RepBert => "rep+bert",
            Variant::RawBert => "raw+bert",
            Variant::RepW2v => "rep+w2v",
            Variant::RawW2v => "raw+w2v",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = EmbedError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL.into_iter().find(|v| v.as_str() == s).ok_or_else(|| EmbedError::UnknownVariant(s.to_string()))
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn token_hash(token: &str) -> u64 {
    // FNV-1a over seed and token bytes, then a splitmix finalizer.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in HASH_SEED.to_le_bytes().iter().chain(token.as_bytes()) {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    splitmix64(h)
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Scales `v` to unit length. Returns false (leaving `v` alone) for a zero
/// vector.
pub fn l2_normalize(v: &mut [f64]) -> bool {
    let n = l2_norm(v);
    if n == 0.0 || !n.is_finite() {
        return false;
    }
    v.iter_mut().for_each(|x| *x /= n);
    true
}

/// Feature-hashing bag of words: each token adds ±1 at `hash % d`, then the
/// vector is L2-normalized.
pub fn hash_embed(text: &str, d: usize) -> Result<Vec<f64>, EmbedError> {
    let mut v = vec![0.0; d];
    let mut any = false;
    for raw in unit_tokens(text) {
        let token = normalize_token(raw).unwrap_or_else(|| raw.to_string());
        let h = token_hash(&token);
        let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
        v[(h % d as u64) as usize] += sign;
        any = true;
    }
    if !any || !l2_normalize(&mut v) {
        return Err(EmbedError::EmptyText);
    }
    Ok(v)
}

/// Client for `POST {endpoint}/embeddings`.
#[derive(Debug, Clone)]
pub struct RemoteEmbedder {
    pub endpoint: String,
    pub model: String,
    pub api_key: Option<String>,
    pub retry: RetryPolicy,
    pub batch_size: usize,
    pub max_in_flight: usize,
    pub timeout: Duration,
}

impl RemoteEmbedder {
    pub fn new(endpoint: &str, model: &str) -> Self {
        RemoteEmbedder {
            endpoint: endpoint.to_string(),
            model: model.to_string(),
            api_key: http::api_key_from_env(),
            retry: RetryPolicy::default(),
            batch_size: 64,
            max_in_flight: 4,
            timeout: Duration::from_secs(120),
        }
    }

    fn embed_batch(&self, texts: &[String], d: usize) -> Result<Vec<Vec<f64>>, EmbedError> {
        let url = http::join_url(&self.endpoint, "embeddings");
        let body = json!({"model": self.model, "input": texts});
        let resp = self.retry.run(|| http::post_json(&url, self.api_key.as_deref(), &body, self.timeout))?;
        let data = resp.get("data").and_then(Value::as_array).ok_or_else(|| EmbedError::BadResponse("missing data array".into()))?;
        if data.len() != texts.len() {
            return Err(EmbedError::BadResponse(format!("{} vectors for {} inputs", data.len(), texts.len())));
        }
        let mut out = vec![Vec::new(); texts.len()];
        for (pos, entry) in data.iter().enumerate() {
            let idx = entry.get("index").and_then(Value::as_u64).map(|i| i as usize).unwrap_or(pos);
            let values: Vec<f64> = entry
                .get("embedding")
                .and_then(Value::as_array)
                .ok_or_else(|| EmbedError::BadResponse(format!("entry {pos} has no embedding")))?
                .iter()
                .map(|x| x.as_f64().ok_or_else(|| EmbedError::BadResponse("non-numeric value".into())))
                .collect::<Result<_, _>>()?;
            if values.len() != d {
                return Err(EmbedError::DimensionMismatch { expected: d, got: values.len() });
            }
            *out.get_mut(idx).ok_or_else(|| EmbedError::BadResponse(format!("index {idx} out of range")))? = values;
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub enum Embedder {
    Remote(RemoteEmbedder),
    HashFallback,
}

impl Embedder {
    pub fn id(&self) -> String {
        match self {
            Embedder::Remote(r) => format!("remote:{}", r.model),
            Embedder::HashFallback => format!("hash-fallback:{HASH_SEED:#x}"),
        }
    }

    /// Embeds every text. Remote requests are batched and run with bounded
    /// concurrency; output order matches input order.
    pub fn embed_many(&self, texts: &[String], d: usize) -> Result<Vec<Vec<f64>>, EmbedError> {
        match self {
            Embedder::HashFallback => texts.iter().map(|t| hash_embed(t, d)).collect(),
            Embedder::Remote(remote) => {
                let batches: Vec<&[String]> = texts.chunks(remote.batch_size.max(1)).collect();
                type Slot = Mutex<Option<Result<Vec<Vec<f64>>, EmbedError>>>;
                let results: Vec<Slot> = batches.iter().map(|_| Mutex::new(None)).collect();
                let next = AtomicUsize::new(0);
                let workers = remote.max_in_flight.clamp(1, batches.len().max(1));
                thread::scope(|s| {
                    for _ in 0..workers {
                        s.spawn(|| loop {
                            let i = next.fetch_add(1, Ordering::Relaxed);
                            let Some(batch) = batches.get(i) else { break };
                            *results[i].lock().unwrap() = Some(remote.embed_batch(batch, d));
                        });
                    }
                });
                let mut out = Vec::with_capacity(texts.len());
                for r in results {
                    out.extend(r.into_inner().unwrap().expect("every batch visited")?);
                }
                Ok(out)
            }
        }
    }
}

pub fn embed_text(text: &str, embedder: &Embedder, d: usize) -> Result<Vec<f64>, EmbedError> {
    if text.trim().is_empty() {
        return Err(EmbedError::EmptyText);
    }
    let mut out = embedder.embed_many(&[text.to_string()], d)?;
    Ok(out.pop().expect("one vector per input"))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Merge {
    #[default]
    Mean,
    Sum,
    Max,
}

/// Pools chunk vectors element-wise, optionally renormalizing.
pub fn merge_vectors(vectors: &[Vec<f64>], merge: Merge, normalize: bool) -> Vec<f64> {
    let Some(first) = vectors.first() else {
        return Vec::new();
    };
    let mut out = first.clone();
    for v in &vectors[1..] {
        for (o, x) in out.iter_mut().zip(v) {
            match merge {
                Merge::Mean | Merge::Sum => *o += x,
                Merge::Max => *o = o.max(*x),
            }
        }
    }
    if merge == Merge::Mean {
        let n = vectors.len() as f64;
        out.iter_mut().for_each(|x| *x /= n);
    }
    // Already-unit vectors are left bit-for-bit alone.
    if normalize && (l2_norm(&out) - 1.0).abs() > 1e-12 {
        l2_normalize(&mut out);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControlOptions {
    /// Maximum units per chunk (same counting rule as prompts).
    pub chunk_limit: usize,
    pub merge: Merge,
    /// Overrides the default normalization (on for pooled vectors).
    pub normalize: Option<bool>,
}

pub const DEFAULT_CHUNK_LIMIT: usize = 500;

impl Default for ControlOptions {
    fn default() -> Self {
        ControlOptions { chunk_limit: DEFAULT_CHUNK_LIMIT, merge: Merge::Mean, normalize: None }
    }
}

/// Concatenates reviews (newline separated) and cuts the result into
/// chunks of at most `chunk_limit` units.
pub fn control_chunks(reviews: &[String], chunk_limit: usize) -> Vec<String> {
    let joined = reviews.join("\n");
    let spans = unit_spans(&joined);
    spans.chunks(chunk_limit.max(1)).map(|c| joined[c[0].0..c[c.len() - 1].1].to_string()).collect()
}

pub fn embed_control(reviews: &[String], embedder: &Embedder, d: usize, opts: &ControlOptions) -> Result<Vec<f64>, EmbedError> {
    let chunks = control_chunks(reviews, opts.chunk_limit);
    if chunks.is_empty() {
        return Err(EmbedError::EmptyText);
    }
    let vectors = embedder.embed_many(&chunks, d)?;
    Ok(merge_vectors(&vectors, opts.merge, opts.normalize.unwrap_or(true)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub subject_id: String,
    pub kind: SubjectKind,
    pub variant: Variant,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub embedder: String,
    pub chunk_limit: Option<usize>,
    pub merge: Option<Merge>,
}

/// Vectors of one subject kind under one variant. All share `dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub variant: Variant,
    pub kind: SubjectKind,
    pub dim: usize,
    pub vectors: BTreeMap<String, Vec<f64>>,
    pub provenance: Provenance,
}

impl EmbeddingSet {
    pub fn new(variant: Variant, kind: SubjectKind, provenance: Provenance) -> Self {
        EmbeddingSet { variant, kind, dim: variant.dim(), vectors: BTreeMap::new(), provenance }
    }

    /// Like [`EmbeddingSet::new`] but with an explicit dimension, for sets
    /// that do not come from one of the four standard variants.
    pub fn with_dim(variant: Variant, kind: SubjectKind, dim: usize, provenance: Provenance) -> Self {
        EmbeddingSet { variant, kind, dim, vectors: BTreeMap::new(), provenance }
    }

    pub fn insert(&mut self, subject_id: &str, values: Vec<f64>) -> Result<(), EmbedError> {
        if values.len() != self.dim {
            return Err(EmbedError::DimensionMismatch { expected: self.dim, got: values.len() });
        }
        if values.iter().any(|x| !x.is_finite()) {
            return Err(EmbedError::NonFinite(subject_id.to_string()));
        }
        self.vectors.insert(subject_id.to_string(), values);
        Ok(())
    }

    pub fn get(&self, subject_id: &str) -> Option<&[f64]> {
        self.vectors.get(subject_id).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    fn rows(&self) -> Vec<EmbeddingVector> {
        self.vectors
            .iter()
            .map(|(id, v)| EmbeddingVector { subject_id: id.clone(), kind: self.kind, variant: self.variant, values: v.clone() })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    variant: Variant,
    dim: usize,
    provenance: Provenance,
    users: usize,
    items: usize,
}

pub const USERS_FILE: &str = "users.jsonl";
pub const ITEMS_FILE: &str = "items.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Paired user and item sets for one variant.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingPair {
    pub users: EmbeddingSet,
    pub items: EmbeddingSet,
}

impl EmbeddingPair {
    pub fn variant(&self) -> Variant {
        self.users.variant
    }

    pub fn dim(&self) -> usize {
        self.users.dim
    }

    /// Writes `users.jsonl`, `items.jsonl` and `manifest.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), EmbedError> {
        fs::create_dir_all(dir).map_err(|source| EmbedError::Fs { path: dir.to_path_buf(), source })?;
        write_jsonl(&dir.join(USERS_FILE), self.users.rows().iter())?;
        write_jsonl(&dir.join(ITEMS_FILE), self.items.rows().iter())?;
        let manifest = Manifest {
            variant: self.users.variant,
            dim: self.users.dim,
            provenance: self.users.provenance.clone(),
            users: self.users.len(),
            items: self.items.len(),
        };
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|source| EmbedError::Fs { path, source })
    }

    pub fn load(dir: &Path) -> Result<Self, EmbedError> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|source| EmbedError::Fs { path, source })?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        let mut users = EmbeddingSet::with_dim(manifest.variant, SubjectKind::User, manifest.dim, manifest.provenance.clone());
        let mut items = EmbeddingSet::with_dim(manifest.variant, SubjectKind::Item, manifest.dim, manifest.provenance);
        for (set, file) in [(&mut users, USERS_FILE), (&mut items, ITEMS_FILE)] {
            for row in read_jsonl::<EmbeddingVector>(&dir.join(file))? {
                if row.variant != set.variant || row.kind != set.kind {
                    return Err(EmbedError::SetMismatch(format!("{file}: row {} is {} {}", row.subject_id, row.kind, row.variant)));
                }
                set.insert(&row.subject_id, row.values)?;
            }
        }
        Ok(EmbeddingPair { users, items })
    }
}

/// Where a subject's text comes from when building a variant.
pub enum VariantSource<'a> {
    Representations(&'a [TextualRepresentation]),
    RawReviews,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariantOutput {
    pub pair: EmbeddingPair,
    /// Subjects that could not be embedded, with the reason.
    pub missing: Vec<(SubjectKind, String, String)>,
}

fn review_texts(rows: &[Interaction]) -> Vec<String> {
    let mut sorted: Vec<&Interaction> = rows.iter().collect();
    sorted.sort_by(|a, b| a.chrono_key().cmp(&b.chrono_key()).then_with(|| a.user_id.cmp(&b.user_id)));
    sorted.into_iter().map(|r| r.review.clone()).collect()
}

/// Builds the paired user/item sets of one variant over the cohort users
/// and the item catalog of `splits`. Subjects without input text are
/// listed in `missing`; remote failures abort.
pub fn build_variant(
    splits: &SplitBundle,
    source: &VariantSource<'_>,
    embedder: &Embedder,
    variant: Variant,
    opts: &ControlOptions,
) -> Result<VariantOutput, EmbedError> {
    let d = variant.dim();
    let uses_reps = variant.uses_representations();
    if uses_reps != matches!(source, VariantSource::Representations(_)) {
        return Err(EmbedError::SetMismatch(format!(
            "variant {variant} needs {}",
            if uses_reps { "representations" } else { "raw reviews" }
        )));
    }
    let provenance = Provenance {
        embedder: embedder.id(),
        chunk_limit: (!uses_reps).then_some(opts.chunk_limit),
        merge: (!uses_reps).then_some(opts.merge),
    };
    let mut missing = Vec::new();

    // (kind, subject, texts to embed)
    let mut jobs: Vec<(SubjectKind, &str, Vec<String>)> = Vec::new();
    let subjects = splits
        .user_train
        .iter()
        .map(|(u, rows)| (SubjectKind::User, u.as_str(), rows))
        .chain(splits.item_train.iter().map(|(i, rows)| (SubjectKind::Item, i.as_str(), rows)));
    match source {
        VariantSource::Representations(reps) => {
            let by_key: BTreeMap<(SubjectKind, &str), &str> =
                reps.iter().map(|r| ((r.subject_kind, r.subject_id.as_str()), r.text.as_str())).collect();
            for (kind, id, _) in subjects {
                match by_key.get(&(kind, id)) {
                    Some(text) if !text.trim().is_empty() => jobs.push((kind, id, vec![text.to_string()])),
                    _ => missing.push((kind, id.to_string(), "no representation".to_string())),
                }
            }
        }
        VariantSource::RawReviews => {
            for (kind, id, rows) in subjects {
                let chunks = control_chunks(&review_texts(rows), opts.chunk_limit);
                if chunks.is_empty() {
                    missing.push((kind, id.to_string(), "reviews contain no text".to_string()));
                } else {
                    jobs.push((kind, id, chunks));
                }
            }
        }
    }

    let flat: Vec<String> = jobs.iter().flat_map(|j| j.2.iter().cloned()).collect();
    let mut vectors = embedder.embed_many(&flat, d)?.into_iter();
    let mut users = EmbeddingSet::new(variant, SubjectKind::User, provenance.clone());
    let mut items = EmbeddingSet::new(variant, SubjectKind::Item, provenance);
    for (kind, id, texts) in &jobs {
        let chunk_vecs: Vec<Vec<f64>> = vectors.by_ref().take(texts.len()).collect();
        let v = if uses_reps {
            let mut v = chunk_vecs.into_iter().next().expect("one vector");
            if opts.normalize == Some(true) {
                l2_normalize(&mut v);
            }
            v
        } else {
            merge_vectors(&chunk_vecs, opts.merge, opts.normalize.unwrap_or(true))
        };
        match kind {
            SubjectKind::User => users.insert(id, v)?,
            SubjectKind::Item => items.insert(id, v)?,
        }
    }
    Ok(VariantOutput { pair: EmbeddingPair { users, items }, missing })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::repgen::RepSource;
    use crate::stub::{Recording, StubServer};

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (l2_norm(a) * l2_norm(b))
    }

    #[test]
    fn hash_embed_collapses_repeats() {
        assert_eq!(hash_embed("a a", 200).unwrap(), hash_embed("a", 200).unwrap());
        assert_eq!(hash_embed("Bears!", 200).unwrap(), hash_embed("bears", 200).unwrap());
    }

    #[test]
    fn hash_embed_deterministic_and_unit() {
        let a = hash_embed("一部关于熊的纪录片 great bears", 1024).unwrap();
        assert_eq!(a, hash_embed("一部关于熊的纪录片 great bears", 1024).unwrap());
        assert!((l2_norm(&a) - 1.0).abs() < 1e-12);
        assert!(hash_embed("😀", 16).is_ok());
        assert!(matches!(hash_embed("   ", 16), Err(EmbedError::EmptyText)));
    }

    #[test]
    fn hash_embed_disjoint_texts_nearly_orthogonal() {
        for trial in 0..20 {
            let a: String = (0..50).map(|i| format!("alpha{trial}x{i} ")).collect();
            let b: String = (0..50).map(|i| format!("beta{trial}y{i} ")).collect();
            let c = cosine(&hash_embed(&a, 200).unwrap(), &hash_embed(&b, 200).unwrap());
            assert!(c.abs() < 0.2, "trial {trial}: cos = {c}");
        }
    }

    #[test]
    fn control_single_review_equals_text_embedding() {
        let review = "quiet, patient film about bears".to_string();
        let control = embed_control(std::slice::from_ref(&review), &Embedder::HashFallback, 200, &ControlOptions::default()).unwrap();
        assert_eq!(control, embed_text(&review, &Embedder::HashFallback, 200).unwrap());
    }

    #[test]
    fn merge_rules() {
        let v = vec![0.6, 0.8];
        assert_eq!(merge_vectors(&[v.clone(), v.clone()], Merge::Mean, true), v);
        let m = merge_vectors(&[vec![1.0, 0.0], vec![0.0, 1.0]], Merge::Mean, true);
        let expected = 1.0 / 2f64.sqrt();
        assert!((cosine(&m, &[1.0, 0.0]) - expected).abs() < 1e-12);
        assert!((cosine(&m, &[0.0, 1.0]) - expected).abs() < 1e-12);
        assert_eq!(merge_vectors(&[vec![1.0, -2.0], vec![3.0, 4.0]], Merge::Sum, false), vec![4.0, 2.0]);
        assert_eq!(merge_vectors(&[vec![1.0, -2.0], vec![3.0, -4.0]], Merge::Max, false), vec![3.0, -2.0]);
    }

    #[test]
    fn chunking_respects_limit() {
        let reviews: Vec<String> = (0..7).map(|i| format!("w{i}a w{i}b w{i}c")).collect();
        let chunks = control_chunks(&reviews, 5);
        assert_eq!(chunks.len(), 5);
        assert!(chunks.iter().all(|c| crate::promptgen::count_units(c) <= 5));
        let multi = embed_control(&reviews, &Embedder::HashFallback, 64, &ControlOptions { chunk_limit: 5, ..Default::default() }).unwrap();
        assert!((l2_norm(&multi) - 1.0).abs() < 1e-9);
    }

    fn tiny_splits() -> SplitBundle {
        let ix = |u: &str, i: &str, t: u64, text: &str| Interaction {
            user_id: u.into(),
            item_id: i.into(),
            rating: None,
            timestamp: t,
            review: text.into(),
        };
        let mut s = SplitBundle::default();
        s.user_train.insert("u1".into(), vec![ix("u1", "m1", 1, "loved the bears")]);
        s.user_train.insert("u2".into(), vec![ix("u2", "m2", 1, "too long"), ix("u2", "m1", 2, "nice")]);
        s.item_train.insert("m1".into(), vec![ix("o", "m1", 1, "bears everywhere")]);
        s.item_train.insert("m2".into(), vec![ix("o", "m2", 1, "slow drama")]);
        s
    }

    fn reps() -> Vec<TextualRepresentation> {
        ["u1", "u2", "m1", "m2"]
            .iter()
            .map(|id| TextualRepresentation {
                subject_id: id.to_string(),
                subject_kind: if id.starts_with('u') { SubjectKind::User } else { SubjectKind::Item },
                text: format!("Summary of {id}"),
                source: RepSource::OfflineOracle,
                model_name: "t".into(),
                created_at: 0,
                nonconforming: false,
            })
            .collect()
    }

    #[test]
    fn build_variant_dimensions() {
        let splits = tiny_splits();
        let reps = reps();
        let out = build_variant(
            &splits,
            &VariantSource::Representations(&reps),
            &Embedder::HashFallback,
            Variant::RepBert,
            &ControlOptions::default(),
        )
        .unwrap();
        assert_eq!(out.pair.users.len() + out.pair.items.len(), 4);
        assert!(out.pair.users.vectors.values().all(|v| v.len() == 1024));
        let raw = build_variant(&splits, &VariantSource::RawReviews, &Embedder::HashFallback, Variant::RawW2v, &ControlOptions::default())
            .unwrap();
        assert!(raw.pair.items.vectors.values().all(|v| v.len() == 200));
        let again =
            build_variant(&splits, &VariantSource::RawReviews, &Embedder::HashFallback, Variant::RawW2v, &ControlOptions::default())
                .unwrap();
        assert_eq!(raw, again);
    }

    #[test]
    fn build_variant_lists_missing_subjects() {
        let splits = tiny_splits();
        let mut reps = reps();
        reps.retain(|r| r.subject_id != "m2");
        let out = build_variant(
            &splits,
            &VariantSource::Representations(&reps),
            &Embedder::HashFallback,
            Variant::RepW2v,
            &ControlOptions::default(),
        )
        .unwrap();
        assert_eq!(out.missing.len(), 1);
        assert_eq!(out.missing[0].1, "m2");
    }

    #[test]
    fn pair_roundtrip() {
        let out = build_variant(
            &tiny_splits(),
            &VariantSource::RawReviews,
            &Embedder::HashFallback,
            Variant::RawBert,
            &ControlOptions::default(),
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        out.pair.save(dir.path()).unwrap();
        assert_eq!(EmbeddingPair::load(dir.path()).unwrap(), out.pair);
    }

    #[test]
    fn remote_embedder_against_stub() {
        let server = StubServer::replay(Recording { embedding_dim: Some(200), ..Default::default() }).unwrap();
        let mut remote = RemoteEmbedder::new(&server.endpoint(), "stub-w2v");
        remote.batch_size = 2;
        remote.retry = RetryPolicy::no_wait(1);
        let texts: Vec<String> = ["one", "two words", "three more words"].map(String::from).to_vec();
        let got = Embedder::Remote(remote.clone()).embed_many(&texts, 200).unwrap();
        let want = Embedder::HashFallback.embed_many(&texts, 200).unwrap();
        assert_eq!(got, want);

        let err = embed_text("x", &Embedder::Remote(remote), 1024).unwrap_err();
        assert!(matches!(err, EmbedError::DimensionMismatch { expected: 1024, got: 200 }));
    }
}
