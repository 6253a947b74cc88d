//! Interaction logs, cohort selection and the leave-two-out split.
//!
//! The store is built once from a CSV or JSONL log and is immutable
//! afterwards. Splitting is a chain of pure steps:
//! [`select_cohort`] → [`leave_two_out`] → [`fewshot_downsample`] →
//! [`build_item_train`], wrapped up by [`build_splits`].

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::{debug, warn};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error in {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("requested cohort of {requested} users but the store only has {available}")]
    CohortTooLarge { requested: usize, available: usize },
    #[error("per-user cap must be at least 1")]
    InvalidCap,
    #[error("malformed split file {path}: {message}")]
    MalformedSplit { path: PathBuf, message: String },
    #[error("unknown input format {0:?} (expected csv or jsonl)")]
    UnknownFormat(String),
    #[error("store serialization failed: {0}")]
    Serde(#[from] serde_json::Error),
}

impl CorpusError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        CorpusError::Io { path: path.to_path_buf(), source }
    }
}

/// One explicit-feedback sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub user_id: String,
    pub item_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rating: Option<u8>,
    pub timestamp: u64,
    pub review: String,
}

impl Interaction {
    /// Chronological sort key. Equal timestamps fall back to the item id.
    pub fn chrono_key(&self) -> (u64, &str) {
        (self.timestamp, self.item_id.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputFormat {
    Csv,
    Jsonl,
}

impl FromStr for InputFormat {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(InputFormat::Csv),
            "jsonl" | "json" => Ok(InputFormat::Jsonl),
            other => Err(CorpusError::UnknownFormat(other.to_string())),
        }
    }
}

/// Row shape shared by both input formats. Everything is optional here so
/// that validation can count a bad row instead of aborting the whole file.
#[derive(Debug, Deserialize)]
struct RawRow {
    user_id: Option<String>,
    item_id: Option<String>,
    #[serde(default, deserialize_with = "lenient_rating")]
    rating: Option<i64>,
    timestamp: Option<i64>,
    review: Option<String>,
}

fn lenient_rating<'de, D>(de: D) -> Result<Option<i64>, D::Error>
where
    D: serde::Deserializer<'de>,
{
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Int(i64),
        Str(String),
    }
    match Option::<Raw>::deserialize(de)? {
        None => Ok(None),
        Some(Raw::Int(v)) => Ok(Some(v)),
        Some(Raw::Str(s)) if s.trim().is_empty() => Ok(None),
        Some(Raw::Str(s)) => s.trim().parse().map(Some).map_err(serde::de::Error::custom),
    }
}

impl RawRow {
    fn validate(self) -> Result<Interaction, String> {
        let user_id = self.user_id.filter(|s| !s.is_empty()).ok_or("empty user_id")?;
        let item_id = self.item_id.filter(|s| !s.is_empty()).ok_or("empty item_id")?;
        let timestamp = self.timestamp.ok_or("missing timestamp")?;
        if timestamp < 0 {
            return Err(format!("negative timestamp {timestamp}"));
        }
        let rating = match self.rating {
            None => None,
            Some(r @ 1..=5) => Some(r as u8),
            Some(r) => return Err(format!("rating {r} outside 1..=5")),
        };
        let review = self.review.ok_or("missing review")?;
        Ok(Interaction { user_id, item_id, rating, timestamp: timestamp as u64, review })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub loaded: usize,
    pub malformed: usize,
    pub duplicates: usize,
    pub warnings: Vec<String>,
}

/// Immutable interaction log with per-user and per-item indices.
#[derive(Debug, Clone, Default)]
pub struct InteractionStore {
    interactions: Vec<Interaction>,
    by_user: BTreeMap<String, Vec<usize>>,
    by_item: BTreeMap<String, Vec<usize>>,
}

impl InteractionStore {
    /// Builds a store, dropping exact (user, item, timestamp) duplicates.
    /// Returns the number of dropped rows alongside the store.
    pub fn from_interactions(rows: impl IntoIterator<Item = Interaction>) -> (Self, usize) {
        let mut store = InteractionStore::default();
        let mut seen: HashSet<(String, String, u64)> = HashSet::new();
        let mut dropped = 0;
        for row in rows {
            if !seen.insert((row.user_id.clone(), row.item_id.clone(), row.timestamp)) {
                dropped += 1;
                continue;
            }
            let idx = store.interactions.len();
            store.by_user.entry(row.user_id.clone()).or_default().push(idx);
            store.by_item.entry(row.item_id.clone()).or_default().push(idx);
            store.interactions.push(row);
        }
        for list in store.by_user.values_mut().chain(store.by_item.values_mut()) {
            let rows = &store.interactions;
            list.sort_by(|&a, &b| rows[a].chrono_key().cmp(&rows[b].chrono_key()).then_with(|| rows[a].user_id.cmp(&rows[b].user_id)));
        }
        (store, dropped)
    }

    pub fn len(&self) -> usize {
        self.interactions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.interactions.is_empty()
    }

    pub fn interactions(&self) -> &[Interaction] {
        &self.interactions
    }

    /// User ids in lexicographic order.
    pub fn users(&self) -> impl Iterator<Item = &str> {
        self.by_user.keys().map(String::as_str)
    }

    pub fn n_users(&self) -> usize {
        self.by_user.len()
    }

    pub fn items(&self) -> impl Iterator<Item = &str> {
        self.by_item.keys().map(String::as_str)
    }

    pub fn n_items(&self) -> usize {
        self.by_item.len()
    }

    /// The user's interactions, oldest first.
    pub fn user_history(&self, user: &str) -> Vec<&Interaction> {
        self.by_user.get(user).map(|idx| idx.iter().map(|&i| &self.interactions[i]).collect()).unwrap_or_default()
    }

    pub fn item_history(&self, item: &str) -> Vec<&Interaction> {
        self.by_item.get(item).map(|idx| idx.iter().map(|&i| &self.interactions[i]).collect()).unwrap_or_default()
    }

    /// Writes the store as JSONL, one interaction per line, in ingest order.
    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        write_jsonl(path, self.interactions.iter())
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let (store, _) = ingest(path, InputFormat::Jsonl)?;
        Ok(store)
    }
}

/// Loads an interaction log. Malformed and duplicate rows are skipped with a
/// warning; only an unreadable file is fatal.
pub fn ingest(path: &Path, format: InputFormat) -> Result<(InteractionStore, IngestReport), CorpusError> {
    let mut report = IngestReport::default();
    let mut rows = Vec::new();
    let mut push = |line: usize, parsed: Result<RawRow, String>, report: &mut IngestReport| match parsed.and_then(RawRow::validate) {
        Ok(row) => rows.push(row),
        Err(msg) => {
            report.malformed += 1;
            report.warnings.push(format!("{}:{line}: malformed row skipped ({msg})", path.display()));
        }
    };
    match format {
        InputFormat::Csv => {
            let mut reader = csv::ReaderBuilder::new().flexible(true).from_path(path).map_err(|source| csv_error(path, source))?;
            for (i, rec) in reader.deserialize::<RawRow>().enumerate() {
                let parsed = match rec {
                    Ok(r) => Ok(r),
                    Err(e) if e.is_io_error() => return Err(csv_error(path, e)),
                    Err(e) => Err(e.to_string()),
                };
                push(i + 2, parsed, &mut report);
            }
        }
        InputFormat::Jsonl => {
            let file = File::open(path).map_err(|e| CorpusError::io(path, e))?;
            for (i, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(|e| CorpusError::io(path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                push(i + 1, serde_json::from_str(&line).map_err(|e| e.to_string()), &mut report);
            }
        }
    }
    let total = rows.len();
    let (store, dropped) = InteractionStore::from_interactions(rows);
    report.duplicates = dropped;
    report.loaded = total - dropped;
    if dropped > 0 {
        report.warnings.push(format!("{dropped} duplicate (user, item, timestamp) rows skipped"));
    }
    for w in &report.warnings {
        warn!("{w}");
    }
    Ok((store, report))
}

fn csv_error(path: &Path, source: csv::Error) -> CorpusError {
    if source.is_io_error() {
        match source.into_kind() {
            csv::ErrorKind::Io(e) => CorpusError::io(path, e),
            _ => unreachable!(),
        }
    } else {
        CorpusError::Csv { path: path.to_path_buf(), source }
    }
}

/// Uniformly samples `n` distinct users without replacement. The result is
/// returned in lexicographic order so that it does not depend on draw order.
pub fn select_cohort(store: &InteractionStore, n: usize, seed: u64) -> Result<Vec<String>, CorpusError> {
    let users: Vec<&str> = store.users().collect();
    if n > users.len() {
        return Err(CorpusError::CohortTooLarge { requested: n, available: users.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<String> = index::sample(&mut rng, users.len(), n).into_iter().map(|i| users[i].to_string()).collect();
    picked.sort();
    Ok(picked)
}

/// Which held-out slot receives the most recent interaction.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitOrder {
    /// Most recent → test, second most recent → validation.
    #[default]
    TestLast,
    /// Most recent → validation, second most recent → test.
    ValidationLast,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeldOut {
    pub user_id: String,
    pub item_id: String,
}

/// Result of [`leave_two_out`], before few-shot downsampling and item-side
/// construction.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PartialSplit {
    pub user_train: BTreeMap<String, Vec<Interaction>>,
    pub validation: BTreeMap<String, String>,
    pub test: BTreeMap<String, String>,
    /// Cohort members dropped for having fewer than three interactions.
    pub excluded: Vec<String>,
}

pub const MIN_USER_INTERACTIONS: usize = 3;

pub fn leave_two_out(store: &InteractionStore, cohort: &[String], order: SplitOrder) -> PartialSplit {
    let mut out = PartialSplit::default();
    for user in cohort {
        let mut history: Vec<Interaction> = store.user_history(user).into_iter().cloned().collect();
        if history.len() < MIN_USER_INTERACTIONS {
            warn!("user {user} has {} interactions (< {MIN_USER_INTERACTIONS}); excluded from cohort", history.len());
            out.excluded.push(user.clone());
            continue;
        }
        history.sort_by(|a, b| a.chrono_key().cmp(&b.chrono_key()));
        let newest = history.pop().expect("len >= 3");
        let second = history.pop().expect("len >= 3");
        let (test, valid) = match order {
            SplitOrder::TestLast => (newest, second),
            SplitOrder::ValidationLast => (second, newest),
        };
        out.test.insert(user.clone(), test.item_id);
        out.validation.insert(user.clone(), valid.item_id);
        out.user_train.insert(user.clone(), history);
    }
    out
}

/// Caps every user's training list at `cap` samples, keeping a uniformly
/// random subset in chronological order.
pub fn fewshot_downsample(
    user_train: &BTreeMap<String, Vec<Interaction>>,
    cap: usize,
    seed: u64,
) -> Result<BTreeMap<String, Vec<Interaction>>, CorpusError> {
    if cap < 1 {
        return Err(CorpusError::InvalidCap);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(user_train
        .iter()
        .map(|(user, rows)| {
            let kept = if rows.len() <= cap {
                rows.clone()
            } else {
                let mut idx = index::sample(&mut rng, rows.len(), cap).into_vec();
                idx.sort_unstable();
                idx.into_iter().map(|i| rows[i].clone()).collect()
            };
            (user.clone(), kept)
        })
        .collect())
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemTrainReport {
    /// Referenced items that had no non-cohort sample and received one
    /// cohort sample instead.
    pub fallback_items: Vec<String>,
}

/// Builds the per-item training lists from interactions of users outside
/// the cohort, capped at `per_item_cap` samples per item.
///
/// Every item referenced by the user side must end up with at least one
/// entry. When an item only ever appears in cohort histories, one cohort
/// sample is borrowed for it, preferring a sample that is not held out.
pub fn build_item_train(
    store: &InteractionStore,
    cohort: &[String],
    split: &PartialSplit,
    per_item_cap: usize,
    seed: u64,
) -> Result<(BTreeMap<String, Vec<Interaction>>, ItemTrainReport), CorpusError> {
    if per_item_cap < 1 {
        return Err(CorpusError::InvalidCap);
    }
    let cohort: BTreeSet<&str> = cohort.iter().map(String::as_str).collect();
    let mut remaining: BTreeMap<String, Vec<Interaction>> = BTreeMap::new();
    for row in store.interactions() {
        if !cohort.contains(row.user_id.as_str()) {
            remaining.entry(row.item_id.clone()).or_default().push(row.clone());
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut item_train: BTreeMap<String, Vec<Interaction>> = remaining
        .into_iter()
        .map(|(item, mut rows)| {
            rows.sort_by(|a, b| a.chrono_key().cmp(&b.chrono_key()).then_with(|| a.user_id.cmp(&b.user_id)));
            if rows.len() > per_item_cap {
                let mut idx = index::sample(&mut rng, rows.len(), per_item_cap).into_vec();
                idx.sort_unstable();
                rows = idx.into_iter().map(|i| rows[i].clone()).collect();
            }
            (item, rows)
        })
        .collect();

    let held_out: HashSet<(&str, &str)> = split.validation.iter().chain(split.test.iter()).map(|(u, i)| (u.as_str(), i.as_str())).collect();
    let mut report = ItemTrainReport::default();
    for item in referenced_items(split) {
        if item_train.contains_key(item) {
            continue;
        }
        let candidates: Vec<&Interaction> = store.item_history(item).into_iter().filter(|r| cohort.contains(r.user_id.as_str())).collect();
        let preferred: Vec<&Interaction> =
            candidates.iter().copied().filter(|r| !held_out.contains(&(r.user_id.as_str(), r.item_id.as_str()))).collect();
        let pool = if preferred.is_empty() { &candidates } else { &preferred };
        let pick = index::sample(&mut rng, pool.len(), 1).index(0);
        debug!("item {item} has no samples outside the cohort; borrowing one cohort sample");
        item_train.insert(item.to_string(), vec![pool[pick].clone()]);
        report.fallback_items.push(item.to_string());
    }
    if !report.fallback_items.is_empty() {
        warn!("{} items have no samples outside the cohort and borrow one cohort sample each", report.fallback_items.len());
    }
    Ok((item_train, report))
}

fn referenced_items(split: &PartialSplit) -> BTreeSet<&str> {
    split
        .user_train
        .values()
        .flatten()
        .map(|r| r.item_id.as_str())
        .chain(split.validation.values().map(String::as_str))
        .chain(split.test.values().map(String::as_str))
        .collect()
}

/// Train/validation/test partition of a cohort plus the item-side training
/// lists.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SplitBundle {
    pub user_train: BTreeMap<String, Vec<Interaction>>,
    pub validation: BTreeMap<String, String>,
    pub test: BTreeMap<String, String>,
    pub item_train: BTreeMap<String, Vec<Interaction>>,
    /// Every item each cohort user ever interacted with in the full store.
    /// Negative sampling checks against this, not just the training lists.
    pub history: BTreeMap<String, BTreeSet<String>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub cohort: usize,
    pub user_cap: usize,
    pub item_cap: usize,
    pub seed: u64,
    #[serde(default)]
    pub order: SplitOrder,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub excluded_users: Vec<String>,
    pub fallback_items: Vec<String>,
    pub user_train_samples: usize,
    pub item_train_samples: usize,
    /// Share of cohort users with at most five training samples.
    pub share_users_le5: f64,
}

/// Full split pipeline. Each stage draws from its own seed stream derived
/// from `cfg.seed`.
pub fn build_splits(store: &InteractionStore, cfg: &SplitConfig) -> Result<(SplitBundle, SplitReport), CorpusError> {
    let cohort = select_cohort(store, cfg.cohort, cfg.seed)?;
    let partial = leave_two_out(store, &cohort, cfg.order);
    let mut partial =
        PartialSplit { user_train: fewshot_downsample(&partial.user_train, cfg.user_cap, cfg.seed.wrapping_add(1))?, ..partial };
    let kept: Vec<String> = partial.user_train.keys().cloned().collect();
    let (item_train, item_report) = build_item_train(store, &kept, &partial, cfg.item_cap, cfg.seed.wrapping_add(2))?;
    let history = kept.iter().map(|u| (u.clone(), store.user_history(u).into_iter().map(|r| r.item_id.clone()).collect())).collect();

    let n_users = partial.user_train.len();
    let report = SplitReport {
        excluded_users: std::mem::take(&mut partial.excluded),
        fallback_items: item_report.fallback_items,
        user_train_samples: partial.user_train.values().map(Vec::len).sum(),
        item_train_samples: item_train.values().map(Vec::len).sum(),
        share_users_le5: if n_users == 0 {
            0.0
        } else {
            partial.user_train.values().filter(|r| r.len() <= 5).count() as f64 / n_users as f64
        },
    };
    let bundle = SplitBundle { user_train: partial.user_train, validation: partial.validation, test: partial.test, item_train, history };
    Ok((bundle, report))
}

#[derive(Serialize, Deserialize)]
struct HistoryRow {
    user_id: String,
    items: BTreeSet<String>,
}

pub const USER_TRAIN_FILE: &str = "user_train.jsonl";
pub const VALID_FILE: &str = "valid.jsonl";
pub const TEST_FILE: &str = "test.jsonl";
pub const ITEM_TRAIN_FILE: &str = "item_train.jsonl";
pub const HISTORY_FILE: &str = "history.jsonl";

impl SplitBundle {
    /// Cohort users in lexicographic order.
    pub fn users(&self) -> impl Iterator<Item = &str> {
        self.user_train.keys().map(String::as_str)
    }

    /// Item catalog: every key of the item training lists.
    pub fn items(&self) -> impl Iterator<Item = &str> {
        self.item_train.keys().map(String::as_str)
    }

    pub fn save(&self, dir: &Path) -> Result<(), CorpusError> {
        fs::create_dir_all(dir).map_err(|e| CorpusError::io(dir, e))?;
        write_jsonl(&dir.join(USER_TRAIN_FILE), self.user_train.values().flatten())?;
        write_jsonl(&dir.join(ITEM_TRAIN_FILE), self.item_train.values().flatten())?;
        let held = |m: &BTreeMap<String, String>| -> Vec<HeldOut> {
            m.iter().map(|(u, i)| HeldOut { user_id: u.clone(), item_id: i.clone() }).collect()
        };
        write_jsonl(&dir.join(VALID_FILE), held(&self.validation).iter())?;
        write_jsonl(&dir.join(TEST_FILE), held(&self.test).iter())?;
        let history: Vec<HistoryRow> =
            self.history.iter().map(|(u, items)| HistoryRow { user_id: u.clone(), items: items.clone() }).collect();
        write_jsonl(&dir.join(HISTORY_FILE), history.iter())
    }

    pub fn load(dir: &Path) -> Result<Self, CorpusError> {
        let mut bundle = SplitBundle::default();
        for row in read_jsonl::<Interaction>(&dir.join(USER_TRAIN_FILE))? {
            bundle.user_train.entry(row.user_id.clone()).or_default().push(row);
        }
        for row in read_jsonl::<Interaction>(&dir.join(ITEM_TRAIN_FILE))? {
            bundle.item_train.entry(row.item_id.clone()).or_default().push(row);
        }
        for row in read_jsonl::<HeldOut>(&dir.join(VALID_FILE))? {
            bundle.validation.insert(row.user_id, row.item_id);
        }
        for row in read_jsonl::<HeldOut>(&dir.join(TEST_FILE))? {
            bundle.test.insert(row.user_id, row.item_id);
        }
        let history_path = dir.join(HISTORY_FILE);
        if history_path.exists() {
            for row in read_jsonl::<HistoryRow>(&history_path)? {
                bundle.history.insert(row.user_id, row.items);
            }
        } else {
            // Without the history file the best available knowledge is the
            // split itself.
            for (user, rows) in &bundle.user_train {
                let mut items: BTreeSet<String> = rows.iter().map(|r| r.item_id.clone()).collect();
                items.extend(bundle.validation.get(user).cloned());
                items.extend(bundle.test.get(user).cloned());
                bundle.history.insert(user.clone(), items);
            }
        }
        for user in bundle.test.keys() {
            if !bundle.user_train.contains_key(user) {
                return Err(CorpusError::MalformedSplit {
                    path: dir.to_path_buf(),
                    message: format!("user {user} has a test entry but no training samples"),
                });
            }
        }
        Ok(bundle)
    }
}

pub(crate) fn write_jsonl<'a, T: Serialize + 'a>(path: &Path, rows: impl IntoIterator<Item = &'a T>) -> Result<(), CorpusError> {
    let file = File::create(path).map_err(|e| CorpusError::io(path, e))?;
    let mut out = BufWriter::new(file);
    for row in rows {
        serde_json::to_writer(&mut out, row)?;
        out.write_all(b"\n").map_err(|e| CorpusError::io(path, e))?;
    }
    out.flush().map_err(|e| CorpusError::io(path, e))
}

pub(crate) fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, CorpusError> {
    let file = File::open(path).map_err(|e| CorpusError::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CorpusError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(
            serde_json::from_str(&line)
                .map_err(|e| CorpusError::MalformedSplit { path: path.to_path_buf(), message: format!("line {}: {e}", i + 1) })?,
        );
    }
    Ok(rows)
}
