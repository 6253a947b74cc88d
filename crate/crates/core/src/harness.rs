//! Experiment grid: variants × models × modes, seeded repetitions,
//! aggregation against a random-embedding baseline, and report output.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::corpus::{CorpusError, SplitBundle};
use crate::directrec::{self, CandidatePolicy, Init, InjectionMode, RankConfig, RankError, RankerKind, RANDOM_INIT_BOUND};
use crate::embedsvc::{EmbedError, EmbeddingPair, EmbeddingSet, Provenance};
use crate::interact::{self, ClassifierKind, InteractError, PairSets};
use crate::neuralcore::OptimizerConfig;
use crate::promptgen::SubjectKind;
use crate::semdist::compensated_sum;

/// Improvements at or above this percentage are highlighted.
pub const HIGHLIGHT_PCT: f64 = 200.0;

/// Variant and mode label of the random-embedding baseline cells.
pub const BASELINE: &str = "random";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error("missing input {0}")]
    MissingInput(PathBuf),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Interact,
    Rank,
}

/// Input locations. Relative paths resolve against the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Inputs {
    pub splits: PathBuf,
    /// Interaction store; only checked for existence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub store: Option<PathBuf>,
    /// Variant label → embedding directory.
    #[serde(default)]
    pub embeddings: BTreeMap<String, PathBuf>,
}

/// Everything that shapes the numbers in a report. Echoed into it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Settings {
    pub task: Task,
    pub models: Vec<String>,
    /// Ranking modes besides the baseline. Ignored for interaction
    /// prediction, where embeddings are plain inputs.
    pub modes: Vec<InjectionMode>,
    pub repetitions: usize,
    pub base_seed: u64,
    pub ks: Vec<usize>,
    pub candidates: CandidatePolicy,
    pub optimizer: OptimizerConfig,
    /// Model name → partial optimizer JSON merged over `optimizer`.
    pub overrides: BTreeMap<String, Value>,
    /// Baseline table width; defaults to the first variant's width.
    pub random_dim: Option<usize>,
    pub neg_per_pos: usize,
    pub bpr_lambda: f64,
    pub item_bias: bool,
    /// Redraw interaction-prediction negatives per repetition instead of
    /// once per experiment.
    pub resample_negatives: bool,
    /// Store wall-clock seconds per repetition. Off by default so that
    /// reports are byte-reproducible.
    pub record_timing: bool,
}

impl Default for Settings {
    fn default() -> Self {
        let rank = RankConfig::default();
        Settings {
            task: Task::Rank,
            models: Vec::new(),
            modes: vec![InjectionMode::FIXED, InjectionMode::FINE_TUNED],
            repetitions: 10,
            base_seed: 0,
            ks: vec![10, 100],
            candidates: CandidatePolicy::Full,
            optimizer: OptimizerConfig::default(),
            overrides: BTreeMap::new(),
            random_dim: None,
            neg_per_pos: rank.neg_per_pos,
            bpr_lambda: rank.bpr_lambda,
            item_bias: rank.item_bias,
            resample_negatives: false,
            record_timing: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(flatten)]
    pub inputs: Inputs,
    #[serde(flatten)]
    pub settings: Settings,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Classifier(ClassifierKind),
    Ranker(RankerKind),
}

impl ModelKind {
    pub fn parse(task: Task, name: &str) -> Result<Self, HarnessError> {
        match task {
            Task::Interact => ClassifierKind::from_str(name).map(ModelKind::Classifier).map_err(|e| HarnessError::Config(e.to_string())),
            Task::Rank => RankerKind::from_str(name).map(ModelKind::Ranker).map_err(|e| HarnessError::Config(e.to_string())),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Classifier(k) => k.as_str(),
            ModelKind::Ranker(k) => k.as_str(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(|source| HarnessError::Io { path: path.to_path_buf(), source })?;
        let mut cfg: ExperimentConfig = serde_json::from_str(&text)?;
        if let Some(base) = path.parent() {
            cfg.resolve_relative(base);
        }
        Ok(cfg)
    }

    pub fn resolve_relative(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.inputs.splits);
        if let Some(s) = self.inputs.store.as_mut() {
            fix(s);
        }
        self.inputs.embeddings.values_mut().for_each(fix);
    }

    pub fn models(&self) -> Result<Vec<ModelKind>, HarnessError> {
        self.settings.models.iter().map(|m| ModelKind::parse(self.settings.task, m)).collect()
    }

    /// Optimizer settings for `model`, with its override merged in.
    pub fn optimizer_for(&self, model: &str) -> Result<OptimizerConfig, HarnessError> {
        let Some(patch) = self.settings.overrides.get(model) else {
            return Ok(self.settings.optimizer.clone());
        };
        let Value::Object(patch) = patch else {
            return Err(HarnessError::Config(format!("override for {model} is not an object")));
        };
        let mut merged = serde_json::to_value(&self.settings.optimizer)?;
        let obj = merged.as_object_mut().expect("struct serializes to an object");
        for (k, v) in patch {
            if !obj.contains_key(k) {
                return Err(HarnessError::Config(format!("override for {model}: unknown optimizer field {k:?}")));
            }
            obj.insert(k.clone(), v.clone());
        }
        Ok(serde_json::from_value(merged)?)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let s = &self.settings;
        let bad = |m: String| Err(HarnessError::Config(m));
        if s.repetitions < 1 {
            return bad("repetitions must be >= 1".into());
        }
        let models = self.models()?;
        if models.is_empty() {
            return bad("no models configured".into());
        }
        for name in s.overrides.keys() {
            if !s.models.contains(name) {
                return bad(format!("override for unconfigured model {name:?}"));
            }
        }
        for m in &s.models {
            self.optimizer_for(m)?.validate().map_err(|e| HarnessError::Config(format!("{m}: {e}")))?;
        }
        if s.task == Task::Rank {
            if s.ks.is_empty() || s.ks.contains(&0) {
                return bad("ks must be non-empty and >= 1".into());
            }
            if s.modes.contains(&InjectionMode::RANDOM) {
                return bad("the random mode is the implicit baseline; list only fixed / fine-tuned".into());
            }
        }
        if self.inputs.embeddings.is_empty() && s.random_dim.is_none() {
            return bad("no embedding variants and no random_dim".into());
        }
        if self.inputs.embeddings.contains_key(BASELINE) {
            return bad(format!("variant label {BASELINE:?} is reserved for the baseline"));
        }
        for p in [&self.inputs.splits].into_iter().chain(&self.inputs.store).chain(self.inputs.embeddings.values()) {
            if !p.exists() {
                return Err(HarnessError::MissingInput(p.clone()));
            }
        }
        Ok(())
    }
}

/// One row of the grid.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellKey {
    pub model: String,
    pub variant: String,
    pub mode: String,
}

impl CellKey {
    pub fn is_baseline(&self) -> bool {
        self.variant == BASELINE
    }
}

/// Baseline first, then every variant (× mode when ranking), per model.
pub fn grid(cfg: &ExperimentConfig) -> Result<Vec<CellKey>, HarnessError> {
    let mut cells = Vec::new();
    for model in cfg.models()? {
        let key = |variant: &str, mode: &str| CellKey { model: model.name().into(), variant: variant.into(), mode: mode.into() };
        cells.push(key(BASELINE, BASELINE));
        for variant in cfg.inputs.embeddings.keys() {
            match cfg.settings.task {
                Task::Interact => cells.push(key(variant, "input")),
                Task::Rank => cells.extend(cfg.settings.modes.iter().map(|m| key(variant, m.name()))),
            }
        }
    }
    Ok(cells)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepResult {
    pub seed: u64,
    /// Empty when the repetition produced no usable metrics.
    pub metrics: BTreeMap<String, f64>,
    pub diverged: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub divergence: Option<String>,
    /// A non-divergence failure; the cell then counts as incomplete.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seconds: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    #[serde(flatten)]
    pub key: CellKey,
    pub reps: Vec<RepResult>,
    /// Means over the repetitions that produced metrics.
    pub mean: BTreeMap<String, f64>,
    /// Repetitions contributing to `mean`.
    pub contributing: usize,
    pub diverged: usize,
    pub failed: usize,
    /// 100 × mean / baseline mean, per metric; absent when the baseline is
    /// zero or missing.
    pub improvement: BTreeMap<String, f64>,
}

impl CellReport {
    pub fn completed(&self) -> bool {
        self.failed == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub settings: Settings,
    pub variants: Vec<String>,
    /// Column order for presentation.
    pub metric_names: Vec<String>,
    pub cells: Vec<CellReport>,
}

impl RunReport {
    pub fn all_completed(&self) -> bool {
        self.cells.iter().all(CellReport::completed)
    }

    pub fn cell(&self, model: &str, variant: &str, mode: &str) -> Option<&CellReport> {
        self.cells.iter().find(|c| c.key.model == model && c.key.variant == variant && c.key.mode == mode)
    }
}

pub fn metric_names(task: Task, ks: &[usize]) -> Vec<String> {
    match task {
        Task::Interact => ["accuracy", "precision", "f1"].map(String::from).to_vec(),
        Task::Rank => {
            let mut ks = ks.to_vec();
            ks.sort_unstable();
            ks.dedup();
            let hr = ks.iter().map(|k| format!("hr@{k}"));
            hr.chain(ks.iter().map(|k| format!("mrr@{k}"))).collect()
        }
    }
}

/// Ratio percentage of a cell over its baseline.
pub fn improvement_pct(cell: f64, baseline: f64) -> Option<f64> {
    (baseline != 0.0 && baseline.is_finite() && cell.is_finite()).then(|| 100.0 * cell / baseline)
}

pub fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| compensated_sum(values.iter().copied()) / values.len() as f64)
}

/// Per-metric means over the repetitions that carry metrics.
pub fn aggregate(key: CellKey, reps: Vec<RepResult>, names: &[String]) -> CellReport {
    let usable: Vec<&RepResult> = reps.iter().filter(|r| !r.metrics.is_empty()).collect();
    let mean = names
        .iter()
        .filter_map(|n| {
            let values: Vec<f64> = usable.iter().filter_map(|r| r.metrics.get(n).copied()).collect();
            (values.len() == usable.len()).then(|| mean(&values)).flatten().map(|m| (n.clone(), m))
        })
        .collect();
    CellReport {
        key,
        contributing: usable.len(),
        diverged: reps.iter().filter(|r| r.diverged).count(),
        failed: reps.iter().filter(|r| r.error.is_some()).count(),
        reps,
        mean,
        improvement: BTreeMap::new(),
    }
}

/// Fills every cell's improvement against its model's baseline cell.
pub fn attach_improvements(cells: &mut [CellReport]) {
    let baselines: BTreeMap<String, BTreeMap<String, f64>> =
        cells.iter().filter(|c| c.key.is_baseline()).map(|c| (c.key.model.clone(), c.mean.clone())).collect();
    for cell in cells.iter_mut() {
        let Some(base) = baselines.get(&cell.key.model) else { continue };
        cell.improvement =
            cell.mean.iter().filter_map(|(n, &v)| base.get(n).and_then(|&b| improvement_pct(v, b)).map(|p| (n.clone(), p))).collect();
    }
}

/// Uniform random vectors for every cohort user and catalog item, in the
/// same range as random ranking tables.
pub fn random_embeddings(splits: &SplitBundle, dim: usize, seed: u64) -> Result<EmbeddingPair, EmbedError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let provenance = Provenance { embedder: format!("uniform:{RANDOM_INIT_BOUND}"), chunk_limit: None, merge: None };
    let variant = crate::embedsvc::Variant::RepBert;
    let mut users = EmbeddingSet::with_dim(variant, SubjectKind::User, dim, provenance.clone());
    let mut items = EmbeddingSet::with_dim(variant, SubjectKind::Item, dim, provenance);
    let draw = |rng: &mut ChaCha8Rng| (0..dim).map(|_| rng.gen_range(-RANDOM_INIT_BOUND..RANDOM_INIT_BOUND)).collect::<Vec<f64>>();
    for u in splits.users() {
        users.insert(u, draw(&mut rng))?;
    }
    for i in splits.items() {
        items.insert(i, draw(&mut rng))?;
    }
    Ok(EmbeddingPair { users, items })
}

/// Subjects of `splits` without a vector in `emb`.
pub fn coverage_gaps(splits: &SplitBundle, emb: &EmbeddingPair) -> Vec<String> {
    let mut gaps: Vec<String> = splits.users().filter(|u| emb.users.get(u).is_none()).map(|u| format!("user:{u}")).collect();
    gaps.extend(splits.items().filter(|i| emb.items.get(i).is_none()).map(|i| format!("item:{i}")));
    gaps
}

/// Loaded inputs shared by every job.
pub struct Workspace {
    pub cfg: ExperimentConfig,
    pub splits: SplitBundle,
    pub embeddings: BTreeMap<String, EmbeddingPair>,
    pub random_dim: usize,
    /// Negatives drawn once per experiment, per variant.
    fixed_pairs: BTreeMap<String, PairSets>,
}

impl Workspace {
    /// Loads and checks all inputs. Nothing trains before this succeeds.
    pub fn load(cfg: ExperimentConfig) -> Result<Self, HarnessError> {
        cfg.validate()?;
        let splits = SplitBundle::load(&cfg.inputs.splits)?;
        let mut embeddings = BTreeMap::new();
        for (name, dir) in &cfg.inputs.embeddings {
            embeddings.insert(name.clone(), EmbeddingPair::load(dir)?);
        }
        Workspace::new(cfg, splits, embeddings)
    }

    /// As [`Workspace::load`] with inputs already in memory. Paths in `cfg`
    /// are not consulted.
    pub fn new(cfg: ExperimentConfig, splits: SplitBundle, embeddings: BTreeMap<String, EmbeddingPair>) -> Result<Self, HarnessError> {
        if splits.test.is_empty() {
            return Err(HarnessError::Config("splits have no test users".into()));
        }
        for (name, emb) in &embeddings {
            let gaps = coverage_gaps(&splits, emb);
            if !gaps.is_empty() {
                let shown: Vec<&str> = gaps.iter().take(5).map(String::as_str).collect();
                return Err(HarnessError::Config(format!("variant {name} misses {} subjects, e.g. {shown:?}", gaps.len())));
            }
        }
        let random_dim = match (cfg.settings.random_dim, embeddings.values().next()) {
            (Some(d), _) => d,
            (None, Some(e)) => e.dim(),
            (None, None) => return Err(HarnessError::Config("no embedding variants and no random_dim".into())),
        };
        if random_dim == 0 {
            return Err(HarnessError::Config("random_dim must be >= 1".into()));
        }
        let mut fixed_pairs = BTreeMap::new();
        if cfg.settings.task == Task::Interact && !cfg.settings.resample_negatives {
            for (name, emb) in &embeddings {
                let pairs = interact::build_pairs(&splits, emb, cfg.settings.base_seed)
                    .map_err(|e| HarnessError::Config(format!("{name}: {e}")))?;
                fixed_pairs.insert(name.clone(), pairs);
            }
        }
        Ok(Workspace { cfg, splits, embeddings, random_dim, fixed_pairs })
    }

    /// Runs one repetition of one cell. Depends only on the key and seed.
    pub fn run_rep(&self, key: &CellKey, rep: usize) -> RepResult {
        let seed = self.cfg.settings.base_seed.wrapping_add(rep as u64);
        let start = Instant::now();
        let mut out = match self.try_rep(key, seed) {
            Ok(r) => r,
            Err(e) => RepResult { seed, metrics: BTreeMap::new(), diverged: false, divergence: None, error: Some(e), seconds: None },
        };
        if self.cfg.settings.record_timing {
            out.seconds = Some(start.elapsed().as_secs_f64());
        }
        out
    }

    fn try_rep(&self, key: &CellKey, seed: u64) -> Result<RepResult, String> {
        let s = &self.cfg.settings;
        let mut optimizer = self.cfg.optimizer_for(&key.model).map_err(|e| e.to_string())?;
        optimizer.seed = seed;
        let done = |metrics, divergence: Option<String>| RepResult {
            seed,
            metrics,
            diverged: divergence.is_some(),
            divergence,
            error: None,
            seconds: None,
        };
        match ModelKind::parse(s.task, &key.model).map_err(|e| e.to_string())? {
            ModelKind::Classifier(kind) => {
                let random;
                let emb = if key.is_baseline() {
                    random = random_embeddings(&self.splits, self.random_dim, seed).map_err(|e| e.to_string())?;
                    &random
                } else {
                    &self.embeddings[&key.variant]
                };
                let drawn;
                let pairs = match self.fixed_pairs.get(&key.variant) {
                    Some(p) => p,
                    None => {
                        let neg_seed = if s.resample_negatives { seed } else { s.base_seed };
                        drawn = interact::build_pairs(&self.splits, emb, neg_seed).map_err(|e: InteractError| e.to_string())?;
                        &drawn
                    }
                };
                let r = interact::train_eval_classifier(kind, pairs, &optimizer).map_err(|e| e.to_string())?;
                let m = &r.metrics;
                let metrics = [("accuracy", m.accuracy), ("precision", m.precision), ("f1", m.f1)]
                    .into_iter()
                    .map(|(n, v)| (n.to_string(), v))
                    .collect();
                Ok(done(metrics, r.divergence))
            }
            ModelKind::Ranker(kind) => {
                let cfg = RankConfig { optimizer, bpr_lambda: s.bpr_lambda, neg_per_pos: s.neg_per_pos, item_bias: s.item_bias };
                let (init, mode) = if key.is_baseline() {
                    (Init::Random { dim: self.random_dim, seed }, InjectionMode::RANDOM)
                } else {
                    (Init::Injected(&self.embeddings[&key.variant]), InjectionMode::from_str(&key.mode).map_err(|e| e.to_string())?)
                };
                let mut model = directrec::init_model(kind, &self.splits, init, mode, &cfg, seed).map_err(|e| e.to_string())?;
                match directrec::train(&mut model, &self.splits, &cfg) {
                    Ok(_) => {}
                    Err(RankError::Diverged { epoch, loss, .. }) => {
                        log::warn!("{} / {} / {} diverged at epoch {epoch}", key.model, key.variant, key.mode);
                        return Ok(done(BTreeMap::new(), Some(format!("epoch {epoch}: loss {loss}"))));
                    }
                    Err(e) => return Err(e.to_string()),
                }
                let eval = directrec::evaluate(&model, &self.splits, s.candidates, &s.ks, seed).map_err(|e| e.to_string())?;
                let mut metrics = BTreeMap::new();
                for k in &eval.metrics.ks {
                    metrics.insert(format!("hr@{k}"), eval.metrics.hr[k]);
                    metrics.insert(format!("mrr@{k}"), eval.metrics.mrr[k]);
                }
                Ok(done(metrics, None))
            }
        }
    }

    /// Runs every cell of `cells` and assembles the report. Jobs run on the
    /// rayon pool; results are collected in grid order.
    pub fn run_cells(&self, cells: &[CellKey]) -> RunReport {
        let reps = self.cfg.settings.repetitions;
        let jobs: Vec<(usize, usize)> = (0..cells.len()).flat_map(|c| (0..reps).map(move |r| (c, r))).collect();
        let results: Vec<RepResult> = jobs.par_iter().map(|&(c, r)| self.run_rep(&cells[c], r)).collect();
        let names = metric_names(self.cfg.settings.task, &self.cfg.settings.ks);
        let mut results = results.into_iter();
        let mut reports: Vec<CellReport> =
            cells.iter().map(|key| aggregate(key.clone(), results.by_ref().take(reps).collect(), &names)).collect();
        attach_improvements(&mut reports);
        RunReport {
            settings: self.cfg.settings.clone(),
            variants: self.embeddings.keys().cloned().collect(),
            metric_names: names,
            cells: reports,
        }
    }

    pub fn run(&self) -> Result<RunReport, HarnessError> {
        Ok(self.run_cells(&grid(&self.cfg)?))
    }
}

pub fn run_experiment(cfg: ExperimentConfig) -> Result<RunReport, HarnessError> {
    Workspace::load(cfg)?.run()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
    Markdown,
}

impl ReportFormat {
    /// Guesses from the extension; anything unknown is JSON.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => ReportFormat::Csv,
            Some("md" | "markdown") => ReportFormat::Markdown,
            _ => ReportFormat::Json,
        }
    }
}

impl FromStr for ReportFormat {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            other => Err(HarnessError::Config(format!("unknown report format {other:?}"))),
        }
    }
}

pub fn render_json(report: &RunReport) -> Result<String, HarnessError> {
    Ok(serde_json::to_string_pretty(report)? + "\n")
}

/// One row per cell; means and improvements unrounded.
pub fn render_csv(report: &RunReport) -> Result<String, HarnessError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = ["model", "variant", "mode", "reps", "contributing", "diverged", "failed"].map(String::from).to_vec();
    for n in &report.metric_names {
        header.push(format!("mean_{n}"));
        header.push(format!("improvement_{n}"));
    }
    w.write_record(&header)?;
    for c in &report.cells {
        let mut row = vec![
            c.key.model.clone(),
            c.key.variant.clone(),
            c.key.mode.clone(),
            c.reps.len().to_string(),
            c.contributing.to_string(),
            c.diverged.to_string(),
            c.failed.to_string(),
        ];
        for n in &report.metric_names {
            row.push(c.mean.get(n).map(f64::to_string).unwrap_or_default());
            row.push(c.improvement.get(n).map(f64::to_string).unwrap_or_default());
        }
        w.write_record(&row)?;
    }
    let bytes = w.into_inner().map_err(|e| HarnessError::Io { path: PathBuf::from("<csv>"), source: e.into_error() })?;
    Ok(String::from_utf8(bytes).expect("csv of utf-8 fields"))
}

/// Table with values to three decimals and ratio percentages beside them.
pub fn render_markdown(report: &RunReport) -> String {
    let mut out = String::new();
    let mut header = vec!["Model".to_string(), "Variant".into(), "Mode".into()];
    header.extend(report.metric_names.iter().map(|n| display_metric(n)));
    header.push("Reps".into());
    header.push("Diverged".into());
    let _ = writeln!(out, "| {} |", header.join(" | "));
    let _ = writeln!(out, "|{}", "---|".repeat(header.len()));
    for c in &report.cells {
        let mut row = vec![c.key.model.clone(), c.key.variant.clone(), c.key.mode.clone()];
        for n in &report.metric_names {
            row.push(match (c.mean.get(n), c.improvement.get(n)) {
                (None, _) => "n/a".into(),
                (Some(v), None) => format!("{v:.3}"),
                (Some(v), Some(p)) if *p >= HIGHLIGHT_PCT => format!("{v:.3} **{p:.0}%**"),
                (Some(v), Some(p)) => format!("{v:.3} {p:.0}%"),
            });
        }
        row.push(format!("{}/{}", c.contributing, c.reps.len()));
        row.push(if c.failed > 0 { format!("{} (+{} failed)", c.diverged, c.failed) } else { c.diverged.to_string() });
        let _ = writeln!(out, "| {} |", row.join(" | "));
    }
    out
}

fn display_metric(name: &str) -> String {
    match name {
        "accuracy" => "Accuracy".into(),
        "precision" => "Precision".into(),
        "f1" => "F1".into(),
        other => other.replacen("hr", "HR", 1).replacen("mrr", "MRR", 1),
    }
}

pub fn render(report: &RunReport, format: ReportFormat) -> Result<String, HarnessError> {
    match format {
        ReportFormat::Json => render_json(report),
        ReportFormat::Csv => render_csv(report),
        ReportFormat::Markdown => Ok(render_markdown(report)),
    }
}

pub fn emit_report(report: &RunReport, format: ReportFormat, path: &Path) -> Result<(), HarnessError> {
    let text = render(report, format)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|source| HarnessError::Io { path: dir.to_path_buf(), source })?;
    }
    fs::write(path, text).map_err(|source| HarnessError::Io { path: path.to_path_buf(), source })
}
