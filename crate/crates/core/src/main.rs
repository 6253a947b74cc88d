use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Mutex;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};

use fewshot_rec::corpus::{self, InputFormat, InteractionStore, SplitBundle, SplitConfig, SplitOrder};
use fewshot_rec::directrec::{CandidatePolicy, InjectionMode, RankerKind};
use fewshot_rec::embedsvc::{self, ControlOptions, Embedder, EmbeddingPair, Merge, RemoteEmbedder, Variant, VariantSource};
use fewshot_rec::harness::{self, ExperimentConfig, Inputs, ReportFormat, Settings, Task, Workspace};
use fewshot_rec::http::{self, HttpError};
use fewshot_rec::interact::ClassifierKind;
use fewshot_rec::neuralcore::OptimizerConfig;
use fewshot_rec::promptgen::{self, PromptConfig};
use fewshot_rec::repgen::{self, Backend, ChatBackend, GenerationConfig, HttpChatBackend, ResponseCache};
use fewshot_rec::semdist;
use fewshot_rec::stub::{Recording, StubServer};

#[derive(Parser)]
#[command(name = "fewshot-rec", version, about = "Few-shot recommendation with generated user and item representations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load a CSV or JSONL review dump into an interaction store.
    Ingest {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value = "csv")]
        format: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cohort sampling, leave-two-out and few-shot capping.
    Split {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        cohort: usize,
        #[arg(long)]
        cap: usize,
        #[arg(long = "item-cap")]
        item_cap: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Put the most recent interaction in validation instead of test.
        #[arg(long)]
        validation_last: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build user and item prompts from the splits.
    GenPrompts {
        #[arg(long)]
        splits: PathBuf,
        /// Prompt wording; the built-in wording when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Turn prompts into textual representations.
    GenReps(GenRepsArgs),
    /// Embed representations or raw reviews into one variant.
    Embed(EmbedArgs),
    /// Mean distances between two variants' vectors.
    Distances {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Interaction prediction with one classifier.
    TrainInteract {
        #[arg(long)]
        emb: PathBuf,
        #[arg(long)]
        splits: PathBuf,
        #[arg(long)]
        model: ClassifierKind,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Direct recommendation with one ranker and one mode.
    TrainRank {
        #[arg(long)]
        emb: Option<PathBuf>,
        #[arg(long)]
        splits: PathBuf,
        #[arg(long)]
        model: RankerKind,
        #[arg(long, default_value = "fixed")]
        mode: InjectionMode,
        #[arg(long, value_delimiter = ',', default_value = "10,100")]
        k: Vec<usize>,
        #[arg(long, default_value = "full")]
        candidates: CandidatePolicy,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Run a full experiment grid from a JSON config.
    Report {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// json, csv or markdown; guessed from the extension otherwise.
        #[arg(long)]
        format: Option<ReportFormat>,
    },
    /// Replay recorded chat and embedding responses over HTTP.
    StubServer {
        #[arg(long)]
        recording: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8089")]
        addr: String,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, default_value_t = 10)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum GenBackend {
    Remote,
    Offline,
}

#[derive(Args)]
struct GenRepsArgs {
    #[arg(long)]
    prompts: PathBuf,
    #[arg(long, value_enum)]
    backend: GenBackend,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    model: Option<String>,
    /// Response cache directory; reruns only pay for missing subjects.
    #[arg(long)]
    cache: Option<PathBuf>,
    /// Append every remote answer to this recording for later replay.
    #[arg(long)]
    record: Option<PathBuf>,
    /// Re-ask once when an answer misses a labeled field.
    #[arg(long)]
    strict: bool,
    #[arg(long, default_value_t = 4)]
    max_in_flight: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum EmbedBackend {
    Remote,
    Fallback,
}

#[derive(Args)]
struct EmbedArgs {
    /// Representations; required for rep+ variants.
    #[arg(long)]
    reps: Option<PathBuf>,
    #[arg(long)]
    splits: PathBuf,
    #[arg(long)]
    variant: Variant,
    #[arg(long, value_enum)]
    backend: EmbedBackend,
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long, default_value = "text-embedding")]
    model: String,
    #[arg(long, default_value_t = embedsvc::DEFAULT_CHUNK_LIMIT)]
    chunk_limit: usize,
    #[arg(long, default_value = "mean")]
    merge: String,
    #[arg(long)]
    out: PathBuf,
}

/// Chat backend that keeps every answer it relays.
struct Recorder<'a> {
    inner: &'a dyn ChatBackend,
    recording: Mutex<Recording>,
}

impl ChatBackend for Recorder<'_> {
    fn model_name(&self) -> &str {
        self.inner.model_name()
    }

    fn complete(&self, prompt: &str) -> Result<Option<String>, HttpError> {
        let answer = self.inner.complete(prompt)?;
        if let Some(content) = &answer {
            self.recording.lock().unwrap().record_chat(prompt, content);
        }
        Ok(answer)
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn gen_reps(args: GenRepsArgs) -> Result<()> {
    let prompts = repgen::load_prompts(&args.prompts)?;
    let mut cfg =
        GenerationConfig { cache_dir: args.cache.clone(), strict: args.strict, max_in_flight: args.max_in_flight, ..Default::default() };
    if let Some(e) = args.endpoint {
        cfg.endpoint = e;
    }
    if let Some(m) = args.model {
        cfg.model = m;
    }
    let outcome = match args.backend {
        GenBackend::Offline => repgen::generate_all(&prompts, &Backend::Offline, &cfg),
        GenBackend::Remote => {
            let api_key = http::api_key_from_env();
            if api_key.is_none() {
                warn!("{} is not set; sending requests without a bearer token", http::API_KEY_ENV);
            }
            let chat = HttpChatBackend::new(&cfg, api_key);
            let cache = args.cache.as_deref().map(ResponseCache::open).transpose()?;
            match &args.record {
                None => repgen::generate_all(&prompts, &Backend::Remote { chat: &chat, cache: cache.as_ref() }, &cfg),
                Some(path) => {
                    let existing = if path.exists() { Recording::load(path)? } else { Recording::default() };
                    let recorder = Recorder { inner: &chat, recording: Mutex::new(existing) };
                    let out = repgen::generate_all(&prompts, &Backend::Remote { chat: &recorder, cache: cache.as_ref() }, &cfg);
                    recorder.recording.into_inner().unwrap().save(path)?;
                    out
                }
            }
        }
    };
    repgen::save_representations(&args.out, &outcome.representations)?;
    if !outcome.deferred.is_empty() {
        let path = args.out.with_extension("deferred.json");
        write_json(&path, &outcome.deferred)?;
        bail!("{} subjects deferred (listed in {}); rerun to retry them", outcome.deferred.len(), path.display());
    }
    Ok(())
}

fn embed(args: EmbedArgs) -> Result<()> {
    let splits = SplitBundle::load(&args.splits)?;
    let embedder = match args.backend {
        EmbedBackend::Fallback => Embedder::HashFallback,
        EmbedBackend::Remote => {
            let endpoint = args.endpoint.context("--endpoint is required for the remote backend")?;
            Embedder::Remote(RemoteEmbedder::new(&endpoint, &args.model))
        }
    };
    let merge: Merge = serde_json::from_value(serde_json::Value::String(args.merge.clone()))
        .with_context(|| format!("unknown merge {:?} (mean, sum or max)", args.merge))?;
    let opts = ControlOptions { chunk_limit: args.chunk_limit, merge, normalize: None };
    let reps;
    let source = if args.variant.uses_representations() {
        let path = args.reps.context("--reps is required for representation variants")?;
        reps = repgen::load_representations(&path)?;
        VariantSource::Representations(&reps)
    } else {
        VariantSource::RawReviews
    };
    let out = embedsvc::build_variant(&splits, &source, &embedder, args.variant, &opts)?;
    out.pair.save(&args.out)?;
    if !out.missing.is_empty() {
        for (kind, id, why) in &out.missing {
            warn!("{kind} {id}: {why}");
        }
        bail!("{} subjects have no vector", out.missing.len());
    }
    Ok(())
}

fn settings(task: Task, model: &str, run: &RunArgs) -> Settings {
    let mut optimizer = OptimizerConfig::default();
    if let Some(e) = run.epochs {
        optimizer.epochs = e;
    }
    if let Some(lr) = run.lr {
        optimizer.learning_rate = lr;
    }
    Settings { task, models: vec![model.to_string()], repetitions: run.reps, base_seed: run.seed, optimizer, ..Default::default() }
}

fn variant_label(dir: &Path) -> Result<String> {
    Ok(EmbeddingPair::load(dir)?.variant().to_string())
}

fn run_and_write(cfg: ExperimentConfig, out: &Path, format: ReportFormat) -> Result<bool> {
    let ws = Workspace::load(cfg)?;
    let report = ws.run()?;
    harness::emit_report(&report, format, out)?;
    for c in &report.cells {
        info!("{} / {} / {}: {:?} ({} diverged)", c.key.model, c.key.variant, c.key.mode, c.mean, c.diverged);
    }
    Ok(report.all_completed())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Ingest { input, format, out } => {
            let format: InputFormat = format.parse()?;
            let (store, report) = corpus::ingest(&input, format)?;
            store.save(&out)?;
            info!("loaded {} rows ({} malformed, {} duplicates)", report.loaded, report.malformed, report.duplicates);
            write_json(&out.with_extension("ingest.json"), &report)?;
        }
        Command::Split { store, cohort, cap, item_cap, seed, validation_last, out } => {
            let store = InteractionStore::load(&store)?;
            let order = if validation_last { SplitOrder::ValidationLast } else { SplitOrder::TestLast };
            let cfg = SplitConfig { cohort, user_cap: cap, item_cap, seed, order };
            let (bundle, report) = corpus::build_splits(&store, &cfg)?;
            bundle.save(&out)?;
            write_json(&out.join("split_report.json"), &report)?;
        }
        Command::GenPrompts { splits, config, out } => {
            let cfg = match config {
                Some(p) => PromptConfig::load(&p)?,
                None => PromptConfig::default(),
            };
            let prompts = promptgen::build_all_prompts(&SplitBundle::load(&splits)?, &cfg)?;
            repgen::save_prompts(&out, &prompts)?;
        }
        Command::GenReps(args) => gen_reps(args)?,
        Command::Embed(args) => embed(args)?,
        Command::Distances { a, b, out } => {
            let (a, b) = (EmbeddingPair::load(&a)?, EmbeddingPair::load(&b)?);
            let users = semdist::compare_sets(&a.users, &b.users)?;
            let items = semdist::compare_sets(&a.items, &b.items)?;
            print!("{}", semdist::render_summary(&users, &items));
            write_json(&out, &BTreeMap::from([("users", users), ("items", items)]))?;
        }
        Command::TrainInteract { emb, splits, model, run } => {
            let label = variant_label(&emb)?;
            let cfg = ExperimentConfig {
                inputs: Inputs { splits, store: None, embeddings: BTreeMap::from([(label, emb)]) },
                settings: settings(Task::Interact, model.as_str(), &run),
            };
            return run_and_write(cfg, &run.out, ReportFormat::from_path(&run.out));
        }
        Command::TrainRank { emb, splits, model, mode, k, candidates, run } => {
            let mut settings = settings(Task::Rank, model.as_str(), &run);
            settings.ks = k;
            settings.candidates = candidates;
            let embeddings = match (emb, mode == InjectionMode::RANDOM) {
                (Some(dir), false) => {
                    settings.modes = vec![mode];
                    BTreeMap::from([(variant_label(&dir)?, dir)])
                }
                (Some(dir), true) => {
                    // The variant only fixes the baseline width.
                    settings.modes = Vec::new();
                    settings.random_dim = Some(EmbeddingPair::load(&dir)?.dim());
                    BTreeMap::new()
                }
                (None, false) => bail!("--emb is required for mode {mode}"),
                (None, true) => bail!("--emb is required to size the random tables"),
            };
            let cfg = ExperimentConfig { inputs: Inputs { splits, store: None, embeddings }, settings };
            return run_and_write(cfg, &run.out, ReportFormat::from_path(&run.out));
        }
        Command::Report { config, out, format } => {
            let cfg = ExperimentConfig::load(&config)?;
            return run_and_write(cfg, &out, format.unwrap_or_else(|| ReportFormat::from_path(&out)));
        }
        Command::StubServer { recording, addr } => {
            let server = StubServer::replay_on(&addr, Recording::load(&recording)?)?;
            println!("{}", server.endpoint());
            server.wait();
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("some cells did not complete");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
