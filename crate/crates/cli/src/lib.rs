//! `pgrisk` subcommands. Results go to stdout (or the named output files);
//! progress and errors go to stderr as one JSON object per line.
//!
//! | Exit code | Meaning |
//! |---|---|
//! | 0 | success |
//! | 1 | any other failure |
//! | 2 | bad command line |
//! | 3 | invalid configuration |
//! | 4 | missing input or I/O failure |
//! | 5 | invalid input data (malformed JSON, unknown criteria, label conflicts) |
//! | 6 | balancing failed (too few items or length gate never passed) |
//! | 7 | training or evaluation failed |

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use pgrisk::annotation::{
    annotation_summary, blind_export, build_training_set, AnnotationRecord, Class, CriteriaSchema,
    LabeledDataset,
};
use pgrisk::classifiers::{train_linear, train_transformer, LinearClassifier};
use pgrisk::corpus::{read_jsonl, write_jsonl, CorpusStore, RawAuthor, RawPost};
use pgrisk::evaluation::{
    error_analysis, reference_lexicon, ErrorBuckets, HeldOutPrediction, Lexicon,
};
use pgrisk::experiment::{
    balance_stage, read_dataset, rerun_manifest, run_experiment, write_dataset, Backend,
    ExperimentConfig, ExperimentReport, PredictionRecord, REPORT_FILE,
};
use pgrisk::features::{fit_tfidf, transform_all, BalanceStrategy, TfidfModel};
use pgrisk::sampling::{select_annotation_pool, AnnotationPool};
use pgrisk::seed::derive_seed;
use pgrisk::text_prep::{encode, preprocess, PreprocessPipeline};
use pgrisk::Error;
use serde::{Deserialize, Serialize};

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_IO: i32 = 4;
pub const EXIT_VALIDATION: i32 = 5;
pub const EXIT_BALANCE: i32 = 6;
pub const EXIT_TRAINING: i32 = 7;

#[derive(Debug, Parser)]
#[command(
    name = "pgrisk",
    version,
    about = "Problem-gambling post classification pipeline"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Import forum posts (JSONL or SQLite) into a corpus directory.
    Ingest(IngestArgs),
    /// Descriptive statistics of a corpus.
    Stats(StatsArgs),
    /// Choose addiction-board posts plus length-matched control posts.
    SelectPool(SelectPoolArgs),
    /// Write the shuffled annotation queue with ids and texts only.
    ExportBlind(ExportBlindArgs),
    /// Run the annotation service.
    Serve(ServeArgs),
    /// Validate exported annotation records and merge them into one file.
    ImportAnnotations(ImportArgs),
    /// Resolve labels into a training set, optionally balanced.
    BuildDataset(BuildDatasetArgs),
    /// Train one model on a whole dataset and save it.
    Train(TrainArgs),
    /// Cross-validate a configured experiment grid.
    Evaluate(EvaluateArgs),
    /// Lexicon rates among false positives, false negatives and correct predictions.
    ErrorAnalysis(ErrorAnalysisArgs),
    /// Print the results table of a finished run.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Corpus directory; created if missing, merged into otherwise.
    #[arg(long)]
    pub store: PathBuf,
    /// JSONL of raw posts.
    #[arg(long, required_unless_present = "sqlite")]
    pub posts: Option<PathBuf>,
    /// JSONL of raw authors.
    #[arg(long)]
    pub authors: Option<PathBuf>,
    /// SQLite dump with `post` and `author` tables.
    #[arg(long, conflicts_with_all = ["posts", "authors"])]
    pub sqlite: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub store: PathBuf,
}

#[derive(Debug, Args)]
pub struct SelectPoolArgs {
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long)]
    pub seed: u64,
    /// Pool file (JSON).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExportBlindArgs {
    /// Pool file written by `select-pool`.
    #[arg(long)]
    pub pool: PathBuf,
    #[arg(long)]
    pub seed: u64,
    /// Queue file (JSONL of `{id, text}`).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Service configuration (JSON).
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: SocketAddr,
}

#[derive(Debug, Args)]
pub struct ImportArgs {
    /// One or more JSONL exports from the service.
    #[arg(long = "input", required = true)]
    pub inputs: Vec<PathBuf>,
    /// Corpus directory; when given, every record must name a known post.
    #[arg(long)]
    pub store: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BuildDatasetArgs {
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long)]
    pub annotations: PathBuf,
    /// Balance with this strategy (subsample or imbalanced variants).
    #[arg(long)]
    pub strategy: Option<BalanceStrategy>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Labeled dataset (JSONL).
    #[arg(long)]
    pub dataset: PathBuf,
    /// Backend configuration (JSON with `"kind": "linear"` or `"transformer"`).
    #[arg(long)]
    pub backend: PathBuf,
    #[arg(long, default_value = "lowercase_only")]
    pub preprocessing: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory for the model files.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Experiment configuration (JSON).
    #[arg(
        long,
        required_unless_present = "manifest",
        conflicts_with = "manifest"
    )]
    pub config: Option<PathBuf>,
    /// Re-run the experiment recorded in a manifest.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, conflicts_with = "manifest")]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, conflicts_with = "manifest")]
    pub folds: Option<usize>,
    #[arg(long, conflicts_with = "manifest")]
    pub stratified: bool,
}

#[derive(Debug, Args)]
pub struct ErrorAnalysisArgs {
    /// Dataset whose texts are matched against the lexicon.
    #[arg(long)]
    pub dataset: PathBuf,
    /// `predictions.jsonl` from an evaluate run.
    #[arg(long)]
    pub predictions: PathBuf,
    /// Lexicon JSON (`{"group": ["term", ...]}`); the built-in lexicon otherwise.
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
    /// Row to analyse when the run holds several.
    #[arg(long)]
    pub preprocessing: Option<String>,
    #[arg(long)]
    pub strategy: Option<BalanceStrategy>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Output directory of an evaluate run.
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub json: bool,
}

/// Failure of a command: an exit code plus what to log.
#[derive(Debug)]
pub struct CliError {
    pub exit_code: i32,
    pub code: String,
    pub message: String,
}

impl From<Error> for CliError {
    fn from(e: Error) -> CliError {
        CliError {
            exit_code: exit_code(&e),
            code: e.code(),
            message: e.to_string(),
        }
    }
}

impl CliError {
    fn new(exit_code: i32, code: &str, message: impl Into<String>) -> CliError {
        CliError {
            exit_code,
            code: code.into(),
            message: message.into(),
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e.root() {
        Error::Config(_) => EXIT_CONFIG,
        Error::NotFound { .. } | Error::Io { .. } => EXIT_IO,
        Error::Validation(_)
        | Error::BadInput(_)
        | Error::UnknownPost(_)
        | Error::UnresolvedConflict(_)
        | Error::Json { .. }
        | Error::Sqlite(_) => EXIT_VALIDATION,
        Error::BalanceGateFailed { .. }
        | Error::InsufficientItems { .. }
        | Error::InsufficientPool { .. } => EXIT_BALANCE,
        Error::EmptyVocabulary
        | Error::TooFewMinority { .. }
        | Error::DegenerateLabels
        | Error::TooFewForFolds { .. }
        | Error::EmptyConfusion => EXIT_TRAINING,
        Error::Fold { .. } | Error::Stage { .. } => EXIT_OTHER,
    }
}

/// Writes one JSON log line to stderr.
pub fn log_event(event: &str, fields: serde_json::Value) {
    let mut obj = serde_json::Map::new();
    obj.insert("event".into(), event.into());
    if let serde_json::Value::Object(map) = fields {
        obj.extend(map);
    }
    eprintln!("{}", serde_json::Value::Object(obj));
}

pub fn run(cli: Cli) -> i32 {
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            log_event(
                "error",
                serde_json::json!({"code": e.code, "message": e.message}),
            );
            e.exit_code
        }
    }
}

type CmdResult = Result<(), CliError>;

fn dispatch(cmd: Command) -> CmdResult {
    match cmd {
        Command::Ingest(a) => ingest(a),
        Command::Stats(a) => stats(a),
        Command::SelectPool(a) => select_pool(a),
        Command::ExportBlind(a) => export_blind(a),
        Command::Serve(a) => serve(a),
        Command::ImportAnnotations(a) => import_annotations(a),
        Command::BuildDataset(a) => build_dataset(a),
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate(a),
        Command::ErrorAnalysis(a) => error_analysis_cmd(a),
        Command::Report(a) => report(a),
    }
}

fn print_json<T: Serialize>(value: &T) {
    println!(
        "{}",
        serde_json::to_string_pretty(value).expect("value serializes")
    );
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, Error> {
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound {
            path: path.display().to_string(),
        },
        _ => Error::Io {
            context: path.display().to_string(),
            source: e,
        },
    })?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Json {
        context: path.display().to_string(),
        source: e,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Error> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::Io {
            context: parent.display().to_string(),
            source: e,
        })?;
    }
    let mut bytes = serde_json::to_vec_pretty(value).expect("value serializes");
    bytes.push(b'\n');
    std::fs::write(path, bytes).map_err(|e| Error::Io {
        context: path.display().to_string(),
        source: e,
    })
}

fn load_or_new_store(dir: &Path) -> Result<CorpusStore, Error> {
    if dir.join("posts.jsonl").exists() {
        CorpusStore::load(dir)
    } else {
        Ok(CorpusStore::new())
    }
}

fn ingest(a: IngestArgs) -> CmdResult {
    let mut store = load_or_new_store(&a.store)?;
    let report = if let Some(db) = &a.sqlite {
        store.import_sqlite(db)?
    } else {
        let posts: Vec<RawPost> = read_jsonl(a.posts.as_deref().expect("clap requires posts"))?;
        let authors: Vec<RawAuthor> = match &a.authors {
            Some(p) => read_jsonl(p)?,
            None => Vec::new(),
        };
        store.ingest_raw(posts, authors)
    };
    store.save(&a.store)?;
    log_event(
        "ingest",
        serde_json::json!({"posts": report.n_posts, "rejected": report.n_rejected}),
    );
    print_json(&report);
    Ok(())
}

fn stats(a: StatsArgs) -> CmdResult {
    let store = CorpusStore::load(&a.store)?;
    print_json(&store.corpus_stats());
    Ok(())
}

fn select_pool(a: SelectPoolArgs) -> CmdResult {
    let store = CorpusStore::load(&a.store)?;
    let pool = select_annotation_pool(&store, derive_seed(a.seed, "select-pool"))?;
    write_json(&a.out, &pool)?;
    let summary = serde_json::json!({
        "target_pool": pool.target_pool.len(),
        "control_pool": pool.control_pool.len(),
        "balance_check": pool.balance_check,
    });
    log_event("select_pool", summary.clone());
    print_json(&summary);
    Ok(())
}

fn export_blind(a: ExportBlindArgs) -> CmdResult {
    let pool: AnnotationPool = read_json(&a.pool)?;
    let items = blind_export(&pool.all_posts(), derive_seed(a.seed, "export-blind"));
    write_jsonl(&a.out, &items)?;
    log_event("export_blind", serde_json::json!({"items": items.len()}));
    Ok(())
}

fn serve(a: ServeArgs) -> CmdResult {
    let cfg = pgrisk_service::ServiceConfig::load(&a.config)
        .map_err(|m| CliError::new(EXIT_CONFIG, "config", m))?;
    log_event("serve", serde_json::json!({"addr": a.addr.to_string()}));
    let rt = tokio::runtime::Runtime::new()
        .map_err(|e| CliError::new(EXIT_OTHER, "runtime", e.to_string()))?;
    rt.block_on(pgrisk_service::serve(cfg, a.addr))
        .map_err(|m| CliError::new(EXIT_IO, "serve", m))
}

fn import_annotations(a: ImportArgs) -> CmdResult {
    let schema = CriteriaSchema::standard();
    let store = a.store.as_deref().map(CorpusStore::load).transpose()?;
    let mut records: Vec<AnnotationRecord> = Vec::new();
    for path in &a.inputs {
        for r in read_jsonl::<AnnotationRecord>(path)? {
            schema.validate_record(&r)?;
            if let Some(s) = &store {
                if s.get(&r.post_id).is_none() {
                    return Err(Error::UnknownPost(r.post_id).into());
                }
            }
            // the same export imported twice must not double-count
            if !records.contains(&r) {
                records.push(r);
            }
        }
    }
    write_jsonl(&a.out, &records)?;
    let summary = annotation_summary(&schema, &records)?;
    log_event(
        "import_annotations",
        serde_json::json!({"records": records.len()}),
    );
    print_json(&summary);
    Ok(())
}

fn build_dataset(a: BuildDatasetArgs) -> CmdResult {
    let store = CorpusStore::load(&a.store)?;
    let records: Vec<AnnotationRecord> = read_jsonl(&a.annotations)?;
    let mut dataset = build_training_set(&CriteriaSchema::standard(), &records, &store)?;
    let mut balance = None;
    if let Some(strategy) = a.strategy {
        if strategy == BalanceStrategy::Smote348_348 {
            return Err(CliError::new(
                EXIT_CONFIG,
                "config",
                "smote upsampling happens inside training splits; use it with evaluate",
            ));
        }
        let (balanced, record) = balance_stage(
            &dataset,
            strategy,
            derive_seed(a.seed, &format!("balance-{}", strategy.name())),
        )?;
        dataset = balanced;
        balance = Some(record);
    }
    write_dataset(&a.out, &dataset)?;
    let summary = serde_json::json!({
        "items": dataset.items.len(),
        "target": dataset.count(Class::Target),
        "non_target": dataset.count(Class::NonTarget),
        "source_counts": dataset.provenance.source_counts,
        "balance": balance,
    });
    log_event("build_dataset", summary.clone());
    print_json(&summary);
    Ok(())
}

fn parse_pipeline(name: &str) -> Result<PreprocessPipeline, CliError> {
    serde_json::from_value(serde_json::Value::String(name.into())).map_err(|_| {
        CliError::new(
            EXIT_USAGE,
            "usage",
            format!("unknown preprocessing {name:?}; expected lowercase_only or lowercase_and_strip_punct"),
        )
    })
}

/// A saved linear model: the TF-IDF vocabulary plus the classifier.
#[derive(Debug, Serialize, Deserialize)]
pub struct LinearModelFile {
    pub preprocessing: PreprocessPipeline,
    pub tfidf: TfidfModel,
    pub classifier: LinearClassifier,
}

fn train(a: TrainArgs) -> CmdResult {
    let pipeline = parse_pipeline(&a.preprocessing)?;
    let backend: Backend = read_json(&a.backend).map_err(|e| match e {
        Error::Json { context, source } => Error::Config(format!("{context}: {source}")),
        other => other,
    })?;
    let dataset = read_dataset(&a.dataset)?;
    let texts: Vec<String> = dataset
        .items
        .iter()
        .map(|i| preprocess(&i.text, pipeline))
        .collect();
    let labels: Vec<Class> = dataset.items.iter().map(|i| i.label).collect();
    std::fs::create_dir_all(&a.out).map_err(|e| Error::Io {
        context: a.out.display().to_string(),
        source: e,
    })?;
    let seed = derive_seed(a.seed, "train");
    match &backend {
        Backend::Linear(cfg) => {
            let tfidf = fit_tfidf(&texts)?;
            let vectors = transform_all(&tfidf, &texts);
            let mut cfg = cfg.clone();
            cfg.seed = seed;
            let classifier = train_linear(&vectors, &labels, &cfg)?;
            write_json(
                &a.out.join("linear_model.json"),
                &LinearModelFile {
                    preprocessing: pipeline,
                    tfidf,
                    classifier,
                },
            )?;
        }
        Backend::Transformer(t) => {
            let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
            let vocab = t.vocabulary(&refs)?;
            let config = t.model_config(vocab.len());
            let seqs: Vec<_> = texts
                .iter()
                .map(|s| encode(s, &vocab, config.max_len))
                .collect();
            let mut hp = t.hyperparams.clone();
            hp.seed = seed;
            let model = train_transformer(&seqs, &labels, &config, &hp)?;
            model.save(&a.out.join("transformer.json"))?;
            vocab.save(&a.out.join("vocab.txt"))?;
            log_event(
                "train",
                serde_json::json!({"epoch_losses": model.log.epoch_losses}),
            );
        }
    }
    log_event(
        "train",
        serde_json::json!({"backend": backend.name(), "items": dataset.items.len()}),
    );
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> CmdResult {
    let mut sink = |name: &str, fields: serde_json::Value| log_event(name, fields);
    let report = if let Some(manifest) = &a.manifest {
        rerun_manifest(manifest, a.out.as_deref(), &mut sink)?
    } else {
        let mut cfg = ExperimentConfig::load(a.config.as_deref().expect("clap requires config"))?;
        if let Some(seed) = a.seed {
            cfg.seed = seed;
        }
        if let Some(out) = a.out {
            cfg.out_dir = out;
        }
        if let Some(k) = a.folds {
            cfg.folds = k;
        }
        cfg.stratified |= a.stratified;
        run_experiment(&cfg, &mut sink)?
    };
    print!("{}", report.table());
    Ok(())
}

fn error_analysis_cmd(a: ErrorAnalysisArgs) -> CmdResult {
    let dataset: LabeledDataset = read_dataset(&a.dataset)?;
    let records: Vec<PredictionRecord> = read_jsonl(&a.predictions)?;
    let lexicon: Lexicon = match &a.lexicon {
        Some(p) => read_json(p)?,
        None => reference_lexicon(),
    };
    let pipeline = a.preprocessing.as_deref().map(parse_pipeline).transpose()?;
    let selected: Vec<&PredictionRecord> = records
        .iter()
        .filter(|r| {
            pipeline.is_none_or(|p| r.preprocessing == p)
                && a.strategy.is_none_or(|s| r.strategy == s)
        })
        .collect();
    let mut rows: Vec<(PreprocessPipeline, BalanceStrategy)> = selected
        .iter()
        .map(|r| (r.preprocessing, r.strategy))
        .collect();
    rows.sort();
    rows.dedup();
    if rows.len() != 1 {
        return Err(CliError::new(
            EXIT_USAGE,
            "usage",
            format!(
                "predictions hold {} matching rows; pick one with --preprocessing and --strategy",
                rows.len()
            ),
        ));
    }
    let predictions: Vec<HeldOutPrediction> =
        selected.into_iter().map(|r| r.prediction.clone()).collect();
    let buckets = ErrorBuckets::from_predictions(&dataset, &predictions)?;
    let analysis = error_analysis(&buckets, &lexicon)?;
    print_json(&analysis);
    Ok(())
}

fn report(a: ReportArgs) -> CmdResult {
    let report: ExperimentReport = read_json(&a.run.join(REPORT_FILE))?;
    if a.json {
        print_json(&report);
    } else {
        print!("{}", report.table());
    }
    Ok(())
}
