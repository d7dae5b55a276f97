//! Configured experiment runs: load, balance, preprocess, cross-validate and
//! write report, predictions and manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::annotation::{
    build_training_set, AnnotationRecord, CriteriaSchema, LabeledDataset, LabeledItem,
};
use crate::classifiers::{LinearConfig, TrainingHyperparams, TransformerConfig};
use crate::corpus::{read_jsonl, write_jsonl, CorpusStore};
use crate::error::{Error, Result};
use crate::evaluation::{
    cross_validate, render_table, CvOptions, EvaluationReport, HeldOutPrediction, LinearTrainer,
    Trainer, TransformerTrainer,
};
use crate::features::{build_balanced_dataset, BalanceSpec, BalanceStrategy, DEFAULT_SMOTE_K};
use crate::seed::{derive_seed, fnv1a64};
use crate::text_prep::{preprocess, PreprocessPipeline, Vocab, DEFAULT_MAX_LEN};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerBackend {
    #[serde(default = "default_layers")]
    pub layers: usize,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    #[serde(default = "default_ff")]
    pub ff_dim: usize,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pretrained_weights: Option<PathBuf>,
    /// Fixed vocabulary (`vocab.txt`); built from the corpus when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab: Option<PathBuf>,
    #[serde(default = "default_vocab_size")]
    pub max_vocab: usize,
    #[serde(default)]
    pub hyperparams: TrainingHyperparams,
}

fn default_layers() -> usize {
    2
}
fn default_hidden() -> usize {
    64
}
fn default_heads() -> usize {
    2
}
fn default_ff() -> usize {
    256
}
fn default_max_len() -> usize {
    DEFAULT_MAX_LEN
}
fn default_vocab_size() -> usize {
    8000
}

impl Default for TransformerBackend {
    fn default() -> Self {
        TransformerBackend {
            layers: default_layers(),
            hidden: default_hidden(),
            heads: default_heads(),
            ff_dim: default_ff(),
            max_len: default_max_len(),
            pretrained_weights: None,
            vocab: None,
            max_vocab: default_vocab_size(),
            hyperparams: TrainingHyperparams::default(),
        }
    }
}

impl TransformerBackend {
    pub fn model_config(&self, vocab_size: usize) -> TransformerConfig {
        TransformerConfig {
            layers: self.layers,
            hidden: self.hidden,
            heads: self.heads,
            ff_dim: self.ff_dim,
            vocab_size,
            max_len: self.max_len,
            pretrained_weights: self.pretrained_weights.clone(),
        }
    }

    /// The configured vocabulary, or one built from `texts`.
    pub fn vocabulary(&self, texts: &[&str]) -> Result<Vocab> {
        match &self.vocab {
            Some(path) => Vocab::load(path),
            None => Ok(Vocab::from_corpus(texts.iter().copied(), 1, self.max_vocab)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Backend {
    Linear(LinearConfig),
    Transformer(TransformerBackend),
}

impl Backend {
    pub fn name(&self) -> &'static str {
        match self {
            Backend::Linear(_) => "linear",
            Backend::Transformer(_) => "transformer",
        }
    }
}

/// Where labeled data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// JSONL of labeled items (`post_id`, `text`, `label`).
    Dataset(PathBuf),
    /// A corpus directory plus annotation records.
    Annotated {
        corpus: PathBuf,
        annotations: PathBuf,
    },
}

/// One experiment, or a grid when several variants or strategies are given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub preprocessing: Vec<PreprocessPipeline>,
    pub strategies: Vec<BalanceStrategy>,
    pub backend: Backend,
    #[serde(default = "default_folds")]
    pub folds: usize,
    #[serde(default)]
    pub stratified: bool,
    #[serde(default = "default_smote_k")]
    pub smote_k: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
}

fn default_folds() -> usize {
    5
}
fn default_smote_k() -> usize {
    DEFAULT_SMOTE_K
}

impl ExperimentConfig {
    /// Reads a config file; relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let bytes = std::fs::read(path).map_err(|e| not_found_or_io(path, e))?;
        let mut cfg: ExperimentConfig = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new("")));
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        match &mut self.data {
            DataSource::Dataset(p) => *p = base.join(&*p),
            DataSource::Annotated {
                corpus,
                annotations,
            } => {
                *corpus = base.join(&*corpus);
                *annotations = base.join(&*annotations);
            }
        }
        if let Backend::Transformer(t) = &mut self.backend {
            t.vocab = t.vocab.as_ref().map(|p| base.join(p));
            t.pretrained_weights = t.pretrained_weights.as_ref().map(|p| base.join(p));
        }
        self.out_dir = base.join(&self.out_dir);
    }

    pub fn validate(&self) -> Result<()> {
        if self.preprocessing.is_empty() || self.strategies.is_empty() {
            return Err(Error::Config(
                "at least one preprocessing variant and strategy are required".into(),
            ));
        }
        if self.folds < 2 {
            return Err(Error::Config("folds must be at least 2".into()));
        }
        if self.smote_k == 0 {
            return Err(Error::Config("smote_k must be positive".into()));
        }
        match &self.backend {
            Backend::Linear(c) => {
                if c.epochs == 0 || c.learning_rate <= 0.0 || c.l2 < 0.0 {
                    return Err(Error::Config(
                        "linear backend needs epochs > 0, lr > 0, l2 >= 0".into(),
                    ));
                }
            }
            Backend::Transformer(t) => {
                t.model_config(8).validate()?;
                t.hyperparams.validate()?;
            }
        }
        Ok(())
    }

    /// Seeds handed to each stage, recorded in the manifest.
    pub fn stage_seeds(&self) -> BTreeMap<String, u64> {
        let mut seeds = BTreeMap::new();
        for s in &self.strategies {
            seeds.insert(
                format!("balance:{}", s.name()),
                derive_seed(self.seed, &format!("balance-{}", s.name())),
            );
        }
        seeds.insert(
            "cross_validate".into(),
            derive_seed(self.seed, "cross-validate"),
        );
        seeds
    }
}

fn not_found_or_io(path: &Path, e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::NotFound {
        Error::NotFound {
            path: path.display().to_string(),
        }
    } else {
        Error::io(path.display().to_string(), e)
    }
}

pub fn read_dataset(path: &Path) -> Result<LabeledDataset> {
    if !path.exists() {
        return Err(Error::NotFound {
            path: path.display().to_string(),
        });
    }
    let items: Vec<LabeledItem> = read_jsonl(path)?;
    Ok(LabeledDataset {
        items,
        ..LabeledDataset::default()
    })
}

pub fn write_dataset(path: &Path, dataset: &LabeledDataset) -> Result<()> {
    write_jsonl(path, &dataset.items)
}

/// Loads the labeled data named by `source`; errors come back in the
/// `ingest` stage.
pub fn load_source(source: &DataSource) -> Result<(LabeledDataset, u64)> {
    let run = || -> Result<(LabeledDataset, u64)> {
        match source {
            DataSource::Dataset(path) => {
                let ds = read_dataset(path)?;
                Ok((ds, fingerprint_file(path)?))
            }
            DataSource::Annotated {
                corpus,
                annotations,
            } => {
                let store = CorpusStore::load(corpus)?;
                if !annotations.exists() {
                    return Err(Error::NotFound {
                        path: annotations.display().to_string(),
                    });
                }
                let records: Vec<AnnotationRecord> = read_jsonl(annotations)?;
                let ds = build_training_set(&CriteriaSchema::standard(), &records, &store)?;
                let fp = fingerprint_file(&corpus.join("posts.jsonl"))?
                    ^ fingerprint_file(annotations)?.rotate_left(1);
                Ok((ds, fp))
            }
        }
    };
    run().map_err(|e| e.in_stage("ingest"))
}

fn fingerprint_file(path: &Path) -> Result<u64> {
    let bytes = std::fs::read(path).map_err(|e| not_found_or_io(path, e))?;
    Ok(fnv1a64(&bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceRecord {
    pub strategy: BalanceStrategy,
    pub set_size: String,
    pub attempts: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub welch_p: Option<f64>,
    pub upsampled_in_training_splits: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRow {
    pub preprocessing: PreprocessPipeline,
    pub balance: BalanceRecord,
    pub report: EvaluationReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub backend: String,
    pub seed: u64,
    pub folds: usize,
    pub rows: Vec<ExperimentRow>,
}

impl ExperimentReport {
    pub fn table(&self) -> String {
        let reports: Vec<EvaluationReport> = self.rows.iter().map(|r| r.report.clone()).collect();
        render_table(&reports)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub manifest_version: u32,
    pub tool_version: String,
    pub config: ExperimentConfig,
    pub stage_seeds: BTreeMap<String, u64>,
    /// FNV-1a hash of the input files, as hex.
    pub input_fingerprint: String,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Manifest> {
        let bytes = std::fs::read(path).map_err(|e| not_found_or_io(path, e))?;
        serde_json::from_slice(&bytes)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub preprocessing: PreprocessPipeline,
    pub strategy: BalanceStrategy,
    #[serde(flatten)]
    pub prediction: HeldOutPrediction,
}

pub const REPORT_FILE: &str = "report.json";
pub const TABLE_FILE: &str = "report.txt";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const STATUS_FILE: &str = "status.json";

/// Progress events: `(event name, details)`.
pub type EventSink<'a> = &'a mut dyn FnMut(&str, serde_json::Value);

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes =
        serde_json::to_vec_pretty(value).map_err(|e| Error::json(path.display().to_string(), e))?;
    bytes.push(b'\n');
    std::fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Runs every (preprocessing, strategy) combination and writes
/// `report.json`, `report.txt`, `predictions.jsonl`, `manifest.json` and
/// `status.json` into the output directory. On failure the status file
/// marks the outputs incomplete and names the error.
pub fn run_experiment(
    config: &ExperimentConfig,
    events: EventSink<'_>,
) -> Result<ExperimentReport> {
    config.validate()?;
    std::fs::create_dir_all(&config.out_dir)
        .map_err(|e| Error::io(config.out_dir.display().to_string(), e))?;
    let status_path = config.out_dir.join(STATUS_FILE);
    write_json(&status_path, &serde_json::json!({"status": "incomplete"}))?;
    match run_inner(config, events) {
        Ok(report) => {
            write_json(&status_path, &serde_json::json!({"status": "complete"}))?;
            Ok(report)
        }
        Err(e) => {
            write_json(
                &status_path,
                &serde_json::json!({"status": "incomplete", "error": e.code(), "detail": e.to_string()}),
            )?;
            Err(e)
        }
    }
}

fn run_inner(config: &ExperimentConfig, events: EventSink<'_>) -> Result<ExperimentReport> {
    let (dataset, fingerprint) = load_source(&config.data)?;
    events(
        "ingest",
        serde_json::json!({"items": dataset.items.len(), "fingerprint": format!("{fingerprint:016x}")}),
    );
    let manifest = Manifest {
        manifest_version: MANIFEST_VERSION,
        tool_version: env!("CARGO_PKG_VERSION").into(),
        config: config.clone(),
        stage_seeds: config.stage_seeds(),
        input_fingerprint: format!("{fingerprint:016x}"),
    };
    write_json(&config.out_dir.join(MANIFEST_FILE), &manifest)?;

    let mut rows = Vec::new();
    let mut predictions = Vec::new();
    for &strategy in &config.strategies {
        let balance_seed = manifest.stage_seeds[&format!("balance:{}", strategy.name())];
        let (subset, record) =
            balance_stage(&dataset, strategy, balance_seed).map_err(|e| e.in_stage("balance"))?;
        events(
            "balance",
            serde_json::json!({"strategy": strategy.name(), "set_size": record.set_size, "attempts": record.attempts}),
        );
        for &pipeline in &config.preprocessing {
            let processed = LabeledDataset {
                items: subset
                    .items
                    .iter()
                    .map(|i| LabeledItem {
                        text: preprocess(&i.text, pipeline),
                        ..i.clone()
                    })
                    .collect(),
                provenance: subset.provenance.clone(),
            };
            let trainer =
                build_trainer(&config.backend, &processed).map_err(|e| e.in_stage("train"))?;
            let mut options = CvOptions::new(config.folds, manifest.stage_seeds["cross_validate"]);
            options.stratified = config.stratified;
            options.upsample = record.upsampled_in_training_splits;
            options.smote_k = config.smote_k;
            options.preprocessing = pipeline.display_name().into();
            options.set_size = record.set_size.clone();
            let outcome = cross_validate(&processed, trainer.as_ref(), &options)
                .map_err(|e| e.in_stage("evaluate"))?;
            events(
                "evaluate",
                serde_json::json!({
                    "preprocessing": pipeline,
                    "strategy": strategy.name(),
                    "f1_mean": outcome.report.f1.mean,
                }),
            );
            predictions.extend(outcome.predictions.into_iter().map(|p| PredictionRecord {
                preprocessing: pipeline,
                strategy,
                prediction: p,
            }));
            rows.push(ExperimentRow {
                preprocessing: pipeline,
                balance: record.clone(),
                report: outcome.report,
            });
        }
    }
    let report = ExperimentReport {
        backend: config.backend.name().into(),
        seed: config.seed,
        folds: config.folds,
        rows,
    };
    write_json(&config.out_dir.join(REPORT_FILE), &report)?;
    std::fs::write(config.out_dir.join(TABLE_FILE), report.table())
        .map_err(|e| Error::io(config.out_dir.display().to_string(), e))?;
    write_jsonl(&config.out_dir.join(PREDICTIONS_FILE), &predictions)?;
    Ok(report)
}

/// Subsample variants select real posts before cross-validation; the SMOTE
/// variant keeps every post and upsamples inside each training split.
pub fn balance_stage(
    dataset: &LabeledDataset,
    strategy: BalanceStrategy,
    seed: u64,
) -> Result<(LabeledDataset, BalanceRecord)> {
    let spec = BalanceSpec::new(strategy, seed);
    if strategy == BalanceStrategy::Smote348_348 {
        let n_non = dataset.count(crate::annotation::Class::NonTarget);
        let n_target = dataset.count(crate::annotation::Class::Target);
        let (a, b) = strategy.class_counts(n_non, n_target);
        return Ok((
            dataset.clone(),
            BalanceRecord {
                strategy,
                set_size: format!("{a}/{b}"),
                attempts: 0,
                welch_p: None,
                upsampled_in_training_splits: true,
            },
        ));
    }
    let balanced = build_balanced_dataset(dataset, None, &spec)?;
    let items = balanced
        .items
        .into_iter()
        .map(|i| LabeledItem {
            post_id: i.post_id,
            text: i.text,
            label: i.label,
        })
        .collect();
    Ok((
        LabeledDataset {
            items,
            provenance: dataset.provenance.clone(),
        },
        BalanceRecord {
            strategy,
            set_size: balanced.provenance.set_size,
            attempts: balanced.provenance.attempts,
            welch_p: balanced.provenance.welch.map(|w| w.p),
            upsampled_in_training_splits: false,
        },
    ))
}

pub fn build_trainer(backend: &Backend, dataset: &LabeledDataset) -> Result<Box<dyn Trainer>> {
    Ok(match backend {
        Backend::Linear(c) => Box::new(LinearTrainer { config: c.clone() }),
        Backend::Transformer(t) => {
            let texts: Vec<&str> = dataset.items.iter().map(|i| i.text.as_str()).collect();
            let vocab = t.vocabulary(&texts)?;
            Box::new(TransformerTrainer {
                config: t.model_config(vocab.len()),
                hyperparams: t.hyperparams.clone(),
                vocab,
            })
        }
    })
}

/// Re-runs the experiment recorded in a manifest, optionally into another
/// output directory.
pub fn rerun_manifest(
    path: &Path,
    out_dir: Option<&Path>,
    events: EventSink<'_>,
) -> Result<ExperimentReport> {
    let manifest = Manifest::load(path)?;
    if manifest.manifest_version != MANIFEST_VERSION {
        return Err(Error::Config(format!(
            "unsupported manifest version {}",
            manifest.manifest_version
        )));
    }
    let mut config = manifest.config;
    if let Some(out) = out_dir {
        config.out_dir = out.to_path_buf();
    }
    run_experiment(&config, events)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::confound_corpus;

    fn config(dir: &Path, data: PathBuf) -> ExperimentConfig {
        ExperimentConfig {
            data: DataSource::Dataset(data),
            preprocessing: PreprocessPipeline::ALL.to_vec(),
            strategies: BalanceStrategy::ALL.to_vec(),
            backend: Backend::Linear(LinearConfig {
                epochs: 60,
                ..LinearConfig::default()
            }),
            folds: 5,
            stratified: false,
            smote_k: 5,
            seed: 7,
            out_dir: dir.join("out"),
        }
    }

    #[test]
    fn grid_has_ten_rows_and_reruns_identically() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = confound_corpus(150, 1);
        // make the classes imbalanced so every strategy differs
        ds.items.retain(|i| {
            i.label == crate::annotation::Class::NonTarget || i.post_id.as_str() < "s0100"
        });
        let data = dir.path().join("data.jsonl");
        write_dataset(&data, &ds).unwrap();
        let cfg = config(dir.path(), data);
        let report = run_experiment(&cfg, &mut |_, _| {}).unwrap();
        assert_eq!(report.rows.len(), 10);
        let first = std::fs::read(cfg.out_dir.join(REPORT_FILE)).unwrap();
        let again = dir.path().join("again");
        rerun_manifest(
            &cfg.out_dir.join(MANIFEST_FILE),
            Some(&again),
            &mut |_, _| {},
        )
        .unwrap();
        assert_eq!(first, std::fs::read(again.join(REPORT_FILE)).unwrap());
        let status: serde_json::Value =
            serde_json::from_slice(&std::fs::read(cfg.out_dir.join(STATUS_FILE)).unwrap()).unwrap();
        assert_eq!(status["status"], "complete");
    }

    #[test]
    fn missing_corpus_is_an_ingest_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = config(dir.path(), dir.path().join("nope.jsonl"));
        let err = run_experiment(&cfg, &mut |_, _| {}).unwrap_err();
        assert_eq!(err.code(), "ingest:not_found");
        let status: serde_json::Value =
            serde_json::from_slice(&std::fs::read(cfg.out_dir.join(STATUS_FILE)).unwrap()).unwrap();
        assert_eq!(status["status"], "incomplete");
    }

    #[test]
    fn config_round_trips_through_json() {
        let cfg = config(Path::new("/tmp"), PathBuf::from("d.jsonl"));
        let json = serde_json::to_string(&cfg).unwrap();
        assert_eq!(
            serde_json::from_str::<ExperimentConfig>(&json).unwrap(),
            cfg
        );
        let t: Backend = serde_json::from_str(r#"{"kind":"transformer","layers":1}"#).unwrap();
        assert!(matches!(
            t,
            Backend::Transformer(TransformerBackend {
                layers: 1,
                hidden: 64,
                ..
            })
        ));
    }
}
