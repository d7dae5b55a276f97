//! Cross-validation, metrics, report tables and lexicon error analysis.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::annotation::{Class, LabeledDataset, LabeledItem};
use crate::classifiers::{
    train_linear, train_transformer, LinearConfig, Prediction, TrainingHyperparams,
    TransformerConfig,
};
use crate::error::{Error, Result};
use crate::features::{
    build_balanced_dataset, fit_tfidf, smote_upsample, transform, transform_all, BalanceSpec,
    BalanceStrategy, DEFAULT_SMOTE_K,
};
use crate::seed::{derive_seed, rng_from_seed};
use crate::stats::{mean, population_std};
use crate::text_prep::{encode, Vocab};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// Tallies `(predicted, actual)` pairs; the target class is positive.
    pub fn from_pairs<I: IntoIterator<Item = (Class, Class)>>(pairs: I) -> ConfusionMatrix {
        let mut cm = ConfusionMatrix::default();
        for (pred, actual) in pairs {
            match (pred.is_target(), actual.is_target()) {
                (true, true) => cm.tp += 1,
                (true, false) => cm.fp += 1,
                (false, true) => cm.fn_ += 1,
                (false, false) => cm.tn += 1,
            }
        }
        cm
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Accuracy, precision, recall and F1 for the target class.
///
/// Without actual positives, precision, recall and F1 are 0 when anything was
/// predicted positive and 1 when nothing was. With actual positives but no
/// true positives all three are 0.
pub fn metrics(cm: &ConfusionMatrix) -> Result<Metrics> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::EmptyConfusion);
    }
    let accuracy = (cm.tp + cm.tn) as f64 / total as f64;
    let (precision, recall, f1) = if cm.tp + cm.fn_ == 0 {
        if cm.fp > 0 {
            (0.0, 0.0, 0.0)
        } else {
            (1.0, 1.0, 1.0)
        }
    } else if cm.tp == 0 {
        (0.0, 0.0, 0.0)
    } else {
        let p = cm.tp as f64 / (cm.tp + cm.fp) as f64;
        let r = cm.tp as f64 / (cm.tp + cm.fn_) as f64;
        (p, r, 2.0 * p * r / (p + r))
    };
    Ok(Metrics {
        accuracy,
        precision,
        recall,
        f1,
    })
}

fn check_folds(n: usize, k: usize) -> Result<()> {
    if k < 2 {
        return Err(Error::Config(format!("k must be at least 2, got {k}")));
    }
    if n < k {
        return Err(Error::TooFewForFolds { n, k });
    }
    Ok(())
}

/// Random partition of `0..n` into `k` test folds whose sizes differ by at
/// most one. Each fold is sorted ascending.
pub fn kfold_split(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    check_folds(n, k)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_from_seed(seed));
    let mut folds = vec![Vec::with_capacity(n / k + 1); k];
    for (pos, i) in order.into_iter().enumerate() {
        folds[pos % k].push(i);
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}

/// Like [`kfold_split`] but deals each class round-robin, so class ratios are
/// preserved per fold while sizes still differ by at most one.
pub fn stratified_kfold_split(labels: &[Class], k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    check_folds(labels.len(), k)?;
    let mut rng = rng_from_seed(seed);
    let mut folds = vec![Vec::new(); k];
    let mut pos = 0;
    for class in [Class::NonTarget, Class::Target] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut rng);
        for i in idx {
            folds[pos % k].push(i);
            pos += 1;
        }
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold_index: usize,
    pub confusion: ConfusionMatrix,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub n_train: usize,
    /// Items added to the training split by upsampling.
    pub n_synthetic: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub epoch_losses: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    /// Population standard deviation over folds.
    pub std: f64,
}

impl MetricSummary {
    fn of(values: &[f64]) -> MetricSummary {
        MetricSummary {
            mean: mean(values).unwrap_or(f64::NAN),
            std: population_std(values).unwrap_or(f64::NAN),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub preprocessing: String,
    pub set_size: String,
    pub backend: String,
    pub k: usize,
    pub seed: u64,
    pub stratified: bool,
    pub std_convention: String,
    pub folds: Vec<FoldResult>,
    pub accuracy: MetricSummary,
    pub precision: MetricSummary,
    pub recall: MetricSummary,
    pub f1: MetricSummary,
}

impl EvaluationReport {
    pub fn from_folds(
        preprocessing: impl Into<String>,
        set_size: impl Into<String>,
        backend: impl Into<String>,
        seed: u64,
        stratified: bool,
        mut folds: Vec<FoldResult>,
    ) -> EvaluationReport {
        folds.sort_by_key(|f| f.fold_index);
        let col = |get: fn(&FoldResult) -> f64| {
            MetricSummary::of(&folds.iter().map(get).collect::<Vec<_>>())
        };
        EvaluationReport {
            preprocessing: preprocessing.into(),
            set_size: set_size.into(),
            backend: backend.into(),
            k: folds.len(),
            seed,
            stratified,
            std_convention: "population".into(),
            accuracy: col(|f| f.accuracy),
            precision: col(|f| f.precision),
            recall: col(|f| f.recall),
            f1: col(|f| f.f1),
            folds,
        }
    }

    /// Confusion matrix summed over folds.
    pub fn pooled_confusion(&self) -> ConfusionMatrix {
        self.folds
            .iter()
            .fold(ConfusionMatrix::default(), |acc, f| ConfusionMatrix {
                tp: acc.tp + f.confusion.tp,
                fp: acc.fp + f.confusion.fp,
                fn_: acc.fn_ + f.confusion.fn_,
                tn: acc.tn + f.confusion.tn,
            })
    }
}

fn cell(m: &MetricSummary) -> String {
    format!("{:.2} ({:.2})", m.mean, m.std)
}

/// Plain-text table with one row per report: preprocessing, set size, then
/// mean (population std) for each metric.
pub fn render_table(reports: &[EvaluationReport]) -> String {
    let header = [
        "Preprocessing",
        "G/PG items",
        "Accuracy",
        "Precision",
        "Recall",
        "F1",
    ];
    let rows: Vec<[String; 6]> = reports
        .iter()
        .map(|r| {
            [
                r.preprocessing.clone(),
                r.set_size.clone(),
                cell(&r.accuracy),
                cell(&r.precision),
                cell(&r.recall),
                cell(&r.f1),
            ]
        })
        .collect();
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for row in &rows {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.chars().count());
        }
    }
    let mut out = String::from("Means over folds, population standard deviation in parentheses.\n");
    let line = |cells: Vec<&str>, out: &mut String| {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, &w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
            .collect();
        let _ = writeln!(out, "{}", padded.join("  ").trim_end());
    };
    line(header.to_vec(), &mut out);
    let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
    line(rule.iter().map(String::as_str).collect(), &mut out);
    for row in &rows {
        line(row.iter().map(String::as_str).collect(), &mut out);
    }
    out
}

/// One held-out prediction, written alongside reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeldOutPrediction {
    pub fold: usize,
    pub post_id: String,
    pub label: Class,
    pub predicted: Class,
    pub score: f64,
}

/// Training split, test split and seed for one fold.
pub struct FoldInput<'a> {
    pub fold: usize,
    pub train: &'a [LabeledItem],
    pub test: &'a [LabeledItem],
    pub seed: u64,
    /// Upsample the target class of the training split to the majority count.
    pub upsample: bool,
    pub smote_k: usize,
}

#[derive(Debug, Clone, Default)]
pub struct FoldOutput {
    pub predictions: Vec<Prediction>,
    /// Ids of every item the model was trained on, duplicates included.
    pub training_ids: Vec<String>,
    /// Real post ids that training duplicates were copied from.
    pub duplicated_from: Vec<String>,
    pub n_synthetic: usize,
    pub epoch_losses: Vec<f64>,
}

/// A backend that trains on one split and predicts the other.
pub trait Trainer {
    fn backend(&self) -> &'static str;
    fn fit_predict(&self, input: &FoldInput<'_>) -> Result<FoldOutput>;
}

/// TF-IDF fitted on the training split plus logistic regression. Upsampling
/// adds SMOTE vectors.
#[derive(Debug, Clone, Default)]
pub struct LinearTrainer {
    pub config: LinearConfig,
}

impl Trainer for LinearTrainer {
    fn backend(&self) -> &'static str {
        "linear"
    }

    fn fit_predict(&self, input: &FoldInput<'_>) -> Result<FoldOutput> {
        let texts: Vec<&str> = input.train.iter().map(|i| i.text.as_str()).collect();
        let model = fit_tfidf(&texts)?;
        let mut vectors = transform_all(&model, &texts);
        let mut labels: Vec<Class> = input.train.iter().map(|i| i.label).collect();
        let mut n_synthetic = 0;
        if input.upsample {
            let minority: Vec<_> = vectors
                .iter()
                .zip(&labels)
                .filter(|(_, l)| l.is_target())
                .map(|(v, _)| v.clone())
                .collect();
            let majority = labels.len() - minority.len();
            if majority > minority.len() {
                let k = input.smote_k.min(minority.len().saturating_sub(1));
                let synthetic =
                    smote_upsample(&minority, majority, k, derive_seed(input.seed, "smote"))?;
                n_synthetic = synthetic.len();
                for s in synthetic {
                    vectors.push(s.vector);
                    labels.push(Class::Target);
                }
            }
        }
        let config = LinearConfig {
            seed: input.seed,
            ..self.config.clone()
        };
        let clf = train_linear(&vectors, &labels, &config)?;
        let test: Vec<_> = input
            .test
            .iter()
            .map(|i| transform(&model, &i.text))
            .collect();
        Ok(FoldOutput {
            predictions: clf.predict(&test)?,
            training_ids: input.train.iter().map(|i| i.post_id.clone()).collect(),
            duplicated_from: Vec::new(),
            n_synthetic,
            epoch_losses: Vec::new(),
        })
    }
}

/// Transformer over a fixed vocabulary. Upsampling duplicates the base texts
/// of SMOTE points.
#[derive(Debug, Clone)]
pub struct TransformerTrainer {
    pub config: TransformerConfig,
    pub hyperparams: TrainingHyperparams,
    pub vocab: Vocab,
}

impl Trainer for TransformerTrainer {
    fn backend(&self) -> &'static str {
        "transformer"
    }

    fn fit_predict(&self, input: &FoldInput<'_>) -> Result<FoldOutput> {
        let mut train: Vec<(String, String, Class, Option<String>)> = input
            .train
            .iter()
            .map(|i| (i.post_id.clone(), i.text.clone(), i.label, None))
            .collect();
        let mut n_synthetic = 0;
        let targets = input.train.iter().filter(|i| i.label.is_target()).count();
        if input.upsample && input.train.len() - targets > targets {
            let ds = LabeledDataset {
                items: input.train.to_vec(),
                ..LabeledDataset::default()
            };
            let spec = BalanceSpec {
                strategy: BalanceStrategy::Smote348_348,
                seed: input.seed,
                smote_k: input.smote_k,
            };
            let balanced = build_balanced_dataset(&ds, None, &spec)?;
            n_synthetic = balanced.provenance.n_synthetic;
            train = balanced
                .items
                .into_iter()
                .map(|i| (i.post_id, i.text, i.label, i.duplicate_of))
                .collect();
        }
        let seqs: Vec<_> = train
            .iter()
            .map(|t| encode(&t.1, &self.vocab, self.config.max_len))
            .collect();
        let labels: Vec<Class> = train.iter().map(|t| t.2).collect();
        let hp = TrainingHyperparams {
            seed: input.seed,
            ..self.hyperparams.clone()
        };
        let model = train_transformer(&seqs, &labels, &self.config, &hp)?;
        let test: Vec<_> = input
            .test
            .iter()
            .map(|i| encode(&i.text, &self.vocab, self.config.max_len))
            .collect();
        Ok(FoldOutput {
            predictions: model.predict(&test)?,
            duplicated_from: train.iter().filter_map(|t| t.3.clone()).collect(),
            training_ids: train.into_iter().map(|t| t.0).collect(),
            n_synthetic,
            epoch_losses: model.log.epoch_losses,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvOptions {
    pub k: usize,
    pub seed: u64,
    #[serde(default)]
    pub stratified: bool,
    /// SMOTE upsampling of each training split.
    #[serde(default)]
    pub upsample: bool,
    #[serde(default = "default_smote_k")]
    pub smote_k: usize,
    pub preprocessing: String,
    pub set_size: String,
}

fn default_smote_k() -> usize {
    DEFAULT_SMOTE_K
}

impl CvOptions {
    pub fn new(k: usize, seed: u64) -> CvOptions {
        CvOptions {
            k,
            seed,
            stratified: false,
            upsample: false,
            smote_k: DEFAULT_SMOTE_K,
            preprocessing: String::new(),
            set_size: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvOutcome {
    pub report: EvaluationReport,
    pub predictions: Vec<HeldOutPrediction>,
}

/// Fails when a training split contains a held-out post, either directly or
/// as the source of a duplicate.
pub fn check_no_leakage(test: &[LabeledItem], output: &FoldOutput) -> Result<()> {
    let test_ids: BTreeSet<&str> = test.iter().map(|i| i.post_id.as_str()).collect();
    let leaked: Vec<&String> = output
        .training_ids
        .iter()
        .chain(&output.duplicated_from)
        .filter(|id| test_ids.contains(id.as_str()))
        .collect();
    if let Some(id) = leaked.first() {
        return Err(Error::Validation(format!(
            "held-out post {id} reached the training split"
        )));
    }
    Ok(())
}

/// k-fold cross-validation. Upsampling happens inside each training split
/// only; held-out folds contain real items exclusively.
pub fn cross_validate(
    dataset: &LabeledDataset,
    trainer: &dyn Trainer,
    options: &CvOptions,
) -> Result<CvOutcome> {
    let labels: Vec<Class> = dataset.items.iter().map(|i| i.label).collect();
    crate::classifiers::check_both_classes(&labels)?;
    let split_seed = derive_seed(options.seed, "kfold");
    let folds = if options.stratified {
        stratified_kfold_split(&labels, options.k, split_seed)?
    } else {
        kfold_split(labels.len(), options.k, split_seed)?
    };
    let mut results = Vec::with_capacity(folds.len());
    let mut predictions = Vec::new();
    for (fold, test_idx) in folds.iter().enumerate() {
        let in_test: BTreeSet<usize> = test_idx.iter().copied().collect();
        let train: Vec<LabeledItem> = (0..labels.len())
            .filter(|i| !in_test.contains(i))
            .map(|i| dataset.items[i].clone())
            .collect();
        let test: Vec<LabeledItem> = test_idx.iter().map(|&i| dataset.items[i].clone()).collect();
        let input = FoldInput {
            fold,
            train: &train,
            test: &test,
            seed: derive_seed(options.seed, &format!("fold-{fold}")),
            upsample: options.upsample,
            smote_k: options.smote_k,
        };
        let wrap = |e: Error| Error::Fold {
            fold,
            source: Box::new(e),
        };
        let out = trainer.fit_predict(&input).map_err(wrap)?;
        check_no_leakage(&test, &out).map_err(wrap)?;
        if out.predictions.len() != test.len() {
            return Err(wrap(Error::BadInput(
                "trainer returned the wrong number of predictions".into(),
            )));
        }
        let cm = ConfusionMatrix::from_pairs(
            out.predictions
                .iter()
                .zip(&test)
                .map(|(p, t)| (p.label, t.label)),
        );
        let m = metrics(&cm).map_err(wrap)?;
        for (p, t) in out.predictions.iter().zip(&test) {
            predictions.push(HeldOutPrediction {
                fold,
                post_id: t.post_id.clone(),
                label: t.label,
                predicted: p.label,
                score: p.score,
            });
        }
        results.push(FoldResult {
            fold_index: fold,
            confusion: cm,
            accuracy: m.accuracy,
            precision: m.precision,
            recall: m.recall,
            f1: m.f1,
            n_train: out.training_ids.len()
                + if out.duplicated_from.is_empty() {
                    out.n_synthetic
                } else {
                    0
                },
            n_synthetic: out.n_synthetic,
            epoch_losses: out.epoch_losses,
        });
    }
    Ok(CvOutcome {
        report: EvaluationReport::from_folds(
            options.preprocessing.clone(),
            options.set_size.clone(),
            trainer.backend(),
            options.seed,
            options.stratified,
            results,
        ),
        predictions,
    })
}

/// Term groups for error analysis, e.g. `finance -> [money, loss]`.
pub type Lexicon = BTreeMap<String, Vec<String>>;

/// Groups built from the terms reported for the best model's errors.
pub fn reference_lexicon() -> Lexicon {
    let group = |terms: &[&str]| terms.iter().map(|t| t.to_string()).collect::<Vec<_>>();
    BTreeMap::from([
        ("finance".to_string(), group(&["money", "loss"])),
        (
            "banking".to_string(),
            group(&[
                "bank",
                "bank account",
                "bank details",
                "account",
                "account statement",
                "account number",
            ]),
        ),
        (
            "help".to_string(),
            group(&["problem", "problems", "help", "support", "warn"]),
        ),
        (
            "gambling_addiction".to_string(),
            group(&["gambling addiction"]),
        ),
        ("addiction".to_string(), group(&["addiction"])),
    ])
}

/// Reported occurrence rates for [`reference_lexicon`]: `(error kind, group,
/// rate)`.
pub const REFERENCE_RATES: [(&str, &str, f64); 5] = [
    ("false_positive", "finance", 0.54),
    ("false_positive", "banking", 0.29),
    ("false_positive", "help", 0.91),
    ("false_negative", "gambling_addiction", 0.36),
    ("false_negative", "addiction", 0.43),
];

/// Case-insensitive match of `term` in `text` at word boundaries.
pub fn contains_term(text: &str, term: &str) -> bool {
    let text = text.to_lowercase();
    let term = term.to_lowercase();
    if term.is_empty() {
        return false;
    }
    text.match_indices(&term).any(|(start, m)| {
        let before = text[..start].chars().next_back();
        let after = text[start + m.len()..].chars().next();
        !before.is_some_and(char::is_alphanumeric) && !after.is_some_and(char::is_alphanumeric)
    })
}

/// Texts grouped by outcome.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorBuckets {
    pub false_positives: Vec<String>,
    pub false_negatives: Vec<String>,
    #[serde(default)]
    pub true_positives: Vec<String>,
    #[serde(default)]
    pub true_negatives: Vec<String>,
}

impl ErrorBuckets {
    /// Sorts held-out predictions into buckets using the dataset texts.
    pub fn from_predictions(
        dataset: &LabeledDataset,
        predictions: &[HeldOutPrediction],
    ) -> Result<ErrorBuckets> {
        let texts: BTreeMap<&str, &str> = dataset
            .items
            .iter()
            .map(|i| (i.post_id.as_str(), i.text.as_str()))
            .collect();
        let mut b = ErrorBuckets::default();
        for p in predictions {
            let text = texts
                .get(p.post_id.as_str())
                .ok_or_else(|| Error::UnknownPost(p.post_id.clone()))?
                .to_string();
            match (p.predicted.is_target(), p.label.is_target()) {
                (true, true) => b.true_positives.push(text),
                (true, false) => b.false_positives.push(text),
                (false, true) => b.false_negatives.push(text),
                (false, false) => b.true_negatives.push(text),
            }
        }
        Ok(b)
    }

    fn kinds(&self) -> [(&'static str, &Vec<String>); 4] {
        [
            ("false_positive", &self.false_positives),
            ("false_negative", &self.false_negatives),
            ("true_positive", &self.true_positives),
            ("true_negative", &self.true_negatives),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRate {
    pub matches: usize,
    pub total: usize,
    /// Absent when the outcome class is empty.
    pub rate: Option<f64>,
}

/// `error kind -> group -> rate`.
pub type ErrorAnalysis = BTreeMap<String, BTreeMap<String, GroupRate>>;

/// Fraction of posts per outcome class containing at least one term of each
/// lexicon group.
pub fn error_analysis(buckets: &ErrorBuckets, lexicon: &Lexicon) -> Result<ErrorAnalysis> {
    if let Some((g, _)) = lexicon
        .iter()
        .find(|(_, terms)| terms.iter().all(|t| t.trim().is_empty()))
    {
        return Err(Error::Validation(format!("lexicon group {g} has no terms")));
    }
    let mut out = ErrorAnalysis::new();
    for (kind, texts) in buckets.kinds() {
        let groups = out.entry(kind.to_string()).or_default();
        for (group, terms) in lexicon {
            let matches = texts
                .iter()
                .filter(|t| terms.iter().any(|term| contains_term(t, term)))
                .count();
            groups.insert(
                group.clone(),
                GroupRate {
                    matches,
                    total: texts.len(),
                    rate: (!texts.is_empty()).then(|| matches as f64 / texts.len() as f64),
                },
            );
        }
    }
    Ok(out)
}
