//! TF-IDF vectorization, SMOTE and the dataset-size variants.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::annotation::{Class, LabeledDataset, LabeledItem};
use crate::error::{Error, Result};
use crate::sampling::{length_weighted_indices, SampleSpec, BALANCE_ALPHA};
use crate::seed::{derive_seed, rng_from_seed};
use crate::stats::{welch_t_test, WelchResult};
use crate::tokenize::word_token_count;

/// Sparse vector with sorted, unique indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseVector {
    #[serde(rename = "i")]
    pub indices: Vec<u32>,
    #[serde(rename = "v")]
    pub values: Vec<f64>,
    #[serde(rename = "d")]
    pub dim: usize,
}

impl SparseVector {
    pub fn zeros(dim: usize) -> SparseVector {
        SparseVector {
            indices: Vec::new(),
            values: Vec::new(),
            dim,
        }
    }

    pub fn from_dense(dense: &[f64]) -> SparseVector {
        let (indices, values) = dense
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0.0)
            .map(|(i, &v)| (i as u32, v))
            .unzip();
        SparseVector {
            indices,
            values,
            dim: dense.len(),
        }
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (&i, &v) in self.indices.iter().zip(&self.values) {
            out[i as usize] = v;
        }
        out
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn get(&self, index: u32) -> f64 {
        self.indices
            .binary_search(&index)
            .map(|pos| self.values[pos])
            .unwrap_or(0.0)
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &SparseVector) -> f64 {
        let (mut a, mut b, mut acc) = (0, 0, 0.0);
        while a < self.indices.len() && b < other.indices.len() {
            match self.indices[a].cmp(&other.indices[b]) {
                std::cmp::Ordering::Less => a += 1,
                std::cmp::Ordering::Greater => b += 1,
                std::cmp::Ordering::Equal => {
                    acc += self.values[a] * other.values[b];
                    a += 1;
                    b += 1;
                }
            }
        }
        acc
    }

    /// `self + t * (other - self)`, dropping exact zeros.
    pub fn lerp(&self, other: &SparseVector, t: f64) -> SparseVector {
        let (mut a, mut b) = (0, 0);
        let mut indices = Vec::with_capacity(self.nnz().max(other.nnz()));
        let mut values = Vec::with_capacity(indices.capacity());
        let mut push = |i: u32, x: f64, y: f64| {
            let v = x + t * (y - x);
            if v != 0.0 {
                indices.push(i);
                values.push(v);
            }
        };
        while a < self.nnz() || b < other.nnz() {
            let ia = self.indices.get(a).copied().unwrap_or(u32::MAX);
            let ib = other.indices.get(b).copied().unwrap_or(u32::MAX);
            if ia < ib {
                push(ia, self.values[a], 0.0);
                a += 1;
            } else if ib < ia {
                push(ib, 0.0, other.values[b]);
                b += 1;
            } else {
                push(ia, self.values[a], other.values[b]);
                a += 1;
                b += 1;
            }
        }
        SparseVector {
            indices,
            values,
            dim: self.dim,
        }
    }

    pub fn squared_distance(&self, other: &SparseVector) -> f64 {
        let (mut a, mut b, mut acc) = (0, 0, 0.0);
        while a < self.nnz() || b < other.nnz() {
            let ia = self.indices.get(a).copied().unwrap_or(u32::MAX);
            let ib = other.indices.get(b).copied().unwrap_or(u32::MAX);
            let d = if ia < ib {
                a += 1;
                self.values[a - 1]
            } else if ib < ia {
                b += 1;
                other.values[b - 1]
            } else {
                a += 1;
                b += 1;
                self.values[a - 1] - other.values[b - 1]
            };
            acc += d * d;
        }
        acc
    }
}

/// Smoothed TF-IDF: `idf(t) = ln((1 + N) / (1 + df(t))) + 1`, rows
/// L2-normalized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TfidfModel {
    pub vocabulary: BTreeMap<String, u32>,
    pub idf: Vec<f64>,
    pub l2_norm: bool,
}

impl TfidfModel {
    pub fn dim(&self) -> usize {
        self.idf.len()
    }

    pub fn idf_of(&self, term: &str) -> Option<f64> {
        self.vocabulary.get(term).map(|&i| self.idf[i as usize])
    }
}

/// Terms are whitespace-delimited; column indices follow lexicographic order.
pub fn fit_tfidf<S: AsRef<str>>(corpus: &[S]) -> Result<TfidfModel> {
    let mut df: BTreeMap<&str, usize> = BTreeMap::new();
    for doc in corpus {
        let mut terms: Vec<&str> = doc.as_ref().split_whitespace().collect();
        terms.sort_unstable();
        terms.dedup();
        for t in terms {
            *df.entry(t).or_default() += 1;
        }
    }
    if df.is_empty() {
        return Err(Error::EmptyVocabulary);
    }
    let n = corpus.len() as f64;
    let mut vocabulary = BTreeMap::new();
    let mut idf = Vec::with_capacity(df.len());
    for (i, (term, count)) in df.into_iter().enumerate() {
        vocabulary.insert(term.to_string(), i as u32);
        idf.push(((1.0 + n) / (1.0 + count as f64)).ln() + 1.0);
    }
    Ok(TfidfModel {
        vocabulary,
        idf,
        l2_norm: true,
    })
}

pub fn transform(model: &TfidfModel, text: &str) -> SparseVector {
    let mut counts: BTreeMap<u32, f64> = BTreeMap::new();
    for term in text.split_whitespace() {
        if let Some(&i) = model.vocabulary.get(term) {
            *counts.entry(i).or_default() += 1.0;
        }
    }
    let (indices, mut values): (Vec<u32>, Vec<f64>) = counts
        .into_iter()
        .map(|(i, c)| (i, c * model.idf[i as usize]))
        .unzip();
    if model.l2_norm {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            values.iter_mut().for_each(|v| *v /= norm);
        }
    }
    SparseVector {
        indices,
        values,
        dim: model.dim(),
    }
}

pub fn transform_all<S: AsRef<str>>(model: &TfidfModel, texts: &[S]) -> Vec<SparseVector> {
    texts.iter().map(|t| transform(model, t.as_ref())).collect()
}

/// A SMOTE point together with the draw that produced it:
/// `vector = minority[base] + gap * (minority[neighbor] - minority[base])`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticPoint {
    pub vector: SparseVector,
    pub base: usize,
    pub neighbor: usize,
    pub gap: f64,
}

pub const DEFAULT_SMOTE_K: usize = 5;

/// `k` nearest neighbours of every point (Euclidean, excluding itself); ties
/// go to the lower index.
pub fn nearest_neighbors(points: &[SparseVector], k: usize) -> Vec<Vec<usize>> {
    (0..points.len())
        .map(|i| {
            let mut d: Vec<(f64, usize)> = (0..points.len())
                .filter(|&j| j != i)
                .map(|j| (points[i].squared_distance(&points[j]), j))
                .collect();
            d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            d.into_iter().take(k).map(|(_, j)| j).collect()
        })
        .collect()
}

/// Emits `target_count - minority.len()` synthetic points. Real points are
/// never modified.
pub fn smote_upsample(
    minority: &[SparseVector],
    target_count: usize,
    k: usize,
    seed: u64,
) -> Result<Vec<SyntheticPoint>> {
    let m = minority.len();
    if m < 2 || k == 0 || k > m - 1 || target_count < m {
        return Err(Error::TooFewMinority {
            minority: m,
            k,
            target: target_count,
        });
    }
    let needed = target_count - m;
    if needed == 0 {
        return Ok(Vec::new());
    }
    let neighbors = nearest_neighbors(minority, k);
    let mut rng = rng_from_seed(seed);
    Ok((0..needed)
        .map(|_| {
            let base = rng.gen_range(0..m);
            let neighbor = neighbors[base][rng.gen_range(0..k)];
            let gap: f64 = rng.gen();
            SyntheticPoint {
                vector: minority[base].lerp(&minority[neighbor], gap),
                base,
                neighbor,
                gap,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum BalanceStrategy {
    #[serde(rename = "subsample_69")]
    Subsample69,
    #[serde(rename = "subsample_92")]
    Subsample92,
    #[serde(rename = "full_138")]
    Full138,
    #[serde(rename = "imbalanced_348_138")]
    Imbalanced348_138,
    #[serde(rename = "smote_348_348")]
    Smote348_348,
}

impl BalanceStrategy {
    pub const ALL: [BalanceStrategy; 5] = [
        BalanceStrategy::Subsample69,
        BalanceStrategy::Subsample92,
        BalanceStrategy::Full138,
        BalanceStrategy::Imbalanced348_138,
        BalanceStrategy::Smote348_348,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BalanceStrategy::Subsample69 => "subsample_69",
            BalanceStrategy::Subsample92 => "subsample_92",
            BalanceStrategy::Full138 => "full_138",
            BalanceStrategy::Imbalanced348_138 => "imbalanced_348_138",
            BalanceStrategy::Smote348_348 => "smote_348_348",
        }
    }

    /// `(non_target, target)` counts for a dataset with the given class sizes.
    ///
    /// The subsample variants keep one half, two thirds, or all of the targets
    /// plus as many non-targets; with 348 non-targets and 138 targets this
    /// gives 69/69, 92/92, 138/138, 348/138 and 348/348.
    pub fn class_counts(self, n_non_target: usize, n_target: usize) -> (usize, usize) {
        match self {
            BalanceStrategy::Subsample69 => {
                let m = n_target.div_ceil(2);
                (m, m)
            }
            BalanceStrategy::Subsample92 => {
                let m = (2 * n_target + 1) / 3;
                (m, m)
            }
            BalanceStrategy::Full138 => (n_target, n_target),
            BalanceStrategy::Imbalanced348_138 => (n_non_target, n_target),
            BalanceStrategy::Smote348_348 => {
                let m = n_non_target.max(n_target);
                (m, m)
            }
        }
    }

    pub fn is_subsample(self) -> bool {
        matches!(
            self,
            BalanceStrategy::Subsample69 | BalanceStrategy::Subsample92 | BalanceStrategy::Full138
        )
    }
}

impl std::str::FromStr for BalanceStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BalanceStrategy::ALL
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown balance strategy {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceSpec {
    pub strategy: BalanceStrategy,
    pub seed: u64,
    #[serde(default = "default_k")]
    pub smote_k: usize,
}

fn default_k() -> usize {
    DEFAULT_SMOTE_K
}

impl BalanceSpec {
    pub fn new(strategy: BalanceStrategy, seed: u64) -> BalanceSpec {
        BalanceSpec {
            strategy,
            seed,
            smote_k: DEFAULT_SMOTE_K,
        }
    }
}

/// How synthetic minority data reaches a text model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextBridge {
    /// Each synthetic vector contributes a copy of its base minority text.
    DuplicateBaseText,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalancedItem {
    pub post_id: String,
    pub text: String,
    pub label: Class,
    /// Id of the real post this item copies, for duplicated minority texts.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duplicate_of: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceProvenance {
    pub strategy: BalanceStrategy,
    pub seed: u64,
    pub set_size: String,
    pub attempts: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub welch: Option<WelchResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_bridge: Option<TextBridge>,
    pub n_synthetic: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalancedDataset {
    /// Real items followed by duplicated minority texts (SMOTE text bridge).
    pub items: Vec<BalancedItem>,
    /// Synthetic minority vectors; indices in `base`/`neighbor` refer to the
    /// target-class items in `items` order.
    pub synthetic: Vec<SyntheticPoint>,
    pub provenance: BalanceProvenance,
}

impl BalancedDataset {
    pub fn count(&self, class: Class) -> usize {
        self.items.iter().filter(|i| i.label == class).count()
    }

    pub fn real_items(&self) -> impl Iterator<Item = &BalancedItem> {
        self.items.iter().filter(|i| i.duplicate_of.is_none())
    }

    /// Header line with the provenance, then one line per item, then one line
    /// per synthetic vector.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let ctx = || path.display().to_string();
        let mut w =
            std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(ctx(), e))?);
        let mut line = |v: serde_json::Value| -> Result<()> {
            serde_json::to_writer(&mut w, &v).map_err(|e| Error::json(ctx(), e))?;
            w.write_all(b"\n").map_err(|e| Error::io(ctx(), e))
        };
        line(serde_json::json!({ "provenance": self.provenance }))?;
        for item in &self.items {
            line(serde_json::json!({ "item": item }))?;
        }
        for s in &self.synthetic {
            line(serde_json::json!({ "synthetic": s }))?;
        }
        w.flush().map_err(|e| Error::io(ctx(), e))
    }

    pub fn read_jsonl(path: &Path) -> Result<BalancedDataset> {
        #[derive(Deserialize)]
        #[serde(rename_all = "snake_case")]
        enum Line {
            Provenance(BalanceProvenance),
            Item(BalancedItem),
            Synthetic(SyntheticPoint),
        }
        let lines: Vec<Line> = crate::corpus::read_jsonl(path)?;
        let mut provenance = None;
        let mut items = Vec::new();
        let mut synthetic = Vec::new();
        for l in lines {
            match l {
                Line::Provenance(p) => provenance = Some(p),
                Line::Item(i) => items.push(i),
                Line::Synthetic(s) => synthetic.push(s),
            }
        }
        let provenance = provenance.ok_or_else(|| {
            Error::BadInput(format!("{}: missing provenance header", path.display()))
        })?;
        Ok(BalancedDataset {
            items,
            synthetic,
            provenance,
        })
    }
}

pub const MAX_BALANCE_ATTEMPTS: usize = 20;

fn text_lengths(items: &[&LabeledItem]) -> Vec<usize> {
    items.iter().map(|i| word_token_count(&i.text)).collect()
}

/// Draws `n_targets` targets at random and as many length-matched
/// non-targets, retrying with derived seeds until Welch's test finds no
/// significant length difference.
fn length_matched_subsample(
    targets: &[&LabeledItem],
    non_targets: &[&LabeledItem],
    m: usize,
    seed: u64,
) -> Result<(Vec<LabeledItem>, WelchResult, usize)> {
    let non_target_lengths = text_lengths(non_targets);
    let mut last_p = f64::NAN;
    for attempt in 0..MAX_BALANCE_ATTEMPTS {
        let attempt_seed = derive_seed(seed, &format!("subsample-{attempt}"));
        let mut rng = rng_from_seed(attempt_seed);
        let mut chosen_targets: Vec<&LabeledItem> = targets.to_vec();
        if m < chosen_targets.len() {
            chosen_targets.shuffle(&mut rng);
            chosen_targets.truncate(m);
        }
        let reference = text_lengths(&chosen_targets);
        let spec = SampleSpec::new(m, rng.gen(), reference.clone());
        let picked = length_weighted_indices(&non_target_lengths, &spec)?;
        let a: Vec<f64> = picked
            .iter()
            .map(|&i| non_target_lengths[i] as f64)
            .collect();
        let b: Vec<f64> = reference.iter().map(|&l| l as f64).collect();
        let welch = welch_t_test(&a, &b).unwrap_or(WelchResult {
            t: 0.0,
            dof: f64::NAN,
            p: 1.0,
        });
        last_p = welch.p;
        if welch.is_balanced(BALANCE_ALPHA) {
            let mut items: Vec<LabeledItem> =
                picked.iter().map(|&i| non_targets[i].clone()).collect();
            items.extend(chosen_targets.into_iter().cloned());
            items.sort_by(|x, y| x.post_id.cmp(&y.post_id));
            return Ok((items, welch, attempt + 1));
        }
    }
    Err(Error::BalanceGateFailed {
        attempts: MAX_BALANCE_ATTEMPTS,
        p: last_p,
    })
}

/// Builds one dataset-size variant.
///
/// `vectors`, when given, must align with `dataset.items`; otherwise the SMOTE
/// strategy fits TF-IDF on the dataset texts.
pub fn build_balanced_dataset(
    dataset: &LabeledDataset,
    vectors: Option<&[SparseVector]>,
    spec: &BalanceSpec,
) -> Result<BalancedDataset> {
    let targets: Vec<&LabeledItem> = dataset
        .items
        .iter()
        .filter(|i| i.label == Class::Target)
        .collect();
    let non_targets: Vec<&LabeledItem> = dataset
        .items
        .iter()
        .filter(|i| i.label == Class::NonTarget)
        .collect();
    let (want_non, want_target) = spec.strategy.class_counts(non_targets.len(), targets.len());
    let insufficient = |class: &str, needed: usize, available: usize| Error::InsufficientItems {
        strategy: spec.strategy.name().into(),
        class: class.into(),
        needed,
        available,
    };
    if targets.is_empty() {
        return Err(insufficient("target", 1, 0));
    }
    if spec.strategy.is_subsample() && want_non > non_targets.len() {
        return Err(insufficient("non_target", want_non, non_targets.len()));
    }
    let to_balanced = |i: &LabeledItem| BalancedItem {
        post_id: i.post_id.clone(),
        text: i.text.clone(),
        label: i.label,
        duplicate_of: None,
    };

    let mut provenance = BalanceProvenance {
        strategy: spec.strategy,
        seed: spec.seed,
        set_size: format!("{want_non}/{want_target}"),
        attempts: 0,
        welch: None,
        text_bridge: None,
        n_synthetic: 0,
    };

    match spec.strategy {
        s if s.is_subsample() => {
            let (items, welch, attempts) =
                length_matched_subsample(&targets, &non_targets, want_target, spec.seed)?;
            provenance.welch = Some(welch);
            provenance.attempts = attempts;
            Ok(BalancedDataset {
                items: items.iter().map(to_balanced).collect(),
                synthetic: Vec::new(),
                provenance,
            })
        }
        BalanceStrategy::Imbalanced348_138 => Ok(BalancedDataset {
            items: dataset.items.iter().map(to_balanced).collect(),
            synthetic: Vec::new(),
            provenance,
        }),
        _ => {
            let minority_vectors: Vec<SparseVector> = match vectors {
                Some(v) => {
                    if v.len() != dataset.items.len() {
                        return Err(Error::BadInput(format!(
                            "{} vectors for {} items",
                            v.len(),
                            dataset.items.len()
                        )));
                    }
                    dataset
                        .items
                        .iter()
                        .zip(v)
                        .filter(|(i, _)| i.label == Class::Target)
                        .map(|(_, v)| v.clone())
                        .collect()
                }
                None => {
                    let texts: Vec<&str> = dataset.items.iter().map(|i| i.text.as_str()).collect();
                    let model = fit_tfidf(&texts)?;
                    targets.iter().map(|i| transform(&model, &i.text)).collect()
                }
            };
            let k = spec.smote_k.min(minority_vectors.len().saturating_sub(1));
            let synthetic = smote_upsample(
                &minority_vectors,
                want_target,
                k,
                derive_seed(spec.seed, "smote"),
            )?;
            let mut items: Vec<BalancedItem> = dataset.items.iter().map(to_balanced).collect();
            for (n, s) in synthetic.iter().enumerate() {
                let base = targets[s.base];
                items.push(BalancedItem {
                    post_id: format!("{}#dup{n}", base.post_id),
                    text: base.text.clone(),
                    label: Class::Target,
                    duplicate_of: Some(base.post_id.clone()),
                });
            }
            provenance.text_bridge = Some(TextBridge::DuplicateBaseText);
            provenance.n_synthetic = synthetic.len();
            Ok(BalancedDataset {
                items,
                synthetic,
                provenance,
            })
        }
    }
}
