//! Annotation schema, label resolution, blind export and training-set assembly.
//!
//! The criteria catalog groups DSM-5 gambling-disorder criteria and the five
//! GRCS subscales into three subdomains. The exact grouping is a
//! reconstruction: items describing similar behaviour share a subdomain. The
//! twelve-month window of the DSM criteria is not modelled because a single
//! post cannot establish it.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use chrono::{DateTime, Utc};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusStore, Post};
use crate::error::{Error, Result};
use crate::seed::rng_from_seed;

pub const CATALOG_VERSION: &str = "1.0.0";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subdomain {
    PathologicalGambling,
    GamblingRelatedProblems,
    CognitiveDistortions,
}

impl Subdomain {
    pub const ALL: [Subdomain; 3] = [
        Subdomain::PathologicalGambling,
        Subdomain::GamblingRelatedProblems,
        Subdomain::CognitiveDistortions,
    ];

    pub fn title(self) -> &'static str {
        match self {
            Subdomain::PathologicalGambling => "Pathological gambling",
            Subdomain::GamblingRelatedProblems => "Gambling-related problems",
            Subdomain::CognitiveDistortions => "Gambling-related cognitive distortions",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flag {
    SelfIdentifiedAddicted,
    SeekingOrInTreatment,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Target,
    NonTarget,
    Inconclusive,
    ExcludedNonUserContent,
}

impl Label {
    pub const ALL: [Label; 4] = [
        Label::Target,
        Label::NonTarget,
        Label::Inconclusive,
        Label::ExcludedNonUserContent,
    ];

    pub fn as_class(self) -> Option<Class> {
        match self {
            Label::Target => Some(Class::Target),
            Label::NonTarget => Some(Class::NonTarget),
            _ => None,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Target => "target",
            Label::NonTarget => "non_target",
            Label::Inconclusive => "inconclusive",
            Label::ExcludedNonUserContent => "excluded_non_user_content",
        })
    }
}

/// The two trainable classes. `Target` is the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Class {
    NonTarget,
    Target,
}

impl Class {
    pub fn is_target(self) -> bool {
        self == Class::Target
    }

    pub fn from_target(is_target: bool) -> Class {
        if is_target {
            Class::Target
        } else {
            Class::NonTarget
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Criterion {
    pub code: String,
    pub source: String,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubdomainSpec {
    pub id: Subdomain,
    pub title: String,
    pub criteria: Vec<Criterion>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlagSpec {
    pub id: Flag,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CriteriaSchema {
    pub version: String,
    pub subdomains: Vec<SubdomainSpec>,
    pub flags: Vec<FlagSpec>,
}

fn crit(code: &str, source: &str, description: &str) -> Criterion {
    Criterion {
        code: code.into(),
        source: source.into(),
        description: description.into(),
    }
}

impl CriteriaSchema {
    /// The shipped catalog: 9 DSM-5 criteria and 5 GRCS subscales.
    pub fn standard() -> CriteriaSchema {
        let subdomains = vec![
            SubdomainSpec {
                id: Subdomain::PathologicalGambling,
                title: Subdomain::PathologicalGambling.title().into(),
                criteria: vec![
                    crit("DSM1", "DSM-5", "Needs to gamble with increasing amounts of money to get the desired excitement"),
                    crit("DSM2", "DSM-5", "Restless or irritable when trying to cut down or stop gambling"),
                    crit("DSM3", "DSM-5", "Repeated unsuccessful efforts to control, cut back or stop gambling"),
                    crit("DSM4", "DSM-5", "Preoccupied with gambling (reliving past gambling, planning the next session, thinking of ways to get money)"),
                    crit("DSM5", "DSM-5", "Gambles when feeling distressed (helpless, guilty, anxious, depressed)"),
                    crit("DSM6", "DSM-5", "Returns another day to get even after losing money (chasing losses)"),
                    crit("GRCS_IS", "GRCS", "Perceived inability to stop gambling"),
                ],
            },
            SubdomainSpec {
                id: Subdomain::GamblingRelatedProblems,
                title: Subdomain::GamblingRelatedProblems.title().into(),
                criteria: vec![
                    crit("DSM7", "DSM-5", "Lies to conceal the extent of involvement with gambling"),
                    crit("DSM8", "DSM-5", "Has jeopardized or lost a significant relationship, job, or educational or career opportunity because of gambling"),
                    crit("DSM9", "DSM-5", "Relies on others to provide money to relieve desperate financial situations caused by gambling"),
                ],
            },
            SubdomainSpec {
                id: Subdomain::CognitiveDistortions,
                title: Subdomain::CognitiveDistortions.title().into(),
                criteria: vec![
                    crit("GRCS_GE", "GRCS", "Gambling expectancies: gambling is expected to bring relief, excitement or other desired states"),
                    crit("GRCS_IC", "GRCS", "Illusion of control: belief that rituals, numbers or skill can influence outcomes"),
                    crit("GRCS_PC", "GRCS", "Predictive control: belief that outcomes can be predicted, e.g. from streaks or patterns"),
                    crit("GRCS_IB", "GRCS", "Interpretive bias: losses and wins are reframed to justify continued gambling"),
                ],
            },
        ];
        CriteriaSchema {
            version: CATALOG_VERSION.into(),
            subdomains,
            flags: vec![
                FlagSpec {
                    id: Flag::SelfIdentifiedAddicted,
                    description: "The person clearly self-identifies as addicted to gambling".into(),
                },
                FlagSpec {
                    id: Flag::SeekingOrInTreatment,
                    description: "The person is actively seeking help or treatment for gambling disorder, or is currently in treatment".into(),
                },
            ],
        }
    }

    pub fn codes(&self) -> impl Iterator<Item = &str> {
        self.subdomains
            .iter()
            .flat_map(|s| s.criteria.iter().map(|c| c.code.as_str()))
    }

    pub fn subdomain_of(&self, code: &str) -> Option<Subdomain> {
        self.subdomains
            .iter()
            .find(|s| s.criteria.iter().any(|c| c.code == code))
            .map(|s| s.id)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for code in self.codes() {
            if !seen.insert(code) {
                return Err(Error::Validation(format!(
                    "duplicate criterion code {code}"
                )));
            }
        }
        let ids: BTreeSet<_> = self.subdomains.iter().map(|s| s.id).collect();
        if ids.len() != 3 || self.subdomains.len() != 3 {
            return Err(Error::Validation(
                "catalog must define exactly three subdomains".into(),
            ));
        }
        Ok(())
    }

    pub fn validate_record(&self, record: &AnnotationRecord) -> Result<()> {
        let unknown: Vec<&str> = record
            .checked_criteria
            .iter()
            .map(String::as_str)
            .filter(|c| self.subdomain_of(c).is_none())
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(format!(
                "unknown criterion codes: {}",
                unknown.join(", ")
            )))
        }
    }

    /// Markdown annotation guide generated from the catalog.
    pub fn render_guide(&self) -> String {
        let mut out = format!("# Annotation guide (catalog v{})\n\n", self.version);
        out.push_str(
            "Mark every criterion the post describes. It does not matter whether the \
             description concerns the author or a related person, or whether it is current \
             or past. A post with at least one checked criterion or flag is a target post.\n\n\
             The grouping of DSM-5 criteria and GRCS subscales into subdomains is a \
             reconstruction; items covering similar behaviour share a subdomain.\n\n",
        );
        for s in &self.subdomains {
            out.push_str(&format!("## {}\n\n", s.title));
            for c in &s.criteria {
                out.push_str(&format!(
                    "- `{}` ({}) {}\n",
                    c.code, c.source, c.description
                ));
            }
            out.push('\n');
        }
        out.push_str("## Flags\n\n");
        for f in &self.flags {
            let id = serde_json::to_value(f.id).expect("flag serializes");
            out.push_str(&format!(
                "- `{}` {}\n",
                id.as_str().unwrap_or_default(),
                f.description
            ));
        }
        out.push_str(
            "\n## Overrides\n\n\
             - `inconclusive`: it stays unclear whether problem gambling is described.\n\
             - `excluded_non_user_content`: empty, administrator-deleted, or non-user \
             content such as recruitment adverts.\n",
        );
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelOverride {
    pub label: Label,
    #[serde(default)]
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub post_id: String,
    pub annotator_id: String,
    #[serde(default)]
    pub checked_criteria: BTreeSet<String>,
    #[serde(default)]
    pub flags: BTreeSet<Flag>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manual_label_override: Option<LabelOverride>,
    pub created_at: DateTime<Utc>,
}

impl AnnotationRecord {
    pub fn new(post_id: impl Into<String>, annotator_id: impl Into<String>) -> AnnotationRecord {
        AnnotationRecord {
            post_id: post_id.into(),
            annotator_id: annotator_id.into(),
            checked_criteria: BTreeSet::new(),
            flags: BTreeSet::new(),
            manual_label_override: None,
            created_at: DateTime::<Utc>::UNIX_EPOCH,
        }
    }

    pub fn with_criteria<I, S>(mut self, codes: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.checked_criteria
            .extend(codes.into_iter().map(Into::into));
        self
    }

    pub fn with_flag(mut self, flag: Flag) -> Self {
        self.flags.insert(flag);
        self
    }

    pub fn with_override(mut self, label: Label, reason: impl Into<String>) -> Self {
        self.manual_label_override = Some(LabelOverride {
            label,
            reason: reason.into(),
        });
        self
    }
}

/// Target when any criterion or flag is present, non-target otherwise; a
/// manual override always wins.
pub fn resolve_label(schema: &CriteriaSchema, record: &AnnotationRecord) -> Result<Label> {
    schema.validate_record(record)?;
    if let Some(o) = &record.manual_label_override {
        return Ok(o.label);
    }
    if !record.checked_criteria.is_empty() || !record.flags.is_empty() {
        Ok(Label::Target)
    } else {
        Ok(Label::NonTarget)
    }
}

/// A post stripped to the two fields an annotator may see.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlindItem {
    pub id: String,
    pub text: String,
}

impl From<&Post> for BlindItem {
    fn from(p: &Post) -> Self {
        BlindItem {
            id: p.id.clone(),
            text: p.text.clone(),
        }
    }
}

pub fn blind_export(posts: &[Post], seed: u64) -> Vec<BlindItem> {
    let mut items: Vec<BlindItem> = posts.iter().map(BlindItem::from).collect();
    items.sort_by(|a, b| a.id.cmp(&b.id));
    items.shuffle(&mut rng_from_seed(seed));
    items
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledItem {
    pub post_id: String,
    pub text: String,
    pub label: Class,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetProvenance {
    pub source_counts: BTreeMap<Label, usize>,
    pub balancing: String,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    pub items: Vec<LabeledItem>,
    pub provenance: DatasetProvenance,
}

impl LabeledDataset {
    pub fn count(&self, class: Class) -> usize {
        self.items.iter().filter(|i| i.label == class).count()
    }
}

/// One item per post resolved to target or non-target, ordered by post id.
pub fn build_training_set(
    schema: &CriteriaSchema,
    records: &[AnnotationRecord],
    store: &CorpusStore,
) -> Result<LabeledDataset> {
    let mut by_post: BTreeMap<&str, BTreeSet<Label>> = BTreeMap::new();
    for r in records {
        if store.get(&r.post_id).is_none() {
            return Err(Error::UnknownPost(r.post_id.clone()));
        }
        by_post
            .entry(&r.post_id)
            .or_default()
            .insert(resolve_label(schema, r)?);
    }
    let conflicts: Vec<String> = by_post
        .iter()
        .filter(|(_, labels)| labels.len() > 1)
        .map(|(id, _)| id.to_string())
        .collect();
    if !conflicts.is_empty() {
        return Err(Error::UnresolvedConflict(conflicts));
    }
    let mut provenance = DatasetProvenance {
        balancing: "none".into(),
        ..DatasetProvenance::default()
    };
    let mut items = Vec::new();
    for (id, labels) in by_post {
        let label = *labels.iter().next().expect("non-empty label set");
        *provenance.source_counts.entry(label).or_default() += 1;
        if let Some(class) = label.as_class() {
            items.push(LabeledItem {
                post_id: id.to_string(),
                text: store.get(id).expect("checked above").text.clone(),
                label: class,
            });
        }
    }
    Ok(LabeledDataset { items, provenance })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationSummary {
    pub total: usize,
    pub labels: BTreeMap<Label, usize>,
    /// Target records showing at least one criterion of each subdomain; a
    /// record may count towards several subdomains.
    pub subdomains: BTreeMap<Subdomain, usize>,
}

pub fn annotation_summary(
    schema: &CriteriaSchema,
    records: &[AnnotationRecord],
) -> Result<AnnotationSummary> {
    let mut labels: BTreeMap<Label, usize> = Label::ALL.iter().map(|&l| (l, 0)).collect();
    let mut subdomains: BTreeMap<Subdomain, usize> =
        Subdomain::ALL.iter().map(|&s| (s, 0)).collect();
    for r in records {
        let label = resolve_label(schema, r)?;
        *labels.get_mut(&label).expect("all labels present") += 1;
        if label == Label::Target {
            let hit: BTreeSet<Subdomain> = r
                .checked_criteria
                .iter()
                .filter_map(|c| schema.subdomain_of(c))
                .collect();
            for s in hit {
                *subdomains.get_mut(&s).expect("all subdomains present") += 1;
            }
        }
    }
    Ok(AnnotationSummary {
        total: records.len(),
        labels,
        subdomains,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelVector {
    pub record: AnnotationRecord,
    pub expected: Label,
}

/// Shared cases for clients that preview the resolved label.
pub fn label_test_vectors() -> Vec<LabelVector> {
    let base = || AnnotationRecord::new("v", "annotator");
    let cases = vec![
        base(),
        base().with_criteria(["DSM3"]),
        base().with_criteria(["GRCS_PC"]),
        base().with_criteria(["DSM6", "DSM9", "GRCS_IC"]),
        base().with_flag(Flag::SelfIdentifiedAddicted),
        base().with_flag(Flag::SeekingOrInTreatment),
        base().with_override(Label::Inconclusive, "vague"),
        base().with_override(Label::ExcludedNonUserContent, "advert"),
        base()
            .with_criteria(["DSM1"])
            .with_override(Label::Inconclusive, "unclear reference"),
    ];
    let schema = CriteriaSchema::standard();
    cases
        .into_iter()
        .enumerate()
        .map(|(i, mut record)| {
            record.post_id = format!("v{i:02}");
            let expected = resolve_label(&schema, &record).expect("vectors use catalog codes");
            LabelVector { record, expected }
        })
        .collect()
}
