//! Generated corpora and fixtures for tests, demos and the acceptance suite.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::annotation::{AnnotationRecord, Class, Flag, Label, LabeledDataset, LabeledItem};
use crate::corpus::{CorpusStore, Post, SubforumId};
use crate::evaluation::Lexicon;
use crate::seed::{rng_from_seed, stage_rng, standard_normal, StageRng};

/// Posts per board in the full forum crawl.
pub const BOARD_POST_COUNTS: [(SubforumId, usize); 11] = [
    (SubforumId::RulesAndGuidelines, 9349),
    (SubforumId::Blackjack, 308),
    (SubforumId::Poker, 296),
    (SubforumId::Roulette, 614),
    (SubforumId::OtherGamesOfChance, 4701),
    (SubforumId::SlotMachines, 6079),
    (SubforumId::GamblingArcadesAndCasinos, 3365),
    (SubforumId::CasinoComplaints, 14328),
    (SubforumId::GamblingAddiction, 4150),
    (SubforumId::OnlineCasinos, 140818),
    (SubforumId::Miscellaneous, 21377),
];

fn filler(len: usize) -> String {
    let mut s = String::with_capacity(len * 5);
    for i in 0..len {
        if i > 0 {
            s.push(' ');
        }
        s.push_str(["post", "text", "word", "forum"][i % 4]);
    }
    s
}

/// A store with `ceil(count / divisor)` short posts per board.
pub fn board_count_store(divisor: usize) -> CorpusStore {
    let divisor = divisor.max(1);
    let mut store = CorpusStore::new();
    for (sub, count) in BOARD_POST_COUNTS {
        for i in 0..count.div_ceil(divisor) {
            store.insert(Post::new(
                format!("{}-{i:06}", sub.as_str()),
                sub,
                i % 3 == 0,
                filler(3 + i % 7),
            ));
        }
    }
    store
}

fn clamp_len(x: f64) -> usize {
    x.round().clamp(5.0, 512.0) as usize
}

/// 50 addiction-board initial posts with lengths around 296 and 1000 posts
/// from other boards whose lengths are bimodal (modes 140 and 300), plus a
/// few replies and overlong posts that selection must skip.
pub fn bimodal_pool(seed: u64) -> CorpusStore {
    let mut rng = stage_rng(seed, "bimodal-pool");
    let mut store = CorpusStore::new();
    for i in 0..50 {
        let len = clamp_len(296.0 + 50.0 * standard_normal(&mut rng));
        store.insert(Post::new(
            format!("a{i:04}"),
            SubforumId::GamblingAddiction,
            true,
            filler(len),
        ));
    }
    let others = [
        SubforumId::OnlineCasinos,
        SubforumId::CasinoComplaints,
        SubforumId::Miscellaneous,
        SubforumId::SlotMachines,
    ];
    for i in 0..1000 {
        let (mu, sd) = if i % 2 == 0 {
            (140.0, 35.0)
        } else {
            (300.0, 50.0)
        };
        let len = clamp_len(mu + sd * standard_normal(&mut rng));
        store.insert(Post::new(
            format!("o{i:05}"),
            others[i % others.len()],
            true,
            filler(len),
        ));
    }
    for i in 0..20 {
        store.insert(Post::new(
            format!("r{i:04}"),
            SubforumId::GamblingAddiction,
            false,
            filler(200),
        ));
        store.insert(Post::new(
            format!("x{i:04}"),
            SubforumId::OnlineCasinos,
            true,
            filler(600 + i),
        ));
    }
    store
}

/// Label counts of the annotated pool: target, non-target, inconclusive,
/// excluded.
pub const ANNOTATED_LABEL_COUNTS: (usize, usize, usize, usize) = (138, 348, 11, 7);
/// Targets showing each subdomain: pathological gambling, gambling-related
/// problems, cognitive distortions.
pub const ANNOTATED_SUBDOMAIN_COUNTS: (usize, usize, usize) = (114, 70, 23);

/// 168 addiction-board and 336 other-board posts with one annotation each,
/// shaped like the annotated pool: 138 target, 348 non-target, 11
/// inconclusive and 7 excluded posts. Target records show pathological
/// gambling in 114 cases, gambling-related problems in 70 and cognitive
/// distortions in 23, with overlap.
pub fn annotated_fixture() -> (CorpusStore, Vec<AnnotationRecord>) {
    let mut store = CorpusStore::new();
    let mut ids = Vec::with_capacity(504);
    for i in 0..168 {
        let id = format!("ga{i:03}");
        store.insert(Post::new(
            &id,
            SubforumId::GamblingAddiction,
            true,
            format!("addiction board post {i}"),
        ));
        ids.push(id);
    }
    for i in 0..336 {
        let sub = SubforumId::BOARDS
            .iter()
            .copied()
            .filter(|s| !s.is_addiction())
            .nth(i % 10)
            .expect("ten boards");
        let id = format!("ot{i:03}");
        store.insert(Post::new(
            &id,
            sub,
            true,
            format!("{} board post {i}", sub.as_str()),
        ));
        ids.push(id);
    }
    // mix origins so labels are not tied to id order
    ids.shuffle(&mut rng_from_seed(504));
    let mut records = Vec::with_capacity(504);
    for (n, id) in ids.iter().enumerate() {
        let r = AnnotationRecord::new(id, "annotator-1");
        let r = if n < 138 {
            let mut codes = Vec::new();
            if n < 114 {
                codes.push("DSM3");
            }
            if n >= 68 {
                codes.push("DSM9");
            }
            if n < 23 {
                codes.push("GRCS_IC");
            }
            let r = r.with_criteria(codes);
            if n % 10 == 0 {
                r.with_flag(Flag::SelfIdentifiedAddicted)
            } else {
                r
            }
        } else if n < 138 + 348 {
            r
        } else if n < 138 + 348 + 11 {
            r.with_override(Label::Inconclusive, "ambiguous")
        } else {
            r.with_override(Label::ExcludedNonUserContent, "advertisement")
        };
        records.push(r);
    }
    (store, records)
}

const TARGET_WORDS: &[&str] = &[
    "addicted",
    "relapse",
    "quit",
    "urge",
    "chasing",
    "craving",
    "debts",
    "therapy",
    "lying",
    "borrowed",
    "desperate",
    "ashamed",
    "stop",
    "control",
    "secretly",
    "hopeless",
    "counselor",
    "compulsive",
];
const NON_TARGET_WORDS: &[&str] = &[
    "casino",
    "bonus",
    "payout",
    "withdrawal",
    "slots",
    "spins",
    "jackpot",
    "license",
    "verification",
    "roulette",
    "blackjack",
    "odds",
    "tournament",
    "review",
    "provider",
    "deposit",
    "wagering",
    "cashback",
];
const FINANCE_WORDS: &[&str] = &["money", "loss", "bank", "account"];
const HELP_WORDS: &[&str] = &["problem", "help", "support", "warn"];
const GENERIC_WORDS: &[&str] = &[
    "i", "the", "and", "today", "week", "again", "really", "my", "it", "was", "this", "after",
    "now", "so",
];

/// Finance-term lexicon matching [`confound_corpus`].
pub fn finance_lexicon() -> Lexicon {
    Lexicon::from([
        (
            "finance".to_string(),
            FINANCE_WORDS.iter().map(|w| w.to_string()).collect(),
        ),
        (
            "help".to_string(),
            HELP_WORDS.iter().map(|w| w.to_string()).collect(),
        ),
    ])
}

fn compose(rng: &mut StageRng, mix: [f64; 5]) -> String {
    let pools = [
        TARGET_WORDS,
        NON_TARGET_WORDS,
        FINANCE_WORDS,
        HELP_WORDS,
        GENERIC_WORDS,
    ];
    let len = rng.gen_range(20..=40);
    let mut words = Vec::with_capacity(len);
    for _ in 0..len {
        let mut u: f64 = rng.gen();
        let mut pool = GENERIC_WORDS;
        for (p, w) in pools.iter().zip(mix) {
            if u < w {
                pool = p;
                break;
            }
            u -= w;
        }
        words.push(*pool.choose(rng).expect("non-empty pool"));
    }
    words.join(" ")
}

/// `n` labeled posts, 40% target. Targets and casino complaints share finance
/// and help vocabulary; a small set of complaints is dominated by it and
/// tends to be misclassified as target.
pub fn confound_corpus(n: usize, seed: u64) -> LabeledDataset {
    let mut rng = stage_rng(seed, "confound-corpus");
    let items = (0..n)
        .map(|i| {
            let target = i % 5 < 2;
            let (mix, label) = if target {
                ([0.35, 0.05, 0.2, 0.1, 0.3], Class::Target)
            } else {
                let kind: f64 = rng.gen();
                let mix = if kind < 0.06 {
                    [0.08, 0.04, 0.35, 0.25, 0.28]
                } else if kind < 0.46 {
                    [0.0, 0.3, 0.2, 0.1, 0.4]
                } else {
                    [0.0, 0.45, 0.0, 0.0, 0.55]
                };
                (mix, Class::NonTarget)
            };
            LabeledItem {
                post_id: format!("s{i:04}"),
                text: compose(&mut rng, mix),
                label,
            }
        })
        .collect();
    LabeledDataset {
        items,
        ..LabeledDataset::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotation::{annotation_summary, build_training_set, CriteriaSchema, Subdomain};

    #[test]
    fn annotated_fixture_counts() {
        let (store, records) = annotated_fixture();
        assert_eq!(store.len(), 504);
        let schema = CriteriaSchema::standard();
        let s = annotation_summary(&schema, &records).unwrap();
        assert_eq!(s.total, 504);
        assert_eq!(s.labels[&Label::Target], 138);
        assert_eq!(s.labels[&Label::NonTarget], 348);
        assert_eq!(s.labels[&Label::Inconclusive], 11);
        assert_eq!(s.labels[&Label::ExcludedNonUserContent], 7);
        assert_eq!(s.subdomains[&Subdomain::PathologicalGambling], 114);
        assert_eq!(s.subdomains[&Subdomain::GamblingRelatedProblems], 70);
        assert_eq!(s.subdomains[&Subdomain::CognitiveDistortions], 23);
        let ds = build_training_set(&schema, &records, &store).unwrap();
        assert_eq!(
            (ds.count(Class::NonTarget), ds.count(Class::Target)),
            (348, 138)
        );
    }

    #[test]
    fn confound_corpus_is_deterministic() {
        let a = confound_corpus(50, 3);
        assert_eq!(a, confound_corpus(50, 3));
        assert_eq!(a.count(Class::Target), 20);
        assert_ne!(a, confound_corpus(50, 4));
    }

    #[test]
    fn board_store_echoes_counts() {
        let stats = board_count_store(100).corpus_stats();
        assert_eq!(
            stats.per_subforum_counts[&SubforumId::GamblingAddiction],
            42
        );
    }
}
