//! Length-matched weighted sampling and annotation-pool selection.
//!
//! Each candidate gets an importance weight equal to the reference
//! histogram density of its length bin divided by the candidate histogram
//! density of the same bin. Posts are then drawn without replacement with the
//! Efraimidis–Spirakis key `ln(u) / w`. Candidates in bins the reference never
//! visits have weight zero and are drawn last, in random order, only when the
//! positive-weight mass is exhausted.

use std::cmp::Ordering;
use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusStore, Post, PostFilter, SubforumId};
use crate::error::{Error, Result};
use crate::seed::{rng_from_seed, stage_rng};
use crate::stats::{welch_t_test, WelchResult};

/// Two-sided Welch p-value at or above which two length distributions are
/// treated as matched.
pub const BALANCE_ALPHA: f64 = 0.05;
pub const DEFAULT_BIN_WIDTH: usize = 32;
/// Word-token eligibility cutoff for annotation.
pub const MAX_ELIGIBLE_TOKENS: usize = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSpec {
    pub n: usize,
    pub seed: u64,
    pub reference_lengths: Vec<usize>,
    pub bin_width: usize,
}

impl SampleSpec {
    pub fn new(n: usize, seed: u64, reference_lengths: Vec<usize>) -> SampleSpec {
        SampleSpec {
            n,
            seed,
            reference_lengths,
            bin_width: DEFAULT_BIN_WIDTH,
        }
    }
}

/// Importance weight of every candidate length against the reference.
pub fn importance_weights(
    candidate_lengths: &[usize],
    reference_lengths: &[usize],
    bin_width: usize,
) -> Vec<f64> {
    let bin_width = bin_width.max(1);
    let histogram = |lengths: &[usize]| {
        let mut h: HashMap<usize, usize> = HashMap::new();
        for &l in lengths {
            *h.entry(l / bin_width).or_default() += 1;
        }
        h
    };
    let ref_hist = histogram(reference_lengths);
    let cand_hist = histogram(candidate_lengths);
    let n_ref = reference_lengths.len() as f64;
    let n_cand = candidate_lengths.len() as f64;
    candidate_lengths
        .iter()
        .map(|&l| {
            let bin = l / bin_width;
            let ref_density = ref_hist.get(&bin).copied().unwrap_or(0) as f64 / n_ref;
            let cand_density = cand_hist[&bin] as f64 / n_cand;
            ref_density / cand_density
        })
        .collect()
}

/// Indices into `candidate_lengths` of the weighted sample, in draw order.
pub fn length_weighted_indices(
    candidate_lengths: &[usize],
    spec: &SampleSpec,
) -> Result<Vec<usize>> {
    if spec.n > candidate_lengths.len() {
        return Err(Error::InsufficientPool {
            requested: spec.n,
            available: candidate_lengths.len(),
        });
    }
    if spec.reference_lengths.is_empty() {
        return Err(Error::Validation(
            "reference_lengths must be non-empty".into(),
        ));
    }
    if spec.bin_width == 0 {
        return Err(Error::Validation("bin_width must be at least 1".into()));
    }
    let weights = importance_weights(candidate_lengths, &spec.reference_lengths, spec.bin_width);
    let mut rng = rng_from_seed(spec.seed);
    let mut keyed: Vec<(f64, f64, usize)> = weights
        .iter()
        .enumerate()
        .map(|(i, &w)| {
            // gen::<f64>() is in [0, 1); shift to (0, 1] so ln is finite.
            let u = 1.0 - rng.gen::<f64>();
            let tie: f64 = rng.gen();
            let key = if w > 0.0 {
                u.ln() / w
            } else {
                f64::NEG_INFINITY
            };
            (key, tie, i)
        })
        .collect();
    keyed.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(Ordering::Equal)
            .then(b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal))
            .then(a.2.cmp(&b.2))
    });
    Ok(keyed.into_iter().take(spec.n).map(|(_, _, i)| i).collect())
}

pub fn length_weighted_sample(candidates: &[Post], spec: &SampleSpec) -> Result<Vec<Post>> {
    let lengths: Vec<usize> = candidates.iter().map(|p| p.word_token_count).collect();
    Ok(length_weighted_indices(&lengths, spec)?
        .into_iter()
        .map(|i| candidates[i].clone())
        .collect())
}

pub fn lengths_f64(posts: &[Post]) -> Vec<f64> {
    posts.iter().map(|p| p.word_token_count as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationPool {
    pub target_pool: Vec<Post>,
    pub control_pool: Vec<Post>,
    /// Absent when either pool has fewer than two posts.
    pub balance_check: Option<WelchResult>,
}

impl AnnotationPool {
    pub fn all_posts(&self) -> Vec<Post> {
        self.target_pool
            .iter()
            .chain(&self.control_pool)
            .cloned()
            .collect()
    }
}

/// Eligible initial addiction-board posts plus twice as many length-matched
/// initial posts from every other board.
pub fn select_annotation_pool(store: &CorpusStore, seed: u64) -> Result<AnnotationPool> {
    let target_pool = store.query_posts(&PostFilter {
        subforums: Some(vec![SubforumId::GamblingAddiction]),
        initial_only: true,
        max_tokens: Some(MAX_ELIGIBLE_TOKENS),
    });
    if target_pool.is_empty() {
        return Ok(AnnotationPool {
            target_pool,
            control_pool: Vec::new(),
            balance_check: None,
        });
    }
    let others: Vec<Post> = store
        .query_posts(&PostFilter {
            subforums: None,
            initial_only: true,
            max_tokens: Some(MAX_ELIGIBLE_TOKENS),
        })
        .into_iter()
        .filter(|p| !p.subforum.is_addiction())
        .collect();
    let spec = SampleSpec::new(
        2 * target_pool.len(),
        stage_rng(seed, "select-pool").gen(),
        target_pool.iter().map(|p| p.word_token_count).collect(),
    );
    let control_pool = length_weighted_sample(&others, &spec)?;
    let balance_check = welch_t_test(&lengths_f64(&control_pool), &lengths_f64(&target_pool));
    Ok(AnnotationPool {
        target_pool,
        control_pool,
        balance_check,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn post(id: usize, sub: SubforumId, len: usize) -> Post {
        Post::new(format!("p{id:05}"), sub, true, vec!["w"; len].join(" "))
    }

    #[test]
    fn whole_pool_in_one_bin() {
        let lengths = vec![10, 11, 12, 13];
        let spec = SampleSpec::new(4, 1, vec![5, 20]);
        let mut got = length_weighted_indices(&lengths, &spec).unwrap();
        got.sort();
        assert_eq!(got, vec![0, 1, 2, 3]);
    }

    #[test]
    fn insufficient_pool() {
        let err = length_weighted_indices(&[1, 2], &SampleSpec::new(3, 0, vec![1])).unwrap_err();
        assert_eq!(err.code(), "insufficient_pool");
    }

    #[test]
    fn zero_weight_candidates_fill_last() {
        // reference only in bin 0; two candidates there, three far away
        let lengths = vec![1, 500, 2, 600, 700];
        let spec = SampleSpec::new(4, 3, vec![1, 2, 3]);
        let got = length_weighted_indices(&lengths, &spec).unwrap();
        assert_eq!(got.len(), 4);
        let first: HashSet<_> = got[..2].iter().copied().collect();
        assert_eq!(first, HashSet::from([0, 2]));
    }

    #[test]
    fn same_seed_same_sample() {
        let lengths: Vec<usize> = (0..300).map(|i| (i * 37) % 512).collect();
        let spec = SampleSpec::new(50, 99, (100..400).collect());
        let a = length_weighted_indices(&lengths, &spec).unwrap();
        let b = length_weighted_indices(&lengths, &spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.iter().collect::<HashSet<_>>().len(), 50);
    }

    #[test]
    fn annotation_pool_sizes() {
        let mut store = CorpusStore::new();
        let mut id = 0;
        for i in 0..200 {
            // 168 eligible, 32 too long
            let len = if i < 168 { 100 + i } else { 600 };
            store.insert(post(id, SubforumId::GamblingAddiction, len));
            id += 1;
        }
        for i in 0..1000 {
            store.insert(post(id, SubforumId::CasinoComplaints, 40 + (i % 400)));
            id += 1;
        }
        let pool = select_annotation_pool(&store, 5).unwrap();
        assert_eq!(pool.target_pool.len(), 168);
        assert_eq!(pool.control_pool.len(), 336);
        assert!(pool.balance_check.is_some());
    }

    #[test]
    fn identical_lengths_balance_trivially() {
        let mut store = CorpusStore::new();
        for i in 0..5 {
            store.insert(post(i, SubforumId::GamblingAddiction, 20));
        }
        for i in 5..20 {
            store.insert(post(i, SubforumId::Poker, 20));
        }
        let pool = select_annotation_pool(&store, 1).unwrap();
        let check = pool.balance_check.unwrap();
        assert_eq!((check.t, check.p), (0.0, 1.0));
    }

    #[test]
    fn empty_target_pool() {
        let mut store = CorpusStore::new();
        store.insert(post(0, SubforumId::Poker, 10));
        let pool = select_annotation_pool(&store, 1).unwrap();
        assert!(pool.target_pool.is_empty() && pool.control_pool.is_empty());
        assert!(pool.balance_check.is_none());
    }

    #[test]
    fn control_pool_too_small() {
        let mut store = CorpusStore::new();
        for i in 0..5 {
            store.insert(post(i, SubforumId::GamblingAddiction, 20));
        }
        store.insert(post(9, SubforumId::Poker, 20));
        assert_eq!(
            select_annotation_pool(&store, 1).unwrap_err().code(),
            "insufficient_pool"
        );
    }
}
