//! Forum corpus storage: posts, authors and descriptive statistics.
//!
//! The canonical on-disk form is a directory holding `posts.jsonl` and
//! `authors.jsonl`, one record per line, sorted by id.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use chrono::{DateTime, NaiveDateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, ReasonCounts, Result};
use crate::tokenize::word_token_count;

/// Board a post was published in. Unknown boards map to [`SubforumId::Other`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubforumId {
    RulesAndGuidelines,
    Blackjack,
    Poker,
    Roulette,
    OtherGamesOfChance,
    SlotMachines,
    GamblingArcadesAndCasinos,
    CasinoComplaints,
    GamblingAddiction,
    OnlineCasinos,
    Miscellaneous,
    Other,
}

impl SubforumId {
    pub const BOARDS: [SubforumId; 11] = [
        SubforumId::RulesAndGuidelines,
        SubforumId::Blackjack,
        SubforumId::Poker,
        SubforumId::Roulette,
        SubforumId::OtherGamesOfChance,
        SubforumId::SlotMachines,
        SubforumId::GamblingArcadesAndCasinos,
        SubforumId::CasinoComplaints,
        SubforumId::GamblingAddiction,
        SubforumId::OnlineCasinos,
        SubforumId::Miscellaneous,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SubforumId::RulesAndGuidelines => "rules_and_guidelines",
            SubforumId::Blackjack => "blackjack",
            SubforumId::Poker => "poker",
            SubforumId::Roulette => "roulette",
            SubforumId::OtherGamesOfChance => "other_games_of_chance",
            SubforumId::SlotMachines => "slot_machines",
            SubforumId::GamblingArcadesAndCasinos => "gambling_arcades_and_casinos",
            SubforumId::CasinoComplaints => "casino_complaints",
            SubforumId::GamblingAddiction => "gambling_addiction",
            SubforumId::OnlineCasinos => "online_casinos",
            SubforumId::Miscellaneous => "miscellaneous",
            SubforumId::Other => "other",
        }
    }

    pub fn is_addiction(self) -> bool {
        self == SubforumId::GamblingAddiction
    }

    /// Maps a board name to its id, accepting snake_case ids and the display
    /// names ("Slot machines and slot games", "Casino complaints", ...).
    /// Returns `None` for unknown boards.
    pub fn parse_known(name: &str) -> Option<SubforumId> {
        let norm: String = name
            .trim()
            .to_lowercase()
            .replace('&', "and")
            .chars()
            .map(|c| if c.is_alphanumeric() { c } else { '_' })
            .collect();
        let norm = norm
            .split('_')
            .filter(|s| !s.is_empty())
            .collect::<Vec<_>>()
            .join("_");
        let id = match norm.as_str() {
            "rules_and_guidelines" => SubforumId::RulesAndGuidelines,
            "blackjack" => SubforumId::Blackjack,
            "poker" => SubforumId::Poker,
            "roulette" => SubforumId::Roulette,
            "other_games_of_chance" => SubforumId::OtherGamesOfChance,
            "slot_machines" | "slot_machines_and_slot_games" => SubforumId::SlotMachines,
            "gambling_arcades_and_casinos" => SubforumId::GamblingArcadesAndCasinos,
            "casino_complaints" => SubforumId::CasinoComplaints,
            "gambling_addiction" => SubforumId::GamblingAddiction,
            "online_casinos" => SubforumId::OnlineCasinos,
            "miscellaneous" => SubforumId::Miscellaneous,
            "other" => SubforumId::Other,
            _ => return None,
        };
        Some(id)
    }
}

impl fmt::Display for SubforumId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SubforumId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SubforumId::parse_known(s)
            .ok_or_else(|| Error::Validation(format!("unknown subforum {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Post {
    pub id: String,
    pub subforum: SubforumId,
    #[serde(default)]
    pub url: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub published_at: Option<DateTime<Utc>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub author_ref: Option<String>,
    pub is_initial: bool,
    #[serde(default)]
    pub text: String,
    #[serde(skip)]
    pub word_token_count: usize,
}

impl Post {
    pub fn new(
        id: impl Into<String>,
        subforum: SubforumId,
        is_initial: bool,
        text: impl Into<String>,
    ) -> Post {
        let text = text.into();
        Post {
            id: id.into(),
            subforum,
            url: String::new(),
            published_at: None,
            author_ref: None,
            is_initial,
            word_token_count: word_token_count(&text),
            text,
        }
    }

    fn same_content(&self, other: &Post) -> bool {
        self.subforum == other.subforum
            && self.url == other.url
            && self.published_at == other.published_at
            && self.author_ref == other.author_ref
            && self.is_initial == other.is_initial
            && self.text == other.text
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Author {
    pub username: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub activated_at: Option<DateTime<Utc>>,
    #[serde(default)]
    pub post_count: u64,
}

/// A post as it arrives from a dump; every field is optional so that
/// malformed lines can be counted instead of aborting the import.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RawPost {
    pub id: Option<String>,
    pub subforum: Option<String>,
    pub url: Option<String>,
    pub published_at: Option<String>,
    #[serde(alias = "author")]
    pub author_ref: Option<String>,
    pub is_initial: Option<bool>,
    pub text: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RawAuthor {
    pub username: Option<String>,
    pub activated_at: Option<String>,
    pub post_count: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    /// Posts from this input that are now in the store (new or identical).
    pub n_posts: usize,
    pub n_authors: usize,
    pub n_rejected: usize,
    /// Rejection reasons plus non-fatal notes such as `unknown_subforum`.
    pub reasons: ReasonCounts,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PostFilter {
    pub subforums: Option<Vec<SubforumId>>,
    pub initial_only: bool,
    pub max_tokens: Option<usize>,
}

impl PostFilter {
    pub fn matches(&self, post: &Post) -> bool {
        if let Some(subs) = &self.subforums {
            if !subs.contains(&post.subforum) {
                return false;
            }
        }
        if self.initial_only && !post.is_initial {
            return false;
        }
        if let Some(max) = self.max_tokens {
            if post.word_token_count > max {
                return false;
            }
        }
        true
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub total_posts: usize,
    pub per_subforum_counts: BTreeMap<SubforumId, usize>,
    pub mean_tokens_addiction: Option<f64>,
    pub mean_tokens_other: Option<f64>,
    pub n_initial_addiction: usize,
    pub n_initial_other: usize,
}

/// Accepts RFC 3339, or `YYYY-MM-DD HH:MM:SS` / `YYYY-MM-DDTHH:MM:SS`
/// interpreted as UTC.
pub fn parse_timestamp(s: &str) -> Option<DateTime<Utc>> {
    let s = s.trim();
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Some(dt.with_timezone(&Utc));
    }
    ["%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M"]
        .iter()
        .find_map(|fmt| NaiveDateTime::parse_from_str(s, fmt).ok())
        .map(|naive| naive.and_utc())
}

#[derive(Debug, Clone, Default)]
pub struct CorpusStore {
    posts: BTreeMap<String, Post>,
    authors: BTreeMap<String, Author>,
}

impl CorpusStore {
    pub fn new() -> CorpusStore {
        CorpusStore::default()
    }

    pub fn len(&self) -> usize {
        self.posts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.posts.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Post> {
        self.posts.get(id)
    }

    pub fn authors(&self) -> impl Iterator<Item = &Author> {
        self.authors.values()
    }

    /// Inserts already-validated posts, replacing any with the same id.
    pub fn insert(&mut self, mut post: Post) {
        post.word_token_count = word_token_count(&post.text);
        self.posts.insert(post.id.clone(), post);
    }

    pub fn ingest_raw<P, A>(&mut self, posts: P, authors: A) -> IngestReport
    where
        P: IntoIterator<Item = RawPost>,
        A: IntoIterator<Item = RawAuthor>,
    {
        let mut report = IngestReport::default();
        let reject = |report: &mut IngestReport, reason: &str| {
            report.n_rejected += 1;
            *report.reasons.entry(reason.to_string()).or_default() += 1;
        };

        for raw in posts {
            let (Some(id), Some(sub_name)) = (raw.id, raw.subforum) else {
                reject(&mut report, "missing_field");
                continue;
            };
            let subforum = match SubforumId::parse_known(&sub_name) {
                Some(s) => s,
                None => {
                    *report.reasons.entry("unknown_subforum".into()).or_default() += 1;
                    SubforumId::Other
                }
            };
            let published_at = match raw.published_at.as_deref() {
                None | Some("") => None,
                Some(s) => match parse_timestamp(s) {
                    Some(ts) => Some(ts),
                    None => {
                        reject(&mut report, "bad_timestamp");
                        continue;
                    }
                },
            };
            let text = raw.text.unwrap_or_default();
            let post = Post {
                id: id.clone(),
                subforum,
                url: raw.url.unwrap_or_default(),
                published_at,
                author_ref: raw.author_ref,
                is_initial: raw.is_initial.unwrap_or(true),
                word_token_count: word_token_count(&text),
                text,
            };
            match self.posts.get(&id) {
                Some(existing) if existing.same_content(&post) => report.n_posts += 1,
                Some(_) => reject(&mut report, "duplicate_conflict"),
                None => {
                    self.posts.insert(id, post);
                    report.n_posts += 1;
                }
            }
        }

        for raw in authors {
            let Some(username) = raw.username else {
                reject(&mut report, "missing_field");
                continue;
            };
            let activated_at = match raw.activated_at.as_deref() {
                None | Some("") => None,
                Some(s) => match parse_timestamp(s) {
                    Some(ts) => Some(ts),
                    None => {
                        reject(&mut report, "bad_timestamp");
                        continue;
                    }
                },
            };
            let author = Author {
                username: username.clone(),
                activated_at,
                post_count: raw.post_count.unwrap_or(0),
            };
            match self.authors.get(&username) {
                Some(existing) if *existing == author => report.n_authors += 1,
                Some(_) => reject(&mut report, "duplicate_conflict"),
                None => {
                    self.authors.insert(username, author);
                    report.n_authors += 1;
                }
            }
        }
        report
    }

    /// Posts matching every predicate of `filter`, ordered by id.
    pub fn query_posts(&self, filter: &PostFilter) -> Vec<Post> {
        self.posts
            .values()
            .filter(|p| filter.matches(p))
            .cloned()
            .collect()
    }

    pub fn all_posts(&self) -> Vec<Post> {
        self.posts.values().cloned().collect()
    }

    pub fn corpus_stats(&self) -> CorpusStats {
        let mut per_subforum_counts = BTreeMap::new();
        let (mut sum_add, mut n_add, mut sum_other, mut n_other) = (0usize, 0usize, 0usize, 0usize);
        let (mut init_add, mut init_other) = (0, 0);
        for p in self.posts.values() {
            *per_subforum_counts.entry(p.subforum).or_insert(0) += 1;
            if p.subforum.is_addiction() {
                sum_add += p.word_token_count;
                n_add += 1;
                init_add += usize::from(p.is_initial);
            } else {
                sum_other += p.word_token_count;
                n_other += 1;
                init_other += usize::from(p.is_initial);
            }
        }
        let mean = |s: usize, n: usize| (n > 0).then(|| s as f64 / n as f64);
        CorpusStats {
            total_posts: self.posts.len(),
            per_subforum_counts,
            mean_tokens_addiction: mean(sum_add, n_add),
            mean_tokens_other: mean(sum_other, n_other),
            n_initial_addiction: init_add,
            n_initial_other: init_other,
        }
    }

    pub fn load(dir: &Path) -> Result<CorpusStore> {
        let posts_path = dir.join("posts.jsonl");
        if !posts_path.exists() {
            return Err(Error::NotFound {
                path: posts_path.display().to_string(),
            });
        }
        let mut store = CorpusStore::new();
        for post in read_jsonl::<Post>(&posts_path)? {
            store.insert(post);
        }
        let authors_path = dir.join("authors.jsonl");
        if authors_path.exists() {
            for a in read_jsonl::<Author>(&authors_path)? {
                store.authors.insert(a.username.clone(), a);
            }
        }
        Ok(store)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        write_jsonl(&dir.join("posts.jsonl"), self.posts.values())?;
        write_jsonl(&dir.join("authors.jsonl"), self.authors.values())?;
        Ok(())
    }

    /// Imports the `post` and `author` tables of a forum dump database.
    ///
    /// Expected columns: `post(id, subforum, url, published_at, author,
    /// is_initial, text)` and `author(username, activated_at, post_count)`.
    /// The `author` table is optional.
    #[cfg(feature = "sqlite")]
    pub fn import_sqlite(&mut self, path: &Path) -> Result<IngestReport> {
        use rusqlite::{Connection, OpenFlags};

        if !path.exists() {
            return Err(Error::NotFound {
                path: path.display().to_string(),
            });
        }
        let conn = Connection::open_with_flags(path, OpenFlags::SQLITE_OPEN_READ_ONLY)?;
        let mut stmt = conn.prepare(
            "SELECT CAST(id AS TEXT), subforum, url, published_at, author, is_initial, text FROM post",
        )?;
        let posts = stmt
            .query_map([], |row| {
                Ok(RawPost {
                    id: row.get(0)?,
                    subforum: row.get(1)?,
                    url: row.get(2)?,
                    published_at: row.get(3)?,
                    author_ref: row.get(4)?,
                    is_initial: row.get::<_, Option<i64>>(5)?.map(|v| v != 0),
                    text: row.get(6)?,
                })
            })?
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let has_authors: bool = conn.query_row(
            "SELECT count(*) > 0 FROM sqlite_master WHERE type = 'table' AND name = 'author'",
            [],
            |r| r.get(0),
        )?;
        let authors = if has_authors {
            let mut stmt = conn.prepare("SELECT username, activated_at, post_count FROM author")?;
            let rows = stmt
                .query_map([], |row| {
                    Ok(RawAuthor {
                        username: row.get(0)?,
                        activated_at: row.get(1)?,
                        post_count: row.get::<_, Option<i64>>(2)?.map(|v| v.max(0) as u64),
                    })
                })?
                .collect::<std::result::Result<Vec<_>, _>>()?;
            rows
        } else {
            Vec::new()
        };
        Ok(self.ingest_raw(posts, authors))
    }
}

pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound {
            path: path.display().to_string(),
        },
        _ => Error::io(path.display().to_string(), e),
    })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line)
            .map_err(|e| Error::json(format!("{}:{}", path.display(), i + 1), e))?;
        out.push(value);
    }
    Ok(out)
}

pub fn write_jsonl<'a, T, I>(path: &Path, items: I) -> Result<()>
where
    T: Serialize + 'a,
    I: IntoIterator<Item = &'a T>,
{
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item)
            .map_err(|e| Error::json(path.display().to_string(), e))?;
        w.write_all(b"\n")
            .map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    w.flush()
        .map_err(|e| Error::io(path.display().to_string(), e))
}
