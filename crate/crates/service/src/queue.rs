//! Queue, lease and submission bookkeeping, independent of HTTP.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Duration, Utc};
use pgrisk::annotation::{
    resolve_label, AnnotationRecord, BlindItem, CriteriaSchema, Flag, Label, LabelOverride,
};
use pgrisk::corpus::read_jsonl;
use serde::{Deserialize, Serialize};

pub const DEFAULT_LEASE_SECONDS: i64 = 30 * 60;
pub const RECORDS_FILE: &str = "annotations.jsonl";
pub const LEASES_FILE: &str = "leases.jsonl";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum QueueError {
    UnknownPost(String),
    Conflict(String),
    NotLeased(String),
    LeaseExpired(String),
    Validation(String),
    Storage(String),
}

impl QueueError {
    pub fn code(&self) -> &'static str {
        match self {
            QueueError::UnknownPost(_) => "unknown_post",
            QueueError::Conflict(_) => "conflict",
            QueueError::NotLeased(_) => "not_leased",
            QueueError::LeaseExpired(_) => "lease_expired",
            QueueError::Validation(_) => "validation",
            QueueError::Storage(_) => "storage",
        }
    }

    pub fn detail(&self) -> &str {
        match self {
            QueueError::UnknownPost(d)
            | QueueError::Conflict(d)
            | QueueError::NotLeased(d)
            | QueueError::LeaseExpired(d)
            | QueueError::Validation(d)
            | QueueError::Storage(d) => d,
        }
    }
}

impl std::fmt::Display for QueueError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.code(), self.detail())
    }
}

impl std::error::Error for QueueError {}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub item: BlindItem,
    pub assigned_to: String,
    pub assigned_at: DateTime<Utc>,
    pub lease_seconds: i64,
}

/// Body of a submission; the annotator and timestamp come from the server.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Submission {
    pub post_id: String,
    #[serde(default)]
    pub annotator_id: Option<String>,
    #[serde(default)]
    pub checked_criteria: BTreeSet<String>,
    #[serde(default)]
    pub flags: BTreeSet<Flag>,
    #[serde(default)]
    pub manual_label_override: Option<LabelOverride>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Accepted {
    pub record_id: usize,
    pub label: Label,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub total: usize,
    pub annotated: usize,
    pub inconclusive_so_far: usize,
    pub remaining: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct LeaseEvent {
    post_id: String,
    annotator_id: String,
    assigned_at: DateTime<Utc>,
}

#[derive(Debug)]
struct Storage {
    records: File,
    leases: File,
}

fn append_line<T: Serialize>(file: &mut File, value: &T) -> Result<(), QueueError> {
    let mut line = serde_json::to_vec(value).map_err(|e| QueueError::Storage(e.to_string()))?;
    line.push(b'\n');
    file.write_all(&line)
        .and_then(|_| file.sync_data())
        .map_err(|e| QueueError::Storage(e.to_string()))
}

/// The annotation queue. Records and lease grants are appended to JSONL
/// files and replayed on open.
#[derive(Debug)]
pub struct Queue {
    schema: CriteriaSchema,
    items: Vec<BlindItem>,
    index: HashMap<String, usize>,
    lease_seconds: i64,
    leases: BTreeMap<String, LeaseEvent>,
    ever_leased: BTreeSet<(String, String)>,
    records: Vec<AnnotationRecord>,
    submitted: BTreeSet<(String, String)>,
    annotated: BTreeSet<String>,
    inconclusive: usize,
    storage: Option<Storage>,
}

impl Queue {
    /// An in-memory queue in the given order.
    pub fn new(items: Vec<BlindItem>, schema: CriteriaSchema, lease_seconds: i64) -> Queue {
        let index = items
            .iter()
            .enumerate()
            .map(|(i, it)| (it.id.clone(), i))
            .collect();
        Queue {
            schema,
            items,
            index,
            lease_seconds,
            leases: BTreeMap::new(),
            ever_leased: BTreeSet::new(),
            records: Vec::new(),
            submitted: BTreeSet::new(),
            annotated: BTreeSet::new(),
            inconclusive: 0,
            storage: None,
        }
    }

    /// A queue persisted under `dir`, replaying any earlier state.
    pub fn open(
        items: Vec<BlindItem>,
        schema: CriteriaSchema,
        lease_seconds: i64,
        dir: &Path,
    ) -> Result<Queue, QueueError> {
        std::fs::create_dir_all(dir)
            .map_err(|e| QueueError::Storage(format!("{}: {e}", dir.display())))?;
        let mut q = Queue::new(items, schema, lease_seconds);
        let records_path = dir.join(RECORDS_FILE);
        let leases_path = dir.join(LEASES_FILE);
        let read = |p: &PathBuf| p.exists();
        if read(&leases_path) {
            let events: Vec<LeaseEvent> =
                read_jsonl(&leases_path).map_err(|e| QueueError::Storage(e.to_string()))?;
            for ev in events {
                q.ever_leased
                    .insert((ev.post_id.clone(), ev.annotator_id.clone()));
                q.leases.insert(ev.post_id.clone(), ev);
            }
        }
        if read(&records_path) {
            let records: Vec<AnnotationRecord> =
                read_jsonl(&records_path).map_err(|e| QueueError::Storage(e.to_string()))?;
            for r in records {
                q.apply_record(r)?;
            }
        }
        let open = |p: &PathBuf| {
            OpenOptions::new()
                .create(true)
                .append(true)
                .open(p)
                .map_err(|e| QueueError::Storage(format!("{}: {e}", p.display())))
        };
        q.storage = Some(Storage {
            records: open(&records_path)?,
            leases: open(&leases_path)?,
        });
        Ok(q)
    }

    pub fn schema(&self) -> &CriteriaSchema {
        &self.schema
    }

    pub fn records(&self) -> &[AnnotationRecord] {
        &self.records
    }

    fn apply_record(&mut self, r: AnnotationRecord) -> Result<Label, QueueError> {
        let label =
            resolve_label(&self.schema, &r).map_err(|e| QueueError::Validation(e.to_string()))?;
        if label == Label::Inconclusive {
            self.inconclusive += 1;
        }
        if self
            .leases
            .get(&r.post_id)
            .is_some_and(|l| l.annotator_id == r.annotator_id)
        {
            self.leases.remove(&r.post_id);
        }
        self.annotated.insert(r.post_id.clone());
        self.submitted
            .insert((r.post_id.clone(), r.annotator_id.clone()));
        self.records.push(r);
        Ok(label)
    }

    fn active(&self, lease: &LeaseEvent, now: DateTime<Utc>) -> bool {
        now < lease.assigned_at + Duration::seconds(self.lease_seconds)
    }

    fn assignment(&self, lease: &LeaseEvent) -> Assignment {
        Assignment {
            item: self.items[self.index[&lease.post_id]].clone(),
            assigned_to: lease.annotator_id.clone(),
            assigned_at: lease.assigned_at,
            lease_seconds: self.lease_seconds,
        }
    }

    /// The caller's active lease if it has one, otherwise the first item in
    /// queue order that has no annotation and no active lease. `None` once
    /// nothing is left for this annotator.
    pub fn next_item(
        &mut self,
        annotator: &str,
        now: DateTime<Utc>,
    ) -> Result<Option<Assignment>, QueueError> {
        if let Some(lease) = self
            .items
            .iter()
            .filter_map(|it| self.leases.get(&it.id))
            .find(|l| {
                l.annotator_id == annotator
                    && self.active(l, now)
                    && !self.annotated.contains(&l.post_id)
            })
        {
            return Ok(Some(self.assignment(lease)));
        }
        let free = self.items.iter().find(|it| {
            !self.annotated.contains(&it.id)
                && !self
                    .submitted
                    .contains(&(it.id.clone(), annotator.to_string()))
                && self.leases.get(&it.id).is_none_or(|l| !self.active(l, now))
        });
        let Some(item) = free else {
            return Ok(None);
        };
        let lease = LeaseEvent {
            post_id: item.id.clone(),
            annotator_id: annotator.to_string(),
            assigned_at: now,
        };
        if let Some(s) = &mut self.storage {
            append_line(&mut s.leases, &lease)?;
        }
        self.ever_leased
            .insert((lease.post_id.clone(), lease.annotator_id.clone()));
        let out = self.assignment(&lease);
        self.leases.insert(lease.post_id.clone(), lease);
        Ok(Some(out))
    }

    /// Validates and appends a record for an item leased to `annotator`.
    pub fn submit(
        &mut self,
        annotator: &str,
        sub: Submission,
        now: DateTime<Utc>,
    ) -> Result<Accepted, QueueError> {
        if !self.index.contains_key(&sub.post_id) {
            return Err(QueueError::UnknownPost(format!(
                "post {} is not in the queue",
                sub.post_id
            )));
        }
        if let Some(claimed) = &sub.annotator_id {
            if claimed != annotator {
                return Err(QueueError::Validation(
                    "annotator_id does not match the token".into(),
                ));
            }
        }
        let key = (sub.post_id.clone(), annotator.to_string());
        if self.submitted.contains(&key) {
            return Err(QueueError::Conflict(format!(
                "{annotator} already annotated {}",
                sub.post_id
            )));
        }
        match self.leases.get(&sub.post_id) {
            Some(l) if l.annotator_id == annotator => {}
            Some(l) if self.active(l, now) => {
                return Err(QueueError::LeaseExpired(format!(
                    "lease on {} expired and the item is now held by another annotator",
                    sub.post_id
                )))
            }
            _ if self.ever_leased.contains(&key) => {}
            _ => {
                return Err(QueueError::NotLeased(format!(
                    "{} was not leased to {annotator}",
                    sub.post_id
                )))
            }
        }
        let record = AnnotationRecord {
            post_id: sub.post_id,
            annotator_id: annotator.to_string(),
            checked_criteria: sub.checked_criteria,
            flags: sub.flags,
            manual_label_override: sub.manual_label_override,
            created_at: now,
        };
        self.schema
            .validate_record(&record)
            .map_err(|e| QueueError::Validation(e.to_string()))?;
        if let Some(s) = &mut self.storage {
            append_line(&mut s.records, &record)?;
        }
        let label = self.apply_record(record)?;
        Ok(Accepted {
            record_id: self.records.len() - 1,
            label,
        })
    }

    pub fn progress(&self) -> Progress {
        let annotated = self
            .annotated
            .iter()
            .filter(|id| self.index.contains_key(*id))
            .count();
        Progress {
            total: self.items.len(),
            annotated,
            inconclusive_so_far: self.inconclusive,
            remaining: self.items.len() - annotated,
        }
    }

    /// All accepted records as JSONL, in submission order.
    pub fn export_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("records serialize"));
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn items(n: usize) -> Vec<BlindItem> {
        (0..n)
            .map(|i| BlindItem {
                id: format!("p{i}"),
                text: format!("text {i}"),
            })
            .collect()
    }

    fn t(secs: i64) -> DateTime<Utc> {
        DateTime::<Utc>::UNIX_EPOCH + Duration::seconds(secs)
    }

    fn sub(id: &str) -> Submission {
        Submission {
            post_id: id.into(),
            annotator_id: None,
            checked_criteria: BTreeSet::new(),
            flags: BTreeSet::new(),
            manual_label_override: None,
        }
    }

    fn queue(n: usize) -> Queue {
        Queue::new(items(n), CriteriaSchema::standard(), DEFAULT_LEASE_SECONDS)
    }

    #[test]
    fn serves_distinct_items_then_none() {
        let mut q = queue(3);
        let a = q.next_item("ann", t(0)).unwrap().unwrap();
        assert_eq!(q.next_item("ann", t(1)).unwrap().unwrap().item, a.item);
        q.submit("ann", sub(&a.item.id), t(2)).unwrap();
        let b = q.next_item("ann", t(3)).unwrap().unwrap();
        assert_ne!(a.item.id, b.item.id);
        q.submit("ann", sub(&b.item.id), t(4)).unwrap();
        let c = q.next_item("ann", t(5)).unwrap().unwrap();
        q.submit("ann", sub(&c.item.id), t(6)).unwrap();
        assert!(q.next_item("ann", t(7)).unwrap().is_none());
        assert_eq!(q.progress().remaining, 0);
    }

    #[test]
    fn leases_are_exclusive_until_expiry() {
        let mut q = queue(1);
        let a = q.next_item("a", t(0)).unwrap().unwrap();
        assert!(q.next_item("b", t(10)).unwrap().is_none());
        let b = q.next_item("b", t(DEFAULT_LEASE_SECONDS)).unwrap().unwrap();
        assert_eq!(a.item, b.item);
        let err = q
            .submit("a", sub(&a.item.id), t(DEFAULT_LEASE_SECONDS + 1))
            .unwrap_err();
        assert_eq!(err.code(), "lease_expired");
        q.submit("b", sub(&b.item.id), t(DEFAULT_LEASE_SECONDS + 2))
            .unwrap();
    }

    #[test]
    fn duplicate_unknown_and_invalid_submissions() {
        let mut q = queue(2);
        let a = q.next_item("a", t(0)).unwrap().unwrap();
        let mut bad = sub(&a.item.id);
        bad.checked_criteria.insert("X99".into());
        assert_eq!(q.submit("a", bad, t(1)).unwrap_err().code(), "validation");
        let mut good = sub(&a.item.id);
        good.checked_criteria.insert("DSM3".into());
        assert_eq!(
            q.submit("a", good.clone(), t(2)).unwrap().label,
            Label::Target
        );
        assert_eq!(q.submit("a", good, t(3)).unwrap_err().code(), "conflict");
        assert_eq!(
            q.submit("a", sub("nope"), t(4)).unwrap_err().code(),
            "unknown_post"
        );
        assert_eq!(
            q.submit("a", sub("p1"), t(5)).unwrap_err().code(),
            "not_leased"
        );
    }

    #[test]
    fn progress_counts() {
        let mut q = queue(504);
        assert_eq!(
            q.progress(),
            Progress {
                total: 504,
                annotated: 0,
                inconclusive_so_far: 0,
                remaining: 504
            }
        );
        let a = q.next_item("a", t(0)).unwrap().unwrap();
        let mut s = sub(&a.item.id);
        s.manual_label_override = Some(LabelOverride {
            label: Label::Inconclusive,
            reason: "vague".into(),
        });
        q.submit("a", s, t(1)).unwrap();
        let p = q.progress();
        assert_eq!(
            (p.annotated, p.inconclusive_so_far, p.remaining),
            (1, 1, 503)
        );
    }

    #[test]
    fn state_survives_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let mut q = Queue::open(
            items(3),
            CriteriaSchema::standard(),
            DEFAULT_LEASE_SECONDS,
            dir.path(),
        )
        .unwrap();
        let a = q.next_item("a", t(0)).unwrap().unwrap();
        q.submit("a", sub(&a.item.id), t(1)).unwrap();
        let b = q.next_item("a", t(2)).unwrap().unwrap();
        let export = q.export_jsonl();
        drop(q);
        let mut q = Queue::open(
            items(3),
            CriteriaSchema::standard(),
            DEFAULT_LEASE_SECONDS,
            dir.path(),
        )
        .unwrap();
        assert_eq!(q.export_jsonl(), export);
        assert_eq!(q.progress().annotated, 1);
        // the open lease is still held
        assert_eq!(q.next_item("a", t(3)).unwrap().unwrap().item, b.item);
        assert_ne!(q.next_item("z", t(4)).unwrap().unwrap().item, b.item);
    }
}
