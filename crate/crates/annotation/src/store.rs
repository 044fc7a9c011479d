//! Append-only JSONL rating log.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{AnnotationError, Result};
use crate::rating::RatingRecord;

pub const LOG_FILE: &str = "ratings.jsonl";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoredRating {
    /// Position in the log, starting at 1.
    pub id: u64,
    /// 1 for the first rating of a (task, annotator) pair, then 2, 3, ...
    pub version: u32,
    pub received_at_ms: u64,
    pub record: RatingRecord,
}

#[derive(Debug)]
pub struct RatingStore {
    path: PathBuf,
    file: File,
    records: Vec<StoredRating>,
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

impl RatingStore {
    /// Open (or create) the log in `dir`. An unterminated last line, left by a
    /// crash mid-write, was never acknowledged and is cut off.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let path = dir.as_ref().join(LOG_FILE);
        let text = match std::fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
            Err(e) => return Err(e.into()),
        };
        let mut records = Vec::new();
        let mut good_len = 0usize;
        for line in text.split_inclusive('\n') {
            if !line.ends_with('\n') {
                log::warn!("dropping unterminated last line of {}", path.display());
                break;
            }
            let body = line.trim_end();
            if !body.is_empty() {
                let r: StoredRating = serde_json::from_str(body).map_err(|e| {
                    AnnotationError::Corrupt(format!("{} line {}: {e}", path.display(), records.len() + 1))
                })?;
                records.push(r);
            }
            good_len += line.len();
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        if good_len < text.len() {
            file.set_len(good_len as u64)?;
            file.sync_all()?;
        }
        Ok(Self { path, file, records })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Append a validated record and flush it to disk before returning.
    pub fn append(&mut self, record: RatingRecord) -> Result<StoredRating> {
        let version = self
            .records
            .iter()
            .filter(|r| r.record.task_id == record.task_id && r.record.annotator_id == record.annotator_id)
            .map(|r| r.version)
            .max()
            .unwrap_or(0)
            + 1;
        let stored = StoredRating { id: self.records.len() as u64 + 1, version, received_at_ms: now_ms(), record };
        let mut line = serde_json::to_string(&stored)?;
        line.push('\n');
        self.file.write_all(line.as_bytes())?;
        self.file.sync_data()?;
        self.records.push(stored.clone());
        Ok(stored)
    }

    pub fn all(&self) -> &[StoredRating] {
        &self.records
    }

    /// Latest version for every (task, annotator) pair, ordered by task then annotator.
    pub fn latest(&self, annotator: Option<&str>) -> Vec<&StoredRating> {
        let mut map: BTreeMap<(&str, &str), &StoredRating> = BTreeMap::new();
        for r in &self.records {
            if annotator.is_some_and(|a| a != r.record.annotator_id) {
                continue;
            }
            let key = (r.record.task_id.as_str(), r.record.annotator_id.as_str());
            if map.get(&key).is_none_or(|old| old.version < r.version) {
                map.insert(key, r);
            }
        }
        map.into_values().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rating::AspectScores;

    fn rec(task: &str, who: &str) -> RatingRecord {
        let s = AspectScores::default();
        RatingRecord {
            task_id: task.into(),
            scores: [("A", s), ("B", s), ("C", s)].into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
            global_preference: [("A", 1), ("B", 2), ("C", 3), ("real", 4)].into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
            annotator_id: who.into(),
            timestamp: None,
        }
    }

    #[test]
    fn versions_and_latest() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = RatingStore::open(dir.path()).unwrap();
        assert_eq!(s.append(rec("task-00", "a")).unwrap().version, 1);
        assert_eq!(s.append(rec("task-00", "b")).unwrap().version, 1);
        let third = s.append(rec("task-00", "a")).unwrap();
        assert_eq!((third.id, third.version), (3, 2));
        let latest = s.latest(None);
        assert_eq!(latest.len(), 2);
        assert_eq!(latest[0].id, 3);
        assert_eq!(s.latest(Some("b")).len(), 1);
    }

    #[test]
    fn reopen_keeps_acknowledged_and_drops_torn_tail() {
        let dir = tempfile::tempdir().unwrap();
        {
            let mut s = RatingStore::open(dir.path()).unwrap();
            s.append(rec("task-00", "a")).unwrap();
            s.append(rec("task-01", "a")).unwrap();
        }
        let mut f = OpenOptions::new().append(true).open(dir.path().join(LOG_FILE)).unwrap();
        f.write_all(b"{\"id\":3,\"vers").unwrap();
        drop(f);
        let mut s = RatingStore::open(dir.path()).unwrap();
        assert_eq!(s.all().len(), 2);
        assert_eq!(s.append(rec("task-02", "a")).unwrap().id, 3);
        let s = RatingStore::open(dir.path()).unwrap();
        assert_eq!(s.all().len(), 3);
    }
}
