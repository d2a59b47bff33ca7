//! Append-only electronic logbook backed by a JSON-lines file.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};

use super::bm25::{Bm25Index, RankedHit};
use super::{KnowledgeError, Passage, Retriever};
use crate::clock::format_utc;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogbookEntry {
    pub id: u64,
    /// UTC seconds.
    pub timestamp: i64,
    pub author: String,
    pub title: String,
    pub body: String,
    #[serde(default)]
    pub tags: Vec<String>,
}

impl LogbookEntry {
    fn search_text(&self) -> String {
        format!("{}\n{}\n{}", self.title, self.body, self.tags.join(" "))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntryDraft {
    pub timestamp: i64,
    pub author: String,
    pub title: String,
    pub body: String,
    #[serde(default)]
    pub tags: Vec<String>,
}

struct Snapshot {
    entries: Vec<LogbookEntry>,
    index: Bm25Index,
}

impl Snapshot {
    fn new(entries: Vec<LogbookEntry>) -> Self {
        let texts: Vec<(u64, String)> = entries.iter().map(|e| (e.id, e.search_text())).collect();
        let index = Bm25Index::build(texts.iter().map(|(id, t)| (*id, t.as_str())));
        Snapshot { entries, index }
    }
}

pub struct Logbook {
    current: RwLock<Arc<Snapshot>>,
    appender: Mutex<Option<File>>,
    path: Option<PathBuf>,
}

fn read_jsonl(path: &Path) -> Result<Vec<LogbookEntry>, KnowledgeError> {
    let unreadable = |e: &dyn std::fmt::Display| {
        KnowledgeError::UnreadablePath(format!("{}: {e}", path.display()))
    };
    let file = File::open(path).map_err(|e| unreadable(&e))?;
    let mut entries: Vec<LogbookEntry> = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| unreadable(&e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: LogbookEntry = serde_json::from_str(&line)
            .map_err(|e| KnowledgeError::Corrupt(format!("{}:{}: {e}", path.display(), n + 1)))?;
        if entries.last().is_some_and(|prev| prev.id >= entry.id) {
            return Err(KnowledgeError::Corrupt(format!(
                "{}:{}: ids must increase",
                path.display(),
                n + 1
            )));
        }
        entries.push(entry);
    }
    Ok(entries)
}

impl Logbook {
    /// A logbook that lives only in memory.
    pub fn in_memory(entries: Vec<LogbookEntry>) -> Self {
        Logbook {
            current: RwLock::new(Arc::new(Snapshot::new(entries))),
            appender: Mutex::new(None),
            path: None,
        }
    }

    /// Loads seed entries (JSON lines) into an in-memory logbook.
    pub fn from_seed(seed: &Path) -> Result<Self, KnowledgeError> {
        Ok(Self::in_memory(read_jsonl(seed)?))
    }

    /// Opens the persistent store at `path`. A missing store is created,
    /// starting from `seed` when given.
    pub fn open(path: &Path, seed: Option<&Path>) -> Result<Self, KnowledgeError> {
        let io =
            |e: std::io::Error| KnowledgeError::UnreadablePath(format!("{}: {e}", path.display()));
        if !path.exists() {
            let initial = match seed {
                Some(s) => read_jsonl(s)?,
                None => Vec::new(),
            };
            let mut f = File::create(path).map_err(io)?;
            for e in &initial {
                writeln!(f, "{}", serde_json::to_string(e).expect("entry serializes"))
                    .map_err(io)?;
            }
        }
        let entries = read_jsonl(path)?;
        let file = OpenOptions::new().append(true).open(path).map_err(io)?;
        Ok(Logbook {
            current: RwLock::new(Arc::new(Snapshot::new(entries))),
            appender: Mutex::new(Some(file)),
            path: Some(path.to_owned()),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn post_entry(&self, draft: EntryDraft) -> Result<u64, KnowledgeError> {
        if draft.body.trim().is_empty() {
            return Err(KnowledgeError::EmptyBody);
        }
        if draft.title.trim().is_empty() {
            return Err(KnowledgeError::EmptyTitle);
        }
        // the appender lock serializes posts
        let mut appender = self.appender.lock();
        let old = self.current.read().clone();
        let id = old.entries.last().map_or(1, |e| e.id + 1);
        let entry = LogbookEntry {
            id,
            timestamp: draft.timestamp,
            author: draft.author,
            title: draft.title,
            body: draft.body,
            tags: draft.tags,
        };
        if let Some(file) = appender.as_mut() {
            writeln!(
                file,
                "{}",
                serde_json::to_string(&entry).expect("entry serializes")
            )
            .and_then(|()| file.flush())
            .map_err(|e| KnowledgeError::UnreadablePath(e.to_string()))?;
        }
        let mut entries = old.entries.clone();
        entries.push(entry);
        *self.current.write() = Arc::new(Snapshot::new(entries));
        Ok(id)
    }

    pub fn get(&self, id: u64) -> Option<LogbookEntry> {
        let snap = self.current.read().clone();
        let pos = snap.entries.binary_search_by_key(&id, |e| e.id).ok()?;
        Some(snap.entries[pos].clone())
    }

    pub fn entries(&self) -> Vec<LogbookEntry> {
        self.current.read().entries.clone()
    }

    pub fn len(&self) -> usize {
        self.current.read().entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn next_id(&self) -> u64 {
        self.current.read().entries.last().map_or(1, |e| e.id + 1)
    }

    /// BM25 search over title, body and tags, optionally restricted to
    /// entries at or after `since`.
    pub fn search(&self, query: &str, k: usize, since: Option<i64>) -> Vec<RankedHit> {
        let snap = self.current.read().clone();
        let newer = |id: u64| match since {
            None => true,
            Some(t) => snap
                .entries
                .binary_search_by_key(&id, |e| e.id)
                .map(|p| snap.entries[p].timestamp >= t)
                .unwrap_or(false),
        };
        snap.index.search(query, k, newer)
    }
}

impl Retriever for Logbook {
    fn retrieve(&self, query: &str, k: usize) -> Vec<Passage> {
        self.search(query, k, None)
            .into_iter()
            .filter_map(|h| self.get(h.id))
            .map(|e| Passage {
                label: format!(
                    "logbook #{} ({}, {})",
                    e.id,
                    format_utc(e.timestamp),
                    e.author
                ),
                heading: e.title,
                text: e.body,
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn draft(title: &str, body: &str) -> EntryDraft {
        EntryDraft {
            timestamp: 100,
            author: "op".into(),
            title: title.into(),
            body: body.into(),
            tags: vec![],
        }
    }

    #[test]
    fn post_then_fetch() {
        let log = Logbook::in_memory(vec![]);
        let id = log.post_entry(draft("Title", "Body text")).unwrap();
        let e = log.get(id).unwrap();
        assert_eq!(
            (e.title.as_str(), e.body.as_str(), e.timestamp),
            ("Title", "Body text", 100)
        );
        assert_eq!(log.post_entry(draft("Second", "b")).unwrap(), id + 1);
    }

    #[test]
    fn empty_body_rejected() {
        let log = Logbook::in_memory(vec![]);
        assert_eq!(
            log.post_entry(draft("t", "  ")),
            Err(KnowledgeError::EmptyBody)
        );
        assert_eq!(
            log.post_entry(draft("", "b")),
            Err(KnowledgeError::EmptyTitle)
        );
        assert!(log.is_empty());
    }

    #[test]
    fn since_filter() {
        let log = Logbook::in_memory(vec![]);
        log.post_entry(EntryDraft {
            timestamp: 10,
            ..draft("beam loss", "old beam loss")
        })
        .unwrap();
        log.post_entry(EntryDraft {
            timestamp: 20,
            ..draft("beam loss", "new beam loss")
        })
        .unwrap();
        let hits = log.search("beam loss", 5, Some(15));
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].id, 2);
    }

    #[test]
    fn reload_reproduces_store() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("logbook.jsonl");
        let log = Logbook::open(&path, None).unwrap();
        for i in 0..5 {
            log.post_entry(draft(
                &format!("entry {i}"),
                &format!("magnet number {i} cycled"),
            ))
            .unwrap();
        }
        let before = (log.entries(), log.search("magnet cycled 3", 5, None));
        drop(log);
        let again = Logbook::open(&path, None).unwrap();
        assert_eq!(
            (again.entries(), again.search("magnet cycled 3", 5, None)),
            before
        );
        assert_eq!(again.post_entry(draft("x", "y")).unwrap(), 6);
    }

    #[test]
    fn corrupt_store_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(&path, "{\"id\":2,\"timestamp\":0,\"author\":\"a\",\"title\":\"t\",\"body\":\"b\"}\n{\"id\":1,\"timestamp\":0,\"author\":\"a\",\"title\":\"t\",\"body\":\"b\"}\n").unwrap();
        assert!(matches!(
            Logbook::from_seed(&path),
            Err(KnowledgeError::Corrupt(_))
        ));
    }
}
