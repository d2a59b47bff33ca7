//! Heading-chunked document corpora (meeting notes, toolkit docs).

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

use super::bm25::{Bm25Index, RankedHit};
use super::{KnowledgeError, Passage, Retriever};
use crate::react::estimate_tokens;

/// Chunks never exceed this many estimated tokens.
pub const MAX_CHUNK_TOKENS: usize = 512;
const MAX_CHUNK_CHARS: usize = MAX_CHUNK_TOKENS * 4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocChunk {
    pub source_path: String,
    pub heading: String,
    pub body: String,
    pub token_estimate: usize,
}

impl DocChunk {
    fn new(source_path: &str, heading: &str, body: String) -> Self {
        DocChunk {
            source_path: source_path.to_owned(),
            heading: heading.to_owned(),
            token_estimate: estimate_tokens(&body),
            body,
        }
    }
}

/// Splits one document into chunks. Sections start at markdown headings;
/// text before the first heading is filed under `fallback_heading`. Long
/// sections are packed paragraph by paragraph and oversized paragraphs are
/// cut at a hard character limit.
pub fn chunk_document(source_path: &str, fallback_heading: &str, text: &str) -> Vec<DocChunk> {
    let mut sections: Vec<(String, String)> = vec![(fallback_heading.to_owned(), String::new())];
    for line in text.lines() {
        let trimmed = line.trim_start();
        if trimmed.starts_with('#') {
            let heading = trimmed.trim_start_matches('#').trim();
            sections.push((heading.to_owned(), String::new()));
        } else {
            let body = &mut sections.last_mut().expect("non-empty").1;
            body.push_str(line);
            body.push('\n');
        }
    }
    let mut chunks = Vec::new();
    for (heading, body) in sections {
        let body = body.trim();
        if body.is_empty() {
            continue;
        }
        for piece in split_long(body) {
            chunks.push(DocChunk::new(source_path, &heading, piece));
        }
    }
    chunks
}

fn split_long(body: &str) -> Vec<String> {
    if body.chars().count() <= MAX_CHUNK_CHARS {
        return vec![body.to_owned()];
    }
    let mut out = Vec::new();
    let mut current = String::new();
    let flush = |current: &mut String, out: &mut Vec<String>| {
        if !current.trim().is_empty() {
            out.push(current.trim().to_owned());
        }
        current.clear();
    };
    for para in body.split("\n\n").map(str::trim).filter(|p| !p.is_empty()) {
        let para_len = para.chars().count();
        if para_len > MAX_CHUNK_CHARS {
            flush(&mut current, &mut out);
            let chars: Vec<char> = para.chars().collect();
            for piece in chars.chunks(MAX_CHUNK_CHARS) {
                out.push(piece.iter().collect::<String>().trim().to_owned());
            }
            continue;
        }
        let joined = if current.is_empty() {
            para_len
        } else {
            current.chars().count() + 2 + para_len
        };
        if joined > MAX_CHUNK_CHARS {
            flush(&mut current, &mut out);
        }
        if !current.is_empty() {
            current.push_str("\n\n");
        }
        current.push_str(para);
    }
    flush(&mut current, &mut out);
    out.retain(|p| !p.is_empty());
    out
}

struct Snapshot {
    chunks: Vec<DocChunk>,
    index: Bm25Index,
}

impl Snapshot {
    fn new(files: &BTreeMap<String, Vec<DocChunk>>) -> Self {
        let chunks: Vec<DocChunk> = files.values().flatten().cloned().collect();
        let texts: Vec<String> = chunks
            .iter()
            .map(|c| format!("{}\n{}", c.heading, c.body))
            .collect();
        let index = Bm25Index::build(
            texts
                .iter()
                .enumerate()
                .map(|(i, t)| (i as u64, t.as_str())),
        );
        Snapshot { chunks, index }
    }
}

/// A named collection of chunks with a BM25 index over heading and body.
pub struct Corpus {
    name: String,
    files: Mutex<BTreeMap<String, Vec<DocChunk>>>,
    current: RwLock<Arc<Snapshot>>,
}

impl Corpus {
    pub fn new(name: impl Into<String>) -> Self {
        Corpus {
            name: name.into(),
            files: Mutex::new(BTreeMap::new()),
            current: RwLock::new(Arc::new(Snapshot::new(&BTreeMap::new()))),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Ingests every `.md` and `.txt` file below `dir` and returns how many
    /// chunks they produced. Source paths are recorded relative to the
    /// directory's parent, so ingesting the same directory again replaces
    /// its chunks instead of duplicating them.
    pub fn ingest(&self, dir: &Path) -> Result<usize, KnowledgeError> {
        let unreadable = |e: &dyn std::fmt::Display| {
            KnowledgeError::UnreadablePath(format!("{}: {e}", dir.display()))
        };
        if !dir.is_dir() {
            return Err(unreadable(&"not a directory"));
        }
        let root = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let mut fresh: BTreeMap<String, Vec<DocChunk>> = BTreeMap::new();
        for entry in WalkDir::new(dir).sort_by_file_name() {
            let entry = entry.map_err(|e| unreadable(&e))?;
            let path = entry.path();
            let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
            if !entry.file_type().is_file() || !matches!(ext, "md" | "txt") {
                continue;
            }
            let rel = path.strip_prefix(dir).expect("walk stays below root");
            let source = format!("{root}/{}", rel.to_string_lossy().replace('\\', "/"));
            let text = std::fs::read_to_string(path)
                .map_err(|e| unreadable(&format!("{}: {e}", path.display())))?;
            let stem = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            fresh.insert(source.clone(), chunk_document(&source, &stem, &text));
        }
        let count = fresh.values().map(Vec::len).sum();
        let mut files = self.files.lock();
        let prefix = format!("{root}/");
        files.retain(|k, _| !k.starts_with(&prefix));
        files.extend(fresh);
        *self.current.write() = Arc::new(Snapshot::new(&files));
        Ok(count)
    }

    pub fn len(&self) -> usize {
        self.current.read().chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn chunks(&self) -> Vec<DocChunk> {
        self.current.read().chunks.clone()
    }

    pub fn chunk(&self, id: u64) -> Option<DocChunk> {
        self.current.read().chunks.get(id as usize).cloned()
    }

    pub fn search(&self, query: &str, k: usize) -> Vec<RankedHit> {
        self.current.read().index.search(query, k, |_| true)
    }
}

impl Retriever for Corpus {
    fn retrieve(&self, query: &str, k: usize) -> Vec<Passage> {
        let snap = self.current.read().clone();
        snap.index
            .search(query, k, |_| true)
            .into_iter()
            .map(|h| {
                let c = &snap.chunks[h.id as usize];
                Passage {
                    label: c.source_path.clone(),
                    heading: c.heading.clone(),
                    text: c.body.clone(),
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_on_headings() {
        let doc = "intro line\n# First\nalpha\n\n## Second\nbeta\n# Empty\n";
        let c = chunk_document("d/a.md", "a", doc);
        let got: Vec<(&str, &str)> = c
            .iter()
            .map(|c| (c.heading.as_str(), c.body.as_str()))
            .collect();
        assert_eq!(
            got,
            vec![("a", "intro line"), ("First", "alpha"), ("Second", "beta")]
        );
        assert_eq!(c[0].token_estimate, 3);
    }

    #[test]
    fn long_sections_respect_limit() {
        let para = "word ".repeat(300);
        let doc = format!("# Big\n{}\n\n{}\n\n{}", para, para, "x".repeat(5000));
        let c = chunk_document("d/b.md", "b", &doc);
        assert!(c.len() >= 4);
        assert!(c
            .iter()
            .all(|c| c.token_estimate <= MAX_CHUNK_TOKENS && c.heading == "Big"));
    }

    #[test]
    fn ingest_is_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let docs = dir.path().join("docs");
        std::fs::create_dir(&docs).unwrap();
        std::fs::write(docs.join("one.md"), "# A\nfirst\n# B\nsecond").unwrap();
        std::fs::write(docs.join("two.txt"), "plain text").unwrap();
        std::fs::write(docs.join("skip.bin"), "ignored").unwrap();
        let corpus = Corpus::new("docs");
        assert_eq!(corpus.ingest(&docs).unwrap(), 3);
        assert_eq!(corpus.ingest(&docs).unwrap(), 3);
        assert_eq!(corpus.len(), 3);
        assert_eq!(corpus.chunk(2).unwrap().source_path, "docs/two.txt");
    }

    #[test]
    fn empty_and_missing_directories() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = Corpus::new("x");
        assert_eq!(corpus.ingest(dir.path()).unwrap(), 0);
        assert!(matches!(
            corpus.ingest(&dir.path().join("nope")),
            Err(KnowledgeError::UnreadablePath(_))
        ));
    }
}
