//! Logbook, document corpora and retrieval-augmented answering.

mod bm25;
mod corpus;
mod logbook;
mod rag;

use thiserror::Error;

pub use bm25::{rank_order, tokenize, Bm25Index, Bm25Params, RankedHit};
pub use corpus::{chunk_document, Corpus, DocChunk, MAX_CHUNK_TOKENS};
pub use logbook::{EntryDraft, Logbook, LogbookEntry};
pub use rag::{answer_from_corpus, build_rag_prompt};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum KnowledgeError {
    #[error("entry body is empty")]
    EmptyBody,
    #[error("entry title is empty")]
    EmptyTitle,
    #[error("unreadable path {0}")]
    UnreadablePath(String),
    #[error("corrupt store: {0}")]
    Corrupt(String),
    #[error("no relevant passages found")]
    RetrievalEmpty,
    #[error("model unavailable: {0}")]
    ModelUnavailable(String),
}

/// A retrieved passage ready to be quoted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Passage {
    pub label: String,
    pub heading: String,
    pub text: String,
}

pub trait Retriever: Send + Sync {
    fn retrieve(&self, query: &str, k: usize) -> Vec<Passage>;
}
