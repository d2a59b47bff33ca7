//! Retrieval-augmented answering in a context separate from the agent's.
//!
//! The agent only ever sees the condensed answer; retrieved excerpts live in
//! a throwaway prompt sent to the model on its own.

use super::{KnowledgeError, Retriever};
use crate::react::{cap_text, generate, ModelClient};

/// Builds the isolated prompt for one question.
pub fn build_rag_prompt(question: &str, passages: &[super::Passage]) -> String {
    let mut prompt = String::from(
        "Answer the question using only the excerpts below. Be concise and mention which excerpt you used.\n\n",
    );
    for (i, p) in passages.iter().enumerate() {
        prompt.push_str(&format!(
            "Excerpt {} [{}] {}\n{}\n\n",
            i + 1,
            p.label,
            p.heading,
            p.text.trim()
        ));
    }
    prompt.push_str(&format!("Question: {question}\nAnswer:"));
    prompt
}

/// Retrieves the top `k` passages for `question`, asks `model` in a fresh
/// prompt and returns its answer capped to `cap` characters.
pub fn answer_from_corpus(
    question: &str,
    store: &dyn Retriever,
    model: &dyn ModelClient,
    k: usize,
    cap: usize,
) -> Result<String, KnowledgeError> {
    let passages = store.retrieve(question, k);
    if passages.is_empty() {
        return Err(KnowledgeError::RetrievalEmpty);
    }
    let prompt = build_rag_prompt(question, &passages);
    let answer = generate(model, &prompt, &[])
        .map_err(|e| KnowledgeError::ModelUnavailable(e.to_string()))?;
    Ok(cap_text(answer.trim(), cap))
}
