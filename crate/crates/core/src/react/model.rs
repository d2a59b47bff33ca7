//! The model contract and the scripted stand-in used for tests and demos.

use std::path::Path;

use parking_lot::Mutex;
use regex::Regex;
use serde::Deserialize;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("model unavailable: {0}")]
    Unavailable(String),
    #[error("bad scripted model fixture: {0}")]
    BadFixture(String),
}

/// Incrementally delivered text deltas.
pub type TextStream = Box<dyn Iterator<Item = Result<String, ModelError>> + Send>;

/// A text-completion backend.
///
/// Implementations may or may not honour `stop` themselves; [`generate`]
/// enforces it on the client side either way.
pub trait ModelClient: Send + Sync {
    fn stream(&self, prompt: &str, stop: &[String]) -> Result<TextStream, ModelError>;
}

impl<M: ModelClient + ?Sized> ModelClient for std::sync::Arc<M> {
    fn stream(&self, prompt: &str, stop: &[String]) -> Result<TextStream, ModelError> {
        (**self).stream(prompt, stop)
    }
}

/// Watches a growing buffer for the earliest stop sequence.
#[derive(Debug)]
pub struct StopScanner {
    stops: Vec<String>,
    buf: String,
    longest: usize,
}

impl StopScanner {
    pub fn new(stops: &[String]) -> Self {
        let stops: Vec<String> = stops.iter().filter(|s| !s.is_empty()).cloned().collect();
        let longest = stops.iter().map(String::len).max().unwrap_or(0);
        StopScanner {
            stops,
            buf: String::new(),
            longest,
        }
    }

    /// Appends a delta. Returns true once a stop sequence has been seen; the
    /// buffer is then cut just before it.
    pub fn push(&mut self, delta: &str) -> bool {
        let mut from = self
            .buf
            .len()
            .saturating_sub(self.longest.saturating_sub(1));
        while !self.buf.is_char_boundary(from) {
            from -= 1;
        }
        self.buf.push_str(delta);
        let hit = self
            .stops
            .iter()
            .filter_map(|s| self.buf[from..].find(s.as_str()).map(|p| from + p))
            .min();
        match hit {
            Some(cut) => {
                self.buf.truncate(cut);
                true
            }
            None => false,
        }
    }

    pub fn into_text(self) -> String {
        self.buf
    }
}

/// Runs a generation to its first stop sequence, dropping the rest of the
/// stream as soon as the stop is seen.
pub fn generate(
    model: &dyn ModelClient,
    prompt: &str,
    stop: &[String],
) -> Result<String, ModelError> {
    let mut scanner = StopScanner::new(stop);
    for delta in model.stream(prompt, stop)? {
        if scanner.push(&delta?) {
            break;
        }
    }
    Ok(scanner.into_text())
}

/// One prompt-pattern → completion rule. `reply` may use `$1` / `${name}`
/// capture references.
#[derive(Debug, Clone)]
pub struct ScriptRule {
    pub when: Regex,
    pub reply: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FixtureRule {
    when: String,
    reply: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Fixture {
    #[serde(default)]
    #[allow(dead_code)]
    name: String,
    #[serde(default = "default_chunk")]
    chunk_chars: usize,
    rules: Vec<FixtureRule>,
}

fn default_chunk() -> usize {
    16
}

/// Deterministic model: the first rule whose pattern matches the prompt
/// supplies the completion, streamed in fixed-size chunks. The stub does not
/// honour stop sequences, so scripted text past `Observation:` exercises the
/// client-side cut.
#[derive(Debug, Clone)]
pub struct ScriptedModel {
    rules: Vec<ScriptRule>,
    chunk_chars: usize,
}

impl ScriptedModel {
    pub fn new(rules: Vec<ScriptRule>) -> Self {
        ScriptedModel {
            rules,
            chunk_chars: default_chunk(),
        }
    }

    /// Shorthand for tests: `(pattern, reply)` pairs.
    pub fn from_pairs(pairs: &[(&str, &str)]) -> Result<Self, ModelError> {
        let rules = pairs
            .iter()
            .map(|(w, r)| {
                Ok(ScriptRule {
                    when: Regex::new(w).map_err(|e| ModelError::BadFixture(e.to_string()))?,
                    reply: (*r).to_owned(),
                })
            })
            .collect::<Result<_, ModelError>>()?;
        Ok(Self::new(rules))
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let fx: Fixture =
            serde_json::from_str(text).map_err(|e| ModelError::BadFixture(e.to_string()))?;
        let rules = fx
            .rules
            .into_iter()
            .map(|r| {
                Ok(ScriptRule {
                    when: Regex::new(&r.when)
                        .map_err(|e| ModelError::BadFixture(format!("{}: {e}", r.when)))?,
                    reply: r.reply,
                })
            })
            .collect::<Result<_, ModelError>>()?;
        Ok(ScriptedModel {
            rules,
            chunk_chars: fx.chunk_chars.max(1),
        })
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ModelError::BadFixture(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// The full completion for `prompt`, before any stop handling.
    pub fn completion(&self, prompt: &str) -> Option<String> {
        self.rules.iter().find_map(|r| {
            r.when.captures(prompt).map(|caps| {
                let mut out = String::new();
                caps.expand(&r.reply, &mut out);
                out
            })
        })
    }
}

impl ModelClient for ScriptedModel {
    fn stream(&self, prompt: &str, _stop: &[String]) -> Result<TextStream, ModelError> {
        let text = self.completion(prompt).ok_or_else(|| {
            ModelError::Unavailable("scripted model has no reply for this prompt".into())
        })?;
        let chars: Vec<char> = text.chars().collect();
        let chunks: Vec<Result<String, ModelError>> = chars
            .chunks(self.chunk_chars)
            .map(|c| Ok(c.iter().collect()))
            .collect();
        Ok(Box::new(chunks.into_iter()))
    }
}

/// Wraps a model and records every prompt sent to it.
pub struct RecordingModel<M> {
    inner: M,
    prompts: Mutex<Vec<String>>,
}

impl<M: ModelClient> RecordingModel<M> {
    pub fn new(inner: M) -> Self {
        RecordingModel {
            inner,
            prompts: Mutex::new(Vec::new()),
        }
    }

    pub fn prompts(&self) -> Vec<String> {
        self.prompts.lock().clone()
    }
}

impl<M: ModelClient> ModelClient for RecordingModel<M> {
    fn stream(&self, prompt: &str, stop: &[String]) -> Result<TextStream, ModelError> {
        self.prompts.lock().push(prompt.to_owned());
        self.inner.stream(prompt, stop)
    }
}
