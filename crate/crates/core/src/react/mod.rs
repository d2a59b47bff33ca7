//! ReAct agent core: prompt rendering, streamed generation cut at the
//! `Observation:` stop sequence, step parsing, observation injection and
//! context budgeting.

mod model;
mod parse;
mod prompt;
mod session;

use serde::{Deserialize, Serialize};

pub use model::{
    generate, ModelClient, ModelError, RecordingModel, ScriptRule, ScriptedModel, StopScanner,
    TextStream,
};
pub use parse::{parse_generation, parse_step};
pub use prompt::{render_prompt, render_transcript, PromptError, PromptTemplate};
pub use session::{
    compact_context, run_session, CallContext, Dispatcher, SessionError, SessionFailure,
    SessionObserver, CORRECTIVE_SOURCE, STOP_SEQUENCE,
};

/// A tool as advertised to the model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolSpec {
    pub name: String,
    pub description: String,
    pub input: String,
}

impl ToolSpec {
    pub fn new(name: &str, description: &str, input: &str) -> Self {
        ToolSpec {
            name: name.into(),
            description: description.into(),
            input: input.into(),
        }
    }

    /// Names are lowercase letters and underscores.
    pub fn valid_name(name: &str) -> bool {
        !name.is_empty() && name.bytes().all(|b| b.is_ascii_lowercase() || b == b'_')
    }
}

/// One unit of agent output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum StepEvent {
    Thought { text: String },
    ToolCall { tool: String, input: String },
    Observation { text: String, tool: String },
    FinalAnswer { text: String },
    MalformedModelOutput { raw: String, reason: String },
}

impl StepEvent {
    pub fn is_chain_of_thought(&self) -> bool {
        !matches!(self, StepEvent::FinalAnswer { .. })
    }
}

/// Checks the sequencing rules: every tool call is immediately followed by
/// exactly one observation, and a final answer can only come last.
pub fn is_well_formed(transcript: &[StepEvent]) -> bool {
    let n = transcript.len();
    transcript.iter().enumerate().all(|(i, e)| match e {
        StepEvent::ToolCall { .. } => {
            matches!(transcript.get(i + 1), Some(StepEvent::Observation { .. }))
        }
        StepEvent::Observation { .. } => {
            i > 0
                && matches!(
                    transcript[i - 1],
                    StepEvent::ToolCall { .. } | StepEvent::MalformedModelOutput { .. }
                )
        }
        StepEvent::FinalAnswer { .. } => i + 1 == n,
        _ => true,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionLimits {
    pub context_budget_tokens: usize,
    pub max_steps: usize,
    pub tool_output_cap_chars: usize,
}

impl Default for SessionLimits {
    fn default() -> Self {
        SessionLimits {
            context_budget_tokens: 32768,
            max_steps: 10,
            tool_output_cap_chars: 2000,
        }
    }
}

impl SessionLimits {
    /// The enforced prompt budget: 95% of the nominal context size.
    pub fn effective_budget(&self) -> usize {
        self.context_budget_tokens * 95 / 100
    }

    pub fn is_valid(&self) -> bool {
        self.context_budget_tokens > 0 && self.max_steps > 0 && self.tool_output_cap_chars > 0
    }
}

/// `ceil(chars / 4)`.
pub fn estimate_tokens(text: &str) -> usize {
    text.chars().count().div_ceil(4)
}

pub const TRUNCATION_MARK: &str = "[truncated]";

/// Caps `text` at `cap` characters, ending in `[truncated]` when cut.
pub fn cap_text(text: &str, cap: usize) -> String {
    if text.chars().count() <= cap {
        return text.to_owned();
    }
    let keep = cap.saturating_sub(TRUNCATION_MARK.len());
    let mut out: String = text.chars().take(keep).collect();
    out.push_str(&TRUNCATION_MARK[..cap.min(TRUNCATION_MARK.len())]);
    out
}
