use std::fmt::Write as _;

use thiserror::Error;

use super::{StepEvent, ToolSpec};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PromptError {
    #[error("prompt template is missing the {{{0}}} placeholder")]
    MissingPlaceholder(&'static str),
}

const REQUIRED: [&str; 3] = ["tools", "task", "transcript"];
const KNOWN: [&str; 4] = ["tools", "tool_names", "task", "transcript"];

/// System prompt with `{tools}`, `{task}`, `{transcript}` and optionally
/// `{tool_names}` placeholders.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    text: String,
}

impl PromptTemplate {
    pub fn new(text: impl Into<String>) -> Result<Self, PromptError> {
        let text = text.into();
        for name in REQUIRED {
            if !text.contains(&format!("{{{name}}}")) {
                return Err(PromptError::MissingPlaceholder(name));
            }
        }
        Ok(PromptTemplate { text })
    }

    /// The shipped agent prompt.
    pub fn default_agent() -> Self {
        Self::new(DEFAULT_AGENT_PROMPT.trim_end_matches('\n'))
            .expect("built-in template is complete")
    }

    pub fn text(&self) -> &str {
        &self.text
    }
}

pub const DEFAULT_AGENT_PROMPT: &str = include_str!("../../../../fixtures/prompts/agent.txt");

/// Renders events in the Thought / Action / Action Input / Observation layout.
pub fn render_transcript(transcript: &[StepEvent]) -> String {
    let mut out = String::new();
    for e in transcript {
        let _ = match e {
            StepEvent::Thought { text } => writeln!(out, "Thought: {text}"),
            StepEvent::ToolCall { tool, input } => {
                writeln!(out, "Action: {tool}\nAction Input: {input}")
            }
            StepEvent::Observation { text, .. } => writeln!(out, "Observation: {text}"),
            StepEvent::FinalAnswer { text } => writeln!(out, "Final Answer: {text}"),
            StepEvent::MalformedModelOutput { raw, .. } => writeln!(out, "{raw}"),
        };
    }
    out
}

fn render_tools(tools: &[ToolSpec]) -> String {
    tools
        .iter()
        .map(|t| format!("{}: {} Input: {}", t.name, t.description, t.input))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Fills the template in one pass, so placeholder-like text inside the task or
/// transcript is never expanded.
pub fn render_prompt(
    template: &PromptTemplate,
    tools: &[ToolSpec],
    transcript: &[StepEvent],
    task: &str,
) -> String {
    let value = |name: &str| -> String {
        match name {
            "tools" => render_tools(tools),
            "tool_names" => tools
                .iter()
                .map(|t| t.name.as_str())
                .collect::<Vec<_>>()
                .join(", "),
            "task" => task.to_owned(),
            "transcript" => render_transcript(transcript),
            _ => unreachable!(),
        }
    };
    let mut out = String::with_capacity(template.text.len() + 256);
    let mut rest = template.text.as_str();
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        match KNOWN
            .iter()
            .find(|k| after.starts_with(*k) && after[k.len()..].starts_with('}'))
        {
            Some(name) => {
                out.push_str(&value(name));
                rest = &after[name.len() + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}
