//! The textual step protocol:
//!
//! ```text
//! Thought: <reasoning>
//! Action: <tool name>
//! Action Input: <input>
//! ```
//! or `Final Answer: <text>` in place of the action lines. Parsing is total:
//! anything else becomes [`StepEvent::MalformedModelOutput`].

use std::sync::OnceLock;

use regex::Regex;

use super::StepEvent;

struct Markers {
    thought: Regex,
    action: Regex,
    input: Regex,
    final_answer: Regex,
    any: Regex,
}

fn markers() -> &'static Markers {
    static M: OnceLock<Markers> = OnceLock::new();
    M.get_or_init(|| Markers {
        thought: Regex::new(r"(?m)^[ \t]*Thought:").unwrap(),
        action: Regex::new(r"(?m)^[ \t]*Action:").unwrap(),
        input: Regex::new(r"(?m)^[ \t]*Action Input:").unwrap(),
        final_answer: Regex::new(r"(?m)^[ \t]*Final Answer:").unwrap(),
        any: Regex::new(r"(?m)^[ \t]*(?:Thought|Action|Action Input|Final Answer):").unwrap(),
    })
}

fn malformed(raw: &str, reason: &str) -> StepEvent {
    StepEvent::MalformedModelOutput {
        raw: raw.to_owned(),
        reason: reason.to_owned(),
    }
}

/// The decisive event of one generation: a tool call, a final answer, a bare
/// thought, or a malformed-output record.
pub fn parse_step(text: &str) -> StepEvent {
    parse_generation(text)
        .pop()
        .expect("parse_generation never returns empty")
}

/// Splits one generation into an optional leading thought plus its decisive
/// event (always last).
pub fn parse_generation(text: &str) -> Vec<StepEvent> {
    let m = markers();
    let action = m.action.find(text);
    let final_answer = m.final_answer.find(text);
    let input = m.input.find(text);

    let decisive_start = match (action, final_answer) {
        (Some(_), Some(_)) => return vec![malformed(text, "both an Action and a Final Answer")],
        (Some(a), None) => a.start(),
        (None, Some(f)) => f.start(),
        (None, None) => {
            if input.is_some() {
                return vec![malformed(text, "Action Input without Action")];
            }
            return match m.thought.find(text) {
                Some(t) => {
                    let thought = text[t.end()..].trim();
                    if thought.is_empty() {
                        vec![malformed(text, "empty Thought")]
                    } else {
                        vec![StepEvent::Thought {
                            text: thought.to_owned(),
                        }]
                    }
                }
                None => vec![malformed(text, "no Thought, Action or Final Answer")],
            };
        }
    };

    let decisive = if let Some(f) = final_answer {
        let answer = text[f.end()..].trim();
        if answer.is_empty() {
            return vec![malformed(text, "empty Final Answer")];
        }
        StepEvent::FinalAnswer {
            text: answer.to_owned(),
        }
    } else {
        let a = action.expect("action marker present");
        let rest = &text[a.end()..];
        let tool = rest.lines().next().unwrap_or("").trim();
        let Some(i) = input.filter(|i| i.start() > a.start()) else {
            return vec![malformed(text, "missing Action Input")];
        };
        if tool.is_empty() {
            return vec![malformed(text, "missing tool name")];
        }
        let after = &text[i.end()..];
        let end = m.any.find(after).map_or(after.len(), |n| n.start());
        StepEvent::ToolCall {
            tool: tool.to_owned(),
            input: after[..end].trim().to_owned(),
        }
    };

    let pre = &text[..decisive_start];
    let thought = match m.thought.find(pre) {
        Some(t) => pre[t.end()..].trim(),
        None => pre.trim(),
    };
    let mut events = Vec::with_capacity(2);
    if !thought.is_empty() {
        events.push(StepEvent::Thought {
            text: thought.to_owned(),
        });
    }
    events.push(decisive);
    events
}
