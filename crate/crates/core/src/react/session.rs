use thiserror::Error;

use super::{
    estimate_tokens, generate, parse_generation, render_prompt, ModelClient, PromptTemplate,
    SessionLimits, StepEvent, ToolSpec,
};

/// The loop owns this keyword: generation is cut before it, so the model can
/// never write its own observations.
pub const STOP_SEQUENCE: &str = "Observation:";

/// Source name on corrective observations after malformed output.
pub const CORRECTIVE_SOURCE: &str = "format_checker";

const MAX_MALFORMED_RETRIES: usize = 2;

/// Per-call information handed to tools.
#[derive(Debug, Clone, Copy)]
pub struct CallContext<'a> {
    pub session_id: &'a str,
    pub output_cap: usize,
}

/// Routes tool calls. Implementations never fail: errors become observation
/// text so the loop can continue.
pub trait Dispatcher: Send + Sync {
    fn tools(&self) -> Vec<ToolSpec>;
    fn dispatch(&self, tool: &str, input: &str, ctx: &CallContext<'_>) -> String;
}

/// Receives events as they are appended to the transcript.
pub trait SessionObserver {
    fn on_event(&mut self, event: &StepEvent);
}

impl<F: FnMut(&StepEvent)> SessionObserver for F {
    fn on_event(&mut self, event: &StepEvent) {
        self(event)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SessionError {
    #[error("no final answer after {0} steps")]
    StepLimitExceeded(usize),
    #[error("prompt cannot fit the context budget of {budget} tokens (needs {needed})")]
    ContextBudgetExceeded { budget: usize, needed: usize },
    #[error("{0}")]
    ModelUnavailable(String),
    #[error("model output malformed {0} times in a row")]
    MalformedOutput(usize),
    #[error("no tools registered")]
    EmptyRegistry,
    #[error("invalid session limits")]
    InvalidLimits,
}

/// A failed run together with everything recorded before the failure.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{error}")]
pub struct SessionFailure {
    pub error: SessionError,
    pub transcript: Vec<StepEvent>,
}

/// Replaces the oldest observation bodies with short placeholders until the
/// rendered prompt fits `budget` tokens. The most recent observation is kept.
pub fn compact_context(
    transcript: &[StepEvent],
    budget: usize,
    render: impl Fn(&[StepEvent]) -> String,
) -> Result<Vec<StepEvent>, SessionError> {
    let mut out = transcript.to_vec();
    let mut needed = estimate_tokens(&render(&out));
    if needed <= budget {
        return Ok(out);
    }
    let observations: Vec<usize> = out
        .iter()
        .enumerate()
        .filter(|(_, e)| matches!(e, StepEvent::Observation { .. }))
        .map(|(i, _)| i)
        .collect();
    let elidable = observations.len().saturating_sub(1);
    for &i in &observations[..elidable] {
        if let StepEvent::Observation { text, tool } = &out[i] {
            if text.starts_with("[observation elided:") {
                continue;
            }
            let placeholder = format!(
                "[observation elided: {tool}, {} chars]",
                text.chars().count()
            );
            out[i] = StepEvent::Observation {
                text: placeholder,
                tool: tool.clone(),
            };
        }
        needed = estimate_tokens(&render(&out));
        if needed <= budget {
            return Ok(out);
        }
    }
    Err(SessionError::ContextBudgetExceeded { budget, needed })
}

/// Runs one task to a final answer.
///
/// Each step renders the prompt (compacting if it would exceed 95% of the
/// context budget), generates up to `Observation:`, parses the step, and for a
/// tool call injects the dispatcher's observation before the next step.
pub fn run_session(
    task: &str,
    session_id: &str,
    dispatcher: &dyn Dispatcher,
    model: &dyn ModelClient,
    template: &PromptTemplate,
    limits: &SessionLimits,
    observer: &mut dyn SessionObserver,
) -> Result<Vec<StepEvent>, SessionFailure> {
    let mut transcript: Vec<StepEvent> = Vec::new();
    let fail = |error, transcript: Vec<StepEvent>| Err(SessionFailure { error, transcript });
    if !limits.is_valid() {
        return fail(SessionError::InvalidLimits, transcript);
    }
    let tools = dispatcher.tools();
    if tools.is_empty() {
        return fail(SessionError::EmptyRegistry, transcript);
    }
    let budget = limits.effective_budget();
    let stop = vec![STOP_SEQUENCE.to_owned()];
    let render = |events: &[StepEvent]| render_prompt(template, &tools, events, task);
    // the view sent to the model; observations in it may be elided
    let mut context: Vec<StepEvent> = Vec::new();
    let mut malformed_streak = 0;

    let mut push =
        |event: StepEvent, transcript: &mut Vec<StepEvent>, context: &mut Vec<StepEvent>| {
            observer.on_event(&event);
            context.push(event.clone());
            transcript.push(event);
        };

    for _ in 0..limits.max_steps {
        let mut prompt = render(&context);
        if estimate_tokens(&prompt) > budget {
            match compact_context(&context, budget, render) {
                Ok(compacted) => {
                    context = compacted;
                    prompt = render(&context);
                }
                Err(e) => return fail(e, transcript),
            }
        }
        let text = match generate(model, &prompt, &stop) {
            Ok(t) => t,
            Err(e) => return fail(SessionError::ModelUnavailable(e.to_string()), transcript),
        };
        let mut events = parse_generation(&text);
        let decisive = events.pop().expect("at least one event");
        for e in events {
            push(e, &mut transcript, &mut context);
        }
        match decisive {
            StepEvent::FinalAnswer { .. } => {
                push(decisive, &mut transcript, &mut context);
                return Ok(transcript);
            }
            StepEvent::ToolCall {
                ref tool,
                ref input,
            } => {
                malformed_streak = 0;
                let ctx = CallContext {
                    session_id,
                    output_cap: limits.tool_output_cap_chars,
                };
                let observation = dispatcher.dispatch(tool, input, &ctx);
                let tool = tool.clone();
                push(decisive, &mut transcript, &mut context);
                push(
                    StepEvent::Observation {
                        text: observation,
                        tool,
                    },
                    &mut transcript,
                    &mut context,
                );
            }
            StepEvent::MalformedModelOutput { ref reason, .. } => {
                malformed_streak += 1;
                let corrective =
                    format!("Your last output was malformed: {reason}. Follow the format.");
                push(decisive, &mut transcript, &mut context);
                if malformed_streak > MAX_MALFORMED_RETRIES {
                    return fail(SessionError::MalformedOutput(malformed_streak), transcript);
                }
                push(
                    StepEvent::Observation {
                        text: corrective,
                        tool: CORRECTIVE_SOURCE.into(),
                    },
                    &mut transcript,
                    &mut context,
                );
            }
            thought @ StepEvent::Thought { .. } => {
                malformed_streak = 0;
                push(thought, &mut transcript, &mut context);
            }
            StepEvent::Observation { .. } => unreachable!("parser never yields observations"),
        }
    }
    fail(
        SessionError::StepLimitExceeded(limits.max_steps),
        transcript,
    )
}
