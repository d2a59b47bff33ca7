//! Test doubles that drive the agent loop.

use ops_core::react::{
    run_session, CallContext, Dispatcher, ModelClient, ModelError, PromptTemplate, RecordingModel,
    SessionFailure, SessionLimits, StepEvent, TextStream, ToolSpec,
};

/// One tool whose every observation is `chars` characters long.
pub struct Oversized {
    pub chars: usize,
}

impl Dispatcher for Oversized {
    fn tools(&self) -> Vec<ToolSpec> {
        vec![ToolSpec::new(
            "bulk",
            "Returns a very long page.",
            "page number",
        )]
    }

    fn dispatch(&self, _tool: &str, input: &str, ctx: &CallContext<'_>) -> String {
        let body = format!("{input}: {}", "lorem ipsum ".repeat(self.chars / 12 + 1));
        body.chars().take(self.chars.min(ctx.output_cap)).collect()
    }
}

/// Requests pages until it has seen `pages` tool calls, then answers.
pub struct PageReader {
    pub pages: usize,
}

impl ModelClient for PageReader {
    fn stream(&self, prompt: &str, _stop: &[String]) -> Result<TextStream, ModelError> {
        let seen = prompt.matches("\nAction Input: page ").count();
        let text = if seen >= self.pages {
            format!("Thought: that was every page\nFinal Answer: read {seen} pages")
        } else {
            format!(
                "Thought: next page\nAction: bulk\nAction Input: page {}",
                seen + 1
            )
        };
        Ok(Box::new(std::iter::once(Ok(text))))
    }
}

/// Runs a session with `pages` oversized observations and returns its result
/// together with every prompt the model saw.
pub fn compaction_run(
    pages: usize,
    chars: usize,
) -> (Result<Vec<StepEvent>, SessionFailure>, Vec<String>) {
    let model = RecordingModel::new(PageReader { pages });
    let limits = SessionLimits {
        context_budget_tokens: 32768,
        max_steps: pages + 5,
        tool_output_cap_chars: chars,
    };
    let result = run_session(
        "Read every page.",
        "s1",
        &Oversized { chars },
        &model,
        &PromptTemplate::default_agent(),
        &limits,
        &mut |_: &StepEvent| {},
    );
    (result, model.prompts())
}

/// Outcome of [`safety_fuzz`].
#[derive(Debug)]
pub struct FuzzSummary {
    pub calls: usize,
    pub pending_writes: usize,
    pub executed_writes: usize,
    pub procedures_run: usize,
    pub snapshot_unchanged: bool,
}

const ADDRS: &[&str] = &[
    "SIM.MAGNETS/MAGNET/ARDLMQZM1/CURRENT.SP",
    "SIM.MAGNETS/MAGNET/ARDLMQZM2/CURRENT.SP",
    "SIM.MAGNETS/MAGNET/ARDLMQZM1/CURRENT.RBV",
    "SIM.RF/GUN/GUN/AMPL",
    "SIM.RF/GUN/GUN/PHASE",
    "SIM.RF/GUN/GUN/AMPL.PROBE",
    "SIM.HEXAPOD/HEXAPOD/AREAMHEXAPOD/PARKING.POS",
    "NOPE/X/Y/Z",
];

fn garbage<R: rand::Rng>(rng: &mut R, max: usize) -> String {
    let len = rng.gen_range(0..max);
    (0..len)
        .map(|_| match rng.gen_range(0..10) {
            0 => '\n',
            1 => '|',
            2 => '=',
            3 => char::from_u32(rng.gen_range(0x80..0x3000)).unwrap_or('?'),
            _ => rng.gen_range(b' '..=b'~') as char,
        })
        .collect()
}

/// A procedure document that can never pass validation or parsing.
fn broken_procedure<R: rand::Rng>(rng: &mut R) -> String {
    let addr = ADDRS[rng.gen_range(0..ADDRS.len())];
    let valid = format!(
        r#"{{"type":"parallel","children":[{{"type":"action","action":"cycle_magnet","addr":"{}","n_cycles":1}},{{"type":"action","action":"write_value","addr":"SIM.RF/GUN/GUN/PHASE","value":5.0}}]}}"#,
        ADDRS[0]
    );
    match rng.gen_range(0..4) {
        // strict prefix: unbalanced braces
        0 => valid[..rng.gen_range(0..valid.len())].to_owned(),
        // read-only target, unknown address or out-of-range value
        1 => {
            let read_only = if rng.gen_bool(0.5) {
                ADDRS[2]
            } else {
                ADDRS[5]
            };
            format!(
                r#"{{"type":"action","action":"write_value","addr":"{read_only}","value":1.0}}"#
            )
        }
        2 => format!(r#"{{"type":"action","action":"write_value","addr":"{addr}","value":1.0e9}}"#),
        _ => garbage(rng, 300),
    }
}

fn fuzz_input<R: rand::Rng>(rng: &mut R, tool: &str) -> String {
    let addr = ADDRS[rng.gen_range(0..ADDRS.len())];
    match (tool, rng.gen_range(0..3)) {
        ("machine_write", 0 | 1) => {
            let v: f64 = rng.gen_range(-1e3..1e3);
            format!("{addr} = {v}")
        }
        ("machine_read" | "machine_list", 0 | 1) => addr.to_owned(),
        ("run_procedure", _) => broken_procedure(rng),
        ("logbook_post", 0) => format!("{} | {}", garbage(rng, 20), garbage(rng, 60)),
        _ => garbage(rng, 200),
    }
}

/// Fires `calls` random tool calls at a registry over the seeded environment
/// with nobody approving writes.
pub fn safety_fuzz(root: &std::path::Path, seed: u64, calls: usize) -> FuzzSummary {
    use ops_core::react::ScriptedModel;
    use ops_core::tools::{standard_registry, SeedPaths, ToolEnv, WriteState, STANDARD_TOOLS};
    use rand::{Rng, SeedableRng};
    use std::sync::Arc;

    let rag = Arc::new(ScriptedModel::from_pairs(&[("", "Nothing relevant.")]).unwrap());
    let env = Arc::new(ToolEnv::seeded(&SeedPaths::in_repo(root), rag).unwrap());
    let registry = standard_registry(env.clone(), None).unwrap();
    let before = env.machine.snapshot();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut procedures_run = 0;
    for _ in 0..calls {
        let tool = match rng.gen_range(0..10) {
            0 => garbage(&mut rng, 16),
            1 => STANDARD_TOOLS[rng.gen_range(0..STANDARD_TOOLS.len())].to_uppercase(),
            _ => STANDARD_TOOLS[rng.gen_range(0..STANDARD_TOOLS.len())].to_owned(),
        };
        let input = fuzz_input(&mut rng, &tool);
        let ctx = CallContext {
            session_id: "fuzz",
            output_cap: 2000,
        };
        let obs = registry.dispatch(&tool, &input, &ctx);
        if tool == "run_procedure" && obs.starts_with("Procedure succeeded") {
            procedures_run += 1;
        }
    }
    let writes = env.gate.list();
    FuzzSummary {
        calls,
        pending_writes: writes
            .iter()
            .filter(|w| w.state == WriteState::Pending)
            .count(),
        executed_writes: writes
            .iter()
            .filter(|w| w.state == WriteState::Executed)
            .count(),
        procedures_run,
        snapshot_unchanged: env.machine.snapshot().same_values(&before),
    }
}
