//! Tool registry and the adapters the agent uses to reach the machine, the
//! knowledge stores, the expert relay and the experiment engine.

mod builder;
mod gate;

use std::fmt::Write as _;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::Duration;

use thiserror::Error;

pub use builder::{
    beamline_expert, build_procedure, template_expert, BuildOptions, BuilderError, Built, Layout,
    SCHEMAS,
};
pub use gate::{
    ApprovalMode, GateError, PendingWrite, WriteGate, WriteState, DEFAULT_APPROVAL_TIMEOUT,
};

use crate::clock::{format_utc, TimeSource};
use crate::control::{Address, SharedMachine, Value};
use crate::experiment::{
    parse_procedure, Capture, Engine, EngineError, ExecutionReport, ExpertDesk, LogbookSink,
    NodeStatus, Services,
};
use crate::knowledge::{
    answer_from_corpus, Corpus, EntryDraft, KnowledgeError, Logbook, Retriever,
};
use crate::react::{cap_text, CallContext, Dispatcher, ModelClient, ToolSpec};
use crate::relay::{QueryState, Relay, RelayError};

/// A failure inside a tool. Rendered as `Tool error: ...` so the agent can
/// react to it.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{0}")]
pub struct ToolError(pub String);

impl ToolError {
    fn new(msg: impl std::fmt::Display) -> Self {
        ToolError(msg.to_string())
    }
}

pub trait Tool: Send + Sync {
    fn spec(&self) -> ToolSpec;
    fn call(&self, input: &str, ctx: &CallContext<'_>) -> Result<String, ToolError>;
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RegistryError {
    #[error("tool name '{0}' must match [a-z_]+")]
    InvalidName(String),
    #[error("tool '{0}' registered twice")]
    DuplicateTool(String),
    #[error("unknown tool '{0}' in configuration")]
    UnknownTool(String),
}

#[derive(Default)]
pub struct ToolRegistry {
    tools: Vec<(ToolSpec, Box<dyn Tool>)>,
}

impl ToolRegistry {
    pub fn new() -> Self {
        ToolRegistry::default()
    }

    pub fn register(&mut self, tool: Box<dyn Tool>) -> Result<(), RegistryError> {
        let spec = tool.spec();
        if !ToolSpec::valid_name(&spec.name) {
            return Err(RegistryError::InvalidName(spec.name));
        }
        if self.tools.iter().any(|(s, _)| s.name == spec.name) {
            return Err(RegistryError::DuplicateTool(spec.name));
        }
        self.tools.push((spec, tool));
        Ok(())
    }

    pub fn names(&self) -> Vec<&str> {
        self.tools.iter().map(|(s, _)| s.name.as_str()).collect()
    }
}

impl Dispatcher for ToolRegistry {
    fn tools(&self) -> Vec<ToolSpec> {
        self.tools.iter().map(|(s, _)| s.clone()).collect()
    }

    fn dispatch(&self, tool: &str, input: &str, ctx: &CallContext<'_>) -> String {
        let out = match self.tools.iter().find(|(s, _)| s.name == tool) {
            None => format!(
                "Unknown tool '{tool}'. Available: {}.",
                self.names().join(", ")
            ),
            Some((_, t)) => match catch_unwind(AssertUnwindSafe(|| t.call(input.trim(), ctx))) {
                Ok(Ok(text)) => text,
                Ok(Err(e)) => format!("Tool error: {e}"),
                Err(_) => format!("Tool error: {tool} failed internally"),
            },
        };
        cap_text(&out, ctx.output_cap)
    }
}

/// Everything the standard tools operate on.
pub struct ToolEnv {
    pub machine: SharedMachine,
    pub engine: Engine,
    pub gate: Arc<WriteGate>,
    pub logbook: Arc<Logbook>,
    pub meetings: Arc<Corpus>,
    pub docs: Arc<Corpus>,
    pub beamline: Arc<Corpus>,
    pub relay: Relay,
    /// Answers retrieval sub-prompts, separately from the agent's context.
    pub rag_model: Arc<dyn ModelClient>,
    pub time: TimeSource,
    pub expert_timeout: Duration,
    /// Author recorded on logbook entries the tools create.
    pub author: String,
}

impl ToolEnv {
    /// UTC seconds, advanced by simulated time for fixed sources.
    pub fn now_utc(&self) -> i64 {
        let clock = self.machine.read().clock();
        self.time.now_utc(clock)
    }

    fn post(&self, title: &str, body: &str, tags: Vec<String>) -> Result<u64, KnowledgeError> {
        self.logbook.post_entry(EntryDraft {
            timestamp: self.now_utc(),
            author: self.author.clone(),
            title: title.to_owned(),
            body: body.to_owned(),
            tags,
        })
    }

    fn ask_expert(&self, channel: &str, question: &str) -> Result<String, String> {
        match self.relay.ask(channel, question, self.expert_timeout) {
            Ok(q) => match q.state {
                QueryState::Answered { reply, .. } => Ok(reply),
                _ => Err(format!(
                    "no reply from {channel} within {} s (query {})",
                    self.expert_timeout.as_secs(),
                    q.id
                )),
            },
            Err(RelayError::UnknownChannel(c)) => Err(format!(
                "unknown channel '{c}'. Channels: {}",
                self.relay.channels().join(", ")
            )),
            Err(e) => Err(e.to_string()),
        }
    }
}

impl LogbookSink for ToolEnv {
    fn post(&self, title: &str, body: &str) -> Result<u64, String> {
        ToolEnv::post(self, title, body, vec!["procedure".into()]).map_err(|e| e.to_string())
    }
}

impl ExpertDesk for ToolEnv {
    fn ask(&self, channel: &str, question: &str) -> Result<String, String> {
        self.ask_expert(channel, question)
    }
}

/// Names of the standard tools, in registry order.
pub const STANDARD_TOOLS: &[&str] = &[
    "machine_read",
    "machine_list",
    "machine_write",
    "logbook_search",
    "logbook_post",
    "meeting_summary",
    "docs_howto",
    "ask_expert",
    "experiment_builder",
    "run_procedure",
];

/// Builds the standard registry. `enabled` restricts it to the named tools.
pub fn standard_registry(
    env: Arc<ToolEnv>,
    enabled: Option<&[String]>,
) -> Result<ToolRegistry, RegistryError> {
    if let Some(names) = enabled {
        if let Some(bad) = names.iter().find(|n| !STANDARD_TOOLS.contains(&n.as_str())) {
            return Err(RegistryError::UnknownTool(bad.clone()));
        }
    }
    let mut reg = ToolRegistry::new();
    for name in STANDARD_TOOLS {
        if enabled.is_some_and(|e| !e.iter().any(|n| n == name)) {
            continue;
        }
        reg.register(Box::new(StandardTool {
            name,
            env: env.clone(),
        }))?;
    }
    Ok(reg)
}

struct StandardTool {
    name: &'static str,
    env: Arc<ToolEnv>,
}

fn describe(name: &str) -> (&'static str, &'static str) {
    match name {
        "machine_read" => ("Reads one control system property and reports its value, unit and whether it is writable.", "address, e.g. SIM.RF/GUN/GUN/AMPL.PROBE"),
        "machine_list" => ("Lists control system addresses matching a pattern with their current values.", "pattern with * per segment, e.g. SIM.MAGNETS/*/*/*"),
        "machine_write" => ("Requests a write to a control system property; an operator must approve it before it happens.", "ADDRESS = VALUE"),
        "logbook_search" => ("Searches the electronic logbook and returns the best matching entries.", "search words"),
        "logbook_post" => ("Creates a new electronic logbook entry.", "title | body"),
        "meeting_summary" => ("Answers questions about operations meetings from the meeting notes.", "question"),
        "docs_howto" => ("Answers how-to questions about the experiment toolkit from its documentation.", "question"),
        "ask_expert" => ("Asks a human expert in a chat channel and waits for the reply.", "channel | question"),
        "experiment_builder" => ("Turns a described experiment or routine into a procedure document ready for run_procedure.", "task description"),
        "run_procedure" => ("Validates and executes a procedure document and reports the result of every step.", "procedure document (JSON)"),
        _ => ("", ""),
    }
}

fn split_pair(input: &str, what: &str) -> Result<(String, String), ToolError> {
    match input.split_once('|') {
        Some((a, b)) if !a.trim().is_empty() && !b.trim().is_empty() => {
            Ok((a.trim().to_owned(), b.trim().to_owned()))
        }
        _ => Err(ToolError(format!("expected input of the form '{what}'"))),
    }
}

fn parse_address(input: &str) -> Result<Address, ToolError> {
    input.trim().parse::<Address>().map_err(ToolError::new)
}

fn parse_value(text: &str) -> Value {
    serde_json::from_str::<Value>(text.trim())
        .unwrap_or_else(|_| Value::Text(text.trim().to_owned()))
}

impl Tool for StandardTool {
    fn spec(&self) -> ToolSpec {
        let (description, input) = describe(self.name);
        ToolSpec::new(self.name, description, input)
    }

    fn call(&self, input: &str, ctx: &CallContext<'_>) -> Result<String, ToolError> {
        let env = &*self.env;
        match self.name {
            "machine_read" => {
                let rec = env
                    .machine
                    .read()
                    .read(&parse_address(input)?)
                    .map_err(ToolError::new)?;
                let unit = if rec.unit.is_empty() {
                    String::new()
                } else {
                    format!(" {}", rec.unit)
                };
                let access = if rec.writable {
                    "writable"
                } else {
                    "read-only"
                };
                Ok(format!("value={}{unit} ({access})", rec.value))
            }
            "machine_list" => {
                let pattern = if input.is_empty() { "*/*/*/*" } else { input };
                let m = env.machine.read();
                let addrs = m.list(pattern).map_err(ToolError::new)?;
                if addrs.is_empty() {
                    return Ok(format!("No addresses match '{pattern}'."));
                }
                let mut out = String::new();
                for a in addrs {
                    let rec = m.read(&a).map_err(ToolError::new)?;
                    let _ = writeln!(out, "{a} = {} {}", rec.value, rec.unit);
                }
                Ok(out.trim_end().to_owned())
            }
            "machine_write" => {
                let (addr, value) = input.split_once('=').ok_or_else(|| {
                    ToolError("expected input of the form 'ADDRESS = VALUE'".into())
                })?;
                let w = env
                    .gate
                    .request(parse_address(addr)?, parse_value(value), ctx.session_id)
                    .map_err(ToolError::new)?;
                Ok(match w.state {
                    WriteState::Executed => format!("written: {}", w.describe()),
                    WriteState::Pending | WriteState::Approved => format!(
                        "Approval required: pending write {} ({}) is waiting for an operator.",
                        w.id,
                        w.describe()
                    ),
                    WriteState::Rejected => format!(
                        "Write {} ({}) was not applied: {}.",
                        w.id,
                        w.describe(),
                        w.note.as_deref().unwrap_or("rejected")
                    ),
                })
            }
            "logbook_search" => {
                let hits = env.logbook.search(input, 5, None);
                if hits.is_empty() {
                    return Ok(format!("No logbook entries match '{input}'."));
                }
                let mut out = String::new();
                for h in hits {
                    if let Some(e) = env.logbook.get(h.id) {
                        let _ = writeln!(
                            out,
                            "#{} [{}, {}] {}: {}",
                            e.id,
                            format_utc(e.timestamp),
                            e.author,
                            e.title,
                            e.body
                        );
                    }
                }
                Ok(out.trim_end().to_owned())
            }
            "logbook_post" => {
                let (title, body) = split_pair(input, "title | body")?;
                let id = env.post(&title, &body, vec![]).map_err(ToolError::new)?;
                Ok(format!("Logbook entry #{id} created."))
            }
            "meeting_summary" => rag(input, &*env.meetings, env, ctx, "meeting notes"),
            "docs_howto" => {
                let answer = rag(input, &*env.docs, env, ctx, "toolkit documentation")?;
                match env.docs.retrieve(input, 1).into_iter().next() {
                    Some(p) => Ok(format!("{answer}\nSource: {} ({})", p.label, p.heading)),
                    None => Ok(answer),
                }
            }
            "ask_expert" => {
                let (channel, question) = split_pair(input, "channel | question")?;
                env.ask_expert(&channel, &question)
                    .map(|r| format!("Reply from {channel}: {r}"))
                    .map_err(ToolError)
            }
            "experiment_builder" => {
                let catalog = env.machine.read().catalog();
                match build_procedure(input, &env.beamline, &catalog) {
                    Ok(b) => Ok(format!(
                        "Rationale: {}\nProcedure document:\n{}",
                        b.rationale,
                        serde_json::to_string(&b.procedure).expect("procedure serializes")
                    )),
                    Err(BuilderError::NoMatchingTemplate(_)) => Ok(
                        "No procedure template fits this request. Please restate the task naming the devices and the routine (for example cycling, scanning or parking)."
                            .into(),
                    ),
                    Err(e) => Err(ToolError::new(e)),
                }
            }
            "run_procedure" => Ok(run_procedure(env, input).unwrap_or_else(|e| e)),
            other => Err(ToolError(format!("{other} is not implemented"))),
        }
    }
}

fn rag(
    question: &str,
    store: &dyn Retriever,
    env: &ToolEnv,
    ctx: &CallContext<'_>,
    what: &str,
) -> Result<String, ToolError> {
    if question.is_empty() {
        return Err(ToolError("empty question".into()));
    }
    match answer_from_corpus(question, store, &*env.rag_model, 3, ctx.output_cap) {
        Ok(a) => Ok(a),
        Err(KnowledgeError::RetrievalEmpty) => {
            Ok(format!("Nothing in the {what} matches the question."))
        }
        Err(e) => Err(ToolError::new(e)),
    }
}

/// One-line tally of what a report achieved.
pub fn summarize_report(report: &ExecutionReport) -> String {
    let mut cycles = (0, 0);
    let mut actions = (0, 0);
    for n in report
        .root
        .iter()
        .filter(|n| n.children.is_empty() && n.kind != "serial" && n.kind != "parallel")
    {
        let ok = n.status == NodeStatus::Succeeded;
        actions = (actions.0 + usize::from(ok), actions.1 + 1);
        if n.kind == "cycle_magnet" {
            cycles = (cycles.0 + usize::from(ok), cycles.1 + 1);
        }
    }
    let mut parts = Vec::new();
    if cycles.1 > 0 {
        parts.push(format!("{}/{} cycles succeeded", cycles.0, cycles.1));
    } else {
        parts.push(format!("{}/{} actions succeeded", actions.0, actions.1));
    }
    for n in report.root.iter() {
        for c in &n.captured {
            if let Capture::LogbookEntry { id } = c {
                parts.push(format!("logbook entry #{id} created"));
            }
        }
    }
    parts.join(", ")
}

/// Parses and executes a procedure document. Both outcomes carry the text
/// shown to the agent; `Err` means nothing ran or the run aborted.
pub fn run_procedure(env: &ToolEnv, input: &str) -> Result<String, String> {
    let proc = match parse_procedure(input) {
        Ok(p) => p,
        Err(e) => return Err(format!("Procedure document could not be parsed: {e}")),
    };
    let services = Services {
        logbook: Some(env),
        experts: Some(env),
    };
    match env.engine.execute(&proc, &env.machine, services) {
        Ok(report) => Ok(format!(
            "Procedure succeeded in {}: {}.\n{}",
            report.total_duration,
            summarize_report(&report),
            report.render().trim_end()
        )),
        Err(EngineError::Invalid(issues)) => {
            let list: Vec<String> = issues.iter().map(|i| format!("- {i}")).collect();
            Err(format!(
                "Procedure rejected by validation:\n{}",
                list.join("\n")
            ))
        }
        Err(EngineError::Locked(devices)) => Err(format!(
            "Procedure rejected: devices in use by another procedure: {}",
            devices.join(", ")
        )),
        Err(EngineError::Aborted(report)) => Err(format!(
            "Procedure aborted after {}: {}.\n{}",
            report.total_duration,
            summarize_report(&report),
            report.render().trim_end()
        )),
    }
}

/// Paths of the seed corpora below a fixture root.
#[derive(Debug, Clone)]
pub struct SeedPaths {
    pub logbook: std::path::PathBuf,
    pub meetings: std::path::PathBuf,
    pub docs: std::path::PathBuf,
    pub beamline: std::path::PathBuf,
}

impl SeedPaths {
    /// The layout shipped in this repository, relative to its root.
    pub fn in_repo(root: &std::path::Path) -> Self {
        SeedPaths {
            logbook: root.join("fixtures/corpora/logbook.jsonl"),
            meetings: root.join("fixtures/corpora/meetings"),
            docs: root.join("docs/dge"),
            beamline: root.join("fixtures/corpora/beamline"),
        }
    }

    pub fn load_corpora(&self) -> Result<(Arc<Corpus>, Arc<Corpus>, Arc<Corpus>), KnowledgeError> {
        let load = |name: &str, dir: &std::path::Path| -> Result<Arc<Corpus>, KnowledgeError> {
            let c = Corpus::new(name);
            c.ingest(dir)?;
            Ok(Arc::new(c))
        };
        Ok((
            load("meetings", &self.meetings)?,
            load("docs", &self.docs)?,
            load("beamline", &self.beamline)?,
        ))
    }
}

/// Fixed epoch used by seeded environments: 2024-06-03 08:00 UTC.
pub const SEED_EPOCH: i64 = 1_717_401_600;

impl ToolEnv {
    /// An environment over the default machine and the seed corpora, with an
    /// in-memory logbook, no expert channels and deferred approvals.
    pub fn seeded(
        paths: &SeedPaths,
        rag_model: Arc<dyn ModelClient>,
    ) -> Result<ToolEnv, KnowledgeError> {
        let machine = SharedMachine::new(
            crate::control::Machine::new(&crate::control::MachineConfig::default_machine())
                .expect("default machine is valid"),
        );
        let (meetings, docs, beamline) = paths.load_corpora()?;
        Ok(ToolEnv {
            gate: Arc::new(WriteGate::new(machine.clone(), ApprovalMode::Deferred)),
            machine,
            engine: Engine::new(),
            logbook: Arc::new(Logbook::from_seed(&paths.logbook)?),
            meetings,
            docs,
            beamline,
            relay: Relay::new(TimeSource::Fixed(SEED_EPOCH)),
            rag_model,
            time: TimeSource::Fixed(SEED_EPOCH),
            expert_timeout: Duration::from_secs(2),
            author: "assistant".into(),
        })
    }
}
