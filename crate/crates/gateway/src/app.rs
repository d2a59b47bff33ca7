//! Wires configuration into a running agent service.

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context};
use ops_core::clock::{SimTime, TimeSource};
use ops_core::control::{Machine, MachineConfig, SharedMachine};
use ops_core::experiment::Engine;
use ops_core::knowledge::Logbook;
use ops_core::react::{run_session, ModelClient, PromptTemplate, SessionLimits, StepEvent};
use ops_core::relay::Relay;
use ops_core::tools::{
    standard_registry, ApprovalMode, SeedPaths, ToolEnv, ToolRegistry, WriteGate, WriteState,
};

use crate::config::{ApprovalModeName, Config};
use crate::remote::{HttpModelClient, WebhookResponder};
use crate::scenario::Scenario;
use crate::sessions::{SessionEvent, SessionHub, SessionStatus};

/// How to assemble the service.
#[derive(Default)]
pub struct BuildOptions {
    /// Keep logbook, relay and sessions under `state_dir`.
    pub persistent: bool,
    /// Scenario fixture overriding the configured model.
    pub stub: Option<PathBuf>,
    /// A ready model, overriding both stub and endpoint (tests).
    pub model: Option<Arc<dyn ModelClient>>,
}

pub struct App {
    pub config: Config,
    pub env: Arc<ToolEnv>,
    pub registry: Arc<ToolRegistry>,
    pub model: Arc<dyn ModelClient>,
    pub template: PromptTemplate,
    pub sessions: Arc<SessionHub>,
}

/// Options of one session.
#[derive(Debug, Clone, Default)]
pub struct SessionOptions {
    pub show_cot: bool,
    pub auto_approve: bool,
    pub limits: Option<SessionLimits>,
}

fn machine_from(config: &Config) -> anyhow::Result<SharedMachine> {
    let mut mc = match &config.machine {
        Some(p) => {
            MachineConfig::load(p).with_context(|| format!("machine config {}", p.display()))?
        }
        None => MachineConfig::default_machine(),
    };
    if let Some(seed) = config.seed {
        mc.seed = seed;
    }
    Ok(SharedMachine::new(Machine::new(&mc)?))
}

impl App {
    pub fn build(config: Config, opts: BuildOptions) -> anyhow::Result<Arc<App>> {
        config.check()?;
        let machine = machine_from(&config)?;
        let time = match config.fixed_epoch {
            Some(e) => TimeSource::Fixed(e),
            None => TimeSource::System,
        };
        let seeds = SeedPaths {
            logbook: config.corpora.logbook_seed.clone(),
            meetings: config.corpora.meetings.clone(),
            docs: config.corpora.docs.clone(),
            beamline: config.corpora.beamline.clone(),
        };
        let (meetings, docs, beamline) = seeds.load_corpora().context("loading corpora")?;
        let state = &config.state_dir;
        if opts.persistent {
            std::fs::create_dir_all(state)
                .with_context(|| format!("creating {}", state.display()))?;
        }
        let logbook = if opts.persistent {
            Logbook::open(&state.join("logbook.jsonl"), Some(&seeds.logbook))?
        } else {
            Logbook::from_seed(&seeds.logbook)?
        };
        let relay = if opts.persistent {
            Relay::open(&state.join("relay.jsonl"), time.clone())?
        } else {
            Relay::new(time.clone())
        };
        for ch in &config.relay.channels {
            match &config.relay.webhook {
                Some(url) => relay.register_responder(ch, Arc::new(WebhookResponder::new(url)))?,
                None => relay.register_channel(ch),
            }
        }

        let scenario = match opts.stub.as_ref().or(config.model.stub.as_ref()) {
            Some(p) => Some(Scenario::load(p)?),
            None => None,
        };
        if let Some(s) = &scenario {
            s.install_experts(&relay)?;
        }
        let model: Arc<dyn ModelClient> = match (opts.model, scenario) {
            (Some(m), _) => m,
            (None, Some(s)) => Arc::new(s.model),
            (None, None) => match &config.model.endpoint {
                Some(url) => Arc::new(HttpModelClient::new(url, &config.model.name)?),
                None => {
                    bail!("no model configured: set model.endpoint or model.stub, or pass --stub")
                }
            },
        };
        let template = match &config.model.template {
            Some(p) => PromptTemplate::new(
                std::fs::read_to_string(p)
                    .with_context(|| format!("reading template {}", p.display()))?,
            )?,
            None => PromptTemplate::default_agent(),
        };
        let mode = match config.approval.mode {
            ApprovalModeName::Auto => ApprovalMode::AutoApprove,
            ApprovalModeName::Deferred => ApprovalMode::Deferred,
            ApprovalModeName::Blocking => {
                ApprovalMode::Blocking(Duration::from_secs(config.approval.timeout_secs))
            }
        };
        let gate = Arc::new(WriteGate::new(machine.clone(), mode));
        let env = Arc::new(ToolEnv {
            machine,
            engine: Engine::new(),
            gate: gate.clone(),
            logbook: Arc::new(logbook),
            meetings,
            docs,
            beamline,
            relay,
            rag_model: model.clone(),
            time,
            expert_timeout: Duration::from_secs(config.relay.timeout_secs),
            author: "assistant".into(),
        });
        let registry = Arc::new(standard_registry(env.clone(), config.tools.as_deref())?);
        let sessions = Arc::new(if opts.persistent {
            SessionHub::open(&state.join("sessions.jsonl"))?
        } else {
            SessionHub::in_memory()
        });

        let hub = sessions.clone();
        let watched = gate.clone();
        gate.subscribe(move |w| {
            let Some(rec) = hub.get(&w.requested_by) else {
                return;
            };
            let blocking = matches!(watched.mode_for(&rec.id), ApprovalMode::Blocking(_));
            if w.state == WriteState::Pending {
                hub.push(
                    &rec.id,
                    SessionEvent::ApprovalRequested { write: w.clone() },
                );
                if blocking {
                    hub.set_status(&rec.id, SessionStatus::AwaitingApproval(w.id.clone()));
                }
            } else if matches!(w.state, WriteState::Executed | WriteState::Rejected) {
                hub.push(&rec.id, SessionEvent::ApprovalResolved { write: w.clone() });
                if blocking {
                    hub.set_status(&rec.id, SessionStatus::Running);
                }
            }
        });

        Ok(Arc::new(App {
            config,
            env,
            registry,
            model,
            template,
            sessions,
        }))
    }

    pub fn now_utc(&self) -> i64 {
        self.env.time.now_utc(SimTime::ZERO)
    }

    /// Registers a session; [`App::run_session`] then drives it.
    pub fn create_session(&self, task: &str, opts: &SessionOptions) -> String {
        let limits = opts.limits.unwrap_or(self.config.limits);
        let id = self.sessions.create(
            task,
            limits,
            opts.show_cot,
            opts.auto_approve,
            self.now_utc(),
        );
        if opts.auto_approve {
            self.env
                .gate
                .set_session_mode(&id, ApprovalMode::AutoApprove);
        }
        id
    }

    /// Runs a created session to its end on the calling thread.
    pub fn run_session(&self, id: &str) -> SessionStatus {
        let Some(rec) = self.sessions.get(id) else {
            return SessionStatus::Failed(format!("unknown session {id}"));
        };
        let hub = self.sessions.clone();
        let mut observer = |e: &StepEvent| hub.push(id, SessionEvent::Step { event: e.clone() });
        let result = run_session(
            &rec.task,
            id,
            &*self.registry,
            &*self.model,
            &self.template,
            &rec.limits,
            &mut observer,
        );
        let status = match result {
            Ok(_) => SessionStatus::Done,
            Err(f) => SessionStatus::Failed(f.error.to_string()),
        };
        self.sessions.finish(id, status.clone());
        status
    }

    /// Creates a session and runs it on a blocking worker.
    pub fn spawn_session(self: &Arc<Self>, task: &str, opts: &SessionOptions) -> String {
        let id = self.create_session(task, opts);
        let (app, sid) = (self.clone(), id.clone());
        tokio::task::spawn_blocking(move || app.run_session(&sid));
        id
    }

    /// Advances the simulator in real time until the process ends.
    pub fn start_ticker(&self) {
        if self.config.tick_hz <= 0.0 {
            return;
        }
        let dt = 1.0 / self.config.tick_hz;
        let machine = self.env.machine.clone();
        std::thread::Builder::new()
            .name("sim-ticker".into())
            .spawn(move || loop {
                std::thread::sleep(Duration::from_secs_f64(dt));
                machine.tick_if_free(dt);
            })
            .expect("spawn ticker thread");
    }
}
