//! Session records, their event logs and subscriber fan-out.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use anyhow::Context;
use ops_core::react::{SessionLimits, StepEvent};
use ops_core::tools::PendingWrite;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use tokio::sync::broadcast;

/// Per-subscriber buffer. A subscriber that falls this far behind is
/// disconnected instead of slowing the session down.
const SUBSCRIBER_BUFFER: usize = 1024;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", content = "detail", rename_all = "snake_case")]
pub enum SessionStatus {
    Running,
    AwaitingApproval(String),
    Done,
    Failed(String),
}

impl SessionStatus {
    pub fn is_terminal(&self) -> bool {
        matches!(self, SessionStatus::Done | SessionStatus::Failed(_))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub id: String,
    pub task: String,
    pub transcript: Vec<StepEvent>,
    pub status: SessionStatus,
    pub created_at: i64,
    pub limits: SessionLimits,
    #[serde(default)]
    pub show_cot: bool,
    #[serde(default)]
    pub auto_approve: bool,
}

impl SessionRecord {
    /// The record as a given subscriber may see it.
    pub fn visible(&self, privileged: bool) -> SessionRecord {
        let mut r = self.clone();
        if !(privileged || r.show_cot) {
            r.transcript.retain(|e| !e.is_chain_of_thought());
        }
        r
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SessionEvent {
    Step {
        event: StepEvent,
    },
    ApprovalRequested {
        write: PendingWrite,
    },
    ApprovalResolved {
        write: PendingWrite,
    },
    Status {
        status: SessionStatus,
    },
    /// Always the last event of a session.
    Done {
        status: SessionStatus,
    },
}

impl SessionEvent {
    pub fn name(&self) -> &'static str {
        match self {
            SessionEvent::Step { .. } => "step",
            SessionEvent::ApprovalRequested { .. } => "approval_requested",
            SessionEvent::ApprovalResolved { .. } => "approval_resolved",
            SessionEvent::Status { .. } => "status",
            SessionEvent::Done { .. } => "done",
        }
    }

    /// Chain-of-thought steps are only shown to privileged subscribers or
    /// when the session opted in.
    pub fn visible_to(&self, privileged: bool) -> bool {
        match self {
            SessionEvent::Step { event } => privileged || !event.is_chain_of_thought(),
            _ => true,
        }
    }
}

/// Sequence-numbered event as delivered to subscribers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Numbered {
    pub seq: usize,
    #[serde(flatten)]
    pub event: SessionEvent,
}

struct Live {
    record: SessionRecord,
    log: Vec<Numbered>,
    tx: broadcast::Sender<Numbered>,
}

/// A subscription: everything so far, then live events if still running.
pub struct Subscription {
    pub backlog: Vec<Numbered>,
    pub live: Option<broadcast::Receiver<Numbered>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SessionSummary {
    pub id: String,
    pub task: String,
    pub status: SessionStatus,
    pub created_at: i64,
}

#[derive(Default)]
pub struct SessionHub {
    sessions: Mutex<BTreeMap<u64, Live>>,
    store: Mutex<Option<File>>,
}

fn key(id: &str) -> Option<u64> {
    id.strip_prefix('s')?.parse().ok()
}

impl SessionHub {
    pub fn in_memory() -> Self {
        SessionHub::default()
    }

    /// Opens the session store, loading finished sessions from earlier runs.
    pub fn open(path: &Path) -> anyhow::Result<Self> {
        let hub = SessionHub::default();
        if path.exists() {
            let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
            for (n, line) in BufReader::new(f).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let rec: SessionRecord = serde_json::from_str(&line)
                    .with_context(|| format!("{}:{}: bad session record", path.display(), n + 1))?;
                hub.restore(rec);
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        *hub.store.lock() = Some(file);
        Ok(hub)
    }

    fn restore(&self, rec: SessionRecord) {
        let Some(k) = key(&rec.id) else { return };
        let mut log: Vec<Numbered> = Vec::new();
        let mut push = |event| {
            log.push(Numbered {
                seq: log.len(),
                event,
            })
        };
        for e in &rec.transcript {
            push(SessionEvent::Step { event: e.clone() });
        }
        push(SessionEvent::Done {
            status: rec.status.clone(),
        });
        let (tx, _) = broadcast::channel(1);
        self.sessions.lock().insert(
            k,
            Live {
                record: rec,
                log,
                tx,
            },
        );
    }

    pub fn create(
        &self,
        task: &str,
        limits: SessionLimits,
        show_cot: bool,
        auto_approve: bool,
        created_at: i64,
    ) -> String {
        let mut sessions = self.sessions.lock();
        let k = sessions.keys().next_back().map_or(1, |k| k + 1);
        let id = format!("s{k}");
        let (tx, _) = broadcast::channel(SUBSCRIBER_BUFFER);
        let record = SessionRecord {
            id: id.clone(),
            task: task.to_owned(),
            transcript: vec![],
            status: SessionStatus::Running,
            created_at,
            limits,
            show_cot,
            auto_approve,
        };
        sessions.insert(
            k,
            Live {
                record,
                log: vec![],
                tx,
            },
        );
        id
    }

    /// Appends an event. Events after the terminal one are dropped.
    pub fn push(&self, id: &str, event: SessionEvent) {
        let mut sessions = self.sessions.lock();
        let Some(live) = key(id).and_then(|k| sessions.get_mut(&k)) else {
            return;
        };
        if live.record.status.is_terminal() {
            return;
        }
        match &event {
            SessionEvent::Step { event } => live.record.transcript.push(event.clone()),
            SessionEvent::Status { status } | SessionEvent::Done { status } => {
                live.record.status = status.clone()
            }
            _ => {}
        }
        let n = Numbered {
            seq: live.log.len(),
            event,
        };
        live.log.push(n.clone());
        // no receivers is fine
        let _ = live.tx.send(n);
    }

    pub fn set_status(&self, id: &str, status: SessionStatus) {
        let same = self.get(id).is_some_and(|r| r.status == status);
        if !same {
            self.push(id, SessionEvent::Status { status });
        }
    }

    /// Records the terminal status and persists the session.
    pub fn finish(&self, id: &str, status: SessionStatus) {
        self.push(id, SessionEvent::Done { status });
        if let (Some(rec), Some(f)) = (self.get(id), self.store.lock().as_mut()) {
            let line = serde_json::to_string(&rec).expect("session record serializes");
            if let Err(e) = writeln!(f, "{line}").and_then(|()| f.flush()) {
                tracing::error!("persisting session {id} failed: {e}");
            }
        }
    }

    pub fn get(&self, id: &str) -> Option<SessionRecord> {
        let sessions = self.sessions.lock();
        key(id)
            .and_then(|k| sessions.get(&k))
            .map(|l| l.record.clone())
    }

    pub fn list(&self) -> Vec<SessionSummary> {
        self.sessions
            .lock()
            .values()
            .map(|l| SessionSummary {
                id: l.record.id.clone(),
                task: l.record.task.clone(),
                status: l.record.status.clone(),
                created_at: l.record.created_at,
            })
            .collect()
    }

    pub fn subscribe(&self, id: &str) -> Option<Subscription> {
        let sessions = self.sessions.lock();
        let live = key(id).and_then(|k| sessions.get(&k))?;
        let backlog = live.log.clone();
        let finished = live.record.status.is_terminal();
        Some(Subscription {
            backlog,
            live: (!finished).then(|| live.tx.subscribe()),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn thought(t: &str) -> SessionEvent {
        SessionEvent::Step {
            event: StepEvent::Thought { text: t.into() },
        }
    }

    #[test]
    fn backlog_then_live_without_gaps() {
        let hub = SessionHub::in_memory();
        let id = hub.create("t", SessionLimits::default(), true, false, 0);
        hub.push(&id, thought("a"));
        let mut sub = hub.subscribe(&id).unwrap();
        hub.push(&id, thought("b"));
        hub.finish(&id, SessionStatus::Done);
        let mut rx = sub.live.take().unwrap();
        let mut seqs: Vec<usize> = sub.backlog.iter().map(|n| n.seq).collect();
        while let Ok(n) = rx.try_recv() {
            seqs.push(n.seq);
        }
        assert_eq!(seqs, vec![0, 1, 2]);
        let after = hub.subscribe(&id).unwrap();
        assert!(after.live.is_none());
        assert_eq!(after.backlog.len(), 3);
    }

    #[test]
    fn persisted_sessions_survive_restart() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sessions.jsonl");
        let rec = {
            let hub = SessionHub::open(&path).unwrap();
            let id = hub.create("t", SessionLimits::default(), false, false, 5);
            hub.push(&id, thought("x"));
            hub.push(
                &id,
                SessionEvent::Step {
                    event: StepEvent::FinalAnswer { text: "y".into() },
                },
            );
            hub.finish(&id, SessionStatus::Done);
            hub.get(&id).unwrap()
        };
        let hub = SessionHub::open(&path).unwrap();
        assert_eq!(hub.get("s1").unwrap(), rec);
        assert_eq!(
            hub.create("u", SessionLimits::default(), false, false, 6),
            "s2"
        );
        assert_eq!(
            rec.visible(false).transcript,
            vec![StepEvent::FinalAnswer { text: "y".into() }]
        );
    }
}
