//! Expert chat relay: questions go out to a channel, a reply (or a timeout)
//! comes back exactly once.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::{SimTime, TimeSource};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(120);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum QueryState {
    Pending,
    Answered { reply: String, answered_at: i64 },
    TimedOut,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertQuery {
    pub id: String,
    pub channel: String,
    pub question: String,
    pub posted_at: i64,
    #[serde(flatten)]
    pub state: QueryState,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RelayError {
    #[error("unknown channel '{0}'")]
    UnknownChannel(String),
    #[error("channel '{0}' already has a responder")]
    DuplicateChannel(String),
    #[error("unknown query '{0}'")]
    UnknownQuery(String),
    #[error("relay journal: {0}")]
    Journal(String),
}

/// What became of a reply.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReplyOutcome {
    Accepted,
    /// The query was already terminal; the reply was logged and dropped.
    Discarded,
}

/// Handle a responder uses to answer one query, possibly later and from
/// another thread.
#[derive(Clone)]
pub struct Replier {
    relay: Relay,
    query_id: String,
}

impl Replier {
    pub fn query_id(&self) -> &str {
        &self.query_id
    }

    pub fn reply(&self, text: &str) -> ReplyOutcome {
        self.relay
            .reply(&self.query_id, text)
            .unwrap_or(ReplyOutcome::Discarded)
    }
}

/// Stand-in for the human (or chat system) on the other end of a channel.
pub trait Responder: Send + Sync {
    fn on_question(&self, query: &ExpertQuery, replier: Replier);
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
enum JournalRecord {
    Asked {
        query: ExpertQuery,
    },
    Answered {
        id: String,
        reply: String,
        answered_at: i64,
    },
    TimedOut {
        id: String,
    },
    LateReply {
        id: String,
        text: String,
    },
}

#[derive(Default)]
struct State {
    channels: BTreeMap<String, Option<Arc<dyn Responder>>>,
    queries: HashMap<String, ExpertQuery>,
    order: Vec<String>,
    next: u64,
    journal: Option<File>,
}

impl State {
    fn log(&mut self, rec: &JournalRecord) {
        if let Some(f) = self.journal.as_mut() {
            let line = serde_json::to_string(rec).expect("journal record serializes");
            if let Err(e) = writeln!(f, "{line}").and_then(|()| f.flush()) {
                tracing::error!("relay journal write failed: {e}");
            }
        }
    }

    fn apply(&mut self, rec: JournalRecord) {
        match rec {
            JournalRecord::Asked { query } => {
                self.next += 1;
                self.order.push(query.id.clone());
                self.queries.insert(query.id.clone(), query);
            }
            JournalRecord::Answered {
                id,
                reply,
                answered_at,
            } => {
                if let Some(q) = self
                    .queries
                    .get_mut(&id)
                    .filter(|q| q.state == QueryState::Pending)
                {
                    q.state = QueryState::Answered { reply, answered_at };
                }
            }
            JournalRecord::TimedOut { id } => {
                if let Some(q) = self
                    .queries
                    .get_mut(&id)
                    .filter(|q| q.state == QueryState::Pending)
                {
                    q.state = QueryState::TimedOut;
                }
            }
            JournalRecord::LateReply { .. } => {}
        }
    }
}

struct Inner {
    state: Mutex<State>,
    changed: Condvar,
    time: TimeSource,
}

/// Cheap to clone; clones share the same relay.
#[derive(Clone)]
pub struct Relay {
    inner: Arc<Inner>,
}

impl Relay {
    pub fn new(time: TimeSource) -> Self {
        Relay {
            inner: Arc::new(Inner {
                state: Mutex::new(State::default()),
                changed: Condvar::new(),
                time,
            }),
        }
    }

    /// Opens (or creates) a journal and replays it. Queries still pending in
    /// the journal lost their waiter with the previous process and are
    /// closed as timed out.
    pub fn open(path: &Path, time: TimeSource) -> Result<Self, RelayError> {
        let jerr =
            |e: &dyn std::fmt::Display| RelayError::Journal(format!("{}: {e}", path.display()));
        let mut state = State::default();
        if path.exists() {
            let file = File::open(path).map_err(|e| jerr(&e))?;
            for (n, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(|e| jerr(&e))?;
                if line.trim().is_empty() {
                    continue;
                }
                let rec: JournalRecord = serde_json::from_str(&line)
                    .map_err(|e| jerr(&format!("line {}: {e}", n + 1)))?;
                state.apply(rec);
            }
        }
        state.journal = Some(
            OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| jerr(&e))?,
        );
        let orphans: Vec<String> = state
            .order
            .iter()
            .filter(|id| state.queries[*id].state == QueryState::Pending)
            .cloned()
            .collect();
        for id in orphans {
            state.log(&JournalRecord::TimedOut { id: id.clone() });
            state.apply(JournalRecord::TimedOut { id });
        }
        let relay = Relay::new(time);
        *relay.inner.state.lock() = state;
        Ok(relay)
    }

    /// Registers a channel whose replies arrive through [`Relay::reply`].
    pub fn register_channel(&self, channel: &str) {
        self.inner
            .state
            .lock()
            .channels
            .entry(channel.to_owned())
            .or_insert(None);
    }

    pub fn register_responder(
        &self,
        channel: &str,
        responder: Arc<dyn Responder>,
    ) -> Result<(), RelayError> {
        let mut st = self.inner.state.lock();
        let slot = st.channels.entry(channel.to_owned()).or_insert(None);
        if slot.is_some() {
            return Err(RelayError::DuplicateChannel(channel.to_owned()));
        }
        *slot = Some(responder);
        Ok(())
    }

    pub fn channels(&self) -> Vec<String> {
        self.inner.state.lock().channels.keys().cloned().collect()
    }

    /// Posts a question and blocks until it is answered or `timeout` passes.
    /// The returned record is terminal.
    pub fn ask(
        &self,
        channel: &str,
        question: &str,
        timeout: Duration,
    ) -> Result<ExpertQuery, RelayError> {
        let (query, responder) = {
            let mut st = self.inner.state.lock();
            let responder = match st.channels.get(channel) {
                Some(r) => r.clone(),
                None => return Err(RelayError::UnknownChannel(channel.to_owned())),
            };
            let query = ExpertQuery {
                id: format!("q{}", st.next + 1),
                channel: channel.to_owned(),
                question: question.to_owned(),
                posted_at: self.inner.time.now_utc(SimTime::ZERO),
                state: QueryState::Pending,
            };
            let rec = JournalRecord::Asked {
                query: query.clone(),
            };
            st.log(&rec);
            st.apply(rec);
            (query, responder)
        };
        if let Some(r) = responder {
            r.on_question(
                &query,
                Replier {
                    relay: self.clone(),
                    query_id: query.id.clone(),
                },
            );
        }
        let deadline = Instant::now() + timeout;
        let mut st = self.inner.state.lock();
        loop {
            if st.queries[&query.id].state != QueryState::Pending {
                return Ok(st.queries[&query.id].clone());
            }
            if self.inner.changed.wait_until(&mut st, deadline).timed_out() {
                if st.queries[&query.id].state == QueryState::Pending {
                    let rec = JournalRecord::TimedOut {
                        id: query.id.clone(),
                    };
                    st.log(&rec);
                    st.apply(rec);
                }
                return Ok(st.queries[&query.id].clone());
            }
        }
    }

    /// Delivers a reply. Only the first terminal transition counts.
    pub fn reply(&self, query_id: &str, text: &str) -> Result<ReplyOutcome, RelayError> {
        let mut st = self.inner.state.lock();
        let pending = match st.queries.get(query_id) {
            None => return Err(RelayError::UnknownQuery(query_id.to_owned())),
            Some(q) => q.state == QueryState::Pending,
        };
        if !pending {
            tracing::warn!(query = query_id, "late reply discarded");
            st.log(&JournalRecord::LateReply {
                id: query_id.to_owned(),
                text: text.to_owned(),
            });
            return Ok(ReplyOutcome::Discarded);
        }
        let rec = JournalRecord::Answered {
            id: query_id.to_owned(),
            reply: text.to_owned(),
            answered_at: self.inner.time.now_utc(SimTime::ZERO),
        };
        st.log(&rec);
        st.apply(rec);
        self.inner.changed.notify_all();
        Ok(ReplyOutcome::Accepted)
    }

    pub fn get(&self, query_id: &str) -> Option<ExpertQuery> {
        self.inner.state.lock().queries.get(query_id).cloned()
    }

    /// All queries in posting order.
    pub fn queries(&self) -> Vec<ExpertQuery> {
        let st = self.inner.state.lock();
        st.order.iter().map(|id| st.queries[id].clone()).collect()
    }
}

/// Replies from a fixed rule table, optionally after a delay.
pub struct ScriptedResponder {
    rules: Vec<(Regex, String)>,
    delay: Duration,
}

#[derive(Debug, Clone, Deserialize)]
pub struct ScriptedReplyRule {
    pub when: String,
    pub reply: String,
}

impl ScriptedResponder {
    pub fn new(rules: &[ScriptedReplyRule], delay: Duration) -> Result<Self, regex::Error> {
        let rules = rules
            .iter()
            .map(|r| Ok((Regex::new(&r.when)?, r.reply.clone())))
            .collect::<Result<_, _>>()?;
        Ok(ScriptedResponder { rules, delay })
    }

    /// Always answers `reply`.
    pub fn constant(reply: &str, delay: Duration) -> Self {
        ScriptedResponder {
            rules: vec![(Regex::new("").expect("empty regex"), reply.to_owned())],
            delay,
        }
    }

    fn answer(&self, question: &str) -> Option<String> {
        self.rules
            .iter()
            .find(|(re, _)| re.is_match(question))
            .map(|(re, reply)| {
                let caps = re.captures(question).expect("matched");
                let mut out = String::new();
                caps.expand(reply, &mut out);
                out
            })
    }
}

impl Responder for ScriptedResponder {
    fn on_question(&self, query: &ExpertQuery, replier: Replier) {
        let Some(text) = self.answer(&query.question) else {
            return;
        };
        if self.delay.is_zero() {
            replier.reply(&text);
        } else {
            let delay = self.delay;
            std::thread::spawn(move || {
                std::thread::sleep(delay);
                replier.reply(&text);
            });
        }
    }
}
