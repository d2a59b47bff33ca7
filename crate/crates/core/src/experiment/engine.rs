//! Discrete-event executor for procedure trees.
//!
//! Leaves run against the shared machine on the simulated clock. Parallel
//! children are interleaved at event granularity: the engine advances the
//! clock to the earliest pending wake-up among running leaves, handles every
//! leaf due at that instant in tree order, and repeats. Serial stages thus
//! last exactly the sum of their children and parallel stages exactly the
//! maximum.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{lock_set, validate, ActionKind, ProcedureNode, ValidationIssue};
use crate::clock::{SimDuration, SimTime};
use crate::control::{
    Address, ControlError, CycleHandle, CycleState, PropertyRecord, SharedMachine, Value,
};

/// Where `PostLogbook` actions go.
pub trait LogbookSink: Send + Sync {
    fn post(&self, title: &str, body: &str) -> Result<u64, String>;
}

/// Who answers `AskExpert` actions.
pub trait ExpertDesk: Send + Sync {
    fn ask(&self, channel: &str, question: &str) -> Result<String, String>;
}

#[derive(Clone, Copy, Default)]
pub struct Services<'a> {
    pub logbook: Option<&'a dyn LogbookSink>,
    pub experts: Option<&'a dyn ExpertDesk>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", content = "error")]
pub enum NodeStatus {
    Succeeded,
    Failed(String),
    Cancelled,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Capture {
    Value { addr: Address, value: Value },
    ScanPoint { setpoint: f64, reading: Value },
    Cycle { duration: SimDuration },
    LogbookEntry { id: u64 },
    Reply { text: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeReport {
    pub path: String,
    pub kind: String,
    pub label: String,
    pub status: NodeStatus,
    pub start: Option<SimTime>,
    pub end: Option<SimTime>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub captured: Vec<Capture>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub children: Vec<NodeReport>,
}

impl NodeReport {
    pub fn duration(&self) -> SimDuration {
        match (self.start, self.end) {
            (Some(s), Some(e)) => e.since(s),
            _ => SimDuration::ZERO,
        }
    }

    /// This node and all descendants, depth first.
    pub fn iter(&self) -> Box<dyn Iterator<Item = &NodeReport> + '_> {
        Box::new(std::iter::once(self).chain(self.children.iter().flat_map(|c| c.iter())))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionReport {
    pub root: NodeReport,
    pub total_duration: SimDuration,
}

impl ExecutionReport {
    pub fn succeeded(&self) -> bool {
        self.root.status == NodeStatus::Succeeded
    }

    pub fn logbook_entries(&self) -> Vec<u64> {
        self.root
            .iter()
            .flat_map(|n| n.captured.iter())
            .filter_map(|c| match c {
                Capture::LogbookEntry { id } => Some(*id),
                _ => None,
            })
            .collect()
    }

    /// One line per node, indented by depth.
    pub fn render(&self) -> String {
        let mut out = String::new();
        render_node(&self.root, 0, &mut out);
        out
    }
}

fn status_text(status: &NodeStatus) -> String {
    match status {
        NodeStatus::Failed(e) => format!("Failed ({e})"),
        other => format!("{other:?}"),
    }
}

fn render_node(n: &NodeReport, depth: usize, out: &mut String) {
    let _ = writeln!(
        out,
        "{:indent$}- {} [{}]: {} in {}",
        "",
        n.label,
        n.kind,
        status_text(&n.status),
        n.duration(),
        indent = depth * 2
    );
    for c in &n.children {
        render_node(c, depth + 1, out);
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EngineError {
    #[error("procedure failed validation: {}", .0.iter().map(|i| i.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<ValidationIssue>),
    #[error("devices already in use by another procedure: {}", .0.join(", "))]
    Locked(Vec<String>),
    #[error("execution aborted: {}", status_text(&.0.root.status))]
    Aborted(Box<ExecutionReport>),
}

/// Runs procedures; tracks the device lock sets of procedures in flight.
#[derive(Default)]
pub struct Engine {
    in_use: Mutex<BTreeSet<String>>,
}

struct LockGuard<'a> {
    engine: &'a Engine,
    devices: BTreeSet<String>,
}

impl Drop for LockGuard<'_> {
    fn drop(&mut self) {
        let mut in_use = self.engine.in_use.lock();
        for d in &self.devices {
            in_use.remove(d);
        }
    }
}

impl Engine {
    pub fn new() -> Self {
        Engine::default()
    }

    fn acquire(&self, devices: BTreeSet<String>) -> Result<LockGuard<'_>, EngineError> {
        let mut in_use = self.in_use.lock();
        let clash: Vec<String> = devices.intersection(&in_use).cloned().collect();
        if !clash.is_empty() {
            return Err(EngineError::Locked(clash));
        }
        in_use.extend(devices.iter().cloned());
        Ok(LockGuard {
            engine: self,
            devices,
        })
    }

    /// Validates, then executes `proc` to completion on the simulated clock.
    pub fn execute(
        &self,
        proc: &ProcedureNode,
        machine: &SharedMachine,
        services: Services<'_>,
    ) -> Result<ExecutionReport, EngineError> {
        let catalog = machine.read().catalog();
        let issues = validate(proc, &catalog);
        if !issues.is_empty() {
            return Err(EngineError::Invalid(issues));
        }
        let _locks = self.acquire(lock_set(proc))?;
        let _clock = machine.time_control();
        let report = Run::new(proc, machine, services).run();
        if report.succeeded() {
            Ok(report)
        } else {
            Err(EngineError::Aborted(Box::new(report)))
        }
    }
}

#[derive(Debug)]
enum Leaf {
    Idle,
    Waiting,
    Cycling(CycleHandle),
    Scanning {
        points: Vec<f64>,
        step: usize,
        settle: SimDuration,
    },
}

struct ExecNode<'p> {
    spec: &'p ProcedureNode,
    path: String,
    parent: Option<usize>,
    children: Vec<usize>,
    next_child: usize,
    status: Option<NodeStatus>,
    start: Option<SimTime>,
    end: Option<SimTime>,
    wake: Option<SimTime>,
    leaf: Leaf,
    captured: Vec<Capture>,
}

struct Run<'p, 'm> {
    nodes: Vec<ExecNode<'p>>,
    machine: &'m SharedMachine,
    services: Services<'m>,
    began: SimTime,
    now: SimTime,
}

impl<'p, 'm> Run<'p, 'm> {
    fn new(proc: &'p ProcedureNode, machine: &'m SharedMachine, services: Services<'m>) -> Self {
        let now = machine.read().clock();
        let mut run = Run {
            nodes: Vec::new(),
            machine,
            services,
            began: now,
            now,
        };
        run.flatten(proc, None, "root".into());
        run
    }

    fn flatten(&mut self, spec: &'p ProcedureNode, parent: Option<usize>, path: String) -> usize {
        let idx = self.nodes.len();
        self.nodes.push(ExecNode {
            spec,
            path: path.clone(),
            parent,
            children: Vec::new(),
            next_child: 0,
            status: None,
            start: None,
            end: None,
            wake: None,
            leaf: Leaf::Idle,
            captured: Vec::new(),
        });
        let children: Vec<usize> = spec
            .children()
            .iter()
            .enumerate()
            .map(|(i, c)| self.flatten(c, Some(idx), format!("{path}/{i}")))
            .collect();
        self.nodes[idx].children = children;
        idx
    }

    fn run(mut self) -> ExecutionReport {
        self.start(0);
        while self.nodes[0].status.is_none() {
            let next = self
                .nodes
                .iter()
                .filter(|n| n.status.is_none())
                .filter_map(|n| n.wake)
                .min();
            let Some(next) = next else {
                // nothing scheduled but root unfinished: cannot happen for valid trees
                self.fail(0, "engine stalled".into());
                break;
            };
            self.machine.write().advance_to(next);
            self.now = next;
            for i in 0..self.nodes.len() {
                if self.nodes[i].status.is_none() && self.nodes[i].wake == Some(next) {
                    self.poll(i);
                }
            }
        }
        let root = self.report(0);
        ExecutionReport {
            total_duration: root.duration(),
            root,
        }
    }

    fn report(&self, i: usize) -> NodeReport {
        let n = &self.nodes[i];
        NodeReport {
            path: n.path.clone(),
            kind: n.spec.kind_name().to_owned(),
            label: n.spec.display_label(),
            status: n.status.clone().unwrap_or(NodeStatus::Skipped),
            start: n.start,
            end: n.end,
            captured: n.captured.clone(),
            children: n.children.iter().map(|&c| self.report(c)).collect(),
        }
    }

    fn start(&mut self, i: usize) {
        self.nodes[i].start = Some(self.now);
        match self.nodes[i].spec {
            ProcedureNode::Serial { .. } => {
                let first = self.nodes[i].children[0];
                self.start(first);
            }
            ProcedureNode::Parallel { .. } => {
                for c in self.nodes[i].children.clone() {
                    if self.nodes[i].status.is_some() {
                        break;
                    }
                    self.start(c);
                }
            }
            ProcedureNode::Action(spec) => self.begin_action(i, &spec.kind),
        }
    }

    fn begin_action(&mut self, i: usize, kind: &ActionKind) {
        match kind {
            // lock results are bound first: succeeding starts the next node,
            // which takes the machine lock again
            ActionKind::ReadValue { addr } => match self.locked_read(addr) {
                Ok(rec) => {
                    self.nodes[i].captured.push(Capture::Value {
                        addr: addr.clone(),
                        value: rec.value,
                    });
                    self.succeed(i);
                }
                Err(e) => self.fail(i, e.to_string()),
            },
            ActionKind::WriteValue { addr, value } => match self.locked_write(addr, value) {
                Ok(()) => self.succeed(i),
                Err(e) => self.fail(i, e.to_string()),
            },
            ActionKind::Wait { seconds } => {
                let d = SimDuration::from_secs_f64(*seconds).unwrap_or(SimDuration::ZERO);
                self.sleep(i, d, Leaf::Waiting);
            }
            ActionKind::CycleMagnet { addr, n_cycles } => {
                let started = self.machine.write().start_cycle(addr, *n_cycles);
                match started {
                    Ok(handle) => {
                        let d = handle.duration;
                        self.sleep(i, d, Leaf::Cycling(handle));
                    }
                    Err(e) => self.fail(i, e.to_string()),
                }
            }
            ActionKind::Scan {
                addr,
                from,
                to,
                steps,
                ..
            } => {
                let points = ActionKind::scan_points(*from, *to, *steps);
                let tau = self
                    .machine
                    .read()
                    .catalog()
                    .get(addr)
                    .map(|e| e.tau)
                    .unwrap_or(0.0);
                let settle = SimDuration::from_secs_f64(2.0 * tau).unwrap_or(SimDuration::ZERO);
                match self.locked_write(addr, &Value::Number(points[0])) {
                    Ok(()) => self.sleep(
                        i,
                        settle,
                        Leaf::Scanning {
                            points,
                            step: 0,
                            settle,
                        },
                    ),
                    Err(e) => self.fail(i, e.to_string()),
                }
            }
            ActionKind::PostLogbook { title, body } => {
                let body = self.render_body(body);
                match self.services.logbook {
                    None => self.fail(i, "no logbook attached".into()),
                    Some(log) => match log.post(title, &body) {
                        Ok(id) => {
                            self.nodes[i].captured.push(Capture::LogbookEntry { id });
                            self.succeed(i);
                        }
                        Err(e) => self.fail(i, e),
                    },
                }
            }
            ActionKind::AskExpert { channel, question } => match self.services.experts {
                None => self.fail(i, "no expert relay attached".into()),
                Some(desk) => match desk.ask(channel, question) {
                    Ok(text) => {
                        self.nodes[i].captured.push(Capture::Reply { text });
                        self.succeed(i);
                    }
                    Err(e) => self.fail(i, e),
                },
            },
        }
    }

    fn sleep(&mut self, i: usize, d: SimDuration, leaf: Leaf) {
        self.nodes[i].leaf = leaf;
        if d == SimDuration::ZERO {
            self.poll(i);
        } else {
            self.nodes[i].wake = Some(self.now + d);
        }
    }

    fn poll(&mut self, i: usize) {
        self.nodes[i].wake = None;
        match std::mem::replace(&mut self.nodes[i].leaf, Leaf::Idle) {
            Leaf::Idle | Leaf::Waiting => self.succeed(i),
            Leaf::Cycling(handle) => {
                let state = self.machine.read().cycle_state(&handle.magnet);
                match state {
                    Ok(CycleState::Idle) => {
                        self.nodes[i].captured.push(Capture::Cycle {
                            duration: handle.duration,
                        });
                        self.succeed(i);
                    }
                    Ok(_) => self.fail(i, "cycle still running at its scheduled end".into()),
                    Err(e) => self.fail(i, e.to_string()),
                }
            }
            Leaf::Scanning {
                points,
                step,
                settle,
            } => {
                let ActionKind::Scan { addr, readout, .. } = self.action_kind(i) else {
                    unreachable!("scanning leaf is a scan action")
                };
                let (addr, readout) = (addr.clone(), readout.clone());
                let reading = self.locked_read(&readout);
                match reading {
                    Ok(rec) => self.nodes[i].captured.push(Capture::ScanPoint {
                        setpoint: points[step],
                        reading: rec.value,
                    }),
                    Err(e) => return self.fail(i, e.to_string()),
                }
                let step = step + 1;
                if step == points.len() {
                    return self.succeed(i);
                }
                match self.locked_write(&addr, &Value::Number(points[step])) {
                    Ok(()) => self.sleep(
                        i,
                        settle,
                        Leaf::Scanning {
                            points,
                            step,
                            settle,
                        },
                    ),
                    Err(e) => self.fail(i, e.to_string()),
                }
            }
        }
    }

    fn locked_read(&self, addr: &Address) -> Result<PropertyRecord, ControlError> {
        self.machine.read().read(addr)
    }

    fn locked_write(&self, addr: &Address, value: &Value) -> Result<(), ControlError> {
        self.machine.write().write(addr, value)
    }

    fn action_kind(&self, i: usize) -> &'p ActionKind {
        match self.nodes[i].spec {
            ProcedureNode::Action(spec) => &spec.kind,
            _ => unreachable!("leaf index"),
        }
    }

    fn succeed(&mut self, i: usize) {
        self.finish(i, NodeStatus::Succeeded);
    }

    fn fail(&mut self, i: usize, error: String) {
        self.finish(i, NodeStatus::Failed(error));
    }

    fn finish(&mut self, i: usize, status: NodeStatus) {
        let failed = matches!(status, NodeStatus::Failed(_));
        let node = &mut self.nodes[i];
        node.status = Some(status);
        node.end = Some(self.now);
        node.wake = None;
        let Some(p) = node.parent else { return };
        if self.nodes[p].status.is_some() {
            return;
        }
        let label = self.nodes[i].spec.display_label();
        match self.nodes[p].spec {
            ProcedureNode::Serial { .. } => {
                if failed {
                    for &c in &self.nodes[p].children.clone()[self.nodes[p].next_child + 1..] {
                        self.nodes[c].status = Some(NodeStatus::Skipped);
                        self.mark_skipped(c);
                    }
                    self.fail(p, format!("'{label}' failed"));
                } else {
                    self.nodes[p].next_child += 1;
                    let next = self.nodes[p].next_child;
                    match self.nodes[p].children.get(next).copied() {
                        Some(c) => self.start(c),
                        None => self.succeed(p),
                    }
                }
            }
            ProcedureNode::Parallel { .. } => {
                if failed {
                    for c in self.nodes[p].children.clone() {
                        self.cancel(c);
                    }
                    self.fail(p, format!("'{label}' failed"));
                } else if self.nodes[p]
                    .children
                    .iter()
                    .all(|&c| self.nodes[c].status.is_some())
                {
                    self.succeed(p);
                }
            }
            ProcedureNode::Action(_) => unreachable!("leaf has no children"),
        }
    }

    fn mark_skipped(&mut self, i: usize) {
        for c in self.nodes[i].children.clone() {
            self.nodes[c].status = Some(NodeStatus::Skipped);
            self.mark_skipped(c);
        }
    }

    /// Stops a node and everything under it. Pending serial successors are
    /// skipped; everything else in flight is cancelled.
    fn cancel(&mut self, i: usize) {
        if self.nodes[i].status.is_some() {
            return;
        }
        if let Leaf::Cycling(handle) = std::mem::replace(&mut self.nodes[i].leaf, Leaf::Idle) {
            // the program may have finished exactly now; either way the setpoint is restored
            let _ = self.machine.write().abort_cycle(&handle.magnet);
        }
        let started = self.nodes[i].start.is_some();
        match self.nodes[i].spec {
            ProcedureNode::Serial { .. } if started => {
                let children = self.nodes[i].children.clone();
                let running = self.nodes[i].next_child;
                self.cancel(children[running]);
                for &c in &children[running + 1..] {
                    self.nodes[c].status = Some(NodeStatus::Skipped);
                    self.mark_skipped(c);
                }
            }
            ProcedureNode::Serial { .. } | ProcedureNode::Parallel { .. } => {
                for c in self.nodes[i].children.clone() {
                    self.cancel(c);
                }
            }
            ProcedureNode::Action(_) => {}
        }
        let n = &mut self.nodes[i];
        n.start.get_or_insert(self.now);
        n.end = Some(self.now);
        n.wake = None;
        n.status = Some(NodeStatus::Cancelled);
    }

    fn render_body(&self, template: &str) -> String {
        let mut report = String::new();
        for n in &self.nodes {
            if let (ProcedureNode::Action(spec), Some(status)) = (n.spec, &n.status) {
                let took = n.end.unwrap_or(self.now).since(n.start.unwrap_or(self.now));
                let _ = writeln!(
                    report,
                    "- {}: {} in {}",
                    spec.display_label(),
                    status_text(status),
                    took
                );
            }
        }
        template
            .replace("{report}", report.trim_end())
            .replace("{elapsed}", &self.now.since(self.began).to_string())
    }
}
