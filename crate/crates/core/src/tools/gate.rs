//! Human approval for machine writes requested by the agent.

use std::collections::HashMap;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control::{Address, ControlError, SharedMachine, Value};

/// Default time a blocked write waits for an operator before it is rejected.
pub const DEFAULT_APPROVAL_TIMEOUT: Duration = Duration::from_secs(600);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ApprovalMode {
    /// Test mode: writes execute at once.
    AutoApprove,
    /// The request is recorded and the tool returns immediately.
    Deferred,
    /// The tool blocks until an operator decides or the timeout passes.
    Blocking(Duration),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WriteState {
    Pending,
    Approved,
    Rejected,
    Executed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendingWrite {
    pub id: String,
    pub address: Address,
    pub value: Value,
    pub requested_by: String,
    pub state: WriteState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl PendingWrite {
    pub fn describe(&self) -> String {
        format!("{} = {}", self.address, self.value)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GateError {
    #[error("unknown pending write '{0}'")]
    UnknownPendingWrite(String),
    #[error("pending write '{0}' was already resolved")]
    AlreadyResolved(String),
}

type Listener = Box<dyn Fn(&PendingWrite) + Send + Sync>;

/// Holds agent writes until a human approves them. A write reaches the
/// machine only on the Approved to Executed transition.
pub struct WriteGate {
    machine: SharedMachine,
    default_mode: ApprovalMode,
    modes: Mutex<HashMap<String, ApprovalMode>>,
    writes: Mutex<Vec<PendingWrite>>,
    changed: Condvar,
    listeners: RwLock<Vec<Listener>>,
}

impl WriteGate {
    pub fn new(machine: SharedMachine, default_mode: ApprovalMode) -> Self {
        WriteGate {
            machine,
            default_mode,
            modes: Mutex::new(HashMap::new()),
            writes: Mutex::new(Vec::new()),
            changed: Condvar::new(),
            listeners: RwLock::new(Vec::new()),
        }
    }

    pub fn set_session_mode(&self, session: &str, mode: ApprovalMode) {
        self.modes.lock().insert(session.to_owned(), mode);
    }

    pub fn mode_for(&self, session: &str) -> ApprovalMode {
        self.modes
            .lock()
            .get(session)
            .copied()
            .unwrap_or(self.default_mode)
    }

    /// Called on every creation and state change.
    pub fn subscribe(&self, f: impl Fn(&PendingWrite) + Send + Sync + 'static) {
        self.listeners.write().push(Box::new(f));
    }

    fn notify(&self, w: &PendingWrite) {
        for l in self.listeners.read().iter() {
            l(w);
        }
    }

    fn index(id: &str) -> Option<usize> {
        id.strip_prefix('w')?.parse::<usize>().ok()?.checked_sub(1)
    }

    pub fn get(&self, id: &str) -> Option<PendingWrite> {
        Self::index(id).and_then(|i| self.writes.lock().get(i).cloned())
    }

    pub fn list(&self) -> Vec<PendingWrite> {
        self.writes.lock().clone()
    }

    /// Records a write request from `session`. Requests the machine would
    /// refuse anyway are rejected up front and leave no record.
    pub fn request(
        &self,
        address: Address,
        value: Value,
        session: &str,
    ) -> Result<PendingWrite, ControlError> {
        self.machine.read().check_write(&address, &value)?;
        let created = {
            let mut writes = self.writes.lock();
            let w = PendingWrite {
                id: format!("w{}", writes.len() + 1),
                address,
                value,
                requested_by: session.to_owned(),
                state: WriteState::Pending,
                note: None,
            };
            writes.push(w.clone());
            w
        };
        self.notify(&created);
        let id = created.id.clone();
        match self.mode_for(session) {
            ApprovalMode::Deferred => Ok(created),
            ApprovalMode::AutoApprove => {
                Ok(self.resolve(&id, true).expect("fresh write is pending"))
            }
            ApprovalMode::Blocking(timeout) => Ok(self.wait(&id, timeout)),
        }
    }

    /// Blocks until the write is terminal, rejecting it on timeout.
    pub fn wait(&self, id: &str, timeout: Duration) -> PendingWrite {
        let i = Self::index(id).expect("gate issued id");
        let deadline = Instant::now() + timeout;
        let mut writes = self.writes.lock();
        loop {
            if matches!(writes[i].state, WriteState::Executed | WriteState::Rejected) {
                return writes[i].clone();
            }
            if self.changed.wait_until(&mut writes, deadline).timed_out() {
                if writes[i].state == WriteState::Pending {
                    writes[i].state = WriteState::Rejected;
                    writes[i].note = Some("approval timed out".into());
                    let w = writes[i].clone();
                    drop(writes);
                    self.notify(&w);
                    return w;
                }
                return writes[i].clone();
            }
        }
    }

    /// Approves (and executes) or rejects a pending write.
    pub fn resolve(&self, id: &str, approve: bool) -> Result<PendingWrite, GateError> {
        let i = Self::index(id).ok_or_else(|| GateError::UnknownPendingWrite(id.to_owned()))?;
        let resolved = {
            let mut writes = self.writes.lock();
            let w = writes
                .get_mut(i)
                .ok_or_else(|| GateError::UnknownPendingWrite(id.to_owned()))?;
            if w.state != WriteState::Pending {
                return Err(GateError::AlreadyResolved(id.to_owned()));
            }
            if approve {
                w.state = WriteState::Approved;
                match self.machine.write().write(&w.address, &w.value) {
                    Ok(()) => w.state = WriteState::Executed,
                    Err(e) => {
                        w.state = WriteState::Rejected;
                        w.note = Some(format!("machine refused the approved write: {e}"));
                    }
                }
            } else {
                w.state = WriteState::Rejected;
                w.note = Some("rejected by operator".into());
            }
            w.clone()
        };
        // listeners first, so observers see the resolution before the waiter moves on
        self.notify(&resolved);
        self.changed.notify_all();
        Ok(resolved)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::{Machine, MachineConfig};
    use std::sync::Arc;

    const SP: &str = "SIM.MAGNETS/MAGNET/ARDLMQZM1/CURRENT.SP";

    fn gate(mode: ApprovalMode) -> (SharedMachine, Arc<WriteGate>) {
        let m = SharedMachine::new(Machine::new(&MachineConfig::default_machine()).unwrap());
        (m.clone(), Arc::new(WriteGate::new(m, mode)))
    }

    fn sp(m: &SharedMachine) -> Value {
        m.read().read(&SP.parse().unwrap()).unwrap().value
    }

    #[test]
    fn value_changes_only_after_approval() {
        let (m, g) = gate(ApprovalMode::Deferred);
        let w = g
            .request(SP.parse().unwrap(), Value::Number(3.0), "s1")
            .unwrap();
        assert_eq!(w.state, WriteState::Pending);
        assert_eq!(sp(&m), Value::Number(0.0));
        assert_eq!(g.resolve(&w.id, true).unwrap().state, WriteState::Executed);
        assert_eq!(sp(&m), Value::Number(3.0));
        assert_eq!(
            g.resolve(&w.id, true),
            Err(GateError::AlreadyResolved(w.id.clone()))
        );
        assert_eq!(
            g.resolve("w9", true),
            Err(GateError::UnknownPendingWrite("w9".into()))
        );
    }

    #[test]
    fn rejected_write_never_lands() {
        let (m, g) = gate(ApprovalMode::Deferred);
        let w = g
            .request(SP.parse().unwrap(), Value::Number(3.0), "s1")
            .unwrap();
        assert_eq!(g.resolve(&w.id, false).unwrap().state, WriteState::Rejected);
        assert!(g.resolve(&w.id, true).is_err());
        assert_eq!(sp(&m), Value::Number(0.0));
    }

    #[test]
    fn auto_approve_session() {
        let (m, g) = gate(ApprovalMode::Deferred);
        g.set_session_mode("test", ApprovalMode::AutoApprove);
        assert_eq!(
            g.request(SP.parse().unwrap(), Value::Number(1.5), "test")
                .unwrap()
                .state,
            WriteState::Executed
        );
        assert_eq!(sp(&m), Value::Number(1.5));
    }

    #[test]
    fn precheck_errors_leave_no_record() {
        let (_, g) = gate(ApprovalMode::AutoApprove);
        let ro = "SIM.MAGNETS/MAGNET/ARDLMQZM1/CURRENT.RBV".parse().unwrap();
        assert!(matches!(
            g.request(ro, Value::Number(1.0), "s"),
            Err(ControlError::ReadOnly(_))
        ));
        assert!(matches!(
            g.request(SP.parse().unwrap(), Value::Number(99.0), "s"),
            Err(ControlError::OutOfLimits { .. })
        ));
        assert!(g.list().is_empty());
    }

    #[test]
    fn blocking_write_times_out_or_is_approved() {
        let (m, g) = gate(ApprovalMode::Blocking(Duration::from_millis(50)));
        let w = g
            .request(SP.parse().unwrap(), Value::Number(2.0), "s")
            .unwrap();
        assert_eq!(
            (w.state, w.note.as_deref()),
            (WriteState::Rejected, Some("approval timed out"))
        );

        let g2 = Arc::new(WriteGate::new(
            m.clone(),
            ApprovalMode::Blocking(Duration::from_secs(10)),
        ));
        let approver = g2.clone();
        g2.subscribe(move |w| {
            if w.state == WriteState::Pending {
                let (a, id) = (approver.clone(), w.id.clone());
                std::thread::spawn(move || a.resolve(&id, true).unwrap());
            }
        });
        let w = g2
            .request(SP.parse().unwrap(), Value::Number(2.0), "s")
            .unwrap();
        assert_eq!(w.state, WriteState::Executed);
        assert_eq!(sp(&m), Value::Number(2.0));
    }
}
