use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{ActionKind, ProcedureNode};
use crate::control::{Address, Catalog, Value};

pub const MAX_DEPTH: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationIssue {
    /// Child-index path from the root, e.g. `root/0/1`.
    pub path: String,
    pub message: String,
}

impl fmt::Display for ValidationIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

/// Checks structure and every address against the machine catalog.
/// An empty result means the tree may be executed.
pub fn validate(proc: &ProcedureNode, catalog: &Catalog) -> Vec<ValidationIssue> {
    let mut issues = Vec::new();
    if proc.depth() > MAX_DEPTH {
        issues.push(ValidationIssue {
            path: "root".into(),
            message: format!("tree depth {} exceeds {MAX_DEPTH}", proc.depth()),
        });
    }
    walk(proc, catalog, "root", &mut issues);
    issues
}

fn walk(node: &ProcedureNode, catalog: &Catalog, path: &str, issues: &mut Vec<ValidationIssue>) {
    let mut issue = |message: String| {
        issues.push(ValidationIssue {
            path: path.to_owned(),
            message,
        })
    };
    match node {
        ProcedureNode::Action(spec) => check_action(&spec.kind, catalog, &mut issue),
        ProcedureNode::Serial { children, .. } | ProcedureNode::Parallel { children, .. } => {
            if children.is_empty() {
                issue("empty composite".into());
            }
            if matches!(node, ProcedureNode::Parallel { .. }) {
                let mut seen: BTreeSet<String> = BTreeSet::new();
                for child in children {
                    for dev in lock_set(child) {
                        if !seen.insert(dev.clone()) {
                            issue(format!("parallel branches both drive {dev}"));
                        }
                    }
                }
            }
            for (i, child) in children.iter().enumerate() {
                walk(child, catalog, &format!("{path}/{i}"), issues);
            }
        }
    }
}

fn check_action(kind: &ActionKind, catalog: &Catalog, issue: &mut dyn FnMut(String)) {
    let known = |addr: &Address, issue: &mut dyn FnMut(String)| {
        let entry = catalog.get(addr);
        if entry.is_none() {
            issue(format!("unknown address {addr}"));
        }
        entry
    };
    match kind {
        ActionKind::ReadValue { addr } => {
            known(addr, issue);
        }
        ActionKind::WriteValue { addr, value } => {
            if let Some(e) = known(addr, issue) {
                if !e.writable {
                    issue(format!("read-only target {addr}"));
                } else if let Some([lo, hi]) = e.limits {
                    let vals: Vec<f64> = match value {
                        Value::Number(v) => vec![*v],
                        Value::Array(vs) => vs.clone(),
                        Value::Text(_) => vec![],
                    };
                    if vals.iter().any(|v| !(lo..=hi).contains(v)) {
                        issue(format!(
                            "value {value} outside limits [{lo}, {hi}] of {addr}"
                        ));
                    }
                }
            }
        }
        ActionKind::Wait { seconds } => {
            if !(seconds.is_finite() && *seconds >= 0.0) {
                issue(format!("wait time {seconds} must be a non-negative number"));
            }
        }
        ActionKind::CycleMagnet { addr, n_cycles } => {
            if let Some(e) = known(addr, issue) {
                if !e.is_magnet {
                    issue(format!("{addr} is not a magnet"));
                }
            }
            if *n_cycles == 0 {
                issue("n_cycles must be at least 1".into());
            }
        }
        ActionKind::Scan {
            addr,
            from,
            to,
            steps,
            readout,
        } => {
            if *steps < 2 {
                issue("scan needs at least 2 steps".into());
            }
            if from == to {
                issue("scan range is empty (from == to)".into());
            }
            if let Some(e) = known(addr, issue) {
                if !e.writable || !e.numeric {
                    issue(format!("scan target {addr} must be a writable number"));
                } else if let Some([lo, hi]) = e.limits {
                    if !(lo..=hi).contains(from) || !(lo..=hi).contains(to) {
                        issue(format!(
                            "scan range [{from}, {to}] outside limits [{lo}, {hi}]"
                        ));
                    }
                }
            }
            known(readout, issue);
        }
        ActionKind::PostLogbook { title, body } => {
            if title.trim().is_empty() || body.trim().is_empty() {
                issue("logbook post needs a title and a body".into());
            }
        }
        ActionKind::AskExpert { channel, question } => {
            if channel.trim().is_empty() || question.trim().is_empty() {
                issue("expert question needs a channel and a question".into());
            }
        }
    }
}

/// Devices a tree mutates (writes, cycles, scans), as `FACILITY/DEVICE/LOCATION`.
pub fn lock_set(node: &ProcedureNode) -> BTreeSet<String> {
    node.actions()
        .into_iter()
        .filter_map(|a| match &a.kind {
            ActionKind::WriteValue { addr, .. }
            | ActionKind::CycleMagnet { addr, .. }
            | ActionKind::Scan { addr, .. } => Some(addr.device_key()),
            _ => None,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::{Machine, MachineConfig};

    fn catalog() -> Catalog {
        Machine::new(&MachineConfig::default_machine())
            .unwrap()
            .catalog()
    }

    fn a(s: &str) -> Address {
        s.parse().unwrap()
    }

    #[test]
    fn read_only_target() {
        let p = ProcedureNode::action(ActionKind::WriteValue {
            addr: a("SIM.RF/GUN/GUN/AMPL.PROBE"),
            value: Value::Number(1.0),
        });
        let issues = validate(&p, &catalog());
        assert_eq!(issues.len(), 1);
        assert!(issues[0].message.contains("read-only target"));
    }

    #[test]
    fn empty_composite() {
        let issues = validate(&ProcedureNode::parallel(vec![]), &catalog());
        assert_eq!(issues[0].message, "empty composite");
    }

    #[test]
    fn structural_and_address_checks() {
        let p = ProcedureNode::serial(vec![
            ProcedureNode::action(ActionKind::CycleMagnet {
                addr: a("SIM.RF/GUN/GUN/AMPL"),
                n_cycles: 0,
            }),
            ProcedureNode::action(ActionKind::Scan {
                addr: a("SIM.RF/GUN/GUN/PHASE"),
                from: 1.0,
                to: 1.0,
                steps: 1,
                readout: a("SIM.FOO/X/Y/Z"),
            }),
            ProcedureNode::action(ActionKind::Wait { seconds: -1.0 }),
        ]);
        let msgs: Vec<String> = validate(&p, &catalog())
            .into_iter()
            .map(|i| i.to_string())
            .collect();
        assert_eq!(msgs.len(), 6, "{msgs:?}");
        assert!(msgs[0].starts_with("root/0: "));
    }

    #[test]
    fn parallel_conflict_and_depth() {
        let cyc = || {
            ProcedureNode::action(ActionKind::CycleMagnet {
                addr: a("SIM.MAGNETS/MAGNET/ARDLMQZM1/CURRENT.SP"),
                n_cycles: 1,
            })
        };
        let issues = validate(&ProcedureNode::parallel(vec![cyc(), cyc()]), &catalog());
        assert!(issues[0]
            .message
            .contains("both drive SIM.MAGNETS/MAGNET/ARDLMQZM1"));

        let mut deep = ProcedureNode::action(ActionKind::Wait { seconds: 0.0 });
        for _ in 0..MAX_DEPTH {
            deep = ProcedureNode::serial(vec![deep]);
        }
        assert!(validate(&deep, &catalog())[0].message.contains("depth 17"));
    }
}
