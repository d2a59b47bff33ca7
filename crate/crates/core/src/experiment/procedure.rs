//! Procedure trees and their JSON document form.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control::{Address, Value};

/// One encapsulated operator sub-task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum ActionKind {
    ReadValue {
        addr: Address,
    },
    WriteValue {
        addr: Address,
        value: Value,
    },
    Wait {
        seconds: f64,
    },
    CycleMagnet {
        addr: Address,
        n_cycles: u32,
    },
    Scan {
        addr: Address,
        from: f64,
        to: f64,
        steps: u32,
        readout: Address,
    },
    /// `body` may reference `{report}` (results so far) and `{elapsed}`.
    PostLogbook {
        title: String,
        body: String,
    },
    AskExpert {
        channel: String,
        question: String,
    },
}

impl ActionKind {
    pub fn name(&self) -> &'static str {
        match self {
            ActionKind::ReadValue { .. } => "read_value",
            ActionKind::WriteValue { .. } => "write_value",
            ActionKind::Wait { .. } => "wait",
            ActionKind::CycleMagnet { .. } => "cycle_magnet",
            ActionKind::Scan { .. } => "scan",
            ActionKind::PostLogbook { .. } => "post_logbook",
            ActionKind::AskExpert { .. } => "ask_expert",
        }
    }

    /// Scan setpoints, evenly spaced and inclusive of both ends.
    pub fn scan_points(from: f64, to: f64, steps: u32) -> Vec<f64> {
        let n = steps.max(2);
        (0..n)
            .map(|i| {
                if i + 1 == n {
                    to
                } else {
                    from + (to - from) * f64::from(i) / f64::from(n - 1)
                }
            })
            .collect()
    }

    fn describe(&self) -> String {
        match self {
            ActionKind::ReadValue { addr } => format!("read {addr}"),
            ActionKind::WriteValue { addr, value } => format!("write {addr} = {value}"),
            ActionKind::Wait { seconds } => format!("wait {seconds} s"),
            ActionKind::CycleMagnet { addr, n_cycles } => {
                format!("cycle {} x{n_cycles}", addr.location())
            }
            ActionKind::Scan { addr, steps, .. } => format!("scan {addr} ({steps} steps)"),
            ActionKind::PostLogbook { title, .. } => format!("post logbook '{title}'"),
            ActionKind::AskExpert { channel, .. } => format!("ask {channel}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionSpec {
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub label: String,
    #[serde(flatten)]
    pub kind: ActionKind,
}

impl ActionSpec {
    pub fn new(kind: ActionKind) -> Self {
        ActionSpec {
            label: String::new(),
            kind,
        }
    }

    pub fn labelled(label: impl Into<String>, kind: ActionKind) -> Self {
        ActionSpec {
            label: label.into(),
            kind,
        }
    }

    /// The label, or a generated description when none was given.
    pub fn display_label(&self) -> String {
        if self.label.is_empty() {
            self.kind.describe()
        } else {
            self.label.clone()
        }
    }
}

/// A tree of actions composed serially or in parallel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ProcedureNode {
    Action(ActionSpec),
    Serial {
        #[serde(default, skip_serializing_if = "String::is_empty")]
        label: String,
        children: Vec<ProcedureNode>,
    },
    Parallel {
        #[serde(default, skip_serializing_if = "String::is_empty")]
        label: String,
        children: Vec<ProcedureNode>,
    },
}

impl ProcedureNode {
    pub fn action(kind: ActionKind) -> Self {
        ProcedureNode::Action(ActionSpec::new(kind))
    }

    pub fn serial(children: Vec<ProcedureNode>) -> Self {
        ProcedureNode::Serial {
            label: String::new(),
            children,
        }
    }

    pub fn parallel(children: Vec<ProcedureNode>) -> Self {
        ProcedureNode::Parallel {
            label: String::new(),
            children,
        }
    }

    pub fn children(&self) -> &[ProcedureNode] {
        match self {
            ProcedureNode::Action(_) => &[],
            ProcedureNode::Serial { children, .. } | ProcedureNode::Parallel { children, .. } => {
                children
            }
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            ProcedureNode::Action(a) => a.kind.name(),
            ProcedureNode::Serial { .. } => "serial",
            ProcedureNode::Parallel { .. } => "parallel",
        }
    }

    pub fn display_label(&self) -> String {
        match self {
            ProcedureNode::Action(a) => a.display_label(),
            ProcedureNode::Serial { label, .. } | ProcedureNode::Parallel { label, .. } => {
                if label.is_empty() {
                    self.kind_name().to_owned()
                } else {
                    label.clone()
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        1 + self
            .children()
            .iter()
            .map(ProcedureNode::depth)
            .max()
            .unwrap_or(0)
    }

    /// All leaf actions in tree order.
    pub fn actions(&self) -> Vec<&ActionSpec> {
        let mut out = Vec::new();
        self.collect_actions(&mut out);
        out
    }

    fn collect_actions<'a>(&'a self, out: &mut Vec<&'a ActionSpec>) {
        match self {
            ProcedureNode::Action(a) => out.push(a),
            _ => self.children().iter().for_each(|c| c.collect_actions(out)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("procedure document line {line}, column {column}: {reason}")]
pub struct ParseError {
    pub line: usize,
    pub column: usize,
    pub reason: String,
}

/// Parses a procedure document.
pub fn parse_procedure(doc: &str) -> Result<ProcedureNode, ParseError> {
    serde_json::from_str(doc).map_err(|e| {
        let reason = rename_unknown_variant(&e.to_string());
        // errors raised from buffered (tagged) content carry no position
        let (line, column) = if e.line() == 0 {
            locate_culprit(doc, &reason)
        } else {
            (e.line(), e.column())
        };
        ParseError {
            line,
            column,
            reason,
        }
    })
}

/// Finds the first backquoted token of `reason` as a JSON string in `doc`.
fn locate_culprit(doc: &str, reason: &str) -> (usize, usize) {
    let token = reason.split('`').nth(1).map(|t| format!("\"{t}\""));
    let offset = token.and_then(|t| doc.find(&t)).unwrap_or(0);
    let before = &doc[..offset];
    let line = before.matches('\n').count() + 1;
    let column = before.rfind('\n').map_or(offset, |nl| offset - nl - 1) + 1;
    (line, column)
}

// serde reports "unknown variant `X`"; say what kind of thing X was
fn rename_unknown_variant(msg: &str) -> String {
    let msg = msg.split(" at line ").next().unwrap_or(msg);
    match msg.strip_prefix("unknown variant ") {
        Some(rest) => format!("unknown action or node kind {rest}"),
        None => msg.to_owned(),
    }
}

/// Canonical document text: pretty-printed JSON, two-space indent.
pub fn format_procedure(node: &ProcedureNode) -> String {
    serde_json::to_string_pretty(node).expect("procedure serializes")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_kind_is_named() {
        let doc = r#"{"type":"action","action":"FROBNICATE","addr":"A/B/C/D"}"#;
        let err = parse_procedure(doc).unwrap_err();
        assert!(err.reason.contains("FROBNICATE"), "{err}");
        assert_eq!(err.line, 1);
    }

    #[test]
    fn reports_line_and_column() {
        let err =
            parse_procedure("{\n  \"type\": \"serial\",\n  \"children\": [,]\n}").unwrap_err();
        assert_eq!(err.line, 3);
        assert!(err.column > 0);
    }

    #[test]
    fn bad_address_is_a_parse_error() {
        let doc = r#"{"type":"action","action":"read_value","addr":"not an address"}"#;
        assert!(parse_procedure(doc).is_err());
    }

    #[test]
    fn scan_points_are_inclusive() {
        assert_eq!(ActionKind::scan_points(0.0, 1.0, 3), vec![0.0, 0.5, 1.0]);
        assert_eq!(ActionKind::scan_points(-30.0, 30.0, 2), vec![-30.0, 30.0]);
    }

    #[test]
    fn round_trips_through_text() {
        let tree = ProcedureNode::serial(vec![
            ProcedureNode::parallel(vec![
                ProcedureNode::action(ActionKind::Wait { seconds: 0.1 }),
                ProcedureNode::action(ActionKind::WriteValue {
                    addr: "A/B/C/D".parse().unwrap(),
                    value: Value::Array(vec![1.0, -2.5]),
                }),
            ]),
            ProcedureNode::Action(ActionSpec::labelled(
                "tell",
                ActionKind::PostLogbook {
                    title: "t".into(),
                    body: "{report}".into(),
                },
            )),
        ]);
        let text = format_procedure(&tree);
        assert_eq!(parse_procedure(&text).unwrap(), tree);
    }
}
