//! Two-expert procedure synthesis.
//!
//! Expert A reads the beamline notes to decide what kind of task an intent
//! describes and which elements it concerns. Expert B turns that layout into
//! a procedure document from a fixed template library.

use std::sync::OnceLock;

use regex::Regex;
use thiserror::Error;

use crate::control::{Address, Catalog, Value};
use crate::experiment::{validate, ActionKind, ActionSpec, ProcedureNode, ValidationIssue};
use crate::knowledge::{tokenize, Corpus};

/// Every schema the template library can instantiate.
pub const SCHEMAS: &[&str] = &[
    "magnet-cycle",
    "rf-phase-scan",
    "hexapod-park",
    "quadrupole-scan",
];

// Function words carry no layout information and would otherwise let any
// sentence match some note.
const STOPWORDS: &[&str] = &[
    "a",
    "about",
    "after",
    "afterwards",
    "all",
    "an",
    "and",
    "are",
    "as",
    "at",
    "be",
    "but",
    "by",
    "can",
    "could",
    "do",
    "for",
    "from",
    "i",
    "in",
    "into",
    "is",
    "it",
    "me",
    "my",
    "of",
    "on",
    "or",
    "please",
    "so",
    "that",
    "the",
    "then",
    "this",
    "to",
    "up",
    "us",
    "want",
    "we",
    "with",
    "would",
    "you",
];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BuilderError {
    #[error("no procedure template matches '{0}'")]
    NoMatchingTemplate(String),
    #[error("template produced an invalid procedure: {}", .0.iter().map(|i| i.to_string()).collect::<Vec<_>>().join("; "))]
    InvalidTemplate(Vec<ValidationIssue>),
}

/// Expert A's reading of an intent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub schema: String,
    /// Device keys (`FACILITY/DEVICE/LOCATION`).
    pub elements: Vec<String>,
    /// Heading of the note that decided the schema.
    pub source: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BuildOptions {
    pub parallel: bool,
    pub post_logbook: bool,
    pub n_cycles: u32,
}

impl BuildOptions {
    pub fn from_intent(intent: &str) -> Self {
        static CYCLES: OnceLock<Regex> = OnceLock::new();
        let re = CYCLES
            .get_or_init(|| Regex::new(r"(\d+)\s*(?:x\b|times|cycles)").expect("valid regex"));
        let lower = intent.to_lowercase();
        let serial = [
            "serial",
            "sequential",
            "one after another",
            "one by one",
            "consecutively",
        ]
        .iter()
        .any(|w| lower.contains(w));
        let n_cycles = re
            .captures(&lower)
            .and_then(|c| c[1].parse::<u32>().ok())
            .map_or(1, |n| n.clamp(1, 10));
        BuildOptions {
            parallel: !serial,
            post_logbook: lower.contains("logbook"),
            n_cycles,
        }
    }
}

fn field<'a>(body: &'a str, name: &str) -> Option<&'a str> {
    body.lines().find_map(|l| {
        l.trim()
            .strip_prefix(name)?
            .trim_start()
            .strip_prefix(':')
            .map(str::trim)
    })
}

/// Expert A: retrieval over the beamline notes. Elements named explicitly in
/// the intent replace the note's defaults when they belong to the same
/// facility.
pub fn beamline_expert(corpus: &Corpus, intent: &str, catalog: &Catalog) -> Option<Layout> {
    let query: Vec<String> = tokenize(intent)
        .into_iter()
        .filter(|t| !STOPWORDS.contains(&t.as_str()))
        .collect();
    let hit = corpus.search(&query.join(" "), 1).into_iter().next()?;
    let chunk = corpus.chunk(hit.id)?;
    let schema = field(&chunk.body, "schema")?.to_owned();
    let defaults: Vec<String> = field(&chunk.body, "elements")?
        .split(',')
        .map(|s| s.trim().to_owned())
        .filter(|s| !s.is_empty())
        .collect();
    let facility = defaults.first()?.split('/').next()?.to_owned();
    let words: Vec<String> = tokenize(intent);
    let mut devices: Vec<String> = catalog.entries.keys().map(Address::device_key).collect();
    devices.dedup();
    let mut mentioned: Vec<(usize, String)> = devices
        .into_iter()
        .filter(|d| d.split('/').next() == Some(facility.as_str()))
        .filter_map(|d| {
            let loc = d.rsplit('/').next()?.to_lowercase();
            words.iter().position(|w| *w == loc).map(|p| (p, d))
        })
        .collect();
    mentioned.sort();
    let elements = if mentioned.is_empty() {
        defaults
    } else {
        mentioned.into_iter().map(|(_, d)| d).collect()
    };
    Some(Layout {
        schema,
        elements,
        source: chunk.heading,
    })
}

fn addr(device: &str, property: &str) -> Address {
    format!("{device}/{property}")
        .parse()
        .expect("template addresses are well formed")
}

fn act(label: &str, kind: ActionKind) -> ProcedureNode {
    ProcedureNode::Action(ActionSpec::labelled(label, kind))
}

fn location(device: &str) -> &str {
    device.rsplit('/').next().unwrap_or(device)
}

/// Expert B: deterministic templates keyed by schema.
pub fn template_expert(layout: &Layout, opts: BuildOptions) -> Result<ProcedureNode, BuilderError> {
    let els = &layout.elements;
    let first = els
        .first()
        .ok_or_else(|| BuilderError::NoMatchingTemplate(layout.schema.clone()))?;
    let names = els
        .iter()
        .map(|e| location(e))
        .collect::<Vec<_>>()
        .join(" and ");
    let (body, title) = match layout.schema.as_str() {
        "magnet-cycle" => {
            let cycles = els
                .iter()
                .map(|e| {
                    act(
                        &format!("cycle {}", location(e)),
                        ActionKind::CycleMagnet {
                            addr: addr(e, "CURRENT.SP"),
                            n_cycles: opts.n_cycles,
                        },
                    )
                })
                .collect();
            let node = if opts.parallel {
                ProcedureNode::Parallel {
                    label: "cycle magnets in parallel".into(),
                    children: cycles,
                }
            } else {
                ProcedureNode::Serial {
                    label: "cycle magnets one after another".into(),
                    children: cycles,
                }
            };
            (node, "Magnet cycling finished")
        }
        "rf-phase-scan" => (
            ProcedureNode::Serial {
                label: "rf phase scan".into(),
                children: vec![
                    act(
                        "read amplitude probe",
                        ActionKind::ReadValue {
                            addr: addr(first, "AMPL.PROBE"),
                        },
                    ),
                    act(
                        "scan phase",
                        ActionKind::Scan {
                            addr: addr(first, "PHASE"),
                            from: -20.0,
                            to: 20.0,
                            steps: 9,
                            readout: addr(first, "AMPL.PROBE"),
                        },
                    ),
                    act(
                        "return to crest",
                        ActionKind::WriteValue {
                            addr: addr(first, "PHASE"),
                            value: Value::Number(0.0),
                        },
                    ),
                ],
            },
            "RF phase scan finished",
        ),
        "hexapod-park" => (
            ProcedureNode::Serial {
                label: "hexapod parking".into(),
                children: vec![act(
                    "read parking position",
                    ActionKind::ReadValue {
                        addr: addr(first, "PARKING.POS"),
                    },
                )],
            },
            "Hexapod parking position checked",
        ),
        "quadrupole-scan" => (
            ProcedureNode::Serial {
                label: "quadrupole scan".into(),
                children: vec![
                    act(
                        &format!("scan {}", location(first)),
                        ActionKind::Scan {
                            addr: addr(first, "CURRENT.SP"),
                            from: -5.0,
                            to: 5.0,
                            steps: 11,
                            readout: addr(first, "CURRENT.RBV"),
                        },
                    ),
                    act(
                        "return to zero",
                        ActionKind::WriteValue {
                            addr: addr(first, "CURRENT.SP"),
                            value: Value::Number(0.0),
                        },
                    ),
                ],
            },
            "Quadrupole scan finished",
        ),
        other => return Err(BuilderError::NoMatchingTemplate(other.to_owned())),
    };
    if !opts.post_logbook {
        return Ok(body);
    }
    let mode = if opts.parallel {
        "in parallel"
    } else {
        "one after another"
    };
    let text = match layout.schema.as_str() {
        "magnet-cycle" => format!("Cycled {names} {mode}.\n{{report}}\nTotal time: {{elapsed}}."),
        _ => format!("Procedure on {names}.\n{{report}}\nTotal time: {{elapsed}}."),
    };
    Ok(ProcedureNode::Serial {
        label: "run and report".into(),
        children: vec![
            body,
            act(
                "post result",
                ActionKind::PostLogbook {
                    title: title.into(),
                    body: text,
                },
            ),
        ],
    })
}

/// A built procedure and the one-line reason for it.
#[derive(Debug, Clone, PartialEq)]
pub struct Built {
    pub procedure: ProcedureNode,
    pub rationale: String,
}

/// Runs both experts and checks the result against the machine catalog.
pub fn build_procedure(
    intent: &str,
    corpus: &Corpus,
    catalog: &Catalog,
) -> Result<Built, BuilderError> {
    let layout = beamline_expert(corpus, intent, catalog)
        .ok_or_else(|| BuilderError::NoMatchingTemplate(intent.trim().to_owned()))?;
    let opts = BuildOptions::from_intent(intent);
    let procedure = template_expert(&layout, opts)?;
    let issues = validate(&procedure, catalog);
    if !issues.is_empty() {
        return Err(BuilderError::InvalidTemplate(issues));
    }
    let names = layout
        .elements
        .iter()
        .map(|e| location(e))
        .collect::<Vec<_>>()
        .join(", ");
    let mut rationale = format!(
        "beamline notes '{}' give schema {} for {}",
        layout.source, layout.schema, names
    );
    if layout.elements.len() > 1 {
        rationale.push_str(if opts.parallel {
            ", run in parallel"
        } else {
            ", run one after another"
        });
    }
    if opts.post_logbook {
        rationale.push_str(", result posted to the logbook");
    }
    rationale.push('.');
    Ok(Built {
        procedure,
        rationale,
    })
}
