//! Typed actions composed into serial/parallel procedures, validated against
//! the machine catalog and executed on the simulated clock.

mod engine;
mod procedure;
mod validate;

pub use engine::{
    Capture, Engine, EngineError, ExecutionReport, ExpertDesk, LogbookSink, NodeReport, NodeStatus,
    Services,
};
pub use procedure::{
    format_procedure, parse_procedure, ActionKind, ActionSpec, ParseError, ProcedureNode,
};
pub use validate::{lock_set, validate, ValidationIssue, MAX_DEPTH};
