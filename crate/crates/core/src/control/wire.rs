//! Request/response verbs shared by the TCP (newline-delimited JSON) and
//! HTTP front ends.
//!
//! ```text
//! {"op":"read","addr":"SIM.RF/GUN/GUN/AMPL"}
//! {"op":"write","addr":"...","value":2.5}
//! {"op":"cycle","addr":"...","n":1}
//! {"op":"list","pattern":"SIM.MAGNETS/*/*/*"}
//! {"op":"snapshot"}
//! ```
//! Responses are `{"ok":true,"result":...}` or
//! `{"ok":false,"error":"<Code>","message":"..."}`.

use serde::Deserialize;
use serde_json::{json, Value as Json};

use super::{Address, ControlError, SharedMachine, Value};

#[derive(Debug, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase", deny_unknown_fields)]
pub enum Request {
    Read { addr: String },
    Write { addr: String, value: Value },
    Cycle { addr: String, n: u32 },
    List { pattern: String },
    Snapshot,
}

fn parse_addr(s: &str) -> Result<Address, ControlError> {
    s.parse()
}

fn ok(result: Json) -> Json {
    json!({ "ok": true, "result": result })
}

fn err(code: &str, message: String) -> Json {
    json!({ "ok": false, "error": code, "message": message })
}

pub fn execute(machine: &SharedMachine, req: Request) -> Json {
    let outcome: Result<Json, ControlError> = match req {
        Request::Read { addr } => parse_addr(&addr)
            .and_then(|a| machine.read().read(&a))
            .map(|r| serde_json::to_value(r).expect("record serializes")),
        Request::Write { addr, value } => parse_addr(&addr)
            .and_then(|a| machine.write().write(&a, &value))
            .map(|()| json!({ "written": addr })),
        Request::Cycle { addr, n } => parse_addr(&addr)
            .and_then(|a| machine.write().start_cycle(&a, n))
            .map(|h| serde_json::to_value(h).expect("handle serializes")),
        Request::List { pattern } => machine
            .read()
            .list(&pattern)
            .map(|v| Json::Array(v.iter().map(|a| Json::String(a.to_string())).collect())),
        Request::Snapshot => {
            Ok(serde_json::to_value(machine.snapshot()).expect("snapshot serializes"))
        }
    };
    match outcome {
        Ok(v) => ok(v),
        Err(e) => err(e.code(), e.to_string()),
    }
}

/// Handles one request line. Malformed JSON yields a `BadRequest` response.
pub fn handle_line(machine: &SharedMachine, line: &str) -> Json {
    match serde_json::from_str::<Request>(line) {
        Ok(req) => execute(machine, req),
        Err(e) => err("BadRequest", e.to_string()),
    }
}
