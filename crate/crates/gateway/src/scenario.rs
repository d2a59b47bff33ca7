//! Scenario fixtures: a scripted model plus scripted expert replies.

use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use anyhow::Context;
use ops_core::react::ScriptedModel;
use ops_core::relay::{Relay, ScriptedReplyRule, ScriptedResponder};
use serde::Deserialize;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpertScript {
    pub channel: String,
    #[serde(default)]
    pub delay_ms: u64,
    pub rules: Vec<ScriptedReplyRule>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    #[serde(default)]
    name: String,
    #[serde(default)]
    task: Option<String>,
    model: serde_json::Value,
    #[serde(default)]
    experts: Vec<ExpertScript>,
}

pub struct Scenario {
    pub name: String,
    /// The task the scenario was written for, if recorded.
    pub task: Option<String>,
    pub model: ScriptedModel,
    pub experts: Vec<ExpertScript>,
}

impl Scenario {
    /// Reads a scenario file. A bare scripted-model fixture (no `model` key)
    /// is accepted as a scenario without experts.
    pub fn load(path: &Path) -> anyhow::Result<Scenario> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let value: serde_json::Value =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        if value.get("model").is_none() {
            let model = ScriptedModel::from_json(&text)
                .with_context(|| format!("loading {}", path.display()))?;
            return Ok(Scenario {
                name: String::new(),
                task: None,
                model,
                experts: vec![],
            });
        }
        let file: ScenarioFile =
            serde_json::from_value(value).with_context(|| format!("parsing {}", path.display()))?;
        let model = ScriptedModel::from_json(&file.model.to_string())
            .with_context(|| format!("loading model rules from {}", path.display()))?;
        Ok(Scenario {
            name: file.name,
            task: file.task,
            model,
            experts: file.experts,
        })
    }

    /// Attaches the scripted experts to `relay`.
    pub fn install_experts(&self, relay: &Relay) -> anyhow::Result<()> {
        for e in &self.experts {
            let responder = ScriptedResponder::new(&e.rules, Duration::from_millis(e.delay_ms))
                .with_context(|| format!("expert rules for {}", e.channel))?;
            relay.register_responder(&e.channel, Arc::new(responder))?;
        }
        Ok(())
    }
}
