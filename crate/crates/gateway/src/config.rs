//! Service configuration, read from TOML or JSON.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use ops_core::react::SessionLimits;
use serde::Deserialize;

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// HTTP listen address.
    pub listen: String,
    /// NDJSON control protocol listen address; disabled when absent.
    pub control_listen: Option<String>,
    /// Where sessions, logbook and relay journals are kept.
    pub state_dir: PathBuf,
    /// Machine description; the built-in default machine when absent.
    pub machine: Option<PathBuf>,
    /// Overrides the machine file's RNG seed.
    pub seed: Option<u64>,
    /// Simulator ticks per second for the background clock (0 disables).
    pub tick_hz: f64,
    /// Fixed UTC epoch in seconds instead of the system clock.
    pub fixed_epoch: Option<i64>,
    pub corpora: CorporaConfig,
    pub model: ModelConfig,
    pub limits: SessionLimits,
    /// Enabled tools; all standard tools when absent.
    pub tools: Option<Vec<String>>,
    pub approval: ApprovalConfig,
    pub relay: RelayConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            listen: "127.0.0.1:8080".into(),
            control_listen: Some("127.0.0.1:5064".into()),
            state_dir: "state".into(),
            machine: None,
            seed: None,
            tick_hz: 10.0,
            fixed_epoch: None,
            corpora: CorporaConfig::default(),
            model: ModelConfig::default(),
            limits: SessionLimits::default(),
            tools: None,
            approval: ApprovalConfig::default(),
            relay: RelayConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorporaConfig {
    /// Seed entries copied into a fresh logbook store.
    pub logbook_seed: PathBuf,
    pub meetings: PathBuf,
    pub docs: PathBuf,
    pub beamline: PathBuf,
}

impl Default for CorporaConfig {
    fn default() -> Self {
        CorporaConfig {
            logbook_seed: "fixtures/corpora/logbook.jsonl".into(),
            meetings: "fixtures/corpora/meetings".into(),
            docs: "docs/dge".into(),
            beamline: "fixtures/corpora/beamline".into(),
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Base URL of a model server speaking the generate contract.
    pub endpoint: Option<String>,
    pub name: String,
    /// Scripted stub fixture; takes precedence over `endpoint`.
    pub stub: Option<PathBuf>,
    /// Prompt template; the built-in agent template when absent.
    pub template: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApprovalModeName {
    Blocking,
    Deferred,
    Auto,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ApprovalConfig {
    pub mode: ApprovalModeName,
    pub timeout_secs: u64,
    /// Lets clients request per-session auto-approval. Meant for tests.
    pub allow_auto_approve: bool,
}

impl Default for ApprovalConfig {
    fn default() -> Self {
        ApprovalConfig {
            mode: ApprovalModeName::Blocking,
            timeout_secs: 600,
            allow_auto_approve: false,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RelayConfig {
    /// Channels answered through `POST /relay/reply`.
    pub channels: Vec<String>,
    /// Outbound webhook receiving `{channel, text, query_id}` for every question.
    pub webhook: Option<String>,
    pub timeout_secs: u64,
}

impl Default for RelayConfig {
    fn default() -> Self {
        RelayConfig {
            channels: vec!["rf-experts".into(), "magnet-experts".into()],
            webhook: None,
            timeout_secs: 120,
        }
    }
}

impl Config {
    pub fn load(path: &Path) -> anyhow::Result<Config> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg: Config = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => serde_json::from_str(&text)
                .with_context(|| format!("parsing {}", path.display()))?,
            Some("toml") | None => {
                toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
            }
            Some(other) => bail!("unsupported config format '.{other}' (use .toml or .json)"),
        };
        cfg.check()?;
        Ok(cfg)
    }

    pub fn check(&self) -> anyhow::Result<()> {
        if !self.limits.is_valid() {
            bail!("limits must all be positive");
        }
        if !(self.tick_hz >= 0.0 && self.tick_hz.is_finite()) {
            bail!("tick_hz must be a non-negative number");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_and_json_agree() {
        let dir = tempfile::tempdir().unwrap();
        let t = dir.path().join("c.toml");
        std::fs::write(
            &t,
            "listen = \"0.0.0.0:9000\"\n[limits]\nmax_steps = 4\n[approval]\nmode = \"deferred\"\n",
        )
        .unwrap();
        let j = dir.path().join("c.json");
        std::fs::write(
            &j,
            r#"{"listen":"0.0.0.0:9000","limits":{"max_steps":4},"approval":{"mode":"deferred"}}"#,
        )
        .unwrap();
        let (a, b) = (Config::load(&t).unwrap(), Config::load(&j).unwrap());
        assert_eq!(
            (a.listen.as_str(), a.limits.max_steps, a.approval.mode),
            ("0.0.0.0:9000", 4, ApprovalModeName::Deferred)
        );
        assert_eq!(
            (b.listen, b.limits, b.approval.mode),
            (a.listen, a.limits, a.approval.mode)
        );
    }

    #[test]
    fn shipped_example_loads() {
        let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../config/example.toml");
        let c = Config::load(&p).unwrap();
        assert_eq!(c.approval.mode, ApprovalModeName::Blocking);
        assert_eq!(c.limits, SessionLimits::default());
    }

    #[test]
    fn rejects_unknown_keys_and_bad_limits() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "lisen = \"x\"\n").unwrap();
        assert!(Config::load(&p).is_err());
        std::fs::write(&p, "[limits]\nmax_steps = 0\n").unwrap();
        assert!(Config::load(&p).is_err());
    }
}
