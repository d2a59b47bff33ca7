//! Declarative machine configuration (JSON). See `docs/machine-config.md`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ControlError, Value};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MachineConfig {
    /// Global noise seed; per-device streams are derived from it.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub magnets: Vec<MagnetConfig>,
    #[serde(default)]
    pub rf_stations: Vec<RfConfig>,
    #[serde(default)]
    pub properties: Vec<PropertyConfig>,
}

/// A magnet power supply exposing `CURRENT.SP`, `CURRENT.RBV` and `CYCLE.STATE`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MagnetConfig {
    /// `FACILITY/DEVICE/LOCATION`
    pub device: String,
    #[serde(default)]
    pub setpoint: f64,
    pub i_max: f64,
    pub ramp_rate: f64,
    pub tau: f64,
    /// Write limits; default and upper bound is `[-i_max, i_max]`.
    #[serde(default)]
    pub limits: Option<[f64; 2]>,
}

/// An RF station exposing `AMPL`, `AMPL.PROBE` and `PHASE`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RfConfig {
    pub device: String,
    pub amplitude: f64,
    #[serde(default)]
    pub amplitude_limits: Option<[f64; 2]>,
    #[serde(default)]
    pub phase: f64,
    #[serde(default)]
    pub phase_limits: Option<[f64; 2]>,
    pub probe_noise_sigma: f64,
    /// Response time constant used for settle times in scans.
    #[serde(default = "default_rf_tau")]
    pub tau: f64,
}

fn default_rf_tau() -> f64 {
    0.1
}

/// A plain stored property with no dynamics.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PropertyConfig {
    pub address: String,
    pub value: Value,
    #[serde(default)]
    pub unit: String,
    #[serde(default)]
    pub writable: bool,
    #[serde(default)]
    pub limits: Option<[f64; 2]>,
    #[serde(default)]
    pub tau: f64,
}

impl MachineConfig {
    pub fn from_json(text: &str) -> Result<Self, ControlError> {
        serde_json::from_str(text).map_err(|e| ControlError::InvalidConfig(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ControlError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ControlError::InvalidConfig(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// The shipped default: two quadrupoles, the RF gun and the hexapod.
    pub fn default_machine() -> Self {
        Self::from_json(DEFAULT_MACHINE).expect("built-in machine config parses")
    }
}

pub const DEFAULT_MACHINE: &str = include_str!("../../../../fixtures/machine/default.json");
