//! Deterministic simulated accelerator control system.
//!
//! Properties are addressed as `FACILITY/DEVICE/LOCATION/PROPERTY`. Magnets
//! follow their setpoint with a first-order lag and can run a hysteresis
//! cycling program; RF stations expose a noisy amplitude probe. Time only
//! moves through [`Machine::tick`] / [`Machine::advance`].

mod address;
pub mod config;
mod machine;
mod shared;
pub mod wire;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use address::{Address, AddressPattern};
pub use config::MachineConfig;
pub use machine::{
    device_seed, Catalog, CatalogEntry, CycleHandle, CycleState, Machine, MachineSnapshot,
    MagnetDevice, PropertyRecord, AMPLITUDE, CYCLE_STATE, PHASE, PROBE, READBACK, SETPOINT,
};
pub use shared::{SharedMachine, TimeControl};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ControlError {
    #[error("unknown address {0}")]
    UnknownAddress(String),
    #[error("invalid address '{0}'")]
    InvalidAddress(String),
    #[error("{0} is read-only")]
    ReadOnly(String),
    #[error("value {value} outside limits [{lo}, {hi}]")]
    OutOfLimits { value: f64, lo: f64, hi: f64 },
    #[error("type mismatch: {0}")]
    TypeMismatch(String),
    #[error("{0} is busy cycling")]
    Busy(String),
    #[error("{0} is not a magnet")]
    NotAMagnet(String),
    #[error("{0} is not cycling")]
    NotCycling(String),
    #[error("cycle count must be positive")]
    InvalidCycleCount,
    #[error("negative or non-finite time step {0}")]
    NegativeDt(f64),
    #[error("malformed pattern '{0}'")]
    MalformedPattern(String),
    #[error("invalid machine config: {0}")]
    InvalidConfig(String),
}

impl ControlError {
    /// Stable error code used on the wire.
    pub fn code(&self) -> &'static str {
        match self {
            ControlError::UnknownAddress(_) => "UnknownAddress",
            ControlError::InvalidAddress(_) => "InvalidAddress",
            ControlError::ReadOnly(_) => "ReadOnly",
            ControlError::OutOfLimits { .. } => "OutOfLimits",
            ControlError::TypeMismatch(_) => "TypeMismatch",
            ControlError::Busy(_) => "Busy",
            ControlError::NotAMagnet(_) => "NotAMagnet",
            ControlError::NotCycling(_) => "NotCycling",
            ControlError::InvalidCycleCount => "InvalidCycleCount",
            ControlError::NegativeDt(_) => "NegativeDt",
            ControlError::MalformedPattern(_) => "MalformedPattern",
            ControlError::InvalidConfig(_) => "InvalidConfig",
        }
    }
}

/// A property value: scalar number, text, or number array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Number(f64),
    Text(String),
    Array(Vec<f64>),
}

impl Value {
    pub fn as_number(&self) -> Result<f64, ControlError> {
        match self {
            Value::Number(v) => Ok(*v),
            other => Err(ControlError::TypeMismatch(format!(
                "expected number, got {}",
                other.kind()
            ))),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Value::Number(_) => "number",
            Value::Text(_) => "text",
            Value::Array(_) => "number array",
        }
    }
}

impl std::fmt::Display for Value {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Value::Number(v) => write!(f, "{v:?}"),
            Value::Text(s) => f.write_str(s),
            Value::Array(vs) => write!(f, "{vs:?}"),
        }
    }
}
