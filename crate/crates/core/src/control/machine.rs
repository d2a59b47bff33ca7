use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::config::{MachineConfig, MagnetConfig, PropertyConfig, RfConfig};
use super::{Address, AddressPattern, ControlError, Value};
use crate::clock::{SimDuration, SimTime};

pub const SETPOINT: &str = "CURRENT.SP";
pub const READBACK: &str = "CURRENT.RBV";
pub const CYCLE_STATE: &str = "CYCLE.STATE";
pub const AMPLITUDE: &str = "AMPL";
pub const PROBE: &str = "AMPL.PROBE";
pub const PHASE: &str = "PHASE";

/// Result of a read: the value plus its metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropertyRecord {
    pub value: Value,
    pub unit: String,
    pub writable: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limits: Option<[f64; 2]>,
    /// Simulated-clock seconds at which the record was produced.
    pub timestamp: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CycleState {
    Idle,
    Cycling { segment: usize, remaining: usize },
}

#[derive(Debug, Clone)]
struct Segment {
    to: f64,
    duration: SimDuration,
}

#[derive(Debug, Clone)]
struct CycleProgram {
    restore: f64,
    segments: Vec<Segment>,
    index: usize,
    elapsed: SimDuration,
}

#[derive(Debug, Clone)]
pub struct MagnetDevice {
    pub setpoint: f64,
    pub readback: f64,
    pub tau: f64,
    pub i_max: f64,
    pub ramp_rate: f64,
    limits: [f64; 2],
    cycle: Option<CycleProgram>,
}

#[derive(Debug, Clone)]
pub struct RfStation {
    pub amplitude_setpoint: f64,
    pub phase: f64,
    pub probe_noise_sigma: f64,
    pub tau: f64,
    probe: f64,
    amplitude_limits: Option<[f64; 2]>,
    phase_limits: Option<[f64; 2]>,
    rng: ChaCha8Rng,
}

#[derive(Debug, Clone)]
struct StoredProperty {
    value: Value,
    unit: String,
    writable: bool,
    limits: Option<[f64; 2]>,
    tau: f64,
}

#[derive(Debug, Clone, Copy)]
enum Slot {
    Setpoint(usize),
    Readback(usize),
    Cycle(usize),
    Amplitude(usize),
    Probe(usize),
    Phase(usize),
    Stored(usize),
}

/// Handle returned by [`Machine::start_cycle`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleHandle {
    pub magnet: Address,
    pub started_at: SimTime,
    pub duration: SimDuration,
}

impl CycleHandle {
    pub fn completes_at(&self) -> SimTime {
        self.started_at + self.duration
    }
}

/// Point-in-time copy of every record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MachineSnapshot {
    pub clock: f64,
    pub records: BTreeMap<String, PropertyRecord>,
}

impl MachineSnapshot {
    /// True when both snapshots agree on everything except timestamps.
    pub fn same_values(&self, other: &MachineSnapshot) -> bool {
        self.records.len() == other.records.len()
            && self
                .records
                .iter()
                .zip(&other.records)
                .all(|((ka, a), (kb, b))| {
                    ka == kb
                        && a.value == b.value
                        && a.unit == b.unit
                        && a.writable == b.writable
                        && a.limits == b.limits
                })
    }
}

/// What a validator needs to know about an address.
#[derive(Debug, Clone, PartialEq)]
pub struct CatalogEntry {
    pub writable: bool,
    pub numeric: bool,
    pub limits: Option<[f64; 2]>,
    pub is_magnet: bool,
    /// Response time constant of the owning device, seconds.
    pub tau: f64,
}

/// Address listing with per-address capabilities.
#[derive(Debug, Clone, Default)]
pub struct Catalog {
    pub entries: BTreeMap<Address, CatalogEntry>,
}

impl Catalog {
    pub fn get(&self, addr: &Address) -> Option<&CatalogEntry> {
        self.entries.get(addr)
    }
}

/// The simulated control system. All mutation goes through `&mut self`;
/// wrap it in [`super::SharedMachine`] to share it.
#[derive(Debug, Clone)]
pub struct Machine {
    clock: SimTime,
    magnets: Vec<MagnetDevice>,
    rf: Vec<RfStation>,
    stored: Vec<StoredProperty>,
    slots: BTreeMap<Address, Slot>,
}

/// FNV-1a over the global seed and the canonical address text.
pub fn device_seed(global: u64, addr: &Address) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in global
        .to_le_bytes()
        .iter()
        .chain(addr.to_string().as_bytes())
    {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn device_address(device: &str, property: &str) -> Result<Address, ControlError> {
    format!("{device}/{property}")
        .parse()
        .map_err(|_| ControlError::InvalidConfig(format!("bad device path '{device}'")))
}

fn check_limits(value: f64, limits: Option<[f64; 2]>) -> Result<(), ControlError> {
    if !value.is_finite() {
        return Err(ControlError::TypeMismatch("value must be finite".into()));
    }
    if let Some([lo, hi]) = limits {
        if value < lo || value > hi {
            return Err(ControlError::OutOfLimits { value, lo, hi });
        }
    }
    Ok(())
}

/// First-order response to a setpoint ramping linearly as `start + slope·t`
/// over `h` seconds. With zero slope this is the plain exponential step
/// `r + (s − r)(1 − e^(−h/τ))`.
fn relax(readback: f64, start: f64, slope: f64, tau: f64, h: f64) -> f64 {
    if h <= 0.0 {
        return readback;
    }
    let decay = (-h / tau).exp();
    if slope == 0.0 {
        readback + (start - readback) * (1.0 - decay)
    } else {
        let lag = slope * tau;
        (start + slope * h) - lag + (readback - start + lag) * decay
    }
}

impl MagnetDevice {
    fn from_config(cfg: &MagnetConfig) -> Result<Self, ControlError> {
        let bad = |why: &str| ControlError::InvalidConfig(format!("magnet {}: {why}", cfg.device));
        if !(cfg.i_max > 0.0 && cfg.i_max.is_finite()) {
            return Err(bad("i_max must be positive"));
        }
        if !(cfg.ramp_rate > 0.0 && cfg.ramp_rate.is_finite()) {
            return Err(bad("ramp_rate must be positive"));
        }
        if !(cfg.tau > 0.0 && cfg.tau.is_finite()) {
            return Err(bad("tau must be positive"));
        }
        let limits = cfg.limits.unwrap_or([-cfg.i_max, cfg.i_max]);
        if limits[0] > limits[1] || limits[0] < -cfg.i_max || limits[1] > cfg.i_max {
            return Err(bad("limits must lie within [-i_max, i_max]"));
        }
        check_limits(cfg.setpoint, Some(limits))
            .map_err(|_| bad("initial setpoint outside limits"))?;
        Ok(MagnetDevice {
            setpoint: cfg.setpoint,
            readback: cfg.setpoint,
            tau: cfg.tau,
            i_max: cfg.i_max,
            ramp_rate: cfg.ramp_rate,
            limits,
            cycle: None,
        })
    }

    pub fn cycle_state(&self) -> CycleState {
        match &self.cycle {
            None => CycleState::Idle,
            Some(c) => CycleState::Cycling {
                segment: c.index,
                remaining: c.segments.len() - c.index,
            },
        }
    }

    fn advance(&mut self, mut remaining: SimDuration) {
        loop {
            // finish any segment whose time is used up, including zero-length ones
            if let Some(c) = &mut self.cycle {
                if c.elapsed >= c.segments[c.index].duration {
                    self.setpoint = c.segments[c.index].to;
                    c.index += 1;
                    c.elapsed = SimDuration::ZERO;
                    if c.index == c.segments.len() {
                        self.setpoint = c.restore;
                        self.cycle = None;
                    }
                    continue;
                }
            }
            if remaining == SimDuration::ZERO {
                return;
            }
            match &mut self.cycle {
                None => {
                    self.readback = relax(
                        self.readback,
                        self.setpoint,
                        0.0,
                        self.tau,
                        remaining.as_secs_f64(),
                    );
                    return;
                }
                Some(c) => {
                    let seg = &c.segments[c.index];
                    let left = SimDuration(seg.duration.0 - c.elapsed.0);
                    let step = remaining.min(left);
                    let slope = (seg.to - self.setpoint) / left.as_secs_f64();
                    let h = step.as_secs_f64();
                    self.readback = relax(self.readback, self.setpoint, slope, self.tau, h);
                    self.setpoint = if step == left {
                        seg.to
                    } else {
                        self.setpoint + slope * h
                    };
                    c.elapsed = c.elapsed + step;
                    remaining = SimDuration(remaining.0 - step.0);
                }
            }
        }
    }
}

impl RfStation {
    fn from_config(cfg: &RfConfig, seed: u64, probe_addr: &Address) -> Result<Self, ControlError> {
        let bad =
            |why: &str| ControlError::InvalidConfig(format!("rf station {}: {why}", cfg.device));
        if !(cfg.probe_noise_sigma >= 0.0 && cfg.probe_noise_sigma.is_finite()) {
            return Err(bad("probe_noise_sigma must be non-negative"));
        }
        if !(cfg.tau >= 0.0 && cfg.tau.is_finite()) {
            return Err(bad("tau must be non-negative"));
        }
        check_limits(cfg.amplitude, cfg.amplitude_limits)
            .map_err(|_| bad("amplitude outside limits"))?;
        check_limits(cfg.phase, cfg.phase_limits).map_err(|_| bad("phase outside limits"))?;
        let mut station = RfStation {
            amplitude_setpoint: cfg.amplitude,
            phase: cfg.phase,
            probe_noise_sigma: cfg.probe_noise_sigma,
            tau: cfg.tau,
            probe: cfg.amplitude,
            amplitude_limits: cfg.amplitude_limits,
            phase_limits: cfg.phase_limits,
            rng: ChaCha8Rng::seed_from_u64(device_seed(seed, probe_addr)),
        };
        station.sample_probe();
        Ok(station)
    }

    fn sample_probe(&mut self) {
        let noise = Normal::new(0.0, self.probe_noise_sigma).expect("sigma validated");
        self.probe = self.amplitude_setpoint + noise.sample(&mut self.rng);
    }
}

impl Machine {
    pub fn new(config: &MachineConfig) -> Result<Self, ControlError> {
        let mut machine = Machine {
            clock: SimTime::ZERO,
            magnets: Vec::new(),
            rf: Vec::new(),
            stored: Vec::new(),
            slots: BTreeMap::new(),
        };
        for cfg in &config.magnets {
            let idx = machine.magnets.len();
            machine.magnets.push(MagnetDevice::from_config(cfg)?);
            machine.bind(device_address(&cfg.device, SETPOINT)?, Slot::Setpoint(idx))?;
            machine.bind(device_address(&cfg.device, READBACK)?, Slot::Readback(idx))?;
            machine.bind(device_address(&cfg.device, CYCLE_STATE)?, Slot::Cycle(idx))?;
        }
        for cfg in &config.rf_stations {
            let idx = machine.rf.len();
            let probe_addr = device_address(&cfg.device, PROBE)?;
            machine
                .rf
                .push(RfStation::from_config(cfg, config.seed, &probe_addr)?);
            machine.bind(
                device_address(&cfg.device, AMPLITUDE)?,
                Slot::Amplitude(idx),
            )?;
            machine.bind(probe_addr, Slot::Probe(idx))?;
            machine.bind(device_address(&cfg.device, PHASE)?, Slot::Phase(idx))?;
        }
        for cfg in &config.properties {
            let idx = machine.stored.len();
            let addr: Address = cfg.address.parse().map_err(|_| {
                ControlError::InvalidConfig(format!("bad address '{}'", cfg.address))
            })?;
            machine.stored.push(StoredProperty::from_config(cfg)?);
            machine.bind(addr, Slot::Stored(idx))?;
        }
        Ok(machine)
    }

    fn bind(&mut self, addr: Address, slot: Slot) -> Result<(), ControlError> {
        if self.slots.insert(addr.clone(), slot).is_some() {
            return Err(ControlError::InvalidConfig(format!(
                "duplicate address {addr}"
            )));
        }
        Ok(())
    }

    pub fn clock(&self) -> SimTime {
        self.clock
    }

    fn slot(&self, addr: &Address) -> Result<Slot, ControlError> {
        self.slots
            .get(addr)
            .copied()
            .ok_or_else(|| ControlError::UnknownAddress(addr.to_string()))
    }

    fn record(&self, slot: Slot) -> PropertyRecord {
        let timestamp = self.clock.as_secs_f64();
        let num =
            |value: f64, unit: &str, writable: bool, limits: Option<[f64; 2]>| PropertyRecord {
                value: Value::Number(value),
                unit: unit.to_owned(),
                writable,
                limits,
                timestamp,
            };
        match slot {
            Slot::Setpoint(i) => num(
                self.magnets[i].setpoint,
                "A",
                true,
                Some(self.magnets[i].limits),
            ),
            Slot::Readback(i) => num(self.magnets[i].readback, "A", false, None),
            Slot::Cycle(i) => PropertyRecord {
                value: Value::Text(match self.magnets[i].cycle_state() {
                    CycleState::Idle => "Idle".to_owned(),
                    CycleState::Cycling { segment, remaining } => {
                        format!("Cycling({segment}, {remaining})")
                    }
                }),
                unit: String::new(),
                writable: false,
                limits: None,
                timestamp,
            },
            Slot::Amplitude(i) => num(
                self.rf[i].amplitude_setpoint,
                "MV/m",
                true,
                self.rf[i].amplitude_limits,
            ),
            Slot::Probe(i) => num(self.rf[i].probe, "MV/m", false, None),
            Slot::Phase(i) => num(self.rf[i].phase, "deg", true, self.rf[i].phase_limits),
            Slot::Stored(i) => {
                let p = &self.stored[i];
                PropertyRecord {
                    value: p.value.clone(),
                    unit: p.unit.clone(),
                    writable: p.writable,
                    limits: p.limits,
                    timestamp,
                }
            }
        }
    }

    pub fn read(&self, addr: &Address) -> Result<PropertyRecord, ControlError> {
        Ok(self.record(self.slot(addr)?))
    }

    /// Reports what [`Machine::write`] would fail with, without writing.
    pub fn check_write(&self, addr: &Address, value: &Value) -> Result<(), ControlError> {
        match self.slot(addr)? {
            Slot::Readback(_) | Slot::Cycle(_) | Slot::Probe(_) => {
                Err(ControlError::ReadOnly(addr.to_string()))
            }
            Slot::Setpoint(i) => {
                let v = value.as_number()?;
                let m = &self.magnets[i];
                if m.cycle.is_some() {
                    return Err(ControlError::Busy(addr.device_key()));
                }
                check_limits(v, Some(m.limits))
            }
            Slot::Amplitude(i) => check_limits(value.as_number()?, self.rf[i].amplitude_limits),
            Slot::Phase(i) => check_limits(value.as_number()?, self.rf[i].phase_limits),
            Slot::Stored(i) => {
                let p = &self.stored[i];
                if !p.writable {
                    return Err(ControlError::ReadOnly(addr.to_string()));
                }
                p.check(value)
            }
        }
    }

    pub fn write(&mut self, addr: &Address, value: &Value) -> Result<(), ControlError> {
        match self.slot(addr)? {
            Slot::Readback(_) | Slot::Cycle(_) | Slot::Probe(_) => {
                Err(ControlError::ReadOnly(addr.to_string()))
            }
            Slot::Setpoint(i) => {
                let v = value.as_number()?;
                let m = &mut self.magnets[i];
                if m.cycle.is_some() {
                    return Err(ControlError::Busy(addr.device_key()));
                }
                check_limits(v, Some(m.limits))?;
                m.setpoint = v;
                Ok(())
            }
            Slot::Amplitude(i) => {
                let v = value.as_number()?;
                check_limits(v, self.rf[i].amplitude_limits)?;
                self.rf[i].amplitude_setpoint = v;
                Ok(())
            }
            Slot::Phase(i) => {
                let v = value.as_number()?;
                check_limits(v, self.rf[i].phase_limits)?;
                self.rf[i].phase = v;
                Ok(())
            }
            Slot::Stored(i) => self.stored[i].write(addr, value),
        }
    }

    /// Advances the simulated clock by `dt` seconds.
    pub fn tick(&mut self, dt: f64) -> Result<(), ControlError> {
        let step = SimDuration::from_secs_f64(dt).ok_or(ControlError::NegativeDt(dt))?;
        self.advance(step);
        Ok(())
    }

    /// Advances by an exact number of nanoseconds.
    pub fn advance(&mut self, step: SimDuration) {
        if step == SimDuration::ZERO {
            return;
        }
        for m in &mut self.magnets {
            m.advance(step);
        }
        for rf in &mut self.rf {
            rf.sample_probe();
        }
        self.clock += step;
    }

    /// Advances to `target`; no-op when the clock is already there or beyond.
    pub fn advance_to(&mut self, target: SimTime) {
        if target > self.clock {
            self.advance(target - self.clock);
        }
    }

    fn magnet_index(&self, addr: &Address) -> Result<usize, ControlError> {
        let key = addr.device_key();
        let any_slot = self
            .slots
            .iter()
            .find(|(a, _)| a.device_key() == key)
            .map(|(_, s)| *s)
            .ok_or_else(|| ControlError::UnknownAddress(addr.to_string()))?;
        if !self.slots.contains_key(addr) {
            return Err(ControlError::UnknownAddress(addr.to_string()));
        }
        match any_slot {
            Slot::Setpoint(i) | Slot::Readback(i) | Slot::Cycle(i) => Ok(i),
            _ => Err(ControlError::NotAMagnet(addr.to_string())),
        }
    }

    pub fn magnet(&self, addr: &Address) -> Result<&MagnetDevice, ControlError> {
        Ok(&self.magnets[self.magnet_index(addr)?])
    }

    /// Drives the magnet through `n_cycles` of `[+i_max, −i_max]` and back to
    /// its current setpoint, ramping at `ramp_rate`.
    pub fn start_cycle(
        &mut self,
        addr: &Address,
        n_cycles: u32,
    ) -> Result<CycleHandle, ControlError> {
        let idx = self.magnet_index(addr)?;
        if n_cycles == 0 {
            return Err(ControlError::InvalidCycleCount);
        }
        let m = &mut self.magnets[idx];
        if m.cycle.is_some() {
            return Err(ControlError::Busy(addr.device_key()));
        }
        let mut targets = Vec::with_capacity(2 * n_cycles as usize + 1);
        for _ in 0..n_cycles {
            targets.push(m.i_max);
            targets.push(-m.i_max);
        }
        targets.push(m.setpoint);
        let mut from = m.setpoint;
        let segments: Vec<Segment> = targets
            .into_iter()
            .map(|to| {
                let secs = (to - from).abs() / m.ramp_rate;
                from = to;
                Segment {
                    to,
                    duration: SimDuration::from_secs_f64(secs).expect("finite ramp"),
                }
            })
            .collect();
        let duration = segments.iter().map(|s| s.duration).sum();
        m.cycle = Some(CycleProgram {
            restore: m.setpoint,
            segments,
            index: 0,
            elapsed: SimDuration::ZERO,
        });
        Ok(CycleHandle {
            magnet: addr.with_property(SETPOINT)?,
            started_at: self.clock,
            duration,
        })
    }

    /// Stops a running cycle and restores the pre-cycle setpoint.
    pub fn abort_cycle(&mut self, addr: &Address) -> Result<(), ControlError> {
        let idx = self.magnet_index(addr)?;
        let m = &mut self.magnets[idx];
        match m.cycle.take() {
            Some(c) => {
                m.setpoint = c.restore;
                Ok(())
            }
            None => Err(ControlError::NotCycling(addr.device_key())),
        }
    }

    pub fn cycle_state(&self, addr: &Address) -> Result<CycleState, ControlError> {
        Ok(self.magnet(addr)?.cycle_state())
    }

    pub fn list(&self, pattern: &str) -> Result<Vec<Address>, ControlError> {
        let pat: AddressPattern = pattern.parse()?;
        Ok(self
            .slots
            .keys()
            .filter(|a| pat.matches(a))
            .cloned()
            .collect())
    }

    pub fn addresses(&self) -> impl Iterator<Item = &Address> {
        self.slots.keys()
    }

    pub fn snapshot(&self) -> MachineSnapshot {
        MachineSnapshot {
            clock: self.clock.as_secs_f64(),
            records: self
                .slots
                .iter()
                .map(|(a, s)| (a.to_string(), self.record(*s)))
                .collect(),
        }
    }

    pub fn catalog(&self) -> Catalog {
        let entries = self
            .slots
            .iter()
            .map(|(addr, slot)| {
                let rec = self.record(*slot);
                let (is_magnet, tau) = match *slot {
                    Slot::Setpoint(i) | Slot::Readback(i) | Slot::Cycle(i) => {
                        (true, self.magnets[i].tau)
                    }
                    Slot::Amplitude(i) | Slot::Probe(i) | Slot::Phase(i) => (false, self.rf[i].tau),
                    Slot::Stored(i) => (false, self.stored[i].tau),
                };
                let entry = CatalogEntry {
                    writable: rec.writable,
                    numeric: matches!(rec.value, Value::Number(_)),
                    limits: rec.limits,
                    is_magnet,
                    tau,
                };
                (addr.clone(), entry)
            })
            .collect();
        Catalog { entries }
    }
}

impl StoredProperty {
    fn from_config(cfg: &PropertyConfig) -> Result<Self, ControlError> {
        let prop = StoredProperty {
            value: cfg.value.clone(),
            unit: cfg.unit.clone(),
            writable: cfg.writable,
            limits: cfg.limits,
            tau: cfg.tau,
        };
        prop.check(&cfg.value)
            .map_err(|e| ControlError::InvalidConfig(format!("{}: {e}", cfg.address)))?;
        Ok(prop)
    }

    fn check(&self, value: &Value) -> Result<(), ControlError> {
        match (&self.value, value) {
            (Value::Number(_), Value::Number(v)) => check_limits(*v, self.limits),
            (Value::Array(old), Value::Array(new)) => {
                if old.len() != new.len() {
                    return Err(ControlError::TypeMismatch(format!(
                        "expected {} elements",
                        old.len()
                    )));
                }
                new.iter().try_for_each(|v| check_limits(*v, self.limits))
            }
            (Value::Text(_), Value::Text(_)) => Ok(()),
            _ => Err(ControlError::TypeMismatch(format!(
                "expected {}",
                self.value.kind()
            ))),
        }
    }

    fn write(&mut self, addr: &Address, value: &Value) -> Result<(), ControlError> {
        if !self.writable {
            return Err(ControlError::ReadOnly(addr.to_string()));
        }
        self.check(value)?;
        self.value = value.clone();
        Ok(())
    }
}
