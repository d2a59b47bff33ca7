use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::ControlError;

/// Four-segment property address: `FACILITY/DEVICE/LOCATION/PROPERTY`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Address {
    facility: String,
    device: String,
    location: String,
    property: String,
}

fn valid_segment(seg: &str) -> bool {
    !seg.is_empty()
        && seg.bytes().all(|b| {
            b.is_ascii_uppercase() || b.is_ascii_digit() || matches!(b, b'.' | b'_' | b'-')
        })
}

impl Address {
    pub fn new(
        facility: &str,
        device: &str,
        location: &str,
        property: &str,
    ) -> Result<Self, ControlError> {
        for seg in [facility, device, location, property] {
            if !valid_segment(seg) {
                return Err(ControlError::InvalidAddress(format!(
                    "{facility}/{device}/{location}/{property}"
                )));
            }
        }
        Ok(Address {
            facility: facility.to_owned(),
            device: device.to_owned(),
            location: location.to_owned(),
            property: property.to_owned(),
        })
    }

    pub fn facility(&self) -> &str {
        &self.facility
    }

    pub fn device(&self) -> &str {
        &self.device
    }

    pub fn location(&self) -> &str {
        &self.location
    }

    pub fn property(&self) -> &str {
        &self.property
    }

    /// The `FACILITY/DEVICE/LOCATION` part identifying the physical device.
    pub fn device_key(&self) -> String {
        format!("{}/{}/{}", self.facility, self.device, self.location)
    }

    /// Same device, different property.
    pub fn with_property(&self, property: &str) -> Result<Address, ControlError> {
        Address::new(&self.facility, &self.device, &self.location, property)
    }

    fn segments(&self) -> [&str; 4] {
        [&self.facility, &self.device, &self.location, &self.property]
    }
}

impl FromStr for Address {
    type Err = ControlError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split('/').collect();
        match parts.as_slice() {
            [f, d, l, p] => {
                Address::new(f, d, l, p).map_err(|_| ControlError::InvalidAddress(s.to_owned()))
            }
            _ => Err(ControlError::InvalidAddress(s.to_owned())),
        }
    }
}

impl fmt::Display for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}/{}/{}/{}",
            self.facility, self.device, self.location, self.property
        )
    }
}

impl Serialize for Address {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Address {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Per-segment wildcard pattern, e.g. `SIM.MAGNETS/*/*/CURRENT.SP`.
/// A `*` inside a segment matches any run of characters within that segment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AddressPattern {
    segments: [String; 4],
}

impl AddressPattern {
    pub fn matches(&self, addr: &Address) -> bool {
        self.segments
            .iter()
            .zip(addr.segments())
            .all(|(pat, seg)| wildcard_match(pat.as_bytes(), seg.as_bytes()))
    }
}

impl FromStr for AddressPattern {
    type Err = ControlError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let malformed = || ControlError::MalformedPattern(s.to_owned());
        let parts: Vec<&str> = s.split('/').collect();
        if parts.len() != 4 {
            return Err(malformed());
        }
        for p in &parts {
            let ok = !p.is_empty()
                && p.bytes().all(|b| {
                    b.is_ascii_uppercase()
                        || b.is_ascii_digit()
                        || matches!(b, b'.' | b'_' | b'-' | b'*')
                });
            if !ok {
                return Err(malformed());
            }
        }
        Ok(AddressPattern {
            segments: [
                parts[0].into(),
                parts[1].into(),
                parts[2].into(),
                parts[3].into(),
            ],
        })
    }
}

fn wildcard_match(pat: &[u8], text: &[u8]) -> bool {
    // iterative glob with single-star backtracking
    let (mut p, mut t) = (0, 0);
    let mut star: Option<(usize, usize)> = None;
    while t < text.len() {
        if p < pat.len() && pat[p] == b'*' {
            star = Some((p, t));
            p += 1;
        } else if p < pat.len() && pat[p] == text[t] {
            p += 1;
            t += 1;
        } else if let Some((sp, st)) = star {
            p = sp + 1;
            t = st + 1;
            star = Some((sp, st + 1));
        } else {
            return false;
        }
    }
    pat[p..].iter().all(|&b| b == b'*')
}
