//! Device capabilities and fleet documents.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const EDGE7: &str = include_str!("../../assets/fleet/edge7.toml");
const EDGE100: &str = include_str!("../../assets/fleet/edge100.toml");
const DESK8: &str = include_str!("../../assets/fleet/desk8.toml");

pub const BUNDLED_FLEETS: &[&str] = &["edge7", "edge100", "desk8"];

/// Compute and link capabilities of one machine.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviceProfile {
    /// CPU frequency in cycles per second.
    pub freq_hz: f64,
    /// FLOPs per cycle.
    pub flops_per_cycle: f64,
    /// Uplink rate for clients, downlink rate for the server, bytes per second.
    pub rate: f64,
}

impl DeviceProfile {
    pub fn new(freq_hz: f64, flops_per_cycle: f64, rate: f64) -> Self {
        Self {
            freq_hz,
            flops_per_cycle,
            rate,
        }
    }

    pub fn flops_per_second(&self) -> f64 {
        self.freq_hz * self.flops_per_cycle
    }

    pub fn validate(&self, who: &str) -> Result<()> {
        for (name, v) in [
            ("frequency", self.freq_hz),
            ("flops per cycle", self.flops_per_cycle),
            ("rate", self.rate),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Invariant(format!(
                    "{who}: {name} must be positive and finite, got {v}"
                )));
            }
        }
        Ok(())
    }

    /// Bit pattern used to group identical profiles.
    pub fn key(&self) -> [u64; 3] {
        [
            self.freq_hz.to_bits(),
            self.flops_per_cycle.to_bits(),
            self.rate.to_bits(),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Client {
    pub id: usize,
    /// Profile name from the fleet document, or `custom`.
    pub profile_name: String,
    pub profile: DeviceProfile,
    /// Local dataset size n_k.
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fleet {
    pub clients: Vec<Client>,
    pub server: DeviceProfile,
    pub batch: usize,
}

impl Fleet {
    pub fn validate(&self) -> Result<()> {
        if self.clients.is_empty() {
            return Err(Error::Invariant("fleet has no clients".into()));
        }
        if self.batch == 0 {
            return Err(Error::Invariant("batch size must be at least 1".into()));
        }
        self.server.validate("server")?;
        for c in &self.clients {
            c.profile.validate(&format!("client {}", c.id))?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.clients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clients.is_empty()
    }

    pub fn bundled(name: &str) -> Option<Self> {
        let text = match name {
            "edge7" => EDGE7,
            "edge100" => EDGE100,
            "desk8" => DESK8,
            _ => return None,
        };
        let doc: FleetDoc = toml::from_str(text).expect("bundled fleet parses");
        Some(doc.into_fleet().expect("bundled fleet is valid"))
    }

    /// Bundled name or a path to a fleet document.
    pub fn load(spec: &str) -> Result<Self> {
        if let Some(f) = Self::bundled(spec) {
            return Ok(f);
        }
        let path = Path::new(spec);
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path)
    }

    pub fn from_toml(text: &str, origin: &Path) -> Result<Self> {
        let doc: FleetDoc = toml::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })?;
        doc.into_fleet()
    }

    pub fn with_batch(mut self, batch: usize) -> Self {
        self.batch = batch;
        self
    }
}

/// Profile entry in a fleet document. Frequencies are written in MHz, the
/// way device sheets list them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileDoc {
    pub freq_mhz: f64,
    pub flops_per_cycle: f64,
    pub rate: f64,
}

impl From<&ProfileDoc> for DeviceProfile {
    fn from(p: &ProfileDoc) -> Self {
        DeviceProfile::new(p.freq_mhz * 1e6, p.flops_per_cycle, p.rate)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientDoc {
    /// Name from `[profiles]`; mutually exclusive with an inline profile.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profile: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub freq_mhz: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flops_per_cycle: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate: Option<f64>,
    #[serde(default = "one")]
    pub count: usize,
    #[serde(default = "default_samples")]
    pub samples: usize,
}

fn one() -> usize {
    1
}

fn default_samples() -> usize {
    600
}

fn default_batch() -> usize {
    64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FleetDoc {
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default)]
    pub profiles: BTreeMap<String, ProfileDoc>,
    /// Profile name or inline profile of the server.
    pub server: ServerDoc,
    pub clients: Vec<ClientDoc>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ServerDoc {
    Named(String),
    Inline(ProfileDoc),
}

impl FleetDoc {
    pub fn into_fleet(self) -> Result<Fleet> {
        let named = |name: &str| -> Result<DeviceProfile> {
            self.profiles
                .get(name)
                .map(DeviceProfile::from)
                .ok_or_else(|| Error::Invariant(format!("unknown device profile `{name}`")))
        };
        let server = match &self.server {
            ServerDoc::Named(n) => named(n)?,
            ServerDoc::Inline(p) => p.into(),
        };
        let mut clients = Vec::new();
        for (entry, c) in self.clients.iter().enumerate() {
            let (name, profile) = match (&c.profile, c.freq_mhz, c.flops_per_cycle, c.rate) {
                (Some(n), None, None, None) => (n.clone(), named(n)?),
                (None, Some(f), Some(k), Some(r)) => {
                    ("custom".to_string(), DeviceProfile::new(f * 1e6, k, r))
                }
                _ => {
                    return Err(Error::Invariant(format!(
                        "client entry {entry}: give either `profile` or all of freq_mhz, flops_per_cycle, rate"
                    )))
                }
            };
            for _ in 0..c.count {
                clients.push(Client {
                    id: clients.len(),
                    profile_name: name.clone(),
                    profile,
                    samples: c.samples,
                });
            }
        }
        let fleet = Fleet {
            clients,
            server,
            batch: self.batch,
        };
        fleet.validate()?;
        Ok(fleet)
    }
}
