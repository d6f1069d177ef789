//! Scenario parameters and the TOML configuration file.

use serde::{Deserialize, Serialize};

use super::topology::{LinkSpec, NodeRole, NodeSpec, Preset, Topology};
use super::{Protocol, SimError};
use crate::channel_security::ChannelConfig;
use crate::secctx::{Key, KEY_LEN};

/// Radio and host timing. Airtime of a frame is
/// `bytes * byte_time_us + access_delay_us`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Radio {
    /// 32 µs per byte is 250 kb/s.
    pub byte_time_us: u64,
    pub access_delay_us: u64,
    /// Host processing between receiving a datagram and acting on it.
    pub processing_us: u64,
    pub reassembly_timeout_us: u64,
}

impl Default for Radio {
    fn default() -> Self {
        Radio {
            byte_time_us: 32,
            access_delay_us: 1_000,
            processing_us: 3_000,
            reassembly_timeout_us: 2_000_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    pub protocol: Protocol,
    pub requests_per_sensor: u32,
    pub interval_us: u64,
    /// Uniform jitter of the request interval, in both directions.
    pub interval_jitter_us: u64,
    pub retransmit_after_us: u64,
    /// Upper bound of the per-transaction jitter added to every
    /// retransmission timeout.
    pub retransmit_jitter_us: u64,
    pub max_retransmissions: u8,
    pub payload_len: usize,
    /// Fractions of all requests after which the gateway loses its state.
    pub deep_sleep_marks: Vec<f64>,
    pub radio: Radio,
    pub dtls: ChannelConfig,
    pub ndn_cs_capacity: usize,
    /// Link adaptation bytes in front of NDN packets; zero by default.
    pub ndn_header_cost: usize,
    /// Master key (32 hex digits) from which per-sensor keys derive.
    pub psk: String,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            protocol: Protocol::Coap,
            requests_per_sensor: 100,
            interval_us: 2_000_000,
            interval_jitter_us: 500_000,
            retransmit_after_us: 2_000_000,
            retransmit_jitter_us: 100_000,
            max_retransmissions: 4,
            payload_len: 2,
            deep_sleep_marks: Vec::new(),
            radio: Radio::default(),
            dtls: ChannelConfig::default(),
            ndn_cs_capacity: crate::ndn_stack::DEFAULT_CS_CAPACITY,
            ndn_header_cost: 0,
            psk: "000102030405060708090a0b0c0d0e0f".into(),
        }
    }
}

impl Scenario {
    pub fn for_protocol(protocol: Protocol) -> Scenario {
        Scenario {
            protocol,
            ..Scenario::default()
        }
    }

    /// Marks at every fifth of the run.
    pub fn with_deep_sleep(mut self) -> Scenario {
        self.deep_sleep_marks = vec![0.2, 0.4, 0.6, 0.8];
        self
    }

    pub fn master_key(&self) -> Result<Key, SimError> {
        let s = self.psk.trim();
        let bad = || SimError::Config(format!("psk must be {} hex digits", 2 * KEY_LEN));
        if s.len() != 2 * KEY_LEN {
            return Err(bad());
        }
        let mut key = [0u8; KEY_LEN];
        for (i, b) in key.iter_mut().enumerate() {
            *b = u8::from_str_radix(s.get(2 * i..2 * i + 2).ok_or_else(bad)?, 16).map_err(|_| bad())?;
        }
        Ok(key)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::Config(m.into()));
        if self.interval_us == 0 || self.interval_jitter_us >= self.interval_us {
            return bad("interval must be positive and exceed its jitter");
        }
        if self.retransmit_after_us == 0 {
            return bad("retransmit_after_us must be positive");
        }
        if self.payload_len > 64 {
            return bad("payload_len above 64 bytes does not fit the frame model");
        }
        if self.deep_sleep_marks.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return bad("deep_sleep_marks must lie in [0, 1]");
        }
        if self.ndn_cs_capacity == 0 {
            return bad("ndn_cs_capacity must be positive");
        }
        self.dtls
            .sizes
            .validate()
            .map_err(|e| SimError::Config(e.to_string()))?;
        self.master_key()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeConfig {
    pub name: String,
    pub role: NodeRole,
}

/// Link entry. For presets it overrides the loss of an existing link; for
/// custom topologies it declares the link.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkConfig {
    pub a: String,
    pub b: String,
    #[serde(default)]
    pub loss: Option<f64>,
    #[serde(default)]
    pub loss_ab: Option<f64>,
    #[serde(default)]
    pub loss_ba: Option<f64>,
}

impl LinkConfig {
    fn losses(&self) -> (f64, f64) {
        let base = self.loss.unwrap_or(0.0);
        (self.loss_ab.unwrap_or(base), self.loss_ba.unwrap_or(base))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TopologyConfig {
    pub preset: Option<Preset>,
    /// Uniform loss applied to every link before per-link overrides.
    pub loss: Option<f64>,
    pub nodes: Vec<NodeConfig>,
    pub links: Vec<LinkConfig>,
}

impl TopologyConfig {
    pub fn build(&self) -> Result<Topology, SimError> {
        let mut topo = match (self.preset, self.nodes.is_empty()) {
            (Some(p), true) => p.build(),
            (None, false) => {
                let nodes = self
                    .nodes
                    .iter()
                    .enumerate()
                    .map(|(i, n)| NodeSpec {
                        id: i as u16,
                        name: n.name.clone(),
                        role: n.role,
                    })
                    .collect();
                Topology {
                    nodes,
                    links: Vec::new(),
                }
            }
            (Some(_), false) => return Err(SimError::Config("give either a preset or a node list, not both".into())),
            (None, true) => Preset::SingleHop.build(),
        };
        if let Some(p) = self.loss {
            topo = topo.with_uniform_loss(p);
        }
        let custom = self.preset.is_none() && !self.nodes.is_empty();
        for l in &self.links {
            let id = |name: &str| {
                topo.id_of(name)
                    .ok_or_else(|| SimError::Config(format!("unknown node {name:?}")))
            };
            let (a, b) = (id(&l.a)?, id(&l.b)?);
            let (ab, ba) = l.losses();
            if custom {
                topo.links.push(LinkSpec {
                    a,
                    b,
                    loss_ab: ab,
                    loss_ba: ba,
                });
            } else {
                topo.set_loss(a, b, ab, ba)?;
            }
        }
        topo.validate()?;
        Ok(topo)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub seed: u64,
    pub scenario: Scenario,
    pub topology: TopologyConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            seed: 1,
            scenario: Scenario::default(),
            topology: TopologyConfig::default(),
        }
    }
}

impl SimConfig {
    pub fn from_toml(text: &str) -> Result<SimConfig, SimError> {
        let cfg: SimConfig = toml::from_str(text).map_err(|e| SimError::Config(e.to_string()))?;
        cfg.scenario.validate()?;
        cfg.topology.build()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
