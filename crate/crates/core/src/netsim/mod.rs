//! Deterministic discrete-event simulator.
//!
//! Nodes host the protocol stacks of this crate and exchange real encoded
//! 802.15.4 frames over links with independent Bernoulli loss per frame
//! and direction. Airtime is proportional to frame size. All randomness
//! comes from one seeded generator, and simultaneous events are ordered
//! by (time, node, event rank, insertion order), so a seed fully
//! determines the trace.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

pub mod config;
pub mod endpoint;
mod engine;
pub mod topology;
pub mod trace;

pub use config::{Radio, Scenario, SimConfig, TopologyConfig};
pub use engine::{run, RunOutput, RunSummary};
pub use topology::{NodeId, NodeRole, Preset, Topology};
pub use trace::{EventKind, Msg, TimerKind, Trace, TraceRecord};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SimError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("i/o: {0}")]
    Io(String),
    #[error("stack failure: {0}")]
    Stack(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    Coap,
    CoapProtected,
    #[serde(alias = "dtls")]
    CoapDtls,
    Oscore,
    Ndn,
    NdnProtected,
}

impl Protocol {
    pub const ALL: [Protocol; 6] = [
        Protocol::Coap,
        Protocol::CoapProtected,
        Protocol::CoapDtls,
        Protocol::Oscore,
        Protocol::Ndn,
        Protocol::NdnProtected,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Protocol::Coap => "coap",
            Protocol::CoapProtected => "coap-protected",
            Protocol::CoapDtls => "coap-dtls",
            Protocol::Oscore => "oscore",
            Protocol::Ndn => "ndn",
            Protocol::NdnProtected => "ndn-protected",
        }
    }

    pub fn is_ndn(self) -> bool {
        matches!(self, Protocol::Ndn | Protocol::NdnProtected)
    }

    /// The CoAP-based stacks, which recover losses end to end.
    pub fn is_coap_family(self) -> bool {
        !self.is_ndn()
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Protocol {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, SimError> {
        let s = s.to_ascii_lowercase();
        Protocol::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .or(match s.as_str() {
                "dtls" | "coaps" => Some(Protocol::CoapDtls),
                _ => None,
            })
            .ok_or_else(|| SimError::Config(format!("unknown protocol {s:?}")))
    }
}

/// Time on air for a frame of `frame_bytes`, in microseconds.
pub fn airtime(radio: &Radio, frame_bytes: usize) -> u64 {
    frame_bytes as u64 * radio.byte_time_us + radio.access_delay_us
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Delivery {
    Delivered,
    Lost,
}

/// One Bernoulli trial for one frame on one link direction.
pub fn deliver(loss: f64, rng: &mut impl Rng) -> Delivery {
    if loss > 0.0 && rng.gen_bool(loss.min(1.0)) {
        Delivery::Lost
    } else {
        Delivery::Delivered
    }
}
