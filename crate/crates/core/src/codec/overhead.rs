//! Security overhead measured from live encodings.
//!
//! Each measurement protects a representative message with the real stack
//! code and compares it against the plain encoding of the same logical
//! message. Context-id, nonce and MAC widths are read back from the
//! protected output; whatever remains of the size difference is structure.

use std::fmt;

use crate::channel_security::{self, ChannelConfig, Record, Session};
use crate::coap_protected;
use crate::codec::{decode_coap, decode_ndn, encode_coap, encode_ndn, CoapMessage, Data, Interest, Name, NdnPacket};
use crate::ndn_stack;
use crate::object_security::{self, ProtectedCoap};
use crate::secctx::{context_pair, Role, TAG_LEN};

const MEASUREMENT_PSK: [u8; 16] = *b"overhead-measure";
const TOKEN: [u8; 2] = [0x4A, 0x21];
pub const READING: [u8; 2] = [0x00, 0x17];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub enum SecurityConfig {
    CoapProtected,
    CoapDtls,
    Oscore,
    NdnProtected,
}

impl SecurityConfig {
    pub const ALL: [SecurityConfig; 4] = [
        SecurityConfig::CoapProtected,
        SecurityConfig::CoapDtls,
        SecurityConfig::Oscore,
        SecurityConfig::NdnProtected,
    ];

    pub fn label(self) -> &'static str {
        match self {
            SecurityConfig::CoapProtected => "CoAP-Protected",
            SecurityConfig::CoapDtls => "CoAP/DTLS",
            SecurityConfig::Oscore => "OSCORE",
            SecurityConfig::NdnProtected => "NDN",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub enum Direction {
    Request,
    Response,
}

impl Direction {
    pub const BOTH: [Direction; 2] = [Direction::Request, Direction::Response];
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct OverheadBreakdown {
    pub structure: usize,
    pub context_id: usize,
    pub nonce: usize,
    pub mac: usize,
    /// False where the stack adds no protection in this direction.
    pub applicable: bool,
}

impl OverheadBreakdown {
    pub fn total(&self) -> usize {
        self.structure + self.context_id + self.nonce + self.mac
    }

    pub fn cells(&self) -> [usize; 4] {
        [self.structure, self.context_id, self.nonce, self.mac]
    }

    fn from_delta(delta: usize, context_id: usize, nonce: usize, mac: usize) -> Self {
        OverheadBreakdown {
            structure: delta - context_id - nonce - mac,
            context_id,
            nonce,
            mac,
            applicable: true,
        }
    }
}

impl fmt::Display for OverheadBreakdown {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if !self.applicable {
            return f.write_str("n/a");
        }
        write!(
            f,
            "({},{},{},{})={}",
            self.structure,
            self.context_id,
            self.nonce,
            self.mac,
            self.total()
        )
    }
}

/// Plain and protected wire images of one message.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Measurement {
    pub plain: Vec<u8>,
    pub protected: Vec<u8>,
    pub breakdown: OverheadBreakdown,
}

impl Measurement {
    pub fn delta(&self) -> isize {
        self.protected.len() as isize - self.plain.len() as isize
    }
}

fn request(payload: &[u8]) -> CoapMessage {
    let mut req = CoapMessage::get(0x0001, &TOKEN, "/temp");
    req.payload = payload.to_vec();
    req
}

fn ndn_name() -> Name {
    "/gw/s0/temp".parse().expect("infallible")
}

/// Protects a representative message (GET /temp with `payload` as request
/// body, or a 2.05 response carrying `payload`) and decomposes the growth.
pub fn measure(config: SecurityConfig, direction: Direction, payload: &[u8]) -> Measurement {
    let req = request(if direction == Direction::Request { payload } else { &[] });
    let resp = CoapMessage::content_response(&req, payload);
    let plain_coap = |m: &CoapMessage| encode_coap(m).expect("representative message encodes");
    match (config, direction) {
        (SecurityConfig::CoapProtected, Direction::Request) => {
            let plain = plain_coap(&req);
            Measurement {
                protected: plain.clone(),
                plain,
                breakdown: OverheadBreakdown::default(),
            }
        }
        (SecurityConfig::CoapProtected, Direction::Response) => {
            let (_, sensor) = context_pair(MEASUREMENT_PSK, &[0, 1], &[0, 2], b"", b"/temp").expect("valid ids");
            let mut sensor = sensor.without_replay_window();
            let prot = coap_protected::protect_response(&mut sensor, &resp).expect("fresh context");
            let protected = plain_coap(&prot);
            let plain = plain_coap(&resp);
            let delta = protected.len() - plain.len();
            let kid = sensor.sender_id().len();
            let nonce = prot.payload.len() - kid - payload.len() - TAG_LEN;
            Measurement {
                breakdown: OverheadBreakdown::from_delta(delta, kid, nonce, TAG_LEN),
                plain,
                protected,
            }
        }
        (SecurityConfig::CoapDtls, dir) => {
            let cfg = ChannelConfig::default();
            let mut client = Session::new(Role::Client, MEASUREMENT_PSK, cfg, 1).expect("default sizes valid");
            let mut server = Session::new(Role::Server, MEASUREMENT_PSK, cfg, 2).expect("default sizes valid");
            channel_security::handshake_in_memory(&mut client, &mut server).expect("loss-free handshake");
            let (plain, record) = match dir {
                Direction::Request => {
                    let p = plain_coap(&req);
                    let r = client.protect_record(&p).expect("established");
                    (p, r)
                }
                Direction::Response => {
                    let p = plain_coap(&resp);
                    let r = server.protect_record(&p).expect("established");
                    (p, r)
                }
            };
            let protected = record.encode();
            let parsed = Record::decode(&protected).expect("own encoding");
            let epoch_width = std::mem::size_of_val(&parsed.epoch);
            let explicit = parsed.body.len() - plain.len() - TAG_LEN;
            Measurement {
                breakdown: OverheadBreakdown::from_delta(protected.len() - plain.len(), epoch_width, explicit, TAG_LEN),
                plain,
                protected,
            }
        }
        (SecurityConfig::Oscore, dir) => {
            let (mut gw, mut sensor) = context_pair(MEASUREMENT_PSK, &[0x00], &[0x01], b"", b"").expect("valid ids");
            let p = object_security::protect_request(&mut gw, &req).expect("fresh context");
            let (plain, prot) = match dir {
                Direction::Request => (plain_coap(&req), p),
                Direction::Response => {
                    let (_, binding) =
                        object_security::unprotect_request(&mut sensor, &ProtectedCoap::received(p.outer))
                            .expect("own request");
                    let pr = object_security::protect_response(&mut sensor, &binding, &resp).expect("bound");
                    (plain_coap(&resp), pr)
                }
            };
            let protected = prot.encode().expect("encodes");
            let outer = decode_coap(&protected).expect("own encoding");
            let value = &outer
                .option(crate::codec::coap::option::OSCORE)
                .expect("oscore option")
                .value;
            let (piv, kid) = match value.split_first() {
                None => (0, 0),
                Some((flags, rest)) => {
                    let n = (flags & 0x07) as usize;
                    (n, rest.len() - n)
                }
            };
            Measurement {
                breakdown: OverheadBreakdown::from_delta(protected.len() - plain.len(), kid, piv, TAG_LEN),
                plain,
                protected,
            }
        }
        (SecurityConfig::NdnProtected, Direction::Request) => {
            let interest = encode_ndn(&NdnPacket::Interest(Interest {
                name: ndn_name(),
                nonce: 1,
                lifetime_ms: 2000,
            }));
            Measurement {
                plain: interest.clone(),
                protected: interest,
                breakdown: OverheadBreakdown::default(),
            }
        }
        (SecurityConfig::NdnProtected, Direction::Response) => {
            let (_, mut sensor) = context_pair(MEASUREMENT_PSK, &[0x00], &[0x01], b"", b"").expect("valid ids");
            let plain = encode_ndn(&NdnPacket::Data(Data {
                name: ndn_name(),
                payload: payload.to_vec(),
                security: None,
            }));
            let pkt = ndn_stack::make_protected_data(&mut sensor, ndn_name(), payload).expect("fresh context");
            let protected = encode_ndn(&pkt);
            let NdnPacket::Data(d) = decode_ndn(&protected).expect("own encoding") else {
                unreachable!("encoded a Data");
            };
            let sec = d.security.expect("protected");
            let kid = std::mem::size_of_val(&sec.key_id);
            let mac = sec.mac.len() + sec.signature.len();
            Measurement {
                breakdown: OverheadBreakdown::from_delta(protected.len() - plain.len(), kid, 0, mac),
                plain,
                protected,
            }
        }
    }
}

/// Overhead of `config` in `direction` for the representative 2-byte
/// temperature exchange.
pub fn security_overhead(config: SecurityConfig, direction: Direction) -> OverheadBreakdown {
    measure(config, direction, &READING).breakdown
}
