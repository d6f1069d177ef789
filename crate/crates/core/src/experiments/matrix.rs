//! Security properties of each stack, decided by attacking live protected
//! messages rather than by declaration.
//!
//! Every check works on the logical content of a message: code, option
//! values and payload for CoAP; name and content for NDN. Transport fields
//! such as message id or token are not part of it.
//!
//! - integrity: no single-bit corruption of the wire image is accepted with
//!   altered content
//! - authenticity: a keyless attacker can neither forge a message under its
//!   own key nor splice new content into a captured one
//! - confidentiality: a passive observer sees none of the content
//! - replay insensitivity: a replayed request is rejected or answered with
//!   exactly the earlier content, and a captured response cannot be
//!   passed off as the answer to a later request

use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

use crate::channel_security::{handshake_in_memory, ChannelConfig, Record, Session};
use crate::coap_protected;
use crate::codec::{
    decode_coap, decode_ndn, encode_coap, encode_ndn, CoapMessage, Code, Direction, Interest, Name, NdnPacket,
    SecurityConfig,
};
use crate::ndn_stack::{make_protected_data, verify_protected_data, Face, Fib, NdnAction, NdnConfig, NdnNode};
use crate::object_security::{self, ProtectedCoap, RequestBinding};
use crate::secctx::{context_pair, Key, Role, SecurityContext};

const PSK: Key = *b"matrix-genuine!!";
const ATTACKER_PSK: Key = *b"matrix-attacker!";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Property {
    Integrity,
    Authenticity,
    Confidentiality,
    ReplayInsensitivity,
}

impl Property {
    pub const MESSAGE: [Property; 3] = [Property::Integrity, Property::Authenticity, Property::Confidentiality];

    pub fn label(self) -> &'static str {
        match self {
            Property::Integrity => "integrity",
            Property::Authenticity => "authenticity",
            Property::Confidentiality => "confidentiality",
            Property::ReplayInsensitivity => "replay insensitivity",
        }
    }
}

/// Support level in the reference matrix. `Optional` marks features that
/// exist as protocol options but are not part of the evaluated stacks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Support {
    Yes,
    No,
    Optional,
}

impl Support {
    /// What the evaluated stacks are expected to exhibit.
    pub fn expected(self) -> bool {
        self == Support::Yes
    }

    fn mark(self) -> &'static str {
        match self {
            Support::Yes => "yes",
            Support::No => "no",
            Support::Optional => "(opt)",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferenceProperty {
    pub config: SecurityConfig,
    /// `None` for properties of the exchange as a whole.
    pub direction: Option<Direction>,
    pub property: Property,
    pub support: Support,
}

const fn r(
    config: SecurityConfig,
    direction: Option<Direction>,
    property: Property,
    support: Support,
) -> ReferenceProperty {
    ReferenceProperty {
        config,
        direction,
        property,
        support,
    }
}

use Direction::{Request as Req, Response as Resp};
use Property::{Authenticity as Auth, Confidentiality as Conf, Integrity as Integ, ReplayInsensitivity as Replay};
use SecurityConfig::{CoapDtls as Dtls, CoapProtected as Prot, NdnProtected as Ndn, Oscore as Osc};
use Support::{No, Optional as Opt, Yes};

pub const SECURITY_REFERENCE: [ReferenceProperty; 28] = [
    r(Prot, Some(Req), Integ, No),
    r(Prot, Some(Req), Auth, No),
    r(Prot, Some(Req), Conf, No),
    r(Prot, Some(Resp), Integ, No),
    r(Prot, Some(Resp), Auth, No),
    r(Prot, Some(Resp), Conf, No),
    r(Prot, None, Replay, No),
    r(Dtls, Some(Req), Integ, Yes),
    r(Dtls, Some(Req), Auth, Yes),
    r(Dtls, Some(Req), Conf, Yes),
    r(Dtls, Some(Resp), Integ, Yes),
    r(Dtls, Some(Resp), Auth, Yes),
    r(Dtls, Some(Resp), Conf, Yes),
    r(Dtls, None, Replay, Opt),
    r(Osc, Some(Req), Integ, Yes),
    r(Osc, Some(Req), Auth, Yes),
    r(Osc, Some(Req), Conf, Yes),
    r(Osc, Some(Resp), Integ, Yes),
    r(Osc, Some(Resp), Auth, Yes),
    r(Osc, Some(Resp), Conf, Yes),
    r(Osc, None, Replay, Yes),
    r(Ndn, Some(Req), Integ, Opt),
    r(Ndn, Some(Req), Auth, Opt),
    r(Ndn, Some(Req), Conf, No),
    r(Ndn, Some(Resp), Integ, Yes),
    r(Ndn, Some(Resp), Auth, Yes),
    r(Ndn, Some(Resp), Conf, No),
    r(Ndn, None, Replay, Yes),
];

/// Outcome of one attack series.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PropertyCheck {
    pub config: SecurityConfig,
    pub direction: Option<Direction>,
    pub property: Property,
    pub holds: bool,
    /// What broke the property, empty when it holds.
    pub evidence: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SecurityMatrix {
    pub checks: Vec<PropertyCheck>,
}

impl SecurityMatrix {
    pub fn get(
        &self,
        config: SecurityConfig,
        direction: Option<Direction>,
        property: Property,
    ) -> Option<&PropertyCheck> {
        self.checks
            .iter()
            .find(|c| c.config == config && c.direction == direction && c.property == property)
    }

    /// Reference entries the measured matrix disagrees with.
    pub fn mismatches(&self, reference: &[ReferenceProperty]) -> Vec<ReferenceProperty> {
        reference
            .iter()
            .filter(|r| {
                self.get(r.config, r.direction, r.property)
                    .is_none_or(|c| c.holds != r.support.expected())
            })
            .copied()
            .collect()
    }

    pub fn render_text(&self, reference: &[ReferenceProperty]) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<16} {:<9} {:<21} {:<8} {:<9} result",
            "config", "direction", "property", "measured", "reference"
        );
        for rf in reference {
            let Some(c) = self.get(rf.config, rf.direction, rf.property) else {
                continue;
            };
            let dir = match rf.direction {
                Some(Direction::Request) => "request",
                Some(Direction::Response) => "response",
                None => "-",
            };
            let ok = c.holds == rf.support.expected();
            let _ = writeln!(
                out,
                "{:<16} {:<9} {:<21} {:<8} {:<9} {}",
                rf.config.label(),
                dir,
                rf.property.label(),
                if c.holds { "yes" } else { "no" },
                rf.support.mark(),
                if ok { "PASS" } else { "FAIL" }
            );
            if !c.evidence.is_empty() {
                let _ = writeln!(out, "    {}", c.evidence);
            }
        }
        let bad = self.mismatches(reference).len();
        let _ = writeln!(out, "{} of {} entries match", reference.len() - bad, reference.len());
        out
    }
}

/// Content of a message as the application sees it.
#[derive(Clone, Debug, PartialEq, Eq)]
struct Logical {
    code: Option<Code>,
    labels: Vec<Vec<u8>>,
    payload: Vec<u8>,
}

impl Logical {
    fn coap(m: &CoapMessage) -> Self {
        Logical {
            code: Some(m.code),
            labels: m.options.iter().map(|o| o.value.clone()).collect(),
            payload: m.payload.clone(),
        }
    }

    fn ndn(name: &Name, payload: Vec<u8>) -> Self {
        Logical {
            code: None,
            labels: name.components().to_vec(),
            payload,
        }
    }
}

impl fmt::Display for Logical {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let labels: Vec<String> = self
            .labels
            .iter()
            .map(|l| String::from_utf8_lossy(l).into_owned())
            .collect();
        write!(
            f,
            "code {:?} labels {:?} payload {:02x?}",
            self.code, labels, self.payload
        )
    }
}

/// One logical exchange: a reading of `/temp` identified by token, message
/// id and, for NDN, a version component.
#[derive(Clone, Debug)]
struct Exchange {
    token: [u8; 2],
    mid: u16,
    version: u8,
    path: &'static str,
    reading: Vec<u8>,
}

impl Exchange {
    fn first() -> Self {
        Exchange {
            token: [0x4A, 0x21],
            mid: 0x0101,
            version: 1,
            path: "/temp",
            reading: b"21.5C".to_vec(),
        }
    }

    fn second() -> Self {
        Exchange {
            token: [0x4A, 0x22],
            mid: 0x0102,
            version: 2,
            path: "/temp",
            reading: b"22.0C".to_vec(),
        }
    }

    fn forged() -> Self {
        Exchange {
            path: "/door/open",
            reading: b"99.9C".to_vec(),
            ..Exchange::first()
        }
    }

    fn request(&self) -> CoapMessage {
        CoapMessage::get(self.mid, &self.token, self.path)
    }

    fn response(&self) -> CoapMessage {
        CoapMessage::content_response(&self.request(), &self.reading)
    }

    fn name(&self) -> Name {
        let mut n = Name::default().with("gw").with("s0");
        for seg in self.path.split('/').filter(|s| !s.is_empty()) {
            n.push(seg);
        }
        n.with(vec![self.version])
    }

    fn interest(&self) -> Interest {
        Interest {
            name: self.name(),
            nonce: u32::from(self.mid),
            lifetime_ms: 2000,
        }
    }
}

#[derive(Clone)]
enum State {
    Payload {
        gw: SecurityContext,
        sensor: SecurityContext,
    },
    Dtls {
        client: Box<Session>,
        server: Box<Session>,
    },
    Oscore {
        gw: SecurityContext,
        sensor: SecurityContext,
        sent: Option<RequestBinding>,
        received: Option<RequestBinding>,
    },
    Ndn {
        gw: SecurityContext,
        sensor: SecurityContext,
        node: NdnNode,
        last: Option<Interest>,
    },
}

/// Gateway and sensor endpoints of one stack, sharing one key.
#[derive(Clone)]
struct Endpoints {
    state: State,
}

fn fail(e: impl fmt::Display) -> String {
    e.to_string()
}

impl Endpoints {
    fn new(config: SecurityConfig, psk: Key) -> Self {
        let state = match config {
            SecurityConfig::CoapProtected => {
                let (gw, sensor) = context_pair(psk, &[0xFF, 0x00], &[0x00, 0x01], b"", b"/temp").expect("valid ids");
                State::Payload {
                    gw: gw.without_replay_window(),
                    sensor: sensor.without_replay_window(),
                }
            }
            SecurityConfig::CoapDtls => {
                let mut client = Session::new(Role::Client, psk, ChannelConfig::default(), 1).expect("default sizes");
                let mut server = Session::new(Role::Server, psk, ChannelConfig::default(), 2).expect("default sizes");
                handshake_in_memory(&mut client, &mut server).expect("loss-free handshake");
                State::Dtls {
                    client: Box::new(client),
                    server: Box::new(server),
                }
            }
            SecurityConfig::Oscore => {
                let (gw, sensor) = context_pair(psk, &[0x00], &[0x01], b"", b"").expect("valid ids");
                State::Oscore {
                    gw,
                    sensor,
                    sent: None,
                    received: None,
                }
            }
            SecurityConfig::NdnProtected => {
                let (gw, sensor) = context_pair(psk, &[0x00], &[0x01], b"", b"").expect("valid ids");
                let mut fib = Fib::default();
                fib.add(Name::default().with("gw").with("s0"), Face::App);
                State::Ndn {
                    gw,
                    sensor,
                    node: NdnNode::new(fib, NdnConfig::default()),
                    last: None,
                }
            }
        };
        Endpoints { state }
    }

    fn send_request(&mut self, ex: &Exchange) -> Vec<u8> {
        let req = ex.request();
        match &mut self.state {
            State::Payload { .. } => encode_coap(&req).expect("encodes"),
            State::Dtls { client, .. } => client
                .protect_record(&encode_coap(&req).expect("encodes"))
                .expect("established")
                .encode(),
            State::Oscore { gw, sent, .. } => {
                let p = object_security::protect_request(gw, &req).expect("fresh context");
                *sent = p.binding().cloned();
                p.encode().expect("encodes")
            }
            State::Ndn { .. } => encode_ndn(&NdnPacket::Interest(ex.interest())),
        }
    }

    /// Sensor side. On success the request has been processed.
    fn receive_request(&mut self, bytes: &[u8]) -> Result<Logical, String> {
        match &mut self.state {
            State::Payload { .. } => decode_coap(bytes).map(|m| Logical::coap(&m)).map_err(fail),
            State::Dtls { server, .. } => {
                let rec = Record::decode(bytes).map_err(fail)?;
                let plain = server.unprotect_record(&rec).map_err(fail)?;
                decode_coap(&plain).map(|m| Logical::coap(&m)).map_err(fail)
            }
            State::Oscore { sensor, received, .. } => {
                let outer = decode_coap(bytes).map_err(fail)?;
                let (inner, binding) =
                    object_security::unprotect_request(sensor, &ProtectedCoap::received(outer)).map_err(fail)?;
                *received = Some(binding);
                Ok(Logical::coap(&inner))
            }
            State::Ndn { last, .. } => match decode_ndn(bytes).map_err(fail)? {
                NdnPacket::Interest(i) => {
                    let l = Logical::ndn(&i.name, Vec::new());
                    *last = Some(i);
                    Ok(l)
                }
                NdnPacket::Data(_) => Err("not an Interest".into()),
            },
        }
    }

    /// Sensor answers the request it last received with `ex`'s reading as
    /// its current value.
    fn send_response(&mut self, ex: &Exchange) -> Vec<u8> {
        let resp = ex.response();
        match &mut self.state {
            State::Payload { sensor, .. } => {
                encode_coap(&coap_protected::protect_response(sensor, &resp).expect("fresh context")).expect("encodes")
            }
            State::Dtls { server, .. } => server
                .protect_record(&encode_coap(&resp).expect("encodes"))
                .expect("established")
                .encode(),
            State::Oscore { sensor, received, .. } => {
                let binding = received.as_ref().expect("request received first");
                object_security::protect_response(sensor, binding, &resp)
                    .expect("bound")
                    .encode()
                    .expect("encodes")
            }
            State::Ndn { sensor, node, last, .. } => {
                let interest = last.clone().expect("request received first");
                let actions = node.on_interest(0, Face::Node(1), interest.clone());
                if let Some(NdnAction::Send {
                    packet: NdnPacket::Data(d),
                    ..
                }) = actions.last()
                {
                    return encode_ndn(&NdnPacket::Data(d.clone()));
                }
                let pkt = make_protected_data(sensor, interest.name, &ex.reading).expect("fresh context");
                let NdnPacket::Data(d) = &pkt else {
                    unreachable!("made a Data")
                };
                node.on_data(0, Face::App, d.clone());
                encode_ndn(&pkt)
            }
        }
    }

    /// Gateway side, expecting the answer to `ex`.
    fn receive_response(&mut self, ex: &Exchange, bytes: &[u8]) -> Result<Logical, String> {
        let token_matches = |m: &CoapMessage| {
            if m.token == ex.token {
                Ok(())
            } else {
                Err("token does not match an outstanding request".to_string())
            }
        };
        match &mut self.state {
            State::Payload { gw, .. } => {
                let m = decode_coap(bytes).map_err(fail)?;
                token_matches(&m)?;
                coap_protected::unprotect_response(gw, &m)
                    .map(|m| Logical::coap(&m))
                    .map_err(fail)
            }
            State::Dtls { client, .. } => {
                let rec = Record::decode(bytes).map_err(fail)?;
                let plain = client.unprotect_record(&rec).map_err(fail)?;
                let m = decode_coap(&plain).map_err(fail)?;
                token_matches(&m)?;
                Ok(Logical::coap(&m))
            }
            State::Oscore { gw, sent, .. } => {
                let m = decode_coap(bytes).map_err(fail)?;
                token_matches(&m)?;
                let binding = sent.as_ref().ok_or("no request outstanding")?;
                object_security::unprotect_response(gw, binding, &ProtectedCoap::received(m))
                    .map(|m| Logical::coap(&m))
                    .map_err(fail)
            }
            State::Ndn { gw, .. } => {
                let pkt = decode_ndn(bytes).map_err(fail)?;
                let NdnPacket::Data(d) = &pkt else {
                    return Err("not a Data".into());
                };
                if d.name != ex.name() {
                    return Err("Data does not match a pending Interest".into());
                }
                let content = verify_protected_data(gw, &pkt).map_err(fail)?;
                Ok(Logical::ndn(&d.name, content))
            }
        }
    }

    fn receive(&mut self, dir: Direction, ex: &Exchange, bytes: &[u8]) -> Result<Logical, String> {
        match dir {
            Direction::Request => self.receive_request(bytes),
            Direction::Response => self.receive_response(ex, bytes),
        }
    }

    /// Runs a first exchange and returns endpoints ready to receive the
    /// message of `dir` together with its wire image and logical content.
    fn captured(config: SecurityConfig, dir: Direction) -> (Endpoints, Vec<u8>, Logical) {
        let ex = Exchange::first();
        let mut e = Endpoints::new(config, PSK);
        let req = e.send_request(&ex);
        let wire = match dir {
            Direction::Request => req,
            Direction::Response => {
                e.receive_request(&req).expect("genuine request");
                e.send_response(&ex)
            }
        };
        let logical = e.clone().receive(dir, &ex, &wire).expect("genuine message accepted");
        (e, wire, logical)
    }
}

fn integrity(config: SecurityConfig, dir: Direction) -> Result<(), String> {
    let (e, wire, genuine) = Endpoints::captured(config, dir);
    let ex = Exchange::first();
    for i in 0..wire.len() * 8 {
        let mut w = wire.clone();
        w[i / 8] ^= 1 << (i % 8);
        if let Ok(got) = e.clone().receive(dir, &ex, &w) {
            if got != genuine {
                return Err(format!("bit {i} flipped was accepted as {got}"));
            }
        }
    }
    Ok(())
}

/// Captured message with its signalling rewritten by someone without keys.
fn spliced(wire: &[u8], dir: Direction) -> Option<Vec<u8>> {
    if let Ok(mut m) = decode_coap(wire) {
        m.code = match dir {
            Direction::Request => Code::new(0, 3),
            Direction::Response => Code::new(4, 4),
        };
        return encode_coap(&m).ok();
    }
    if let Ok(mut pkt) = decode_ndn(wire) {
        let forged = Exchange::forged().name();
        match &mut pkt {
            NdnPacket::Interest(i) => i.name = forged,
            NdnPacket::Data(d) => d.payload = Exchange::forged().reading,
        }
        return Some(encode_ndn(&pkt));
    }
    None
}

fn authenticity(config: SecurityConfig, dir: Direction) -> Result<(), String> {
    let (e, wire, genuine) = Endpoints::captured(config, dir);
    let ex = Exchange::first();
    let forged = Exchange::forged();
    let mut attacker = Endpoints::new(config, ATTACKER_PSK);
    let req = attacker.send_request(&forged);
    let own_key = match dir {
        Direction::Request => req,
        Direction::Response => {
            // The attacker answers a request it observed, under its own key.
            if let (State::Oscore { received, .. }, State::Oscore { sent, .. }) = (&mut attacker.state, &e.state) {
                *received = sent.clone();
            } else {
                attacker.receive_request(&req).expect("attacker's own request");
            }
            attacker.send_response(&forged)
        }
    };
    let attempts = [
        ("forged under another key", Some(own_key)),
        ("spliced", spliced(&wire, dir)),
    ];
    for (how, attempt) in attempts {
        let Some(bytes) = attempt else { continue };
        if let Ok(got) = e.clone().receive(dir, &ex, &bytes) {
            if got != genuine {
                return Err(format!("{how} message accepted as {got}"));
            }
        }
    }
    Ok(())
}

fn confidentiality(config: SecurityConfig, dir: Direction) -> Result<(), String> {
    let (_, wire, genuine) = Endpoints::captured(config, dir);
    let contains = |needle: &[u8]| !needle.is_empty() && wire.windows(needle.len()).any(|w| w == needle);
    for l in &genuine.labels {
        if contains(l) {
            return Err(format!("label {:?} visible on the wire", String::from_utf8_lossy(l)));
        }
    }
    if contains(&genuine.payload) {
        return Err("payload visible on the wire".into());
    }
    if let (Some(code), Ok(m)) = (genuine.code, decode_coap(&wire)) {
        if m.code == code {
            return Err(format!("code {:?} visible on the wire", m.code));
        }
    }
    Ok(())
}

fn replay_insensitivity(config: SecurityConfig) -> Result<(), String> {
    let first = Exchange::first();
    let second = Exchange::second();
    let mut e = Endpoints::new(config, PSK);
    let req1 = e.send_request(&first);
    e.receive_request(&req1).expect("genuine request");
    let resp1 = e.send_response(&first);
    e.receive_response(&first, &resp1).expect("genuine response");

    // The sensor's reading moves on; a replayed request must not obtain it
    // under the old request's authority unless the answer is unchanged.
    if e.receive_request(&req1).is_ok() {
        let again = e.send_response(&second);
        if again != resp1 {
            return Err("replayed request was executed again".into());
        }
    }

    // A captured response offered as the answer to a later request, with
    // whatever transport fields are in the clear rewritten to match.
    let req2 = e.send_request(&second);
    e.receive_request(&req2)
        .map_err(|err| format!("second request rejected: {err}"))?;
    let mut candidates = vec![resp1.clone()];
    if let Ok(mut m) = decode_coap(&resp1) {
        m.token = second.token.to_vec();
        m.message_id = second.mid;
        candidates.push(encode_coap(&m).expect("encodes"));
    }
    if let Ok(NdnPacket::Data(mut d)) = decode_ndn(&resp1) {
        d.name = second.name();
        candidates.push(encode_ndn(&NdnPacket::Data(d)));
    }
    for c in candidates {
        if let Ok(got) = e.clone().receive_response(&second, &c) {
            if got.payload != second.reading {
                return Err(format!("stale response accepted for a later request: {got}"));
            }
        }
    }
    Ok(())
}

fn check(config: SecurityConfig, direction: Option<Direction>, property: Property) -> PropertyCheck {
    let outcome = match (property, direction) {
        (Property::Integrity, Some(d)) => integrity(config, d),
        (Property::Authenticity, Some(d)) => authenticity(config, d),
        (Property::Confidentiality, Some(d)) => confidentiality(config, d),
        (Property::ReplayInsensitivity, _) => replay_insensitivity(config),
        (p, None) => panic!("{} needs a direction", p.label()),
    };
    PropertyCheck {
        config,
        direction,
        property,
        holds: outcome.is_ok(),
        evidence: outcome.err().unwrap_or_default(),
    }
}

/// Evaluates every property for every secured stack.
pub fn security_matrix() -> SecurityMatrix {
    let mut checks = Vec::new();
    for config in SecurityConfig::ALL {
        for dir in Direction::BOTH {
            for p in Property::MESSAGE {
                checks.push(check(config, Some(dir), p));
            }
        }
        checks.push(check(config, None, Property::ReplayInsensitivity));
    }
    SecurityMatrix { checks }
}
