use std::collections::{BTreeMap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::Scenario;
use super::endpoint::{self, ClientSecurity, RequestBuffer, ServerSecurity, RESOURCE};
use super::topology::{NodeId, Routes, Topology};
use super::trace::{EventKind, Msg, TimerKind, Trace, TraceRecord};
use super::{airtime, deliver, Delivery, Protocol, SimError};
use crate::channel_security::{ContentType, HandshakeType, Record, Session};
use crate::codec::{decode_coap, decode_ndn, encode_ndn, CoapMessage, Data, Interest, Name, NdnPacket};
use crate::lowpan::{
    parse_datagram, AdaptationProfile, Frame, Framer, ProfileKind, Reassembler, UdpHeader, COAPS_PORT, COAP_PORT,
};
use crate::ndn_stack::{self, Face, Fib, NdnAction, NdnConfig, NdnNode};
use crate::object_security::BindingTable;
use crate::secctx::{
    context_pair, sha256, ContextTable, Key, OpCounts, Role, SecurityContext, GATEWAY_CONTEXT_LIMIT, KEY_LEN,
};

const PAN_ID: u16 = 0xABCD;
const RESPONSE_CACHE: usize = 16;

/// Counters that are not recoverable from the trace alone.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct RunSummary {
    pub requests: u64,
    pub completed: u64,
    pub failed: u64,
    /// Completed DTLS handshakes at the gateway, over all peers.
    pub handshakes: u64,
    /// Handshake records sent by both sides, retransmissions included.
    pub handshake_records: u64,
    pub reassembly_timeouts: u64,
    /// Datagrams that failed to parse or verify.
    pub rejected: u64,
    pub events: u64,
    pub end_us: u64,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub trace: Trace,
    pub summary: RunSummary,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
struct EventKey {
    t: u64,
    node: NodeId,
    rank: u8,
    seq: u64,
}

#[derive(Clone, Copy, Debug)]
struct Meta {
    msg: Msg,
    txn: Option<u64>,
    retx: u8,
}

enum Ev {
    TxDone,
    Arrive {
        from: NodeId,
        frame: Vec<u8>,
        meta: Meta,
        lost: bool,
    },
    Deliver {
        from: NodeId,
        datagram: Vec<u8>,
        meta: Meta,
    },
    RequestTimer {
        txn: u64,
        attempt: u8,
    },
    FlightTimer {
        sensor: usize,
        gen: u64,
    },
    PitTimer,
    Issue {
        sensor: usize,
    },
}

impl Ev {
    fn rank(&self) -> u8 {
        match self {
            Ev::TxDone => 0,
            Ev::Arrive { .. } => 1,
            Ev::Deliver { .. } => 2,
            Ev::RequestTimer { .. } | Ev::FlightTimer { .. } | Ev::PitTimer => 3,
            Ev::Issue { .. } => 4,
        }
    }
}

struct Outgoing {
    to: NodeId,
    frame: Frame,
    meta: Meta,
}

struct RadioState {
    framer: Framer,
    reasm: Reassembler,
    queue: VecDeque<Outgoing>,
    busy: bool,
}

struct Txn {
    sensor: usize,
    retx: u8,
    jitter_us: u64,
    buffer: Option<RequestBuffer>,
    token: Vec<u8>,
    done: bool,
}

#[derive(Default, Clone, Copy)]
struct Flight {
    gen: u64,
    tries: u8,
}

struct GwPeer {
    node: NodeId,
    bindings: BindingTable,
    session: Option<Session>,
    waiting: Vec<u64>,
    flight: Flight,
}

enum Cached {
    Wire(Vec<u8>),
    /// Plain response; the record layer protects each copy afresh.
    Plain(Vec<u8>),
}

struct SensorState {
    node: NodeId,
    ctx: Option<SecurityContext>,
    session: Option<Session>,
    flight: Flight,
    cache: VecDeque<((u16, Vec<u8>), Cached)>,
    served: u64,
    issued: u32,
}

impl SensorState {
    fn ops(&self) -> OpCounts {
        let mut ops = self.ctx.as_ref().map(|c| c.ops()).unwrap_or_default();
        if let Some(s) = &self.session {
            ops += s.ops();
        }
        ops
    }
}

/// Runs one scenario to completion: every request either completes or
/// exhausts its retransmissions, and all timers drain.
pub fn run(topo: &Topology, scenario: &Scenario, seed: u64) -> Result<RunOutput, SimError> {
    topo.validate()?;
    scenario.validate()?;
    let mut sim = Sim::new(topo, scenario, seed)?;
    sim.start();
    sim.event_loop()?;
    Ok(sim.finish())
}

/// Per-sensor key derived from the master key.
fn sensor_key(master: &Key, k: usize) -> Key {
    let mut input = master.to_vec();
    input.extend_from_slice(b"sensor");
    input.extend_from_slice(&(k as u32).to_be_bytes());
    let digest = sha256(&input);
    digest[..KEY_LEN].try_into().expect("digest is longer than a key")
}

fn stack_err(e: impl std::fmt::Display) -> SimError {
    SimError::Stack(e.to_string())
}

fn classify_record(rec: &Record, from_gateway: bool) -> Msg {
    match rec.content_type {
        ContentType::ChangeCipherSpec => Msg::ChangeCipherSpec,
        ContentType::ApplicationData if from_gateway => Msg::Request,
        ContentType::ApplicationData => Msg::Response,
        ContentType::Alert => Msg::Other,
        ContentType::Handshake => match rec.handshake_type() {
            Some(HandshakeType::ClientHello) => Msg::ClientHello,
            Some(HandshakeType::HelloVerifyRequest) => Msg::HelloVerifyRequest,
            Some(HandshakeType::ServerHello) => Msg::ServerHello,
            Some(HandshakeType::ServerHelloDone) => Msg::ServerHelloDone,
            Some(HandshakeType::ClientKeyExchange) => Msg::ClientKeyExchange,
            Some(HandshakeType::Finished) | None if rec.epoch > 0 => Msg::Finished,
            _ => Msg::Other,
        },
    }
}

struct Sim<'a> {
    topo: &'a Topology,
    routes: Routes,
    sc: &'a Scenario,
    protocol: Protocol,
    rng: ChaCha8Rng,
    now: u64,
    seq: u64,
    queue: BTreeMap<EventKey, Ev>,
    trace: Vec<TraceRecord>,
    summary: RunSummary,
    radios: BTreeMap<NodeId, RadioState>,
    ndn: BTreeMap<NodeId, NdnNode>,
    gw: NodeId,
    gw_ctx: ContextTable<usize>,
    peers: Vec<GwPeer>,
    sensors: Vec<SensorState>,
    sensor_of: BTreeMap<NodeId, usize>,
    txns: BTreeMap<u64, Txn>,
    by_token: BTreeMap<Vec<u8>, u64>,
    by_name: BTreeMap<Name, u64>,
    next_txn: u64,
    next_mid: u16,
    next_token: u16,
    issued_total: u64,
    marks: Vec<u64>,
    next_mark: usize,
}

impl<'a> Sim<'a> {
    fn new(topo: &'a Topology, sc: &'a Scenario, seed: u64) -> Result<Self, SimError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let protocol = sc.protocol;
        let master = sc.master_key()?;
        let gw = topo.gateway();
        let sensor_ids = topo.sensors();
        let secured = !matches!(protocol, Protocol::Coap | Protocol::Ndn);
        if secured && sensor_ids.len() > GATEWAY_CONTEXT_LIMIT {
            return Err(SimError::Config(format!(
                "{} sensors exceed the gateway's {GATEWAY_CONTEXT_LIMIT} security contexts",
                sensor_ids.len()
            )));
        }
        if sensor_ids.len() > u8::MAX as usize - 1 {
            return Err(SimError::Config("too many sensors".into()));
        }

        let mut gw_ctx = ContextTable::new(GATEWAY_CONTEXT_LIMIT.max(sensor_ids.len()));
        let mut peers = Vec::new();
        let mut sensors = Vec::new();
        for (k, &node) in sensor_ids.iter().enumerate() {
            let psk = sensor_key(&master, k);
            let id = (k + 1) as u8;
            let pair = match protocol {
                Protocol::CoapProtected => Some(
                    context_pair(psk, &[0xFF, 0x00], &[0x00, id], b"", RESOURCE.as_bytes())
                        .map(|(c, s)| (c.without_replay_window(), s.without_replay_window())),
                ),
                Protocol::Oscore => Some(context_pair(psk, &[0x00], &[id], b"", b"")),
                Protocol::NdnProtected => Some(context_pair(psk, &[0x00], &[id], b"", b"")),
                _ => None,
            };
            let (client, server) = match pair.transpose().map_err(stack_err)? {
                Some((c, s)) => (Some(c), Some(s)),
                None => (None, None),
            };
            if let Some(c) = client {
                gw_ctx.insert(k, c).map_err(stack_err)?;
            }
            let (client_session, server_session) = if protocol == Protocol::CoapDtls {
                (
                    Some(Session::new(Role::Client, psk, sc.dtls, rng.gen()).map_err(stack_err)?),
                    Some(Session::new(Role::Server, psk, sc.dtls, rng.gen()).map_err(stack_err)?),
                )
            } else {
                (None, None)
            };
            peers.push(GwPeer {
                node,
                bindings: BindingTable::new(),
                session: client_session,
                waiting: Vec::new(),
                flight: Flight::default(),
            });
            sensors.push(SensorState {
                node,
                ctx: server,
                session: server_session,
                flight: Flight::default(),
                cache: VecDeque::new(),
                served: 0,
                issued: 0,
            });
        }

        let routes = topo.routes();
        let mut radios = BTreeMap::new();
        let mut ndn = BTreeMap::new();
        for n in &topo.nodes {
            radios.insert(
                n.id,
                RadioState {
                    framer: Framer::new(PAN_ID, n.id as u64),
                    reasm: Reassembler::new(sc.radio.reassembly_timeout_us),
                    queue: VecDeque::new(),
                    busy: false,
                },
            );
            if protocol.is_ndn() {
                let mut fib = Fib::new();
                for (k, &s) in sensor_ids.iter().enumerate() {
                    let face = if s == n.id {
                        Face::App
                    } else {
                        Face::Node(routes.next_hop(n.id, s).expect("validated topology is connected"))
                    };
                    fib.add(sensor_prefix(k), face);
                }
                let cfg = NdnConfig {
                    cs_capacity: sc.ndn_cs_capacity,
                    retry_interval_us: sc.retransmit_after_us,
                    max_retries: sc.max_retransmissions,
                };
                ndn.insert(n.id, NdnNode::new(fib, cfg));
            }
        }

        let total = sc.requests_per_sensor as u64 * sensor_ids.len() as u64;
        let mut marks: Vec<u64> = sc
            .deep_sleep_marks
            .iter()
            .map(|m| (m * total as f64).round() as u64)
            .collect();
        marks.sort_unstable();

        Ok(Sim {
            topo,
            routes,
            sc,
            protocol,
            rng,
            now: 0,
            seq: 0,
            queue: BTreeMap::new(),
            trace: Vec::new(),
            summary: RunSummary::default(),
            radios,
            ndn,
            gw,
            gw_ctx,
            peers,
            sensor_of: sensors.iter().enumerate().map(|(k, s)| (s.node, k)).collect(),
            sensors,
            txns: BTreeMap::new(),
            by_token: BTreeMap::new(),
            by_name: BTreeMap::new(),
            next_txn: 0,
            next_mid: 1,
            next_token: 1,
            issued_total: 0,
            marks,
            next_mark: 0,
        })
    }

    fn schedule(&mut self, t: u64, node: NodeId, ev: Ev) {
        let key = EventKey {
            t,
            node,
            rank: ev.rank(),
            seq: self.seq,
        };
        self.seq += 1;
        self.queue.insert(key, ev);
    }

    fn record(&mut self, kind: EventKind, node: NodeId, fill: impl FnOnce(&mut TraceRecord)) {
        let mut r = TraceRecord {
            seq: self.trace.len() as u64,
            t_us: self.now,
            kind: Some(kind),
            node,
            ..TraceRecord::default()
        };
        fill(&mut r);
        self.trace.push(r);
    }

    fn start(&mut self) {
        if self.sc.requests_per_sensor == 0 {
            return;
        }
        for k in 0..self.sensors.len() {
            let first = self.rng.gen_range(0..self.sc.interval_us);
            self.schedule(first, self.gw, Ev::Issue { sensor: k });
        }
    }

    fn event_loop(&mut self) -> Result<(), SimError> {
        while let Some((key, ev)) = self.queue.pop_first() {
            debug_assert!(key.t >= self.now, "time runs forward");
            self.now = key.t;
            self.summary.events += 1;
            let node = key.node;
            match ev {
                Ev::TxDone => {
                    self.radios.get_mut(&node).expect("radio").busy = false;
                    self.start_tx(node);
                }
                Ev::Arrive {
                    from,
                    frame,
                    meta,
                    lost,
                } => self.on_arrive(node, from, frame, meta, lost),
                Ev::Deliver { from, datagram, meta } => self.on_datagram(node, from, datagram, meta)?,
                Ev::RequestTimer { txn, attempt } => self.on_request_timer(txn, attempt)?,
                Ev::FlightTimer { sensor, gen } => self.on_flight_timer(node, sensor, gen)?,
                Ev::PitTimer => self.on_pit_timer(node)?,
                Ev::Issue { sensor } => self.issue(sensor)?,
            }
        }
        Ok(())
    }

    fn finish(mut self) -> RunOutput {
        self.summary.end_us = self.now;
        for p in &self.peers {
            if let Some(s) = &p.session {
                self.summary.handshakes += s.handshakes() as u64;
                self.summary.handshake_records += s.handshake_records_sent();
            }
        }
        for s in &self.sensors {
            if let Some(s) = &s.session {
                self.summary.handshake_records += s.handshake_records_sent();
            }
        }
        self.summary.reassembly_timeouts = self.radios.values().map(|r| r.reasm.lost()).sum();
        RunOutput {
            trace: Trace { records: self.trace },
            summary: self.summary,
        }
    }

    // ---- link layer ----

    fn enqueue(&mut self, from: NodeId, to: NodeId, frames: Vec<Frame>, meta: Meta) {
        let radio = self.radios.get_mut(&from).expect("radio");
        for frame in frames {
            radio.queue.push_back(Outgoing { to, frame, meta });
        }
        if !radio.busy {
            self.start_tx(from);
        }
    }

    fn start_tx(&mut self, node: NodeId) {
        let radio = self.radios.get_mut(&node).expect("radio");
        let Some(out) = radio.queue.pop_front() else {
            return;
        };
        radio.busy = true;
        let bytes = out.frame.encode();
        let air = airtime(&self.sc.radio, bytes.len());
        let fragment = out.frame.fragment_index();
        self.record(EventKind::FrameTx, node, |r| {
            r.peer = Some(out.to);
            r.bytes = bytes.len() as u64;
            r.fragment = fragment;
            r.msg = Some(out.meta.msg);
            r.txn = out.meta.txn;
            r.retx = out.meta.retx;
        });
        let loss = self.topo.loss(node, out.to).unwrap_or(1.0);
        let lost = deliver(loss, &mut self.rng) == Delivery::Lost;
        let t = self.now + air;
        self.schedule(
            t,
            out.to,
            Ev::Arrive {
                from: node,
                frame: bytes,
                meta: out.meta,
                lost,
            },
        );
        self.schedule(t, node, Ev::TxDone);
    }

    fn on_arrive(&mut self, node: NodeId, from: NodeId, bytes: Vec<u8>, meta: Meta, lost: bool) {
        let frame = Frame::decode(&bytes);
        let fragment = frame.as_ref().ok().and_then(|f| f.fragment_index());
        let kind = if lost { EventKind::FrameLost } else { EventKind::FrameRx };
        self.record(kind, node, |r| {
            r.peer = Some(from);
            r.bytes = bytes.len() as u64;
            r.fragment = fragment;
            r.msg = Some(meta.msg);
            r.txn = meta.txn;
            r.retx = meta.retx;
        });
        if lost {
            return;
        }
        let Ok(frame) = frame else {
            self.summary.rejected += 1;
            return;
        };
        let radio = self.radios.get_mut(&node).expect("radio");
        match radio.reasm.push(frame, self.now) {
            Ok(Some(datagram)) => {
                let t = self.now + self.sc.radio.processing_us;
                self.schedule(t, node, Ev::Deliver { from, datagram, meta });
            }
            Ok(None) => {}
            Err(_) => self.summary.rejected += 1,
        }
    }

    fn on_datagram(&mut self, node: NodeId, from: NodeId, datagram: Vec<u8>, meta: Meta) -> Result<(), SimError> {
        if self.protocol.is_ndn() {
            let kind = ProfileKind::NdnFace {
                header_cost: self.sc.ndn_header_cost,
            };
            let pkt = parse_datagram(kind, &datagram)
                .ok()
                .and_then(|d| decode_ndn(&d.upper).ok());
            let Some(pkt) = pkt else {
                self.summary.rejected += 1;
                return Ok(());
            };
            let face = Face::Node(from);
            let ndn = self.ndn.get_mut(&node).expect("ndn node");
            let actions = match pkt {
                NdnPacket::Interest(i) => ndn.on_interest(self.now, face, i),
                NdnPacket::Data(d) => ndn.on_data(self.now, face, d),
            };
            return self.ndn_actions(node, actions, OpCounts::default());
        }
        let Ok(d) = parse_datagram(ProfileKind::SixLowpanUdp, &datagram) else {
            self.summary.rejected += 1;
            return Ok(());
        };
        let udp = d.udp.expect("UDP profile carries a header");
        if udp.dst != node {
            let Some(next) = self.routes.next_hop(node, udp.dst) else {
                self.summary.rejected += 1;
                return Ok(());
            };
            let frames = self
                .radios
                .get_mut(&node)
                .expect("radio")
                .framer
                .frame_datagram(next as u64, &datagram)
                .map_err(stack_err)?;
            self.enqueue(node, next, frames, meta);
            return Ok(());
        }
        if node == self.gw {
            self.gw_receive(udp.src, &d.upper)
        } else if let Some(&k) = self.sensor_of.get(&node) {
            self.sensor_receive(k, &d.upper)
        } else {
            self.summary.rejected += 1;
            Ok(())
        }
    }

    /// Originates a UDP datagram from an endpoint.
    fn send_ip(&mut self, from: NodeId, to: NodeId, upper: &[u8], meta: Meta, ops: OpCounts) -> Result<(), SimError> {
        let port = if self.protocol == Protocol::CoapDtls {
            COAPS_PORT
        } else {
            COAP_PORT
        };
        let profile = AdaptationProfile::SixLowpanUdp(UdpHeader {
            src: from,
            dst: to,
            src_port: port,
            dst_port: port,
        });
        let next = self.routes.next_hop(from, to).expect("validated topology is connected");
        let frames = self
            .radios
            .get_mut(&from)
            .expect("radio")
            .framer
            .frame_up(next as u64, &profile, upper)
            .map_err(stack_err)?;
        self.record(EventKind::DatagramTx, from, |r| {
            *r = std::mem::take(r).with_ops(ops);
            r.peer = Some(to);
            r.bytes = (profile.header_cost() + upper.len()) as u64;
            r.msg = Some(meta.msg);
            r.txn = meta.txn;
            r.retx = meta.retx;
        });
        self.enqueue(from, next, frames, meta);
        Ok(())
    }

    fn send_ndn(&mut self, from: NodeId, to: NodeId, pkt: &[u8], meta: Meta, ops: OpCounts) -> Result<(), SimError> {
        let profile = AdaptationProfile::NdnFace {
            header_cost: self.sc.ndn_header_cost,
        };
        let frames = self
            .radios
            .get_mut(&from)
            .expect("radio")
            .framer
            .frame_up(to as u64, &profile, pkt)
            .map_err(stack_err)?;
        self.record(EventKind::DatagramTx, from, |r| {
            *r = std::mem::take(r).with_ops(ops);
            r.peer = Some(to);
            r.bytes = (profile.header_cost() + pkt.len()) as u64;
            r.msg = Some(meta.msg);
            r.txn = meta.txn;
            r.retx = meta.retx;
        });
        self.enqueue(from, to, frames, meta);
        Ok(())
    }

    // ---- gateway application ----

    fn apply_deep_sleep(&mut self) {
        while self.next_mark < self.marks.len() && self.issued_total >= self.marks[self.next_mark] {
            self.next_mark += 1;
            self.record(EventKind::StateWipe, self.gw, |_| {});
            for p in &mut self.peers {
                if let Some(s) = &mut p.session {
                    s.wipe_session();
                    p.flight.gen += 1;
                }
            }
        }
    }

    fn issue(&mut self, k: usize) -> Result<(), SimError> {
        self.apply_deep_sleep();
        let id = self.next_txn;
        self.next_txn += 1;
        self.issued_total += 1;
        self.summary.requests += 1;
        let s = &mut self.sensors[k];
        s.issued += 1;
        if s.issued < self.sc.requests_per_sensor {
            let (iv, j) = (self.sc.interval_us, self.sc.interval_jitter_us);
            let next = self.now + self.rng.gen_range(iv - j..=iv + j);
            self.schedule(next, self.gw, Ev::Issue { sensor: k });
        }
        let jitter_us = self.rng.gen_range(0..=self.sc.retransmit_jitter_us);
        let peer_node = self.peers[k].node;
        self.record(EventKind::AppRequest, self.gw, |r| {
            r.peer = Some(peer_node);
            r.txn = Some(id);
        });

        if self.protocol.is_ndn() {
            let seq = (self.sensors[k].issued - 1) as u16;
            let name = sensor_prefix(k).with(b"temp".to_vec()).with(seq.to_be_bytes().to_vec());
            let interest = Interest {
                name: name.clone(),
                nonce: self.rng.gen(),
                lifetime_ms: (self.sc.retransmit_after_us / 1000).min(u16::MAX as u64) as u16,
            };
            self.by_name.insert(name, id);
            self.txns.insert(
                id,
                Txn {
                    sensor: k,
                    retx: 0,
                    jitter_us,
                    buffer: None,
                    token: Vec::new(),
                    done: false,
                },
            );
            let gw = self.gw;
            let actions = self
                .ndn
                .get_mut(&gw)
                .expect("ndn node")
                .express_interest(self.now, interest, jitter_us);
            return self.ndn_actions(gw, actions, OpCounts::default());
        }

        let mid = self.next_mid;
        self.next_mid = self.next_mid.wrapping_add(1);
        let token = self.next_token.to_be_bytes().to_vec();
        self.next_token = self.next_token.wrapping_add(1);
        let req = CoapMessage::get(mid, &token, RESOURCE);
        self.by_token.insert(token.clone(), id);
        self.txns.insert(
            id,
            Txn {
                sensor: k,
                retx: 0,
                jitter_us,
                buffer: None,
                token,
                done: false,
            },
        );
        self.send_request(id, Some(req))?;
        let t = self.now + self.sc.retransmit_after_us + jitter_us;
        self.schedule(t, self.gw, Ev::RequestTimer { txn: id, attempt: 1 });
        Ok(())
    }

    fn peer_ops(&self, k: usize) -> OpCounts {
        let mut ops = self.gw_ctx.get(&k).map(|c| c.ops()).unwrap_or_default();
        if let Some(s) = &self.peers[k].session {
            ops += s.ops();
        }
        ops
    }

    fn client_security(&mut self, k: usize) -> ClientSecurity<'_> {
        let ctx = self.gw_ctx.get_mut(&k);
        let peer = &mut self.peers[k];
        match self.protocol {
            Protocol::Coap => ClientSecurity::Plain,
            Protocol::CoapProtected => ClientSecurity::Payload(ctx.expect("context per sensor")),
            Protocol::Oscore => ClientSecurity::Oscore {
                ctx: ctx.expect("context per sensor"),
                bindings: &mut peer.bindings,
            },
            Protocol::CoapDtls => ClientSecurity::Channel(peer.session.as_mut().expect("session per sensor")),
            Protocol::Ndn | Protocol::NdnProtected => unreachable!("NDN has no CoAP client"),
        }
    }

    /// First transmission (`fresh`) or retransmission of a request.
    fn send_request(&mut self, id: u64, fresh: Option<CoapMessage>) -> Result<(), SimError> {
        let k = self.txns[&id].sensor;
        let before = self.peer_ops(k);
        let bytes = match fresh {
            Some(req) => {
                let (buf, wire) = endpoint::create_request(self.client_security(k), &req).map_err(stack_err)?;
                self.txns.get_mut(&id).expect("txn").buffer = Some(buf);
                wire
            }
            None => {
                let buf = self.txns[&id].buffer.as_ref().expect("created before retransmission");
                endpoint::retransmit_request(buf, self.peers[k].session.as_mut()).map_err(stack_err)?
            }
        };
        let ops = self.peer_ops(k).since(before);
        let meta = Meta {
            msg: Msg::Request,
            txn: Some(id),
            retx: self.txns[&id].retx,
        };
        match bytes {
            Some(b) => self.send_ip(self.gw, self.peers[k].node, &b, meta, ops),
            None => {
                let peer = &mut self.peers[k];
                if !peer.waiting.contains(&id) {
                    peer.waiting.push(id);
                }
                if peer
                    .session
                    .as_ref()
                    .is_some_and(|s| s.phase() == crate::channel_security::Phase::Idle)
                {
                    self.start_handshake(k)?;
                }
                Ok(())
            }
        }
    }

    fn start_handshake(&mut self, k: usize) -> Result<(), SimError> {
        let before = self.peer_ops(k);
        let session = self.peers[k].session.as_mut().expect("session");
        let recs = session.handshake_step(None).map_err(stack_err)?;
        let ops = self.peer_ops(k).since(before);
        self.new_flight(self.gw, k, recs, ops)
    }

    /// Sends a handshake flight and arms its retransmission timer.
    fn new_flight(&mut self, node: NodeId, k: usize, recs: Vec<Record>, ops: OpCounts) -> Result<(), SimError> {
        if recs.is_empty() {
            return Ok(());
        }
        let awaiting;
        let gen;
        {
            let (session, flight) = self.channel_mut(node, k);
            flight.gen += 1;
            flight.tries = 0;
            gen = flight.gen;
            awaiting = session.awaiting_flight();
        }
        self.send_records(node, k, recs, 0, ops)?;
        if awaiting {
            let t = self.now + self.sc.retransmit_after_us;
            self.schedule(t, node, Ev::FlightTimer { sensor: k, gen });
        }
        Ok(())
    }

    fn channel_mut(&mut self, node: NodeId, k: usize) -> (&mut Session, &mut Flight) {
        if node == self.gw {
            let p = &mut self.peers[k];
            (p.session.as_mut().expect("session"), &mut p.flight)
        } else {
            let s = &mut self.sensors[k];
            (s.session.as_mut().expect("session"), &mut s.flight)
        }
    }

    fn send_records(
        &mut self,
        node: NodeId,
        k: usize,
        recs: Vec<Record>,
        retx: u8,
        ops: OpCounts,
    ) -> Result<(), SimError> {
        let from_gw = node == self.gw;
        let to = if from_gw { self.sensors[k].node } else { self.gw };
        let mut ops = Some(ops);
        for rec in recs {
            let meta = Meta {
                msg: classify_record(&rec, from_gw),
                txn: None,
                retx,
            };
            self.send_ip(node, to, &rec.encode(), meta, ops.take().unwrap_or_default())?;
        }
        Ok(())
    }

    fn on_flight_timer(&mut self, node: NodeId, k: usize, gen: u64) -> Result<(), SimError> {
        let max = self.sc.max_retransmissions;
        let (session, flight) = self.channel_mut(node, k);
        if flight.gen != gen || !session.awaiting_flight() {
            return Ok(());
        }
        if flight.tries >= max {
            session.wipe_session();
            flight.gen += 1;
            return Ok(());
        }
        flight.tries += 1;
        let tries = flight.tries;
        let recs = session.retransmit_flight();
        let peer = if node == self.gw { self.sensors[k].node } else { self.gw };
        self.record(EventKind::TimerFire, node, |r| {
            r.timer = Some(TimerKind::Flight);
            r.peer = Some(peer);
            r.retx = tries;
        });
        self.send_records(node, k, recs, tries, OpCounts::default())?;
        let t = self.now + self.sc.retransmit_after_us;
        self.schedule(t, node, Ev::FlightTimer { sensor: k, gen });
        Ok(())
    }

    /// Feeds a handshake-layer record to the session at `node`.
    fn handshake_input(&mut self, node: NodeId, k: usize, rec: &Record) -> Result<(), SimError> {
        let (session, _) = self.channel_mut(node, k);
        let phase = session.phase();
        let was_established = session.is_established();
        let ops_before = session.ops();
        let result = session.on_handshake_record(rec);
        let changed = session.phase() != phase;
        let established = session.is_established();
        let ops = session.ops().since(ops_before);
        match result {
            Ok(recs) if changed => self.new_flight(node, k, recs, ops)?,
            Ok(recs) => self.send_records(node, k, recs, 1, ops)?,
            Err(_) => {
                self.summary.rejected += 1;
                self.channel_mut(node, k).1.gen += 1;
            }
        }
        if node == self.gw && established && !was_established {
            let waiting = std::mem::take(&mut self.peers[k].waiting);
            for id in waiting {
                if !self.txns[&id].done {
                    self.send_request(id, None)?;
                }
            }
        }
        Ok(())
    }

    fn gw_receive(&mut self, src: NodeId, upper: &[u8]) -> Result<(), SimError> {
        let Some(&k) = self.sensor_of.get(&src) else {
            self.summary.rejected += 1;
            return Ok(());
        };
        if self.protocol != Protocol::CoapDtls {
            return self.complete_coap(k, upper, OpCounts::default());
        }
        let Ok(rec) = Record::decode(upper) else {
            self.summary.rejected += 1;
            return Ok(());
        };
        if rec.content_type != ContentType::ApplicationData {
            return self.handshake_input(self.gw, k, &rec);
        }
        let session = self.peers[k].session.as_mut().expect("session");
        let before = session.ops();
        let plain = session.unprotect_record(&rec);
        let ops = session.ops().since(before);
        match plain {
            Ok(p) => self.complete_coap(k, &p, ops),
            Err(_) => {
                self.summary.rejected += 1;
                Ok(())
            }
        }
    }

    fn complete_coap(&mut self, k: usize, bytes: &[u8], extra: OpCounts) -> Result<(), SimError> {
        let before = self.peer_ops(k);
        let accepted = endpoint::accept_response(self.client_security(k), bytes);
        let mut ops = self.peer_ops(k).since(before);
        ops += extra;
        let Ok(msg) = accepted else {
            self.summary.rejected += 1;
            return Ok(());
        };
        let Some(&id) = self.by_token.get(&msg.token) else {
            return Ok(());
        };
        if self.txns[&id].sensor != k || self.txns[&id].done {
            return Ok(());
        }
        self.finish_txn(id, true, ops);
        Ok(())
    }

    fn finish_txn(&mut self, id: u64, ok: bool, ops: OpCounts) {
        let txn = self.txns.get_mut(&id).expect("txn");
        txn.done = true;
        let (k, retx) = (txn.sensor, txn.retx);
        let token = std::mem::take(&mut txn.token);
        txn.buffer = None;
        self.by_token.remove(&token);
        let peer = &mut self.peers[k];
        peer.bindings.forget(&token);
        peer.waiting.retain(|w| *w != id);
        let node = peer.node;
        if ok {
            self.summary.completed += 1;
        } else {
            self.summary.failed += 1;
        }
        self.record(EventKind::AppComplete, self.gw, |r| {
            *r = std::mem::take(r).with_ops(ops);
            r.peer = Some(node);
            r.txn = Some(id);
            r.retx = retx;
            r.ok = Some(ok);
        });
    }

    fn on_request_timer(&mut self, id: u64, attempt: u8) -> Result<(), SimError> {
        let Some(txn) = self.txns.get(&id) else {
            return Ok(());
        };
        if txn.done {
            return Ok(());
        }
        let (peer, jitter) = (self.peers[txn.sensor].node, txn.jitter_us);
        self.record(EventKind::TimerFire, self.gw, |r| {
            r.timer = Some(TimerKind::Request);
            r.peer = Some(peer);
            r.txn = Some(id);
            r.retx = attempt;
        });
        if attempt > self.sc.max_retransmissions {
            self.finish_txn(id, false, OpCounts::default());
            return Ok(());
        }
        self.txns.get_mut(&id).expect("txn").retx = attempt;
        self.send_request(id, None)?;
        let t = self.now + self.sc.retransmit_after_us + jitter;
        self.schedule(
            t,
            self.gw,
            Ev::RequestTimer {
                txn: id,
                attempt: attempt + 1,
            },
        );
        Ok(())
    }

    // ---- sensor application ----

    fn reading(&mut self, k: usize) -> Vec<u8> {
        let s = &mut self.sensors[k];
        s.served += 1;
        (0..self.sc.payload_len)
            .map(|i| 0x14u8.wrapping_add((s.served % 16) as u8).wrapping_add(i as u8))
            .collect()
    }

    fn cached(&self, k: usize, key: &(u16, Vec<u8>)) -> Option<&Cached> {
        self.sensors[k].cache.iter().find(|(c, _)| c == key).map(|(_, v)| v)
    }

    fn cache(&mut self, k: usize, key: (u16, Vec<u8>), value: Cached) {
        let cache = &mut self.sensors[k].cache;
        if cache.len() == RESPONSE_CACHE {
            cache.pop_front();
        }
        cache.push_back((key, value));
    }

    fn sensor_receive(&mut self, k: usize, upper: &[u8]) -> Result<(), SimError> {
        let node = self.sensors[k].node;
        if self.protocol == Protocol::CoapDtls {
            let Ok(rec) = Record::decode(upper) else {
                self.summary.rejected += 1;
                return Ok(());
            };
            if rec.content_type != ContentType::ApplicationData {
                return self.handshake_input(node, k, &rec);
            }
            let session = self.sensors[k].session.as_mut().expect("session");
            let Ok(plain) = session.unprotect_record(&rec) else {
                self.summary.rejected += 1;
                return Ok(());
            };
            let Ok(req) = decode_coap(&plain) else {
                self.summary.rejected += 1;
                return Ok(());
            };
            let key = (req.message_id, req.token.clone());
            let (response, retx) = match self.cached(k, &key) {
                Some(Cached::Plain(p)) => (p.clone(), 1),
                _ => {
                    let reading = self.reading(k);
                    let p = endpoint::serve_request(ServerSecurity::Plain, &req, &reading).map_err(stack_err)?;
                    self.cache(k, key, Cached::Plain(p.clone()));
                    (p, 0)
                }
            };
            let before = self.sensors[k].ops();
            let session = self.sensors[k].session.as_mut().expect("session");
            let Ok(rec) = session.protect_record(&response) else {
                return Ok(());
            };
            let ops = self.sensors[k].ops().since(before);
            let meta = Meta {
                msg: Msg::Response,
                txn: self.by_token.get(&req.token).copied(),
                retx,
            };
            return self.send_ip(node, self.gw, &rec.encode(), meta, ops);
        }

        let Ok(req) = decode_coap(upper) else {
            self.summary.rejected += 1;
            return Ok(());
        };
        let key = (req.message_id, req.token.clone());
        let txn = self.by_token.get(&req.token).copied();
        if let Some(Cached::Wire(w)) = self.cached(k, &key) {
            let w = w.clone();
            let meta = Meta {
                msg: Msg::Response,
                txn,
                retx: 1,
            };
            return self.send_ip(node, self.gw, &w, meta, OpCounts::default());
        }
        let reading = self.reading(k);
        let before = self.sensors[k].ops();
        let protocol = self.protocol;
        let ctx = self.sensors[k].ctx.as_mut();
        let sec = match protocol {
            Protocol::CoapProtected => ServerSecurity::Payload(ctx.expect("sensor context")),
            Protocol::Oscore => ServerSecurity::Oscore(ctx.expect("sensor context")),
            _ => ServerSecurity::Plain,
        };
        let served = endpoint::serve_request(sec, &req, &reading);
        let ops = self.sensors[k].ops().since(before);
        let Ok(wire) = served else {
            self.summary.rejected += 1;
            return Ok(());
        };
        self.cache(k, key, Cached::Wire(wire.clone()));
        let meta = Meta {
            msg: Msg::Response,
            txn,
            retx: 0,
        };
        self.send_ip(node, self.gw, &wire, meta, ops)
    }

    // ---- NDN ----

    fn on_pit_timer(&mut self, node: NodeId) -> Result<(), SimError> {
        let ndn = self.ndn.get_mut(&node).expect("ndn node");
        if ndn.next_deadline().is_none_or(|d| d > self.now) {
            return Ok(());
        }
        let actions = ndn.hop_retransmit(self.now);
        self.record(EventKind::TimerFire, node, |r| r.timer = Some(TimerKind::Pit));
        self.ndn_actions(node, actions, OpCounts::default())
    }

    fn produce(&mut self, k: usize, name: Name) -> Result<(Data, OpCounts), SimError> {
        let reading = self.reading(k);
        if self.protocol != Protocol::NdnProtected {
            return Ok((
                Data {
                    name,
                    payload: reading,
                    security: None,
                },
                OpCounts::default(),
            ));
        }
        let ctx = self.sensors[k].ctx.as_mut().expect("sensor context");
        let before = ctx.ops();
        let pkt = ndn_stack::make_protected_data(ctx, name, &reading).map_err(stack_err)?;
        let ops = ctx.ops().since(before);
        let NdnPacket::Data(d) = pkt else {
            unreachable!("producer makes Data")
        };
        Ok((d, ops))
    }

    fn ndn_actions(&mut self, node: NodeId, actions: Vec<NdnAction>, ops: OpCounts) -> Result<(), SimError> {
        let mut queue: VecDeque<NdnAction> = actions.into();
        let mut ops = Some(ops);
        while let Some(action) = queue.pop_front() {
            match action {
                NdnAction::Send {
                    face: Face::Node(next),
                    packet,
                    retry,
                } => {
                    let txn = self.by_name.get(packet.name()).copied();
                    let is_interest = matches!(packet, NdnPacket::Interest(_));
                    if let (true, Some(id)) = (node == self.gw && is_interest, txn) {
                        let t = self.txns.get_mut(&id).expect("txn");
                        t.retx = t.retx.max(retry);
                    }
                    if is_interest {
                        let deadline = self.ndn[&node].pit.get(packet.name()).and_then(|e| e.deadline_us);
                        if let Some(d) = deadline {
                            self.schedule(d, node, Ev::PitTimer);
                        }
                    }
                    let meta = Meta {
                        msg: if is_interest { Msg::Interest } else { Msg::Data },
                        txn,
                        retx: retry,
                    };
                    let bytes = encode_ndn(&packet);
                    self.send_ndn(node, next, &bytes, meta, ops.take().unwrap_or_default())?;
                }
                NdnAction::Send { face: Face::App, .. } => {}
                NdnAction::ToProducer(interest) => {
                    let Some(&k) = self.sensor_of.get(&node) else {
                        continue;
                    };
                    let (data, created) = self.produce(k, interest.name)?;
                    ops = Some(created);
                    let more = self
                        .ndn
                        .get_mut(&node)
                        .expect("ndn node")
                        .on_data(self.now, Face::App, data);
                    queue.extend(more);
                }
                NdnAction::Deliver(data) if node == self.gw => self.ndn_complete(data),
                NdnAction::Failed { name, downstream } if node == self.gw && downstream.contains(&Face::App) => {
                    if let Some(&id) = self.by_name.get(&name) {
                        if !self.txns[&id].done {
                            self.finish_txn(id, false, OpCounts::default());
                        }
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }

    fn ndn_complete(&mut self, data: Data) {
        let Some(&id) = self.by_name.get(&data.name) else {
            return;
        };
        if self.txns[&id].done {
            return;
        }
        let k = self.txns[&id].sensor;
        let mut ops = OpCounts::default();
        if self.protocol == Protocol::NdnProtected {
            let ctx = self.gw_ctx.get_mut(&k).expect("context per sensor");
            let before = ctx.ops();
            let verified = ndn_stack::verify_protected_data(ctx, &NdnPacket::Data(data));
            ops = ctx.ops().since(before);
            if verified.is_err() {
                // the PIT entry is consumed, so nothing else will arrive
                self.summary.rejected += 1;
                self.finish_txn(id, false, ops);
                return;
            }
        }
        self.finish_txn(id, true, ops);
    }
}

/// Routing prefix of sensor `k`.
pub(crate) fn sensor_prefix(k: usize) -> Name {
    Name::default().with(b"gw".to_vec()).with(format!("s{k}").into_bytes())
}
