//! Flat trace records, NDJSON round-tripping and the per-node CSV summary.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::topology::{NodeId, Topology};
use super::SimError;
use crate::secctx::OpCounts;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    FrameTx,
    FrameRx,
    FrameLost,
    /// A node handed a network-layer packet it originated to its radio.
    /// IP forwarders relay without emitting this; NDN nodes emit it for
    /// every packet they send, including hop-wise retries.
    DatagramTx,
    TimerFire,
    AppRequest,
    AppComplete,
    StateWipe,
}

/// What a frame or datagram carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Msg {
    Request,
    Response,
    Interest,
    Data,
    ClientHello,
    HelloVerifyRequest,
    ServerHello,
    ServerHelloDone,
    ClientKeyExchange,
    ChangeCipherSpec,
    Finished,
    Other,
}

impl Msg {
    pub fn is_handshake(self) -> bool {
        matches!(
            self,
            Msg::ClientHello
                | Msg::HelloVerifyRequest
                | Msg::ServerHello
                | Msg::ServerHelloDone
                | Msg::ClientKeyExchange
                | Msg::ChangeCipherSpec
                | Msg::Finished
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimerKind {
    /// End-to-end request retransmission at the gateway.
    Request,
    /// DTLS handshake flight retransmission.
    Flight,
    /// NDN PIT entry retry or expiry.
    Pit,
}

fn is_zero(n: &u64) -> bool {
    *n == 0
}

fn is_zero8(n: &u8) -> bool {
    *n == 0
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub seq: u64,
    pub t_us: u64,
    pub kind: Option<EventKind>,
    pub node: NodeId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub peer: Option<NodeId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub txn: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub msg: Option<Msg>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timer: Option<TimerKind>,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub bytes: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fragment: Option<u8>,
    /// Retransmission index: 0 for the original transmission.
    #[serde(default, skip_serializing_if = "is_zero8")]
    pub retx: u8,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub seals: u64,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub opens: u64,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub hmacs: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ok: Option<bool>,
}

impl TraceRecord {
    pub fn kind(&self) -> EventKind {
        self.kind.expect("recorded events carry a kind")
    }

    pub fn is(&self, kind: EventKind) -> bool {
        self.kind == Some(kind)
    }

    pub fn with_ops(mut self, ops: OpCounts) -> Self {
        self.seals = ops.seals;
        self.opens = ops.opens;
        self.hmacs = ops.hmac_signs + ops.hmac_verifies;
        self
    }
}

/// Complete output of one run.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trace {
    pub records: Vec<TraceRecord>,
}

impl Trace {
    pub fn iter(&self) -> impl Iterator<Item = &TraceRecord> {
        self.records.iter()
    }

    pub fn of_kind(&self, kind: EventKind) -> impl Iterator<Item = &TraceRecord> {
        self.records.iter().filter(move |r| r.is(kind))
    }

    pub fn write_ndjson(&self, mut w: impl Write) -> Result<(), SimError> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r).map_err(|e| SimError::Io(e.to_string()))?;
            w.write_all(b"\n").map_err(|e| SimError::Io(e.to_string()))?;
        }
        Ok(())
    }

    pub fn to_ndjson(&self) -> String {
        let mut buf = Vec::new();
        self.write_ndjson(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("json is utf-8")
    }

    pub fn read_ndjson(r: impl BufRead) -> Result<Trace, SimError> {
        let mut records = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line.map_err(|e| SimError::Io(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: TraceRecord =
                serde_json::from_str(&line).map_err(|e| SimError::Io(format!("line {}: {e}", i + 1)))?;
            if rec.kind.is_none() {
                return Err(SimError::Io(format!("line {}: missing kind", i + 1)));
            }
            records.push(rec);
        }
        Ok(Trace { records })
    }

    /// Per-node totals.
    pub fn node_summary(&self) -> BTreeMap<NodeId, NodeSummary> {
        let mut out: BTreeMap<NodeId, NodeSummary> = BTreeMap::new();
        for r in &self.records {
            let s = out.entry(r.node).or_default();
            match r.kind() {
                EventKind::FrameTx => {
                    s.frames_tx += 1;
                    s.bytes_tx += r.bytes;
                }
                EventKind::FrameRx => s.frames_rx += 1,
                EventKind::FrameLost => s.frames_lost += 1,
                EventKind::DatagramTx => s.datagrams_tx += 1,
                _ => {}
            }
            s.seals += r.seals;
            s.opens += r.opens;
            s.hmacs += r.hmacs;
        }
        out
    }

    /// Writes one CSV row per node.
    pub fn write_summary_csv(&self, topo: &Topology, w: impl Write) -> Result<(), SimError> {
        let mut csv = csv::Writer::from_writer(w);
        let io = |e: csv::Error| SimError::Io(e.to_string());
        for (id, s) in self.node_summary() {
            let node = topo.node(id);
            csv.serialize(NodeSummaryRow {
                node: id,
                name: node.map(|n| n.name.clone()).unwrap_or_default(),
                role: node.map(|n| format!("{:?}", n.role).to_lowercase()).unwrap_or_default(),
                frames_tx: s.frames_tx,
                frames_rx: s.frames_rx,
                frames_lost: s.frames_lost,
                bytes_tx: s.bytes_tx,
                datagrams_tx: s.datagrams_tx,
                seals: s.seals,
                opens: s.opens,
                hmacs: s.hmacs,
            })
            .map_err(io)?;
        }
        csv.flush().map_err(|e| SimError::Io(e.to_string()))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeSummary {
    pub frames_tx: u64,
    pub frames_rx: u64,
    pub frames_lost: u64,
    pub bytes_tx: u64,
    pub datagrams_tx: u64,
    pub seals: u64,
    pub opens: u64,
    pub hmacs: u64,
}

#[derive(Serialize)]
struct NodeSummaryRow {
    node: NodeId,
    name: String,
    role: String,
    frames_tx: u64,
    frames_rx: u64,
    frames_lost: u64,
    bytes_tx: u64,
    datagrams_tx: u64,
    seals: u64,
    opens: u64,
    hmacs: u64,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ndjson_round_trip() {
        let trace = Trace {
            records: vec![
                TraceRecord {
                    seq: 0,
                    t_us: 5,
                    kind: Some(EventKind::FrameTx),
                    node: 1,
                    peer: Some(0),
                    msg: Some(Msg::ClientHello),
                    bytes: 127,
                    fragment: Some(0),
                    ..Default::default()
                },
                TraceRecord {
                    seq: 1,
                    t_us: 9,
                    kind: Some(EventKind::AppComplete),
                    node: 0,
                    txn: Some(3),
                    retx: 2,
                    ok: Some(true),
                    ..Default::default()
                },
            ],
        };
        let text = trace.to_ndjson();
        assert_eq!(text.lines().count(), 2);
        assert!(text.contains("\"kind\":\"frame_tx\""));
        assert_eq!(Trace::read_ndjson(text.as_bytes()).unwrap(), trace);
    }

    #[test]
    fn summary_csv_has_a_row_per_node() {
        let topo = Topology::single_hop(0.0);
        let trace = Trace {
            records: vec![TraceRecord {
                kind: Some(EventKind::FrameTx),
                node: 1,
                bytes: 40,
                ..Default::default()
            }],
        };
        let mut out = Vec::new();
        trace.write_summary_csv(&topo, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().next().unwrap().split(',').count(), 11);
        assert!(text.contains("1,S0,sensor,1,0,0,40,0,0,0,0"));
    }

    #[test]
    fn rejects_garbage_lines() {
        assert!(Trace::read_ndjson("{\"seq\":1}\n".as_bytes()).is_err());
        assert!(Trace::read_ndjson("not json\n".as_bytes()).is_err());
    }
}
