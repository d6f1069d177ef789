//! Cryptographic work spent creating requests, first and retransmitted.

use serde::{Deserialize, Serialize};

use crate::channel_security::{handshake_in_memory, ChannelConfig, Session};
use crate::codec::{encode_ndn, CoapMessage, Interest, Name, NdnPacket};
use crate::ndn_stack::make_protected_data;
use crate::netsim::endpoint::{create_request, retransmit_request, ClientSecurity, RESOURCE};
use crate::netsim::{EventKind, Msg, Protocol, SimError, Trace};
use crate::object_security::BindingTable;
use crate::secctx::{context_pair, OpCounts, Role};

const PSK: [u8; 16] = *b"creation-costs!!";

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OpSample {
    pub seals: f64,
    pub hmacs: f64,
    /// Bytes of the created message.
    pub bytes: f64,
}

impl OpSample {
    fn of(ops: OpCounts, bytes: usize) -> OpSample {
        OpSample {
            seals: ops.seals as f64,
            hmacs: (ops.hmac_signs + ops.hmac_verifies) as f64,
            bytes: bytes as f64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CreationCost {
    pub protocol: Protocol,
    pub initial: OpSample,
    pub retransmit: OpSample,
    /// Producing the response object, for NDN where it is cached and
    /// served unchanged.
    pub data: Option<OpSample>,
}

fn stack(e: impl std::fmt::Display) -> SimError {
    SimError::Stack(e.to_string())
}

/// Counts the operations of one initial request and one retransmission of
/// it, using the same code paths as the simulator.
pub fn creation_cost_report(protocol: Protocol) -> Result<CreationCost, SimError> {
    let req = CoapMessage::get(0x0101, &[0x11, 0x22], RESOURCE);
    let (gw, _) = context_pair(PSK, &[0x00], &[0x01], b"", b"").map_err(stack)?;
    let mut gw = gw;
    let (initial, retransmit, data) = match protocol {
        Protocol::Coap | Protocol::CoapProtected => {
            let before = gw.ops();
            let sec = if protocol == Protocol::Coap {
                ClientSecurity::Plain
            } else {
                ClientSecurity::Payload(&mut gw)
            };
            let (buf, wire) = create_request(sec, &req).map_err(stack)?;
            let wire = wire.expect("sent immediately");
            let initial = OpSample::of(gw.ops().since(before), wire.len());
            let before = gw.ops();
            let again = retransmit_request(&buf, None).map_err(stack)?.expect("buffered");
            (initial, OpSample::of(gw.ops().since(before), again.len()), None)
        }
        Protocol::Oscore => {
            let mut bindings = BindingTable::new();
            let before = gw.ops();
            let (buf, wire) = create_request(
                ClientSecurity::Oscore {
                    ctx: &mut gw,
                    bindings: &mut bindings,
                },
                &req,
            )
            .map_err(stack)?;
            let wire = wire.expect("sent immediately");
            let initial = OpSample::of(gw.ops().since(before), wire.len());
            let before = gw.ops();
            let again = retransmit_request(&buf, None).map_err(stack)?.expect("buffered");
            (initial, OpSample::of(gw.ops().since(before), again.len()), None)
        }
        Protocol::CoapDtls => {
            let cfg = ChannelConfig::default();
            let mut client = Session::new(Role::Client, PSK, cfg, 1).map_err(stack)?;
            let mut server = Session::new(Role::Server, PSK, cfg, 2).map_err(stack)?;
            handshake_in_memory(&mut client, &mut server).map_err(stack)?;
            let before = client.ops();
            let (buf, wire) = create_request(ClientSecurity::Channel(&mut client), &req).map_err(stack)?;
            let wire = wire.expect("session established");
            let initial = OpSample::of(client.ops().since(before), wire.len());
            let before = client.ops();
            let again = retransmit_request(&buf, Some(&mut client))
                .map_err(stack)?
                .expect("established");
            (initial, OpSample::of(client.ops().since(before), again.len()), None)
        }
        Protocol::Ndn | Protocol::NdnProtected => {
            let name: Name = "/gw/s0/temp/0001".parse().map_err(stack)?;
            let interest = encode_ndn(&NdnPacket::Interest(Interest {
                name: name.clone(),
                nonce: 7,
                lifetime_ms: 2000,
            }));
            // Interests carry no protection; a retry re-sends the pending one.
            let none = OpSample::of(OpCounts::default(), interest.len());
            let data = if protocol == Protocol::NdnProtected {
                let (_, mut sensor) = context_pair(PSK, &[0x00], &[0x01], b"", b"").map_err(stack)?;
                let before = sensor.ops();
                let pkt = make_protected_data(&mut sensor, name, &[0x00, 0x17]).map_err(stack)?;
                OpSample::of(sensor.ops().since(before), encode_ndn(&pkt).len())
            } else {
                let pkt = NdnPacket::Data(crate::codec::Data {
                    name,
                    payload: vec![0x00, 0x17],
                    security: None,
                });
                OpSample::of(OpCounts::default(), encode_ndn(&pkt).len())
            };
            (none, none, Some(data))
        }
    };
    Ok(CreationCost {
        protocol,
        initial,
        retransmit,
        data,
    })
}

/// Average seals and HMACs per request datagram sent by `gateway`, split
/// into first transmissions and retransmissions. `None` where a class
/// has no samples.
pub fn creation_ops_from_trace(trace: &Trace, gateway: u16) -> (Option<OpSample>, Option<OpSample>) {
    let mut acc = [(0u64, 0u64, 0u64, 0u64); 2];
    for r in trace.of_kind(EventKind::DatagramTx) {
        if r.node != gateway || !matches!(r.msg, Some(Msg::Request) | Some(Msg::Interest)) {
            continue;
        }
        let a = &mut acc[usize::from(r.retx > 0)];
        a.0 += 1;
        a.1 += r.seals;
        a.2 += r.hmacs;
        a.3 += r.bytes;
    }
    let avg = |(n, s, h, b): (u64, u64, u64, u64)| {
        (n > 0).then(|| OpSample {
            seals: s as f64 / n as f64,
            hmacs: h as f64 / n as f64,
            bytes: b as f64 / n as f64,
        })
    };
    (avg(acc[0]), avg(acc[1]))
}
