//! Entry points shared by the cargo-fuzz targets and the corpus replay
//! test. Each accepts arbitrary bytes and panics only on a real bug.

use crate::channel_security::{ChannelConfig, Record, Session};
use crate::coap_protected::unprotect_payload;
use crate::codec::{decode_coap, decode_ndn, encode_coap, encode_ndn};
use crate::lowpan::{parse_datagram, Frame, ProfileKind, Reassembler};
use crate::netsim::endpoint::RESOURCE;
use crate::netsim::{SimConfig, Trace};
use crate::object_security::{unprotect_request, unprotect_response, ProtectedCoap, RequestBinding};
use crate::secctx::{context_pair, Role, SealedPayload};

/// Key shared by every context the targets build; corpus seeds use it too.
pub const PSK: [u8; 16] = [7; 16];

/// Names of all targets, matching the binaries under `fuzz/`.
pub const TARGETS: [&str; 9] = [
    "coap_decode",
    "ndn_decode",
    "dtls_record",
    "oscore_message",
    "payload_unprotect",
    "lowpan_frame",
    "sealed_payload",
    "config_toml",
    "trace_ndjson",
];

/// Runs the named target; `false` for an unknown name.
pub fn run(target: &str, data: &[u8]) -> bool {
    match target {
        "coap_decode" => coap_decode(data),
        "ndn_decode" => ndn_decode(data),
        "dtls_record" => dtls_record(data),
        "oscore_message" => oscore_message(data),
        "payload_unprotect" => payload_unprotect(data),
        "lowpan_frame" => lowpan_frame(data),
        "sealed_payload" => sealed_payload(data),
        "config_toml" => config_toml(data),
        "trace_ndjson" => trace_ndjson(data),
        _ => return false,
    }
    true
}

/// A decoded message re-encodes to something that decodes to the same
/// message.
pub fn coap_decode(data: &[u8]) {
    if let Ok(msg) = decode_coap(data) {
        let wire = encode_coap(&msg).expect("decoded message re-encodes");
        assert_eq!(decode_coap(&wire).expect("re-encoding decodes"), msg);
    }
}

pub fn ndn_decode(data: &[u8]) {
    if let Ok(pkt) = decode_ndn(data) {
        let wire = encode_ndn(&pkt);
        assert_eq!(decode_ndn(&wire).expect("re-encoding decodes"), pkt);
    }
}

/// Decodes a record and feeds it to fresh endpoints of both roles.
pub fn dtls_record(data: &[u8]) {
    let Ok(rec) = Record::decode(data) else { return };
    assert_eq!(Record::decode(&rec.encode()).expect("re-encoding decodes"), rec);
    for (role, seed) in [(Role::Server, 1), (Role::Client, 2)] {
        let mut s = Session::new(role, PSK, ChannelConfig::default(), seed).expect("default config");
        if role == Role::Client {
            let _ = s.handshake_step(None);
        }
        let _ = s.on_handshake_record(&rec);
        let _ = s.unprotect_record(&rec);
    }
}

/// Treats the input as a CoAP message carrying OSCORE protection.
pub fn oscore_message(data: &[u8]) {
    let Ok(msg) = decode_coap(data) else { return };
    let (mut client, mut server) = context_pair(PSK, &[0], &[1], b"", b"").expect("valid ids");
    let _ = unprotect_request(&mut server, &ProtectedCoap::received(msg.clone()));
    let binding = RequestBinding {
        partial_iv: vec![0],
        key_id: vec![0],
    };
    let _ = unprotect_response(&mut client, &binding, &ProtectedCoap::received(msg));
}

pub fn payload_unprotect(data: &[u8]) {
    let (mut gw, _) = context_pair(PSK, &[0xFF, 0], &[0, 1], b"", RESOURCE.as_bytes()).expect("valid ids");
    let _ = unprotect_payload(&mut gw, data);
}

/// Decodes a frame and pushes it through datagram parsing and reassembly.
pub fn lowpan_frame(data: &[u8]) {
    let Ok(frame) = Frame::decode(data) else { return };
    assert_eq!(Frame::decode(&frame.encode()).expect("re-encoding decodes"), frame);
    let mut r = Reassembler::new(1_000);
    if let Ok(Some(d)) = r.push(frame.clone(), 0) {
        let _ = parse_datagram(ProfileKind::SixLowpanUdp, &d);
        let _ = parse_datagram(ProfileKind::NdnFace { header_cost: 0 }, &d);
    }
    let _ = r.push(frame, 10);
    r.expire(5_000);
    assert_eq!(r.pending(), 0);
}

pub fn sealed_payload(data: &[u8]) {
    let Some((&n, rest)) = data.split_first() else { return };
    if let Some(p) = SealedPayload::from_bytes(rest, (n % 16) as usize) {
        assert_eq!(p.to_bytes(), rest);
    }
}

pub fn config_toml(data: &[u8]) {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = SimConfig::from_toml(text) {
        let text = cfg.to_toml();
        let again = SimConfig::from_toml(&text).expect("serialized config parses");
        assert_eq!(again.to_toml(), text);
    }
}

pub fn trace_ndjson(data: &[u8]) {
    if let Ok(trace) = Trace::read_ndjson(data) {
        let again = Trace::read_ndjson(trace.to_ndjson().as_bytes()).expect("written trace reads");
        assert_eq!(again, trace);
    }
}
