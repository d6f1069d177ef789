//! Golden wire images shared by the vector and acceptance tests.
#![allow(dead_code)]

use std::path::PathBuf;

use objsec_core::channel_security::{handshake_in_memory, ChannelConfig, Session};
use objsec_core::codec::overhead::{measure, READING};
use objsec_core::codec::{Direction, SecurityConfig};
use objsec_core::lowpan::{frame_up, AdaptationProfile, Frame, UdpHeader, COAPS_PORT, COAP_PORT};
use objsec_core::secctx::Role;
use serde_json::json;

pub struct Vector {
    pub name: &'static str,
    pub bytes: Vec<u8>,
    pub sidecar: serde_json::Value,
}

pub fn vectors_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/vectors")
}

fn frames(profile: &AdaptationProfile, upper: &[u8]) -> Vec<Frame> {
    frame_up(profile, upper).expect("fits two frames")
}

fn udp(port: u16) -> AdaptationProfile {
    AdaptationProfile::SixLowpanUdp(UdpHeader {
        src: 0x0001,
        dst: 0x0002,
        src_port: port,
        dst_port: port,
    })
}

/// Every golden message, built from the live encoders.
pub fn build() -> Vec<Vector> {
    let get = json!({"kind": "coap", "type": "CON", "code": "0.01 GET", "message_id": 1, "token": "4a21", "uri_path": ["temp"], "payload": ""});
    let content = json!({"kind": "coap", "type": "ACK", "code": "2.05 Content", "message_id": 1, "token": "4a21", "payload": hex(&READING)});
    let interest = json!({"kind": "ndn-interest", "name": "/gw/s0/temp", "nonce": 1, "lifetime_ms": 2000});
    let data = json!({"kind": "ndn-data", "name": "/gw/s0/temp", "content": hex(&READING)});
    let m = |c, d| measure(c, d, &READING);
    let mut out = Vec::new();
    let mut add = |name: &'static str, bytes: Vec<u8>, layer: &str, protection: &str, logical: &serde_json::Value| {
        out.push(Vector {
            sidecar: json!({"name": name, "layer": layer, "protection": protection, "length": bytes.len(), "logical": logical}),
            name,
            bytes,
        });
    };

    let osc_req = m(SecurityConfig::Oscore, Direction::Request);
    let osc_resp = m(SecurityConfig::Oscore, Direction::Response);
    add("coap-get", osc_req.plain.clone(), "coap", "none", &get);
    add("coap-content", osc_resp.plain.clone(), "coap", "none", &content);
    add(
        "oscore-request",
        osc_req.protected,
        "coap",
        "oscore sender 00 recipient 01",
        &get,
    );
    add(
        "oscore-response",
        osc_resp.protected,
        "coap",
        "oscore sender 01 recipient 00",
        &content,
    );
    add(
        "coap-protected-response",
        m(SecurityConfig::CoapProtected, Direction::Response).protected,
        "coap",
        "payload sealed, key id 0002",
        &content,
    );
    add(
        "dtls-request-record",
        m(SecurityConfig::CoapDtls, Direction::Request).protected,
        "dtls-record",
        "epoch 1",
        &get,
    );
    add(
        "dtls-response-record",
        m(SecurityConfig::CoapDtls, Direction::Response).protected,
        "dtls-record",
        "epoch 1",
        &content,
    );
    let ndn = m(SecurityConfig::NdnProtected, Direction::Response);
    add(
        "ndn-interest",
        m(SecurityConfig::NdnProtected, Direction::Request).plain,
        "ndn",
        "none",
        &interest,
    );
    add("ndn-data", ndn.plain.clone(), "ndn", "none", &data);
    add(
        "ndn-data-protected",
        ndn.protected,
        "ndn",
        "aead payload, hmac-sha256 signature, key id 01",
        &data,
    );

    let f = frames(&udp(COAP_PORT), &osc_req.plain);
    add(
        "frame-coap-get",
        f[0].encode(),
        "802.15.4",
        "none",
        &json!({"kind": "frame", "adaptation": "6lowpan+udp", "upper": "coap-get"}),
    );
    let f = frames(&AdaptationProfile::NdnFace { header_cost: 0 }, &ndn.plain);
    add(
        "frame-ndn-data",
        f[0].encode(),
        "802.15.4",
        "none",
        &json!({"kind": "frame", "adaptation": "ndn-face", "upper": "ndn-data"}),
    );

    let mut c = Session::new(Role::Client, *b"golden-vectors!!", ChannelConfig::default(), 1).expect("default sizes");
    let mut s = Session::new(Role::Server, *b"golden-vectors!!", ChannelConfig::default(), 2).expect("default sizes");
    let records = handshake_in_memory(&mut c, &mut s).expect("loss-free");
    let hello = records[0].encode();
    let f = frames(&udp(COAPS_PORT), &hello);
    let logical = json!({"kind": "frame", "adaptation": "6lowpan+udp", "upper": "dtls ClientHello record"});
    add("frame-client-hello-1", f[0].encode(), "802.15.4", "none", &logical);
    add("frame-client-hello-2", f[1].encode(), "802.15.4", "none", &logical);
    out
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn to_hex_dump(bytes: &[u8]) -> String {
    bytes
        .chunks(16)
        .map(|c| c.iter().map(|b| format!("{b:02x}")).collect::<Vec<_>>().join(" ") + "\n")
        .collect()
}

pub fn parse_hex_dump(text: &str) -> Vec<u8> {
    let digits: String = text
        .lines()
        .filter(|l| !l.trim_start().starts_with('#'))
        .flat_map(|l| l.chars().filter(|c| !c.is_whitespace()))
        .collect();
    assert!(digits.len().is_multiple_of(2), "odd number of hex digits");
    (0..digits.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(&digits[i..i + 2], 16).expect("hex digit"))
        .collect()
}
