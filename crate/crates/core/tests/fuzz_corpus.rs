//! Replays the checked-in fuzz corpus through the shared entry points, so
//! every seed is exercised by a normal test run.

use std::path::PathBuf;

use objsec_core::channel_security::{handshake_in_memory, ChannelConfig, Session};
use objsec_core::coap_protected::protect_payload;
use objsec_core::codec::{encode_coap, encode_ndn, CoapMessage, Interest, Name, NdnPacket};
use objsec_core::fuzz_targets::{self, PSK, TARGETS};
use objsec_core::lowpan::{frame_up, AdaptationProfile, UdpHeader, COAP_PORT};
use objsec_core::ndn_stack::make_protected_data;
use objsec_core::netsim::endpoint::RESOURCE;
use objsec_core::netsim::{run, Protocol, Scenario, SimConfig, Topology};
use objsec_core::object_security::protect_request;
use objsec_core::secctx::{context_pair, NonceScheme, Role};

fn corpus_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus")
}

#[test]
fn every_target_has_seeds_and_they_run_clean() {
    for target in TARGETS {
        let dir = corpus_root().join(target);
        let files: Vec<_> = std::fs::read_dir(&dir)
            .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
            .map(|e| e.unwrap().path())
            .collect();
        assert!(!files.is_empty(), "{target} has no seeds");
        for f in files {
            let data = std::fs::read(&f).unwrap();
            assert!(fuzz_targets::run(target, &data));
            // Truncations and bit flips of real inputs must not panic either.
            for cut in 0..data.len().min(64) {
                fuzz_targets::run(target, &data[..cut]);
            }
            for i in 0..data.len().min(64) {
                let mut d = data.clone();
                d[i] ^= 0x5A;
                fuzz_targets::run(target, &d);
            }
        }
    }
}

#[test]
fn unknown_target_is_rejected() {
    assert!(!fuzz_targets::run("nope", b""));
}

#[test]
fn targets_match_fuzz_binaries() {
    let bins = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/fuzz_targets");
    for target in TARGETS {
        assert!(bins.join(format!("{target}.rs")).exists(), "{target}");
    }
}

fn seeds() -> Vec<(&'static str, String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut add = |t: &'static str, name: &str, bytes: Vec<u8>| out.push((t, name.to_string(), bytes));

    let req = CoapMessage::get(0x0101, &[0x11, 0x22], RESOURCE);
    let resp = CoapMessage::content_response(&req, b"21.5");
    add("coap_decode", "get", encode_coap(&req).unwrap());
    add("coap_decode", "content", encode_coap(&resp).unwrap());

    let name = Name::default().with("sensor").with("1").with("temp");
    let interest = NdnPacket::Interest(Interest {
        name: name.clone(),
        nonce: 0xA1B2C3D4,
        lifetime_ms: 2000,
    });
    add("ndn_decode", "interest", encode_ndn(&interest));
    let (gw, mut sensor) = context_pair(PSK, &[0x00], &[0x01], b"", b"").unwrap();
    let data = make_protected_data(&mut sensor, name, b"21.5").unwrap();
    add("ndn_decode", "protected-data", encode_ndn(&data));

    let mut c = Session::new(Role::Client, PSK, ChannelConfig::default(), 1).unwrap();
    let mut s = Session::new(Role::Server, PSK, ChannelConfig::default(), 2).unwrap();
    for (i, rec) in handshake_in_memory(&mut c, &mut s).unwrap().iter().enumerate() {
        add("dtls_record", &format!("handshake-{i}"), rec.encode());
    }
    add(
        "dtls_record",
        "app-data",
        c.protect_record(&encode_coap(&req).unwrap()).unwrap().encode(),
    );

    let mut client = gw;
    let protected = protect_request(&mut client, &req).unwrap();
    add("oscore_message", "request", protected.encode().unwrap());

    let (_, mut s) = context_pair(PSK, &[0xFF, 0], &[0, 1], b"", RESOURCE.as_bytes()).unwrap();
    add(
        "payload_unprotect",
        "reading",
        protect_payload(&mut s, b"21.5").unwrap(),
    );

    let udp = AdaptationProfile::SixLowpanUdp(UdpHeader {
        src: 0,
        dst: 1,
        src_port: COAP_PORT,
        dst_port: COAP_PORT,
    });
    for (i, f) in frame_up(&udp, &encode_coap(&req).unwrap()).unwrap().iter().enumerate() {
        add("lowpan_frame", &format!("udp-{i}"), f.encode());
    }
    for (i, f) in frame_up(&udp, &[0xAB; 150]).unwrap().iter().enumerate() {
        add("lowpan_frame", &format!("udp-frag-{i}"), f.encode());
    }
    let ndn = AdaptationProfile::NdnFace { header_cost: 0 };
    for (i, f) in frame_up(&ndn, &encode_ndn(&data)).unwrap().iter().enumerate() {
        add("lowpan_frame", &format!("ndn-{i}"), f.encode());
    }

    let (mut a, _) = context_pair(PSK, &[0x00], &[0x01], b"", b"").unwrap();
    let sealed = a.seal(b"aad", b"21.5", NonceScheme::TwoByteExplicit).unwrap();
    let mut seed = vec![2];
    seed.extend(sealed.to_bytes());
    add("sealed_payload", "two-byte", seed);

    add("config_toml", "default", SimConfig::default().to_toml().into_bytes());
    let mut multi = SimConfig::default();
    multi.topology.preset = Some(objsec_core::netsim::Preset::MultiHop);
    multi.scenario = Scenario::for_protocol(Protocol::CoapDtls);
    add("config_toml", "multi-hop-dtls", multi.to_toml().into_bytes());

    let mut sc = Scenario::for_protocol(Protocol::Oscore);
    sc.requests_per_sensor = 1;
    let trace = run(&Topology::single_hop(0.0), &sc, 1).unwrap().trace;
    let text = trace.to_ndjson();
    let head: String = text.lines().take(12).map(|l| format!("{l}\n")).collect();
    add("trace_ndjson", "oscore-head", head.into_bytes());
    out
}

/// Rewrites the corpus seeds from current encodings.
#[test]
#[ignore = "writes into the fuzz corpus"]
fn regenerate_corpus() {
    for (target, name, bytes) in seeds() {
        let dir = corpus_root().join(target);
        std::fs::create_dir_all(&dir).unwrap();
        std::fs::write(dir.join(name), bytes).unwrap();
    }
}

#[test]
fn generated_seeds_run_clean() {
    for (target, _, bytes) in seeds() {
        assert!(fuzz_targets::run(target, &bytes));
    }
}

proptest::proptest! {
    #![proptest_config(proptest::prelude::ProptestConfig::with_cases(512))]

    #[test]
    fn arbitrary_bytes_never_panic(data in proptest::collection::vec(proptest::prelude::any::<u8>(), 0..256)) {
        for target in TARGETS {
            fuzz_targets::run(target, &data);
        }
    }

    #[test]
    fn mutated_seeds_never_panic(pick in 0usize..64, pos in 0usize..512, byte in proptest::prelude::any::<u8>(), cut in 0usize..512) {
        let all = seeds();
        let (target, _, mut data) = all[pick % all.len()].clone();
        if !data.is_empty() {
            let i = pos % data.len();
            data[i] = byte;
            data.truncate(data.len() - cut % data.len());
        }
        fuzz_targets::run(target, &data);
    }
}
