use std::collections::{BTreeSet, HashSet};

use objsec_core::codec::coap::option;
use objsec_core::codec::overhead::measure;
use objsec_core::codec::{
    decode_coap, decode_ndn, encode_coap, encode_ndn, security_overhead, CoapMessage, CoapOption, Code, Data,
    DataSecurity, Direction, Interest, MessageType, Name, NdnPacket, SecurityConfig,
};
use objsec_core::lowpan::{
    bytes_on_air, frame_down, frame_sizes, frame_up, AdaptationProfile, ProfileKind, Reassembler, UdpHeader,
    FRAME_BUDGET, MAC_HEADER_LEN, MAX_DATAGRAM_LEN, SIXLOWPAN_UDP_COST,
};
use objsec_core::ndn_stack::{make_protected_data, verify_protected_data};
use objsec_core::object_security::{protect_request, unprotect_request, ProtectedCoap, OUTER_REQUEST_CODE};
use objsec_core::secctx::{
    context_pair, derive_implicit_iv, hmac_sign, hmac_verify, NonceScheme, ReplayWindow, SecurityContext, WINDOW_WIDTH,
};
use proptest::prelude::*;
use proptest::sample::Index;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const PSK: [u8; 16] = *b"property-tests!!";

fn message_type() -> impl Strategy<Value = MessageType> {
    prop_oneof![
        Just(MessageType::Confirmable),
        Just(MessageType::NonConfirmable),
        Just(MessageType::Acknowledgement),
        Just(MessageType::Reset),
    ]
}

fn coap_message() -> impl Strategy<Value = CoapMessage> {
    let opts =
        prop::collection::vec((0u16..2000, prop::collection::vec(any::<u8>(), 0..300)), 0..6).prop_map(|mut v| {
            v.sort_by_key(|o| o.0);
            v.into_iter()
                .map(|(n, val)| CoapOption::new(n, val))
                .collect::<Vec<_>>()
        });
    (
        message_type(),
        any::<u8>(),
        any::<u16>(),
        prop::collection::vec(any::<u8>(), 0..=8),
        opts,
        prop::collection::vec(any::<u8>(), 0..64),
    )
        .prop_map(|(msg_type, code, message_id, token, options, payload)| CoapMessage {
            msg_type,
            code: Code(code),
            message_id,
            token,
            options,
            payload,
        })
}

fn name() -> impl Strategy<Value = Name> {
    prop::collection::vec(prop::collection::vec(any::<u8>(), 0..20), 0..6).prop_map(Name)
}

fn ndn_packet() -> impl Strategy<Value = NdnPacket> {
    let interest = (name(), any::<u32>(), any::<u16>()).prop_map(|(name, nonce, lifetime_ms)| {
        NdnPacket::Interest(Interest {
            name,
            nonce,
            lifetime_ms,
        })
    });
    let security = prop::option::of(
        (any::<u8>(), any::<[u8; 8]>(), any::<[u8; 32]>()).prop_map(|(key_id, mac, signature)| DataSecurity {
            key_id,
            mac,
            signature,
        }),
    );
    let data = (name(), prop::collection::vec(any::<u8>(), 0..300), security).prop_map(|(name, payload, security)| {
        NdnPacket::Data(Data {
            name,
            payload,
            security,
        })
    });
    prop_oneof![interest, data]
}

fn udp() -> AdaptationProfile {
    AdaptationProfile::SixLowpanUdp(UdpHeader {
        src: 1,
        dst: 2,
        src_port: 5683,
        dst_port: 5683,
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn coap_round_trip(msg in coap_message()) {
        let wire = encode_coap(&msg).unwrap();
        prop_assert_eq!(decode_coap(&wire).unwrap(), msg);
    }

    #[test]
    fn ndn_round_trip(pkt in ndn_packet()) {
        let wire = encode_ndn(&pkt);
        prop_assert_eq!(decode_ndn(&wire).unwrap(), pkt);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn request_deltas_hold_for_any_payload(payload in prop::collection::vec(any::<u8>(), 0..=64)) {
        prop_assert_eq!(measure(SecurityConfig::Oscore, Direction::Request, &payload).delta(), 14);
        prop_assert_eq!(measure(SecurityConfig::CoapDtls, Direction::Request, &payload).delta(), 29);
        prop_assert_eq!(measure(SecurityConfig::CoapProtected, Direction::Request, &payload).delta(), 0);
    }

    #[test]
    fn response_deltas_hold_for_any_payload(payload in prop::collection::vec(any::<u8>(), 0..=64)) {
        prop_assert_eq!(measure(SecurityConfig::Oscore, Direction::Response, &payload).delta(), 11);
        prop_assert_eq!(measure(SecurityConfig::CoapDtls, Direction::Response, &payload).delta(), 29);
        prop_assert_eq!(measure(SecurityConfig::NdnProtected, Direction::Response, &payload).delta(), 52);
        // The plain message gains a payload marker only when non-empty.
        let marker = usize::from(payload.is_empty()) as isize;
        prop_assert_eq!(measure(SecurityConfig::CoapProtected, Direction::Response, &payload).delta(), 12 + marker);
    }

    #[test]
    fn breakdown_is_independent_of_payload(payload in prop::collection::vec(any::<u8>(), 1..=64)) {
        for config in SecurityConfig::ALL {
            for dir in Direction::BOTH {
                let m = measure(config, dir, &payload);
                prop_assert_eq!(m.breakdown, security_overhead(config, dir));
                prop_assert_eq!(m.breakdown.total() as isize, m.delta());
            }
        }
    }

    #[test]
    fn aead_round_trip_and_tamper_detection(
        plaintext in prop::collection::vec(any::<u8>(), 0..80),
        aad in prop::collection::vec(any::<u8>(), 0..16),
        flip in any::<Index>(),
        bit in 0u8..8,
    ) {
        let name = b"\x07\x05\x08\x03temp".to_vec();
        let schemes = [
            NonceScheme::TwoByteExplicit,
            NonceScheme::EpochSeq8 { epoch: 1 },
            NonceScheme::PartialIv,
            NonceScheme::NameHash(&name),
        ];
        for scheme in schemes {
            let (mut a, mut b) = context_pair(PSK, &[1], &[2], b"", b"/temp").unwrap();
            let sealed = a.seal(&aad, &plaintext, scheme).unwrap();
            prop_assert_eq!(sealed.ciphertext.len(), plaintext.len());
            let mut tampered = sealed.clone();
            let mut bad_aad = aad.clone();
            if plaintext.is_empty() {
                tampered.tag[flip.index(8)] ^= 1 << bit;
            } else {
                tampered.ciphertext[flip.index(plaintext.len())] ^= 1 << bit;
            }
            prop_assert!(b.open(&aad, &tampered, scheme).is_err());
            if !aad.is_empty() {
                bad_aad[flip.index(aad.len())] ^= 1 << bit;
                prop_assert!(b.open(&bad_aad, &sealed, scheme).is_err());
            }
            prop_assert_eq!(b.open(&aad, &sealed, scheme).unwrap(), plaintext.clone());
        }
    }

    #[test]
    fn hmac_detects_any_bit_flip(msg in prop::collection::vec(any::<u8>(), 1..100), flip in any::<Index>(), bit in 0u8..8) {
        let sig = hmac_sign(&PSK, &msg);
        prop_assert_eq!(sig.len(), 32);
        prop_assert!(hmac_verify(&PSK, &msg, &sig));
        let mut m = msg.clone();
        let i = flip.index(m.len());
        m[i] ^= 1 << bit;
        prop_assert!(!hmac_verify(&PSK, &m, &sig));
        let mut s = sig;
        s[flip.index(32)] ^= 1 << bit;
        prop_assert!(!hmac_verify(&PSK, &msg, &s));
    }

    #[test]
    fn oscore_outer_hides_request_details(
        path in "[a-z]{1,8}(/[a-z]{1,8}){0,2}",
        payload in prop::collection::vec(any::<u8>(), 0..32),
        seq in 0u32..256,
    ) {
        let (mut gw, mut sensor) = context_pair(PSK, &[0], &[1], b"", b"").unwrap();
        gw.set_send_seq(seq);
        let mut req = CoapMessage::get(7, &[1, 2], &path);
        req.payload = payload;
        let p = protect_request(&mut gw, &req).unwrap();
        prop_assert_eq!(p.outer.code, OUTER_REQUEST_CODE);
        prop_assert!(p.outer.option(option::URI_PATH).is_none());
        prop_assert_eq!(p.encode().unwrap().len(), encode_coap(&req).unwrap().len() + 14);

        // A hop may rewrite outer transport fields without breaking the seal.
        let mut outer = p.outer.clone();
        outer.message_id = 0xBEEF;
        outer.msg_type = MessageType::NonConfirmable;
        let (inner, _) = unprotect_request(&mut sensor, &ProtectedCoap::received(outer.clone())).unwrap();
        prop_assert_eq!(inner.options, req.options);
        prop_assert_eq!(inner.payload, req.payload);

        let mut inner_changed = outer;
        let last = inner_changed.payload.len() - 1;
        inner_changed.payload[last] ^= 1;
        let (_, mut fresh) = context_pair(PSK, &[0], &[1], b"", b"").unwrap();
        prop_assert!(unprotect_request(&mut fresh, &ProtectedCoap::received(inner_changed)).is_err());
    }

    #[test]
    fn protected_data_is_deterministic(payload in prop::collection::vec(any::<u8>(), 0..48), n in "[a-z]{1,6}") {
        let (mut gw, mut sensor) = context_pair(PSK, &[0], &[1], b"", b"").unwrap();
        let nm = Name::default().with("gw").with(n.as_bytes());
        let a = make_protected_data(&mut sensor, nm.clone(), &payload).unwrap();
        let b = make_protected_data(&mut sensor, nm, &payload).unwrap();
        prop_assert_eq!(encode_ndn(&a), encode_ndn(&b));
        // Replays of immutable Data keep verifying.
        for _ in 0..3 {
            prop_assert_eq!(verify_protected_data(&mut gw, &a).unwrap(), payload.clone());
        }
    }

    #[test]
    fn frames_respect_the_budget(len in 0usize..=MAX_DATAGRAM_LEN - SIXLOWPAN_UDP_COST, fill in any::<u8>()) {
        let upper = vec![fill; len];
        let frames = frame_up(&udp(), &upper).unwrap();
        let d = SIXLOWPAN_UDP_COST + len;
        prop_assert_eq!(frames.len() == 1, d <= FRAME_BUDGET);
        prop_assert!(frames.iter().all(|f| f.len() <= 127));
        prop_assert_eq!(frames.iter().map(|f| f.encode().len()).collect::<Vec<_>>(), frame_sizes(SIXLOWPAN_UDP_COST, len).unwrap());
        if frames.len() == 2 {
            prop_assert_eq!(bytes_on_air(&frames), MAC_HEADER_LEN + d + MAC_HEADER_LEN + 9);
        } else {
            prop_assert_eq!(bytes_on_air(&frames), MAC_HEADER_LEN + d);
        }
        prop_assert_eq!(frame_down(ProfileKind::SixLowpanUdp, &frames).unwrap().upper, upper.clone());

        // Reassembly does not depend on arrival order.
        let mut fwd = Reassembler::new(2_000_000);
        let mut rev = Reassembler::new(2_000_000);
        let a: Vec<_> = frames.iter().filter_map(|f| fwd.push(f.clone(), 0).unwrap()).collect();
        let b: Vec<_> = frames.iter().rev().filter_map(|f| rev.push(f.clone(), 0).unwrap()).collect();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.len(), 1);
    }

    #[test]
    fn oversized_datagrams_are_refused(extra in 1usize..100) {
        let len = MAX_DATAGRAM_LEN - SIXLOWPAN_UDP_COST + extra;
        prop_assert!(frame_up(&udp(), &vec![0; len]).is_err());
    }
}

/// Brute-force reference: a sequence number is fresh if never accepted and
/// not more than the window width below the highest accepted.
#[derive(Default)]
struct WindowOracle {
    seen: BTreeSet<u64>,
}

impl WindowOracle {
    fn check_and_accept(&mut self, seq: u64) -> bool {
        let highest = self.seen.last().copied();
        let fresh = !self.seen.contains(&seq) && highest.is_none_or(|h| seq + WINDOW_WIDTH > h);
        if fresh {
            self.seen.insert(seq);
        }
        fresh
    }
}

#[test]
fn replay_window_matches_set_oracle_on_permutations() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for round in 0..200 {
        let mut seqs: Vec<u64> = (0..1000).collect();
        // Mostly-local shuffles keep a realistic share inside the window.
        if round % 2 == 0 {
            seqs.shuffle(&mut rng);
        } else {
            for i in 0..seqs.len() {
                let j = (i + rng.gen_range(0..40)).min(seqs.len() - 1);
                seqs.swap(i, j);
            }
        }
        // Duplicates exercise the at-most-once rule.
        for _ in 0..200 {
            let i = rng.gen_range(0..seqs.len());
            seqs.insert(rng.gen_range(0..seqs.len()), seqs[i]);
        }
        let mut w = ReplayWindow::new();
        let mut o = WindowOracle::default();
        let mut accepted = HashSet::new();
        for s in seqs {
            let got = w.check_and_accept(s);
            assert_eq!(got, o.check_and_accept(s), "round {round} seq {s}");
            if got {
                assert!(accepted.insert(s), "seq {s} accepted twice");
            }
        }
    }
}

#[test]
fn implicit_iv_has_no_collisions_over_random_uris() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut uris = HashSet::new();
    let mut ivs = HashSet::new();
    while uris.len() < 10_000 {
        let len = rng.gen_range(1..24);
        let uri: Vec<u8> = (0..len).map(|_| rng.gen_range(b'!'..=b'~')).collect();
        if uris.insert(uri.clone()) {
            assert!(ivs.insert(derive_implicit_iv(b"salt", &uri)), "collision at {uri:?}");
        }
    }
    assert_eq!(derive_implicit_iv(b"s", b"/a"), derive_implicit_iv(b"s", b"/a"));
    let _ = derive_implicit_iv(b"s", b"");
}

#[test]
fn nonces_are_never_reused_across_a_context_lifetime() {
    let (gw, _) = context_pair(PSK, &[0], &[1], b"", b"").unwrap();
    let mut gw: SecurityContext = gw.with_nonce_audit();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut n = 0;
    for i in 0..2000u32 {
        let mut req = CoapMessage::get(i as u16, &[1], "/temp");
        req.payload = vec![rng.gen(); rng.gen_range(0..20)];
        protect_request(&mut gw, &req).unwrap();
        gw.seal(b"", &req.payload, NonceScheme::TwoByteExplicit).unwrap();
        n += 2;
    }
    assert_eq!(gw.nonces_used(), Some(n));
}
