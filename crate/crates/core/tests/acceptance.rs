//! End-to-end acceptance checks. Runs without the libtest harness and
//! prints one PASS/FAIL line per criterion; exits nonzero if any fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use objsec_core::channel_security::{handshake_in_memory, ChannelConfig, Record, Session, HANDSHAKE_RECORDS};
use objsec_core::codec::overhead::measure;
use objsec_core::codec::{Direction, SecurityConfig};
use objsec_core::experiments::{
    creation_cost_report, overhead_table, run_batch, run_collection, run_deep_sleep, security_matrix, CompletionStats,
    Property, REFERENCE, SECURITY_REFERENCE,
};
use objsec_core::lowpan::{
    bytes_on_air, frame_up, AdaptationProfile, UdpHeader, COAPS_PORT, FRAG1_HEADER_LEN, FRAGN_HEADER_LEN, FRAME_BUDGET,
    MAC_HEADER_LEN, MAX_FRAME_LEN, SIXLOWPAN_UDP_COST,
};
use objsec_core::netsim::{run, Preset, Protocol, Scenario, Topology};
use objsec_core::secctx::Role;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        let holds: bool = $cond;
        if !holds {
            return Err(format!($($msg)+));
        }
    };
}

const COAP_FAMILY: [Protocol; 4] = [
    Protocol::Coap,
    Protocol::CoapProtected,
    Protocol::CoapDtls,
    Protocol::Oscore,
];
const RETRY_SPACING_US: u64 = 2_000_000;

fn scenario(p: Protocol, requests: u32) -> Scenario {
    Scenario {
        requests_per_sensor: requests,
        ..Scenario::for_protocol(p)
    }
}

fn table_reproduction() -> Outcome {
    let start = Instant::now();
    let table = overhead_table();
    let checks = table.check(&REFERENCE);
    let failed: Vec<String> = checks.iter().filter(|c| !c.pass).map(|c| format!("{c:?}")).collect();
    ensure!(failed.is_empty(), "cells off: {}", failed.join("; "));
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(1), "took {elapsed:?}");

    for v in common::build() {
        let path = common::vectors_dir().join(format!("{}.hex", v.name));
        let text = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
        ensure!(
            common::parse_hex_dump(&text) == v.bytes,
            "{} differs from its golden vector",
            v.name
        );
    }
    Ok(format!(
        "{} cells exact, golden vectors bit-identical, {elapsed:?}",
        checks.len()
    ))
}

fn protect_deltas() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xDE17A);
    let expected = [
        (SecurityConfig::Oscore, Direction::Request, 14),
        (SecurityConfig::Oscore, Direction::Response, 11),
        (SecurityConfig::CoapDtls, Direction::Request, 29),
        (SecurityConfig::CoapProtected, Direction::Response, 12),
        (SecurityConfig::CoapDtls, Direction::Response, 29),
    ];
    let rounds = 500;
    for _ in 0..rounds {
        for (config, dir, delta) in expected {
            // An empty plain response has no payload marker, which the
            // sealed payload always needs.
            let min = usize::from(config == SecurityConfig::CoapProtected && dir == Direction::Response);
            let len = rng.gen_range(min..=64);
            let payload: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
            let got = measure(config, dir, &payload).delta();
            ensure!(got == delta, "{config:?} {dir:?} len {len}: {got} != {delta}");
        }
    }
    let text = overhead_table().render_text(&REFERENCE);
    ensure!(
        text.contains("27-byte"),
        "27-vs-29 note missing from the rendered table"
    );
    Ok(format!(
        "{rounds} random payloads per cell; DTLS response 29 holds, 27 flagged"
    ))
}

fn udp() -> AdaptationProfile {
    AdaptationProfile::SixLowpanUdp(UdpHeader {
        src: 1,
        dst: 2,
        src_port: COAPS_PORT,
        dst_port: COAPS_PORT,
    })
}

fn frame_arithmetic() -> Outcome {
    ensure!(MAC_HEADER_LEN == 23, "MAC header {MAC_HEADER_LEN}");
    ensure!(
        MAX_FRAME_LEN - MAC_HEADER_LEN == 104 && FRAME_BUDGET == 104,
        "budget {FRAME_BUDGET}"
    );
    let mut c = Session::new(Role::Client, [3; 16], ChannelConfig::default(), 1).map_err(|e| e.to_string())?;
    let mut s = Session::new(Role::Server, [3; 16], ChannelConfig::default(), 2).map_err(|e| e.to_string())?;
    let records = handshake_in_memory(&mut c, &mut s).map_err(|e| e.to_string())?;
    let hello = |code: u8| -> Result<&Record, String> {
        records
            .iter()
            .find(|r| r.body.first() == Some(&code))
            .ok_or(format!("no handshake message {code}"))
    };
    let mut detail = Vec::new();
    for (label, code) in [("ClientHello", 1), ("ServerHello", 2)] {
        let wire = hello(code)?.encode();
        let frames = frame_up(&udp(), &wire).map_err(|e| e.to_string())?;
        ensure!(frames.len() == 2, "{label}: {} frames", frames.len());
        let datagram = SIXLOWPAN_UDP_COST + wire.len();
        ensure!(datagram > FRAME_BUDGET, "{label} would fit one frame");
        let extra = bytes_on_air(&frames) - (MAC_HEADER_LEN + datagram);
        ensure!(FRAG1_HEADER_LEN + FRAGN_HEADER_LEN == 9, "fragment headers");
        ensure!(extra == 23 + 9, "{label}: fragmentation costs {extra}");
        detail.push(format!("{label} {} B -> 2 frames", wire.len()));
    }
    Ok(format!("{}; +23+9 each", detail.join(", ")))
}

fn handshake_count() -> Outcome {
    let mut c = Session::new(Role::Client, [4; 16], ChannelConfig::default(), 1).map_err(|e| e.to_string())?;
    let mut s = Session::new(Role::Server, [4; 16], ChannelConfig::default(), 2).map_err(|e| e.to_string())?;
    let first = handshake_in_memory(&mut c, &mut s).map_err(|e| e.to_string())?.len();
    c.wipe_session();
    s.wipe_session();
    let again = handshake_in_memory(&mut c, &mut s).map_err(|e| e.to_string())?.len();
    ensure!(
        first == 10 && again == 10 && HANDSHAKE_RECORDS == 10,
        "records {first}/{again}"
    );

    let run = run_deep_sleep(
        Protocol::CoapDtls,
        &Topology::single_hop(0.0),
        &scenario(Protocol::CoapDtls, 100),
        1,
    )
    .map_err(|e| e.to_string())?;
    ensure!(run.wakes.len() == 4, "{} wakes", run.wakes.len());
    let counts: Vec<u64> = run.handshakes_per_sensor.values().copied().collect();
    ensure!(
        !counts.is_empty() && counts.iter().all(|&n| n == 5),
        "handshakes per sensor {counts:?}"
    );
    let summary = &run.collection.output.summary;
    ensure!(
        summary.handshake_records == summary.handshakes * 10,
        "{} records for {} handshakes",
        summary.handshake_records,
        summary.handshakes
    );
    Ok(format!(
        "10 records per establishment, 5 handshakes on each of {} sensors",
        counts.len()
    ))
}

fn pooled(stats: impl Iterator<Item = CompletionStats>) -> Option<CompletionStats> {
    stats.reduce(|mut a, b| {
        a.txns.extend(b.txns);
        a
    })
}

fn delivery_bands() -> Outcome {
    let start = Instant::now();
    let seeds: Vec<u64> = (1..=20).collect();
    let topo = Topology::multi_hop();
    let mut protocols = COAP_FAMILY.to_vec();
    protocols.push(Protocol::NdnProtected);
    let results = run_batch(&protocols, &topo, &scenario(Protocol::Coap, 100), &seeds).map_err(|e| e.to_string())?;
    let of = |p: Protocol| pooled(seeds.iter().map(|s| results[&(p, *s)].clone())).expect("seeds");

    let first = of(Protocol::Coap).first_try_ratio();
    ensure!((0.55..=0.60).contains(&first), "CoAP first try {first:.3}");
    let mut detail = vec![format!("coap first try {first:.3}")];
    for p in COAP_FAMILY {
        let r = of(p).completion_ratio();
        ensure!((0.65..=0.82).contains(&r), "{p} {r:.3} outside [0.65, 0.82]");
        detail.push(format!("{p} {r:.3}"));
    }
    let ndn = of(Protocol::NdnProtected).completion_ratio();
    ensure!(
        (0.89..=1.0).contains(&ndn),
        "ndn-protected {ndn:.3} outside [0.89, 1.0]"
    );
    detail.push(format!("ndn-protected {ndn:.3}"));
    for s in &seeds {
        let n = results[&(Protocol::NdnProtected, *s)].completion_ratio();
        for p in [Protocol::Coap, Protocol::CoapDtls] {
            let c = results[&(p, *s)].completion_ratio();
            ensure!(n > c, "seed {s}: ndn-protected {n:.3} <= {p} {c:.3}");
        }
    }
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(300), "took {elapsed:?}");
    Ok(format!(
        "{}; paired on 20 seeds; {:.1} s",
        detail.join(", "),
        elapsed.as_secs_f64()
    ))
}

fn cdf_shape() -> Outcome {
    let topo = Topology::multi_hop();
    let seeds: Vec<u64> = (1..=20).collect();
    let jitter = Scenario::default().retransmit_jitter_us as i64;
    let mut widest = 0;
    for p in Protocol::ALL {
        let results = run_batch(&[p], &topo, &scenario(p, 100), &seeds).map_err(|e| e.to_string())?;
        let all = pooled(results.into_values()).expect("seeds");
        let steps = all.mass_steps(RETRY_SPACING_US);
        let main: Vec<_> = steps.iter().filter(|m| m.index <= 4).collect();
        ensure!(
            main.len() == 5,
            "{p}: steps {:?}",
            steps.iter().map(|m| m.index).collect::<Vec<_>>()
        );
        let base = main[0];
        // Mass concentrates just after each multiple of the retry interval.
        let near =
            steps.iter().filter(|m| m.index <= 4).map(|m| m.count).sum::<usize>() as f64 / all.completed() as f64;
        ensure!(near >= 0.99, "{p}: only {near:.3} of completions in steps 0..4");
        for m in &main[1..] {
            let k = m.index as i64;
            let drift = m.median_offset_us - base.median_offset_us;
            ensure!(drift.abs() <= jitter * k, "{p} step {k}: drift {drift} us");
            ensure!(m.p01_offset_us >= 0, "{p} step {k}: mass before k x 2 s");
            ensure!(m.spread_us() > base.spread_us(), "{p} step {k} not wider than step 0");
        }
        // End-to-end retries add one jitter draw per attempt.
        if COAP_FAMILY.contains(&p) {
            for w in main.windows(2) {
                ensure!(w[1].spread_us() >= w[0].spread_us(), "{p}: step {} narrows", w[1].index);
            }
        }
        widest = widest.max(main[4].spread_us());
    }

    let mut slowest = 0;
    for p in Protocol::ALL {
        let stats = run_collection(p, &Topology::single_hop(0.0), &scenario(p, 200), 1)
            .map_err(|e| e.to_string())?
            .stats;
        ensure!(
            stats.completion_ratio() == 1.0,
            "{p} single-hop ratio {}",
            stats.completion_ratio()
        );
        let last = stats.cdf().last().map(|pt| pt.t_us).unwrap_or(u64::MAX);
        ensure!(last < 1_000_000, "{p} single-hop CDF reaches 1.0 at {last} us");
        slowest = slowest.max(last);
    }
    Ok(format!(
        "steps at k x 2 s, drift <= 100 ms x k, widest step 4 spread {} ms; single-hop 1.0 by {} ms",
        widest / 1000,
        slowest / 1000
    ))
}

fn creation_costs() -> Outcome {
    let report = |p| creation_cost_report(p).map_err(|e| e.to_string());
    let mut seen = Vec::new();
    for (p, initial, retransmit) in [
        (Protocol::Coap, 0.0, 0.0),
        (Protocol::CoapProtected, 0.0, 0.0),
        (Protocol::Oscore, 1.0, 0.0),
        (Protocol::CoapDtls, 1.0, 1.0),
        (Protocol::Ndn, 0.0, 0.0),
        (Protocol::NdnProtected, 0.0, 0.0),
    ] {
        let r = report(p)?;
        ensure!(r.initial.seals == initial, "{p} initial seals {}", r.initial.seals);
        ensure!(
            r.retransmit.seals == retransmit,
            "{p} retransmit seals {}",
            r.retransmit.seals
        );
        seen.push(format!("{p} {initial}/{retransmit}"));
    }
    let data = report(Protocol::NdnProtected)?.data.ok_or("no data sample")?;
    ensure!(data.seals == 1.0 && data.hmacs == 1.0, "NDN data {data:?}");
    Ok(format!(
        "seals initial/retransmit: {}; NDN data 1 seal + 1 hmac",
        seen.join(", ")
    ))
}

fn security_properties() -> Outcome {
    let m = security_matrix();
    let bad = m.mismatches(&SECURITY_REFERENCE);
    ensure!(bad.is_empty(), "mismatches: {bad:?}");
    let replay = |c| m.get(c, None, Property::ReplayInsensitivity).map(|p| p.holds);
    ensure!(replay(SecurityConfig::Oscore) == Some(true), "OSCORE replay");
    ensure!(replay(SecurityConfig::NdnProtected) == Some(true), "NDN replay");
    ensure!(
        replay(SecurityConfig::CoapProtected) == Some(false),
        "CoAP-Protected replay"
    );
    Ok(format!(
        "{} of {} entries match",
        SECURITY_REFERENCE.len(),
        SECURITY_REFERENCE.len()
    ))
}

fn determinism() -> Outcome {
    let mut runs = 0;
    for preset in Preset::ALL {
        let topo = preset.build();
        for p in Protocol::ALL {
            let sc = scenario(p, 20);
            let a = run(&topo, &sc, 42).map_err(|e| e.to_string())?.trace.to_ndjson();
            let b = run(&topo, &sc, 42).map_err(|e| e.to_string())?.trace.to_ndjson();
            ensure!(a == b, "{p} on {} diverged", preset.name());
            runs += 1;
        }
    }
    Ok(format!("{runs} protocol/preset pairs replay bit-identically"))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        ("table reproduction", table_reproduction),
        ("protect-layer deltas", protect_deltas),
        ("frame arithmetic", frame_arithmetic),
        ("handshake count", handshake_count),
        ("delivery bands", delivery_bands),
        ("cdf shape", cdf_shape),
        ("creation-cost asymmetry", creation_costs),
        ("security-property matrix", security_properties),
        ("determinism", determinism),
    ];
    let mut failures = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            Err(e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("PASS {}. {name}: {detail}", i + 1),
            Err(why) => {
                failures += 1;
                println!("FAIL {}. {name}: {why}", i + 1);
            }
        }
    }
    println!("{} of {} criteria pass", criteria.len() - failures, criteria.len());
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
