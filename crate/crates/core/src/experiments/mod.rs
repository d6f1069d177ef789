//! Scenario drivers and metrics: completion statistics and CDFs,
//! deep-sleep runs, request creation costs, the overhead table and the
//! security-property matrix.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::netsim::{self, EventKind, NodeId, Preset, Protocol, RunOutput, Scenario, SimError, Topology, Trace};
use crate::secctx::sha256;

mod creation;
pub mod figures;
mod matrix;
mod table;

pub use creation::{creation_cost_report, creation_ops_from_trace, CreationCost, OpSample};
pub use matrix::{
    security_matrix, Property, PropertyCheck, ReferenceProperty, SecurityMatrix, Support, SECURITY_REFERENCE,
};
pub use table::{overhead_table, CellCheck, OverheadRow, OverheadTable, PacketTotal, ReferenceCell, FIELDS, REFERENCE};

/// Outcome of one transaction as seen by the gateway.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TxnStat {
    pub txn: u64,
    pub sensor: NodeId,
    pub issued_us: u64,
    pub done_us: u64,
    pub ok: bool,
    pub retx: u8,
}

impl TxnStat {
    pub fn completion_us(&self) -> u64 {
        self.done_us - self.issued_us
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub protocol: Protocol,
    pub topology: String,
    pub seed: u64,
    pub requests_per_sensor: u32,
    /// Hex digest of the topology and scenario that produced the run.
    pub config_digest: String,
}

/// A point of the completion-time CDF: the fraction of all issued
/// requests that completed within `t_us`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CdfPoint {
    pub t_us: u64,
    pub fraction: f64,
}

/// Successful completions that needed exactly `retx` retransmissions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Step {
    pub retx: u8,
    pub count: usize,
    pub median_us: u64,
    /// Distance between the 5th and 95th percentile.
    pub spread_us: u64,
}

/// Successful completions whose time is nearest to `index` retry
/// intervals. Offsets are measured from `index * spacing`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MassStep {
    pub index: u64,
    pub count: usize,
    pub median_offset_us: i64,
    pub p01_offset_us: i64,
    pub p99_offset_us: i64,
}

impl MassStep {
    /// Width of the central 98% of the step.
    pub fn spread_us(&self) -> u64 {
        (self.p99_offset_us - self.p01_offset_us) as u64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompletionStats {
    pub meta: RunMeta,
    pub txns: Vec<TxnStat>,
}

impl CompletionStats {
    pub fn from_trace(meta: RunMeta, trace: &Trace) -> CompletionStats {
        let mut open: HashMap<u64, (NodeId, u64)> = HashMap::new();
        let mut txns = Vec::new();
        for r in trace.iter() {
            match r.kind() {
                EventKind::AppRequest => {
                    if let (Some(id), Some(peer)) = (r.txn, r.peer) {
                        open.insert(id, (peer, r.t_us));
                    }
                }
                EventKind::AppComplete => {
                    let Some(id) = r.txn else { continue };
                    if let Some((sensor, issued_us)) = open.remove(&id) {
                        txns.push(TxnStat {
                            txn: id,
                            sensor,
                            issued_us,
                            done_us: r.t_us,
                            ok: r.ok == Some(true),
                            retx: r.retx,
                        });
                    }
                }
                _ => {}
            }
        }
        txns.sort_by_key(|t| t.txn);
        CompletionStats { meta, txns }
    }

    pub fn requests(&self) -> usize {
        self.txns.len()
    }

    pub fn completed(&self) -> usize {
        self.txns.iter().filter(|t| t.ok).count()
    }

    /// Completed over issued; 0 for an empty run.
    pub fn completion_ratio(&self) -> f64 {
        ratio(self.completed(), self.requests())
    }

    pub fn first_try_ratio(&self) -> f64 {
        ratio(
            self.txns.iter().filter(|t| t.ok && t.retx == 0).count(),
            self.requests(),
        )
    }

    pub fn completion_times(&self) -> Vec<u64> {
        let mut v: Vec<u64> = self.txns.iter().filter(|t| t.ok).map(TxnStat::completion_us).collect();
        v.sort_unstable();
        v
    }

    pub fn median_completion_us(&self) -> Option<u64> {
        let v = self.completion_times();
        (!v.is_empty()).then(|| v[v.len() / 2])
    }

    /// Step function over successful completions, one point per distinct
    /// completion time. Ends at the completion ratio.
    pub fn cdf(&self) -> Vec<CdfPoint> {
        let n = self.requests();
        let mut out: Vec<CdfPoint> = Vec::new();
        for (i, t) in self.completion_times().into_iter().enumerate() {
            let fraction = (i + 1) as f64 / n as f64;
            match out.last_mut() {
                Some(p) if p.t_us == t => p.fraction = fraction,
                _ => out.push(CdfPoint { t_us: t, fraction }),
            }
        }
        out
    }

    /// Completion mass grouped by retransmission count.
    pub fn steps(&self) -> Vec<Step> {
        let mut by: BTreeMap<u8, Vec<u64>> = BTreeMap::new();
        for t in self.txns.iter().filter(|t| t.ok) {
            by.entry(t.retx).or_default().push(t.completion_us());
        }
        by.into_iter()
            .map(|(retx, mut v)| {
                v.sort_unstable();
                let q = |f: f64| v[((v.len() - 1) as f64 * f).round() as usize];
                Step {
                    retx,
                    count: v.len(),
                    median_us: q(0.5),
                    spread_us: q(0.95) - q(0.05),
                }
            })
            .collect()
    }

    /// Completion mass grouped by the nearest multiple of `spacing_us`.
    /// Unlike [`steps`](Self::steps) this needs no retransmission count, so
    /// it also captures recovery performed inside the network.
    pub fn mass_steps(&self, spacing_us: u64) -> Vec<MassStep> {
        assert!(spacing_us > 0, "spacing must be positive");
        let mut by: BTreeMap<u64, Vec<u64>> = BTreeMap::new();
        for t in self.completion_times() {
            by.entry((t + spacing_us / 2) / spacing_us).or_default().push(t);
        }
        by.into_iter()
            .map(|(index, v)| {
                let base = (index * spacing_us) as i64;
                let q = |f: f64| v[((v.len() - 1) as f64 * f).round() as usize] as i64 - base;
                MassStep {
                    index,
                    count: v.len(),
                    median_offset_us: q(0.5),
                    p01_offset_us: q(0.01),
                    p99_offset_us: q(0.99),
                }
            })
            .collect()
    }

    /// Writes `<stem>.txns.csv`, `<stem>.cdf.csv` and `<stem>.summary.json`
    /// into `dir` and returns their paths.
    pub fn export(&self, dir: &Path, stem: &str) -> Result<Vec<PathBuf>, SimError> {
        fs::create_dir_all(dir).map_err(io)?;
        let txns = dir.join(format!("{stem}.txns.csv"));
        let mut w = csv::Writer::from_path(&txns).map_err(io)?;
        for t in &self.txns {
            w.serialize(t).map_err(io)?;
        }
        w.flush().map_err(io)?;

        let cdf = dir.join(format!("{stem}.cdf.csv"));
        let mut w = csv::Writer::from_path(&cdf).map_err(io)?;
        for p in self.cdf() {
            w.serialize(p).map_err(io)?;
        }
        w.flush().map_err(io)?;

        let summary = dir.join(format!("{stem}.summary.json"));
        let s = Summary {
            meta: self.meta.clone(),
            requests: self.requests(),
            completed: self.completed(),
            completion_ratio: self.completion_ratio(),
            first_try_ratio: self.first_try_ratio(),
            median_completion_us: self.median_completion_us(),
        };
        fs::write(&summary, serde_json::to_string_pretty(&s).map_err(io)? + "\n").map_err(io)?;
        Ok(vec![txns, cdf, summary])
    }

    /// Reads back what [`CompletionStats::export`] wrote.
    pub fn import(dir: &Path, stem: &str) -> Result<CompletionStats, SimError> {
        let text = fs::read_to_string(dir.join(format!("{stem}.summary.json"))).map_err(io)?;
        let s: Summary = serde_json::from_str(&text).map_err(io)?;
        let mut r = csv::Reader::from_path(dir.join(format!("{stem}.txns.csv"))).map_err(io)?;
        let txns = r.deserialize().collect::<Result<Vec<TxnStat>, _>>().map_err(io)?;
        if txns.len() != s.requests {
            return Err(SimError::Io(format!(
                "summary lists {} requests, transaction file has {}",
                s.requests,
                txns.len()
            )));
        }
        Ok(CompletionStats { meta: s.meta, txns })
    }
}

#[derive(Serialize, Deserialize)]
struct Summary {
    meta: RunMeta,
    requests: usize,
    completed: usize,
    completion_ratio: f64,
    first_try_ratio: f64,
    median_completion_us: Option<u64>,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

fn io(e: impl std::fmt::Display) -> SimError {
    SimError::Io(e.to_string())
}

/// Preset name when `topo` has a preset's shape, with a marker if its
/// losses differ from the preset defaults.
pub fn topology_label(topo: &Topology) -> String {
    for p in Preset::ALL {
        let preset = p.build();
        if preset.nodes == topo.nodes {
            return if preset == *topo {
                p.name().to_string()
            } else {
                format!("{}/custom-loss", p.name())
            };
        }
    }
    "custom".to_string()
}

fn config_digest(topo: &Topology, scenario: &Scenario) -> String {
    let text = serde_json::to_string(&(&topo.nodes, &topo.links, scenario)).expect("config serializes");
    sha256(text.as_bytes())[..6]
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// One simulated run with its metrics.
#[derive(Clone, Debug)]
pub struct Collection {
    pub stats: CompletionStats,
    pub output: RunOutput,
}

/// Periodic data collection: the gateway polls every sensor.
pub fn run_collection(
    protocol: Protocol,
    topo: &Topology,
    scenario: &Scenario,
    seed: u64,
) -> Result<Collection, SimError> {
    let scenario = Scenario {
        protocol,
        ..scenario.clone()
    };
    scenario.validate()?;
    let output = netsim::run(topo, &scenario, seed)?;
    let meta = RunMeta {
        protocol,
        topology: topology_label(topo),
        seed,
        requests_per_sensor: scenario.requests_per_sensor,
        config_digest: config_digest(topo, &scenario),
    };
    Ok(Collection {
        stats: CompletionStats::from_trace(meta, &output.trace),
        output,
    })
}

/// Runs `protocols` over `seeds` and returns the stats keyed by both.
pub fn run_batch(
    protocols: &[Protocol],
    topo: &Topology,
    scenario: &Scenario,
    seeds: &[u64],
) -> Result<BTreeMap<(Protocol, u64), CompletionStats>, SimError> {
    let mut out = BTreeMap::new();
    for &p in protocols {
        for &seed in seeds {
            out.insert((p, seed), run_collection(p, topo, scenario, seed)?.stats);
        }
    }
    Ok(out)
}

/// Writes one row per seed with each protocol's completion ratio.
pub fn write_paired_comparison(
    results: &BTreeMap<(Protocol, u64), CompletionStats>,
    w: impl std::io::Write,
) -> Result<(), SimError> {
    let mut protocols: Vec<Protocol> = results.keys().map(|k| k.0).collect();
    protocols.dedup();
    let mut seeds: Vec<u64> = results.keys().map(|k| k.1).collect();
    seeds.sort_unstable();
    seeds.dedup();
    let mut csv = csv::Writer::from_writer(w);
    let mut header = vec!["seed".to_string()];
    header.extend(protocols.iter().map(|p| p.name().to_string()));
    csv.write_record(&header).map_err(io)?;
    for seed in seeds {
        let mut row = vec![seed.to_string()];
        for p in &protocols {
            row.push(
                results
                    .get(&(*p, seed))
                    .map(|s| format!("{:.4}", s.completion_ratio()))
                    .unwrap_or_default(),
            );
        }
        csv.write_record(&row).map_err(io)?;
    }
    csv.flush().map_err(io)
}

/// A deep-sleep run: the gateway loses its session state at every mark.
#[derive(Clone, Debug)]
pub struct DeepSleepRun {
    pub collection: Collection,
    /// Times of the state wipes.
    pub wakes: Vec<u64>,
    /// Handshakes completed per sensor.
    pub handshakes_per_sensor: BTreeMap<NodeId, u64>,
}

impl DeepSleepRun {
    /// The first transaction issued at or after each wake, per sensor.
    pub fn first_after_wakes(&self) -> Vec<TxnStat> {
        let mut out = Vec::new();
        for &w in &self.wakes {
            let mut seen = std::collections::BTreeSet::new();
            for t in &self.collection.stats.txns {
                if t.issued_us >= w && seen.insert(t.sensor) {
                    out.push(*t);
                }
            }
        }
        out
    }

    /// Airtime of the handshake frames the gateway and `sensor` exchanged
    /// between `from_us` and `to_us`.
    pub fn handshake_airtime_us(&self, sensor: NodeId, from_us: u64, to_us: u64, radio: &netsim::Radio) -> u64 {
        self.collection
            .output
            .trace
            .of_kind(EventKind::FrameTx)
            .filter(|r| r.t_us >= from_us && r.t_us < to_us)
            .filter(|r| r.msg.is_some_and(netsim::Msg::is_handshake))
            .filter(|r| r.node == sensor || r.peer == Some(sensor))
            .map(|r| netsim::airtime(radio, r.bytes as usize))
            .sum()
    }
}

/// Periodic collection with deep-sleep marks; every fifth of the run when
/// the scenario has none.
pub fn run_deep_sleep(
    protocol: Protocol,
    topo: &Topology,
    scenario: &Scenario,
    seed: u64,
) -> Result<DeepSleepRun, SimError> {
    let mut scenario = scenario.clone();
    if scenario.deep_sleep_marks.is_empty() {
        scenario = scenario.with_deep_sleep();
    }
    let collection = run_collection(protocol, topo, &scenario, seed)?;
    let trace = &collection.output.trace;
    let wakes = trace.of_kind(EventKind::StateWipe).map(|r| r.t_us).collect();
    let mut handshakes_per_sensor: BTreeMap<NodeId, u64> = topo.sensors().into_iter().map(|s| (s, 0)).collect();
    // The server's last flight completes a handshake.
    for r in trace.of_kind(EventKind::DatagramTx) {
        if r.msg == Some(netsim::Msg::Finished) && r.retx == 0 && handshakes_per_sensor.contains_key(&r.node) {
            *handshakes_per_sensor.get_mut(&r.node).expect("sensor") += 1;
        }
    }
    Ok(DeepSleepRun {
        collection,
        wakes,
        handshakes_per_sensor,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta() -> RunMeta {
        RunMeta {
            protocol: Protocol::Coap,
            topology: "t".into(),
            seed: 1,
            requests_per_sensor: 2,
            config_digest: "00".into(),
        }
    }

    fn stat(txn: u64, ok: bool, retx: u8, dt: u64) -> TxnStat {
        TxnStat {
            txn,
            sensor: 1,
            issued_us: 1_000,
            done_us: 1_000 + dt,
            ok,
            retx,
        }
    }

    #[test]
    fn export_then_import_is_identity() {
        let topo = Topology::single_hop(0.3);
        let stats = run_collection(Protocol::Oscore, &topo, &Scenario::for_protocol(Protocol::Oscore), 5)
            .unwrap()
            .stats;
        assert!(stats.txns.iter().any(|t| t.retx > 0));
        let dir = tempfile::tempdir().unwrap();
        stats.export(dir.path(), "run").unwrap();
        assert_eq!(CompletionStats::import(dir.path(), "run").unwrap(), stats);
    }

    #[test]
    fn mass_steps_bin_by_nearest_interval() {
        let s = CompletionStats {
            meta: meta(),
            txns: vec![
                stat(0, true, 0, 20),
                stat(1, true, 3, 2_100),
                stat(2, true, 1, 1_900),
                stat(3, false, 4, 2_000),
                stat(4, true, 2, 4_400),
            ],
        };
        let steps = s.mass_steps(2_000);
        assert_eq!(
            steps.iter().map(|m| (m.index, m.count)).collect::<Vec<_>>(),
            [(0, 1), (1, 2), (2, 1)]
        );
        assert_eq!(steps[1].p01_offset_us, -100);
        assert_eq!(steps[1].p99_offset_us, 100);
        assert_eq!(steps[1].spread_us(), 200);
        assert_eq!(steps[2].median_offset_us, 400);
    }

    #[test]
    fn cdf_ends_at_completion_ratio() {
        let s = CompletionStats {
            meta: meta(),
            txns: vec![
                stat(0, true, 0, 10),
                stat(1, true, 0, 10),
                stat(2, false, 4, 99),
                stat(3, true, 1, 5),
            ],
        };
        let cdf = s.cdf();
        assert_eq!(cdf.len(), 2);
        assert_eq!(
            cdf[0],
            CdfPoint {
                t_us: 5,
                fraction: 0.25
            }
        );
        assert_eq!(cdf[1].fraction, s.completion_ratio());
        assert_eq!(s.completion_ratio(), 0.75);
        assert_eq!(s.first_try_ratio(), 0.5);
        assert_eq!(s.median_completion_us(), Some(10));
    }

    #[test]
    fn empty_stats() {
        let s = CompletionStats {
            meta: meta(),
            txns: Vec::new(),
        };
        assert_eq!(s.completion_ratio(), 0.0);
        assert!(s.cdf().is_empty());
        assert!(s.steps().is_empty());
        assert!(s.mass_steps(2_000_000).is_empty());
        assert_eq!(s.median_completion_us(), None);
    }

    #[test]
    fn labels() {
        assert_eq!(topology_label(&Topology::multi_hop()), "multi-hop");
        assert_eq!(topology_label(&Topology::single_hop(0.1)), "single-hop/custom-loss");
    }
}
