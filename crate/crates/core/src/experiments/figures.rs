//! CSV series and gnuplot scripts for the completion-time, deep-sleep and
//! creation-cost figures.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{creation_cost_report, io, run_collection, run_deep_sleep, CompletionStats, TxnStat};
use crate::netsim::{Preset, Protocol, Scenario, SimError};

/// Shared inputs of the simulated figures.
#[derive(Clone, Debug)]
pub struct FigureOptions {
    pub seeds: Vec<u64>,
    pub scenario: Scenario,
    pub protocols: Vec<Protocol>,
}

impl Default for FigureOptions {
    fn default() -> Self {
        FigureOptions {
            seeds: vec![1],
            scenario: Scenario::default(),
            protocols: Protocol::ALL.to_vec(),
        }
    }
}

fn write(path: PathBuf, text: &str) -> Result<PathBuf, SimError> {
    fs::write(&path, text).map_err(io)?;
    Ok(path)
}

/// Pools the transactions of several runs.
fn pooled(runs: Vec<CompletionStats>) -> Option<CompletionStats> {
    let mut it = runs.into_iter();
    let mut first = it.next()?;
    for r in it {
        first.txns.extend(r.txns);
    }
    Some(first)
}

/// One CDF series per protocol and topology, pooled over the seeds.
pub fn cdf_figure(dir: &Path, opts: &FigureOptions) -> Result<Vec<PathBuf>, SimError> {
    fs::create_dir_all(dir).map_err(io)?;
    let mut csv = String::from("topology,protocol,t_ms,fraction\n");
    let mut summary = String::from("topology,protocol,requests,completion_ratio,first_try_ratio,median_ms\n");
    for preset in Preset::ALL {
        let topo = preset.build();
        for &p in &opts.protocols {
            let runs = opts
                .seeds
                .iter()
                .map(|&s| run_collection(p, &topo, &opts.scenario, s).map(|c| c.stats))
                .collect::<Result<Vec<_>, _>>()?;
            let Some(stats) = pooled(runs) else { continue };
            for pt in stats.cdf() {
                let _ = writeln!(
                    csv,
                    "{},{},{:.3},{:.6}",
                    preset.name(),
                    p.name(),
                    pt.t_us as f64 / 1e3,
                    pt.fraction
                );
            }
            let _ = writeln!(
                summary,
                "{},{},{},{:.4},{:.4},{}",
                preset.name(),
                p.name(),
                stats.requests(),
                stats.completion_ratio(),
                stats.first_try_ratio(),
                stats
                    .median_completion_us()
                    .map_or(String::new(), |m| format!("{:.3}", m as f64 / 1e3))
            );
        }
    }
    let mut gp = String::from(
        "set datafile separator ','\nset logscale x\nset xlabel 'time to completion [ms]'\nset ylabel 'CDF'\nset key bottom right\nset multiplot layout 1,2\n",
    );
    for preset in Preset::ALL {
        let _ = writeln!(gp, "set title '{}'", preset.name());
        let series: Vec<String> = opts
            .protocols
            .iter()
            .map(|p| {
                format!(
                    "'cdf.csv' using (strcol(1) eq '{t}' && strcol(2) eq '{p}' ? $3 : 1/0):4 with steps title '{p}'",
                    t = preset.name(),
                    p = p.name()
                )
            })
            .collect();
        let _ = writeln!(gp, "plot {}", series.join(", \\\n     "));
    }
    gp.push_str("unset multiplot\n");
    Ok(vec![
        write(dir.join("cdf.csv"), &csv)?,
        write(dir.join("cdf_summary.csv"), &summary)?,
        write(dir.join("cdf.gp"), &gp)?,
    ])
}

/// Completion times over the course of a single-hop deep-sleep run, with
/// the wake events marked.
pub fn deep_sleep_figure(dir: &Path, opts: &FigureOptions) -> Result<Vec<PathBuf>, SimError> {
    fs::create_dir_all(dir).map_err(io)?;
    let topo = Preset::SingleHop.build();
    let seed = opts.seeds.first().copied().unwrap_or(1);
    let mut txns = String::from("protocol,txn,sensor,issued_s,completion_ms,ok,retx\n");
    let mut wakes = String::from("protocol,t_s\n");
    for &p in &opts.protocols {
        let run = run_deep_sleep(p, &topo, &opts.scenario, seed)?;
        for t in &run.collection.stats.txns {
            let TxnStat {
                txn, sensor, ok, retx, ..
            } = *t;
            let _ = writeln!(
                txns,
                "{},{txn},{sensor},{:.3},{:.3},{},{retx}",
                p.name(),
                t.issued_us as f64 / 1e6,
                t.completion_us() as f64 / 1e3,
                u8::from(ok)
            );
        }
        for w in &run.wakes {
            let _ = writeln!(wakes, "{},{:.3}", p.name(), *w as f64 / 1e6);
        }
    }
    let series: Vec<String> = opts
        .protocols
        .iter()
        .map(|p| {
            format!(
                "'deepsleep.csv' using (strcol(1) eq '{p}' ? $4 : 1/0):5 with points title '{p}'",
                p = p.name()
            )
        })
        .collect();
    let gp = format!(
        "set datafile separator ','\nset logscale y\nset xlabel 'experiment time [s]'\nset ylabel 'time to completion [ms]'\n\
         plot {}, \\\n     'wakes.csv' using 2:(1):(0):(1e4) with vectors nohead dashtype 2 title 'wake'\n",
        series.join(", \\\n     ")
    );
    Ok(vec![
        write(dir.join("deepsleep.csv"), &txns)?,
        write(dir.join("wakes.csv"), &wakes)?,
        write(dir.join("deepsleep.gp"), &gp)?,
    ])
}

/// Initial and retransmission operation counts per protocol.
pub fn creation_figure(dir: &Path, opts: &FigureOptions) -> Result<Vec<PathBuf>, SimError> {
    fs::create_dir_all(dir).map_err(io)?;
    let mut csv = String::from("protocol,phase,seals,hmacs,bytes\n");
    for &p in &opts.protocols {
        let c = creation_cost_report(p)?;
        let mut rows = vec![("initial", c.initial), ("retransmit", c.retransmit)];
        if let Some(d) = c.data {
            rows.push(("data", d));
        }
        for (phase, s) in rows {
            let _ = writeln!(csv, "{},{phase},{},{},{}", p.name(), s.seals, s.hmacs, s.bytes);
        }
    }
    let gp = "set datafile separator ','\nset style data histograms\nset style fill solid\nset ylabel 'AEAD seals'\n\
              plot 'creation.csv' using (strcol(2) eq 'initial' ? $3 : 1/0):xtic(1) title 'initial', \\\n     \
              '' using (strcol(2) eq 'retransmit' ? $3 : 1/0) title 'retransmit'\n";
    Ok(vec![
        write(dir.join("creation.csv"), &csv)?,
        write(dir.join("creation.gp"), gp)?,
    ])
}
