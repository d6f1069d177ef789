//! `objsec`: run simulated collections, sweeps, the overhead and
//! security-property tables and figure data.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use objsec_core::experiments::figures::{cdf_figure, creation_figure, deep_sleep_figure, FigureOptions};
use objsec_core::experiments::{
    overhead_table, run_batch, run_collection, security_matrix, write_paired_comparison, REFERENCE, SECURITY_REFERENCE,
};
use objsec_core::netsim::{Preset, Protocol, SimConfig, SimError, Topology};

/// Environment variable naming the default output root.
const OUT_ENV: &str = "OBJSEC_OUT";

#[derive(Parser, Debug)]
#[command(
    name = "objsec",
    version,
    about = "Secured CoAP and NDN stacks over a simulated 802.15.4 network"
)]
struct Cli {
    /// TOML file with seed, scenario and topology; flags override it.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Output directory. Defaults to $OBJSEC_OUT, then ./out.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one collection and write its statistics and trace.
    Run(RunArgs),
    /// Run several protocols over a range of seeds and write a paired comparison.
    Sweep(SweepArgs),
    /// Print the security overhead table computed from live encodings.
    Table2 {
        /// Human-readable text or one CSV row per checked cell.
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
    /// Attack live messages of each stack and print the security-property matrix.
    Table1,
    /// Write CSV series and gnuplot scripts for a figure.
    Figures {
        /// Which figure to produce.
        #[arg(long, value_enum)]
        which: Figure,
        /// Seeds pooled into each series, starting at 1.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        /// Requests per sensor.
        #[arg(long)]
        requests: Option<u32>,
    },
}

#[derive(clap::Args, Debug)]
struct RunArgs {
    /// coap, coap-protected, coap-dtls, oscore, ndn or ndn-protected.
    #[arg(long, value_parser = parse_protocol)]
    protocol: Option<Protocol>,
    /// Preset topology: single-hop or multi-hop.
    #[arg(long, value_parser = parse_preset)]
    topology: Option<Preset>,
    /// Seed of the run's random number generator.
    #[arg(long)]
    seed: Option<u64>,
    /// Requests per sensor.
    #[arg(long)]
    requests: Option<u32>,
    /// Uniform per-frame loss on every link, replacing preset defaults.
    #[arg(long)]
    loss: Option<f64>,
    /// Wipe the gateway's session state after every fifth of the requests.
    #[arg(long)]
    deep_sleep: bool,
    /// Also write the full event trace as NDJSON.
    #[arg(long)]
    trace: bool,
}

#[derive(clap::Args, Debug)]
struct SweepArgs {
    /// Comma-separated protocols; all when omitted.
    #[arg(long, value_delimiter = ',', value_parser = parse_protocol)]
    protocols: Vec<Protocol>,
    /// Preset topology: single-hop or multi-hop.
    #[arg(long, value_parser = parse_preset, default_value = "multi-hop")]
    topology: Preset,
    /// Number of seeds, starting at 1.
    #[arg(long, default_value_t = 20)]
    seeds: u64,
    /// Requests per sensor.
    #[arg(long)]
    requests: Option<u32>,
    /// Uniform per-frame loss on every link, replacing preset defaults.
    #[arg(long)]
    loss: Option<f64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Text,
    Csv,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Figure {
    Cdf,
    Deepsleep,
    Creation,
}

fn parse_protocol(s: &str) -> Result<Protocol, String> {
    s.parse().map_err(|e: SimError| e.to_string())
}

fn parse_preset(s: &str) -> Result<Preset, String> {
    s.parse().map_err(|e: SimError| e.to_string())
}

fn out_dir(cli: &Cli) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn load_config(path: Option<&Path>) -> Result<SimConfig, SimError> {
    match path {
        None => Ok(SimConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| SimError::Io(format!("{}: {e}", p.display())))?;
            SimConfig::from_toml(&text)
        }
    }
}

fn topology(cfg: &SimConfig, preset: Option<Preset>, loss: Option<f64>) -> Result<Topology, SimError> {
    let mut tc = cfg.topology.clone();
    if let Some(p) = preset {
        tc.preset = Some(p);
        tc.nodes.clear();
        tc.links.clear();
    }
    if loss.is_some() {
        tc.loss = loss;
        tc.links.clear();
    }
    if let Some(l) = loss {
        if !(0.0..=1.0).contains(&l) {
            return Err(SimError::Config("--loss must lie in [0, 1]".into()));
        }
    }
    tc.build()
}

fn cmd_run(cli: &Cli, args: &RunArgs) -> Result<(), SimError> {
    let cfg = load_config(cli.config.as_deref())?;
    let topo = topology(&cfg, args.topology, args.loss)?;
    let mut scenario = cfg.scenario.clone();
    if let Some(p) = args.protocol {
        scenario.protocol = p;
    }
    if let Some(n) = args.requests {
        scenario.requests_per_sensor = n;
    }
    if args.deep_sleep {
        scenario = scenario.with_deep_sleep();
    }
    let seed = args.seed.unwrap_or(cfg.seed);
    let c = run_collection(scenario.protocol, &topo, &scenario, seed)?;
    let dir = out_dir(cli);
    let stem = format!(
        "{}-{}-seed{seed}",
        scenario.protocol,
        c.stats.meta.topology.replace('/', "-")
    );
    let mut files = c.stats.export(&dir, &stem)?;
    let nodes = dir.join(format!("{stem}.nodes.csv"));
    let f = fs::File::create(&nodes).map_err(|e| SimError::Io(e.to_string()))?;
    c.output.trace.write_summary_csv(&topo, f)?;
    files.push(nodes);
    if args.trace {
        let path = dir.join(format!("{stem}.trace.ndjson"));
        let f = fs::File::create(&path).map_err(|e| SimError::Io(e.to_string()))?;
        c.output.trace.write_ndjson(std::io::BufWriter::new(f))?;
        files.push(path);
    }
    let median = c
        .stats
        .median_completion_us()
        .map_or("-".to_string(), |m| format!("{:.1} ms", m as f64 / 1e3));
    println!(
        "{} {} seed {seed}: {}/{} completed ({:.3}), first try {:.3}, median {median}",
        scenario.protocol,
        c.stats.meta.topology,
        c.stats.completed(),
        c.stats.requests(),
        c.stats.completion_ratio(),
        c.stats.first_try_ratio(),
    );
    for f in files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn cmd_sweep(cli: &Cli, args: &SweepArgs) -> Result<(), SimError> {
    let cfg = load_config(cli.config.as_deref())?;
    let topo = topology(&cfg, Some(args.topology), args.loss)?;
    let mut scenario = cfg.scenario.clone();
    if let Some(n) = args.requests {
        scenario.requests_per_sensor = n;
    }
    let protocols = if args.protocols.is_empty() {
        Protocol::ALL.to_vec()
    } else {
        args.protocols.clone()
    };
    let seeds: Vec<u64> = (1..=args.seeds).collect();
    let results = run_batch(&protocols, &topo, &scenario, &seeds)?;
    for p in &protocols {
        let runs: Vec<_> = results.iter().filter(|(k, _)| k.0 == *p).map(|(_, s)| s).collect();
        let n: usize = runs.iter().map(|s| s.requests()).sum();
        let ok: usize = runs.iter().map(|s| s.completed()).sum();
        let first: usize = runs
            .iter()
            .map(|s| s.txns.iter().filter(|t| t.ok && t.retx == 0).count())
            .sum();
        let r = |a: usize| if n == 0 { 0.0 } else { a as f64 / n as f64 };
        println!("{:<15} completion {:.3}  first try {:.3}", p.name(), r(ok), r(first));
    }
    let dir = out_dir(cli);
    fs::create_dir_all(&dir).map_err(|e| SimError::Io(e.to_string()))?;
    let path = dir.join(format!("paired-{}.csv", args.topology.name()));
    let f = fs::File::create(&path).map_err(|e| SimError::Io(e.to_string()))?;
    write_paired_comparison(&results, f)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_table2(format: Format) -> Result<bool, SimError> {
    let t = overhead_table();
    match format {
        Format::Text => print!("{}", t.render_text(&REFERENCE)),
        Format::Csv => print!("{}", t.render_csv(&REFERENCE)),
    }
    Ok(t.all_pass(&REFERENCE))
}

fn cmd_figures(cli: &Cli, which: Figure, seeds: u64, requests: Option<u32>) -> Result<(), SimError> {
    let cfg = load_config(cli.config.as_deref())?;
    let mut opts = FigureOptions {
        seeds: (1..=seeds.max(1)).collect(),
        scenario: cfg.scenario.clone(),
        ..FigureOptions::default()
    };
    if let Some(n) = requests {
        opts.scenario.requests_per_sensor = n;
    }
    let dir = out_dir(cli);
    let files = match which {
        Figure::Cdf => cdf_figure(&dir, &opts)?,
        Figure::Deepsleep => deep_sleep_figure(&dir, &opts)?,
        Figure::Creation => creation_figure(&dir, &opts)?,
    };
    for f in files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(args) => cmd_run(&cli, args),
        Command::Sweep(args) => cmd_sweep(&cli, args),
        Command::Table2 { format } => match cmd_table2(*format) {
            Ok(true) => Ok(()),
            Ok(false) => Err(SimError::Stack("overhead table has failing cells".into())),
            Err(e) => Err(e),
        },
        Command::Table1 => {
            let m = security_matrix();
            print!("{}", m.render_text(&SECURITY_REFERENCE));
            if m.mismatches(&SECURITY_REFERENCE).is_empty() {
                Ok(())
            } else {
                Err(SimError::Stack("security matrix disagrees with the reference".into()))
            }
        }
        Command::Figures { which, seeds, requests } => cmd_figures(&cli, *which, *seeds, *requests),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(SimError::Config(msg)) => {
            eprintln!("objsec: configuration error: {msg}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("objsec: {e}");
            ExitCode::FAILURE
        }
    }
}
