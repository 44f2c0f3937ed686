//! `bsa-sim`: run scenarios, reproduce the failure matrix, size arbiter
//! uptime, and walk through a setup ceremony.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use bsa_core::harness::{
    build_simulation, compute_availability, failure_matrix_with, run_scenario, trust_sweep, AvailabilityParams,
    ScenarioConfig,
};
use bsa_core::SigScheme;
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "bsa-sim", version, about = "Bitcoin Smart Account protocol simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Scheme {
    Schnorr,
    Mock,
}

impl From<Scheme> for SigScheme {
    fn from(s: Scheme) -> Self {
        match s {
            Scheme::Schnorr => SigScheme::Schnorr,
            Scheme::Mock => SigScheme::Mock,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario file and report the guarantees.
    Run {
        file: PathBuf,
        /// Print only the canonical JSON line.
        #[arg(long)]
        json: bool,
        /// Also print the action trace.
        #[arg(long)]
        trace: bool,
    },
    /// Run the eight failure rows and compare against the published table.
    Matrix {
        #[arg(long, value_enum, default_value = "schnorr")]
        scheme: Scheme,
        #[arg(long)]
        json: bool,
    },
    /// Arbiter uptime requirements. Durations like `30d`, `2days`, `1h 30m`.
    Avail {
        #[arg(long, value_parser = humantime::parse_duration)]
        t1: Duration,
        #[arg(long, value_parser = humantime::parse_duration)]
        t2: Duration,
        #[arg(long, value_parser = humantime::parse_duration)]
        t3: Duration,
        #[arg(long, value_parser = humantime::parse_duration)]
        t_op: Duration,
        #[arg(long, value_parser = humantime::parse_duration)]
        t_check: Duration,
        #[arg(long, value_parser = humantime::parse_duration)]
        wsp: Duration,
    },
    /// Randomized adversarial scenarios against the trust assumption.
    Sweep {
        #[arg(long, default_value_t = 200)]
        cases: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Show the setup ceremony for a default instance.
    Ceremony {
        #[arg(long)]
        demo: bool,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { file, json, trace } => run(&file, json, trace),
        Command::Matrix { scheme, json } => matrix(scheme.into(), json),
        Command::Avail { t1, t2, t3, t_op, t_check, wsp } => avail(AvailabilityParams { t1, t2, t3, t_op, t_check, wsp }),
        Command::Sweep { cases, seed } => sweep(cases, seed),
        Command::Ceremony { demo, seed } => ceremony(demo, seed),
    }
}

fn run(file: &PathBuf, json: bool, trace: bool) -> ExitCode {
    let text = match std::fs::read_to_string(file) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: {}: {e}", file.display());
            return ExitCode::from(2);
        }
    };
    let report = match ScenarioConfig::from_toml(&text).and_then(|cfg| run_scenario(&cfg)) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {}: {e}", file.display());
            return ExitCode::from(2);
        }
    };
    if !json {
        print!("{}", report.table());
        if trace {
            for t in &report.trace {
                println!("  {t:?}");
            }
        }
    }
    println!("{}", report.canonical_text());
    ExitCode::SUCCESS
}

fn matrix(scheme: SigScheme, json: bool) -> ExitCode {
    let start = Instant::now();
    let rows = match failure_matrix_with(scheme) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let ok = rows.iter().all(|r| r.matches());
    if json {
        println!("{}", serde_json::to_string(&rows).expect("rows serialize"));
    } else {
        println!("{:<3} {:<22} {:<16} {:<8} {:<8} result", "row", "failure", "condition", "expected", "observed");
        for r in &rows {
            let result = if r.matches() { "match" } else { "MISMATCH" };
            println!("{:<3} {:<22} {:<16} {:<8} {:<8} {result}", r.row, r.failure, r.condition, r.expected.to_string(), r.observed.to_string());
            if !r.matches() {
                for p in &r.probes {
                    println!("      {}: dep {} to {} {:?}", p.name, p.dep_safe, p.to_safe, p.witnesses);
                }
            }
        }
        println!("{} of 8 rows match in {:.2?}", rows.iter().filter(|r| r.matches()).count(), start.elapsed());
    }
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn avail(p: AvailabilityParams) -> ExitCode {
    match compute_availability(&p) {
        Ok(r) => {
            println!("delta      {}", humantime::format_duration(r.delta));
            println!("uptime'    {:.6}", r.uptime_dispute);
            println!("uptime''   {:.6}", r.uptime_wsp);
            println!("uptime     {:.6}", r.uptime);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn sweep(cases: usize, seed: u64) -> ExitCode {
    let start = Instant::now();
    let out = match trust_sweep(cases, seed) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    println!("scenarios          {}", out.total);
    println!("assumption held    {}", out.assumption_held);
    println!("violations         {}", out.violations.len());
    for (name, w) in &out.violations {
        println!("  {name}: {w:?}");
    }
    println!("counterexamples    {}", out.counterexamples.len());
    if let Some(first) = out.counterexamples.first() {
        println!("  e.g. {first}");
    }
    println!("elapsed            {:.2?}", start.elapsed());
    if out.violations.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn ceremony(demo: bool, seed: u64) -> ExitCode {
    if !demo {
        eprintln!("only the demo ceremony is available; pass --demo");
        return ExitCode::from(2);
    }
    let cfg = ScenarioConfig { seed, ..ScenarioConfig::default() };
    let sim = match build_simulation(&cfg) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let w = &sim.world;
    for line in &w.setup_log {
        println!("{line}");
    }
    println!();
    for a in w.instance.addresses.all() {
        println!("{:<4} {}  leaves: {}", a.kind.to_string(), a.id, a.leaves.len());
    }
    println!();
    for d in &w.instance.deposits {
        println!("deposit {} ({} sat)", d.deposit.outpoint, d.deposit.value);
        for p in d.all() {
            println!("  {:<20} {} signature(s)", p.transition.to_string(), p.partial_sigs.len());
        }
    }
    println!();
    println!("registry digest {}", w.registry().digest());
    ExitCode::SUCCESS
}
