//! `raptr-sim`: run scenarios, seed campaigns and variant comparisons.
//!
//! Exit status: 0 when every check passes, 1 on a safety or liveness
//! violation, 2 on an invalid scenario or usage error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use raptr_core::harness::{self, HarnessError, RunOptions};
use raptr_core::{ScenarioConfig, Variant};

#[derive(Parser)]
#[command(name = "raptr-sim", version, about = "Deterministic simulator for prefix-consensus BFT protocols")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Scenario file (TOML).
    #[arg(long)]
    scenario: PathBuf,
    /// Overrides the protocol variant of the scenario.
    #[arg(long)]
    variant: Option<Variant>,
    /// Directory for reports; nothing is written if unset.
    #[arg(long, env = "RAPTR_OUT_DIR")]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one seed and print its report.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
        /// Report latency components in hops; fails unless delays are fixed.
        #[arg(long)]
        hop_count_mode: bool,
        /// Keep an event trace and print it on failure.
        #[arg(long)]
        trace: bool,
    },
    /// Run many seeds and summarize pass/fail.
    Campaign {
        #[command(flatten)]
        common: Common,
        /// Number of seeds, starting at --first-seed.
        #[arg(long)]
        seeds: Option<u64>,
        #[arg(long, default_value_t = 0)]
        first_seed: u64,
        #[arg(long, default_value_t = 1)]
        parallelism: usize,
    },
    /// Run one seed under several variants.
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_delimiter = ',', default_values_t = Variant::ALL.to_vec())]
        variants: Vec<Variant>,
        #[arg(long)]
        hop_count_mode: bool,
    },
}

enum Failure {
    Invalid(String),
    Violation,
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        Failure::Invalid(e.to_string())
    }
}

fn load(common: &Common) -> Result<ScenarioConfig, Failure> {
    let mut sc = ScenarioConfig::load(&common.scenario).map_err(|e| Failure::Invalid(e.to_string()))?;
    if let Some(v) = common.variant {
        sc.protocol.variant = v;
    }
    Ok(sc)
}

fn write(dir: &Path, name: &str, contents: &[u8]) -> Result<(), Failure> {
    std::fs::create_dir_all(dir)
        .and_then(|_| std::fs::write(dir.join(name), contents))
        .map_err(|e| Failure::Invalid(format!("cannot write {}: {e}", dir.join(name).display())))
}

fn execute(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Run { common, seed, hop_count_mode, trace } => {
            let mut sc = load(&common)?;
            if let Some(s) = seed {
                sc.seed = s;
            }
            let (report, out) = harness::run(&sc, RunOptions { hop_count_mode, trace })?;
            println!("{}", report.to_json());
            if let Some(dir) = &common.out {
                write(dir, "report.json", report.to_json().as_bytes())?;
                let mut csv = Vec::new();
                out.collector.write_csv(&mut csv).map_err(|e| Failure::Invalid(e.to_string()))?;
                write(dir, "transactions.csv", &csv)?;
            }
            if report.passed() {
                return Ok(());
            }
            for v in &report.violations {
                eprintln!("violation: {v}");
            }
            if let Some(cex) = harness::counterexample(&sc)? {
                if trace {
                    for line in &cex.trace {
                        eprintln!("{line}");
                    }
                }
                if let Some(dir) = &common.out {
                    let json = serde_json::to_string_pretty(&cex).expect("counterexamples serialize");
                    write(dir, "counterexample.json", json.as_bytes())?;
                }
            }
            Err(Failure::Violation)
        }
        Command::Campaign { common, seeds, first_seed, parallelism } => {
            let sc = load(&common)?;
            let count = seeds.or(sc.seeds).unwrap_or(100);
            let (summary, cex) = harness::campaign(&sc, first_seed..first_seed + count, parallelism)?;
            println!("{}", summary.to_json());
            if let Some(dir) = &common.out {
                write(dir, "campaign.json", summary.to_json().as_bytes())?;
                if let Some(cex) = &cex {
                    let json = serde_json::to_string_pretty(cex).expect("counterexamples serialize");
                    write(dir, "counterexample.json", json.as_bytes())?;
                }
            }
            if let Some(cex) = cex {
                eprintln!("minimal failing seed {}: {}", cex.seed, cex.violation);
            }
            if summary.failed == 0 {
                Ok(())
            } else {
                Err(Failure::Violation)
            }
        }
        Command::Compare { common, seed, variants, hop_count_mode } => {
            let mut sc = load(&common)?;
            if let Some(s) = seed {
                sc.seed = s;
            }
            let cmp = harness::compare(&sc, &variants, RunOptions { hop_count_mode, trace: false })?;
            println!("{}", cmp.to_json());
            if let Some(dir) = &common.out {
                write(dir, "comparison.json", cmp.to_json().as_bytes())?;
            }
            if cmp.rows.iter().all(|r| r.passed) {
                Ok(())
            } else {
                Err(Failure::Violation)
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Violation) => ExitCode::from(1),
        Err(Failure::Invalid(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
