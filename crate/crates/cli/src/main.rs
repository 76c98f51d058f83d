//! `streamqoe` command-line interface.
//!
//! Exit codes: 0 success, 1 failed checks or I/O error, 2 usage or config
//! error, 3 numerical non-convergence (outputs are still written).

mod commands;
mod files;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

const SCHEMAS: &str = "\
Config file (JSON):
  {
    \"clients\": [
      {
        \"buffer_playtime\": B,            buffer capacity in slots
        \"play_duration\": T,              slots of play time per packet, 1 <= T <= B
        \"quality_penalties\": [λ_q],      strictly increasing, index 0 = best quality
        \"power_levels\": [Ê],             Ê[0] = 0 (idle), strictly increasing
        \"success_prob\": [[P(q, E)]],     Q×K, P(q, 0) = 0, nondecreasing in E and in q
        \"outage_period_penalty\": λ_O
      }
    ],
    \"power_budget\": Ē,                   optional, needed by `dual`
    \"channels\": [                        optional, one per client
      {
        \"num_states\": C,
        \"transition\": [[Π(c, c')]],      row-stochastic C×C
        \"success_prob_per_channel\": [[[P_c(q, E)]]]
      }
    ]
  }

Policy file (JSON, written by `solve`, read by `simulate --policy`):
  { \"manifest\": {...},
    \"policies\": [ { \"client\": n,
                      \"per_channel\": [[ {\"state\": x, \"quality\": q, \"power_index\": e} ]] } ] }

Every JSON output embeds the run manifest {tool, version, command, config_paths,
parameters, timestamp}; `timestamp` is SOURCE_DATE_EPOCH when that is set.
Iteration CSV: k,lambda,dual_value,subgradient,total_power.
Trace CSV: slot,client,x,c,q,E,success,outage,new_period.";

#[derive(Parser)]
#[command(name = "streamqoe", version, about = "Threshold policies and energy pricing for video streaming clients", after_long_help = SCHEMAS)]
struct Cli {
    /// Worker threads for per-client solves and replications.
    #[arg(long, global = true, env = "STREAMQOE_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve one client's problem at a fixed energy price.
    Solve(SolveArgs),
    /// Find the energy price that meets the power budget.
    Dual(DualArgs),
    /// Monte Carlo simulation of all clients under fixed policies.
    Simulate(SimulateArgs),
    /// Run a named property suite.
    Verify(VerifyArgs),
}

#[derive(Args, Serialize)]
pub struct SolveArgs {
    pub config: PathBuf,
    /// Client index in the config.
    #[arg(long, default_value_t = 0)]
    pub client: usize,
    /// Energy price λ_E.
    #[arg(long, default_value_t = 0.0)]
    pub price: f64,
    /// Discount factor; solves the discounted problem.
    #[arg(long, conflicts_with = "average")]
    pub beta: Option<f64>,
    /// Average-cost problem (the default).
    #[arg(long)]
    pub average: bool,
    #[arg(long, default_value_t = 1e-10)]
    pub tol: f64,
    #[arg(long, default_value_t = 1_000_000)]
    pub max_iter: usize,
    /// Also write every threshold policy with its exact evaluation.
    #[arg(long)]
    pub list: bool,
    /// Output directory.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Args, Serialize)]
pub struct DualArgs {
    pub config: PathBuf,
    /// Average power budget Ē; overrides the config.
    #[arg(long)]
    pub budget: Option<f64>,
    /// Initial step α_0 of the diminishing rule α_0/√k.
    #[arg(long)]
    pub alpha0: Option<f64>,
    #[arg(long, default_value_t = 500)]
    pub iters: usize,
    /// Stop once |total power − Ē| is at most this.
    #[arg(long, default_value_t = 1e-9)]
    pub tol: f64,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Args, Serialize)]
pub struct SimulateArgs {
    pub config: PathBuf,
    /// Policy file written by `solve`.
    #[arg(long, conflicts_with = "solve_first", required_unless_present = "solve_first")]
    pub policy: Option<PathBuf>,
    /// Solve every client at --price first and simulate those policies.
    #[arg(long)]
    pub solve_first: bool,
    /// Energy price, used by --solve-first and for the average cost.
    #[arg(long, default_value_t = 0.0)]
    pub price: f64,
    #[arg(long, default_value_t = 1_000_000)]
    pub horizon: u64,
    #[arg(long, default_value_t = 1_000)]
    pub warmup: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Independent replications with seeds seed ⊕ i.
    #[arg(long, default_value_t = 1)]
    pub reps: usize,
    #[arg(long, default_value_t = 20)]
    pub batches: usize,
    /// Trace CSV of the first replication.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Args, Serialize)]
pub struct VerifyArgs {
    pub config: PathBuf,
    /// threshold, lemma3, duality, sim-consistency or fading-reduction.
    #[arg(long, value_parser = parse_suite)]
    pub suite: streamqoe::verify::Suite,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Seeded random models added to the configured clients
    /// (default 25 for threshold, 0 otherwise).
    #[arg(long)]
    pub random: Option<usize>,
    #[arg(long, default_value_t = 0.1)]
    pub price: f64,
    /// Simulation horizon of the sim-consistency suite.
    #[arg(long, default_value_t = 200_000)]
    pub horizon: u64,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

fn parse_suite(s: &str) -> Result<streamqoe::verify::Suite, String> {
    s.parse().map_err(|e: streamqoe::Error| e.to_string())
}

/// A usage or configuration error; exit code 2.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

/// How a command finished when it did not error.
pub enum Status {
    Ok,
    NotConverged,
    ChecksFailed,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Usage>() || cause.is::<serde_json::Error>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<streamqoe::Error>() {
            if e.is_not_converged() {
                return 3;
            }
            return match e {
                streamqoe::Error::SingularSystem => 3,
                _ => 2,
            };
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match &cli.command {
        Command::Solve(a) => commands::solve(a),
        Command::Dual(a) => commands::dual(a),
        Command::Simulate(a) => commands::simulate(a),
        Command::Verify(a) => commands::verify(a),
    };
    match result {
        Ok(Status::Ok) => ExitCode::SUCCESS,
        Ok(Status::NotConverged) => {
            eprintln!("warning: did not converge; outputs were written");
            ExitCode::from(3)
        }
        Ok(Status::ChecksFailed) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
