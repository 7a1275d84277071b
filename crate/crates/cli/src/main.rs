//! `kraken`: run scenarios in the simulator, or run each actor as its own
//! process against a deployment directory created by `kraken init`.

use std::net::{SocketAddr, TcpListener};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand};

use kraken_core::math::GroupProfile;
use kraken_sim::deploy::{init, node_key_name, Deployment, InitOptions, KeyFile};
use kraken_sim::scenario::{FunctionSpec, PolicySpec};
use kraken_sim::serve::{
    consumer_analyze, consumer_verify, owner_publish, serve_dealer, serve_market, serve_node, serve_storage,
    SavedResults,
};
use kraken_sim::stats::render;
use kraken_sim::{run_scenario, AppError, Scenario};

#[derive(Parser)]
#[command(name = "kraken", version, about = "Privacy-preserving data market over three-party computation")]
struct Cli {
    /// Deployment directory holding deployment.json and keys/.
    #[arg(long, global = true, default_value = ".", env = "KRAKEN_DEPLOYMENT")]
    deployment: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Deterministic single-process simulation.
    Sim {
        #[command(subcommand)]
        command: SimCommand,
    },
    /// Create keys, credentials and device keys for a new deployment.
    Init {
        #[arg(long, default_value = "toy")]
        profile: String,
        #[arg(long, default_value_t = 3)]
        owners: usize,
        /// First port; the others follow consecutively.
        #[arg(long, default_value = "127.0.0.1:7400")]
        base: SocketAddr,
    },
    Market {
        #[command(subcommand)]
        command: StoreServe,
    },
    Storage {
        #[command(subcommand)]
        command: StoreServe,
    },
    Dealer {
        #[command(subcommand)]
        command: Serve,
    },
    Node {
        #[command(subcommand)]
        command: NodeCommand,
    },
    Owner {
        #[command(subcommand)]
        command: OwnerCommand,
    },
    Consumer {
        #[command(subcommand)]
        command: ConsumerCommand,
    },
}

#[derive(Subcommand)]
enum SimCommand {
    /// Run a scenario file and print or save the report.
    Run {
        scenario: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum StoreServe {
    Serve {
        #[arg(long, env = "KRAKEN_DATA_DIR")]
        data_dir: Option<PathBuf>,
        /// Overrides the address in the deployment.
        #[arg(long)]
        listen: Option<SocketAddr>,
    },
}

#[derive(Subcommand)]
enum Serve {
    Serve {
        #[arg(long)]
        listen: Option<SocketAddr>,
    },
}

#[derive(Subcommand)]
enum NodeCommand {
    Serve {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
        index: u8,
        /// Exit after this many sessions.
        #[arg(long)]
        sessions: Option<usize>,
    },
}

#[derive(Subcommand)]
enum OwnerCommand {
    /// Share, encrypt, upload and list one record.
    Publish {
        #[arg(long)]
        owner: usize,
        /// Comma-separated non-negative integers.
        #[arg(long, value_delimiter = ',', required = true)]
        record: Vec<u64>,
        /// JSON policy file.
        #[arg(long)]
        policy: PathBuf,
    },
}

#[derive(Subcommand)]
enum ConsumerCommand {
    /// Request a computation and wait for the result.
    Analyze {
        /// JSON function file.
        #[arg(long)]
        function: PathBuf,
        /// Listing ids in hex; every listing when omitted.
        #[arg(long = "listing")]
        listings: Vec<String>,
        #[arg(long, default_value = "results.json")]
        out: PathBuf,
        #[arg(long, default_value_t = 120)]
        timeout_secs: u64,
    },
    /// Re-verify saved results and print the statistics.
    Verify {
        #[arg(long, default_value = "results.json")]
        results: PathBuf,
    },
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, AppError> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

fn listener(addr: Option<SocketAddr>) -> Result<Option<TcpListener>, AppError> {
    Ok(addr.map(TcpListener::bind).transpose()?)
}

fn print_stats(done: &kraken_sim::actors::Finalized) -> Result<(), AppError> {
    println!("{}", serde_json::to_string_pretty(&render(&done.stats))?);
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode, AppError> {
    let dir = cli.deployment.as_path();
    let data = |d: Option<PathBuf>, name: &str| d.unwrap_or_else(|| dir.join("data").join(name));
    match cli.command {
        Command::Sim { command: SimCommand::Run { scenario, seed, report } } => {
            let r = run_scenario(&Scenario::load(&scenario)?, seed)?;
            match report {
                Some(path) => std::fs::write(path, r.to_json())?,
                None => println!("{}", r.to_json()),
            }
            eprintln!("outcome {}{}", r.outcome, r.reason.as_deref().map(|x| format!(" ({x})")).unwrap_or_default());
            if !r.all_assertions_hold() {
                eprintln!("failed assertions: {}", r.failed_assertions().join(", "));
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Init { profile, owners, base } => {
            let profile = GroupProfile::parse(&profile)
                .ok_or_else(|| AppError::config(format!("unknown group profile {profile:?}")))?;
            std::fs::create_dir_all(dir)?;
            init(dir, &InitOptions { profile, owners, base }, &mut rand::thread_rng())?;
            println!("deployment written to {}", dir.display());
        }
        Command::Market { command: StoreServe::Serve { data_dir, listen } } => {
            let d = Deployment::load(dir)?;
            serve_market(&d, &KeyFile::load(dir, "market")?, &data(data_dir, "market"), listener(listen)?)?;
        }
        Command::Storage { command: StoreServe::Serve { data_dir, listen } } => {
            let d = Deployment::load(dir)?;
            serve_storage(&d, &KeyFile::load(dir, "storage")?, &data(data_dir, "storage"), listener(listen)?)?;
        }
        Command::Dealer { command: Serve::Serve { listen } } => {
            let d = Deployment::load(dir)?;
            serve_dealer(&d, &KeyFile::load(dir, "dealer")?, listener(listen)?)?;
        }
        Command::Node { command: NodeCommand::Serve { index, sessions } } => {
            let d = Deployment::load(dir)?;
            serve_node(&d, &KeyFile::load(dir, &node_key_name(index))?, index, sessions, |o| {
                let reason = o.state.abort_reason.map(|r| format!(" ({})", r.code())).unwrap_or_default();
                println!("session {} {}{reason}", hex::encode(o.session_id), o.state.phase.as_str());
            })?;
        }
        Command::Owner { command: OwnerCommand::Publish { owner, record, policy } } => {
            let d = Deployment::load(dir)?;
            let policy: PolicySpec = read_json(&policy)?;
            let published = owner_publish(dir, &d, owner, &record, &policy)?;
            for w in &published.warnings {
                eprintln!("warning: {}", w.code());
            }
            println!("{}", hex::encode(published.listing_id));
        }
        Command::Consumer { command: ConsumerCommand::Analyze { function, listings, out, timeout_secs } } => {
            let d = Deployment::load(dir)?;
            let f: FunctionSpec = read_json(&function)?;
            let ids = listings
                .iter()
                .map(|h| hex::decode(h).ok().and_then(|b| b.try_into().ok()))
                .collect::<Option<Vec<[u8; 32]>>>()
                .ok_or_else(|| AppError::config("listing ids must be 32-byte hex"))?;
            let ids = (!ids.is_empty()).then_some(ids);
            let saved = consumer_analyze(dir, &d, &f, ids, Duration::from_secs(timeout_secs))?;
            std::fs::write(&out, saved.to_json())?;
            print_stats(&consumer_verify(dir, &d, &saved)?)?;
        }
        Command::Consumer { command: ConsumerCommand::Verify { results } } => {
            let d = Deployment::load(dir)?;
            let saved: SavedResults = read_json(&results)?;
            print_stats(&consumer_verify(dir, &d, &saved)?)?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error [{}]: {e}", e.code());
            ExitCode::FAILURE
        }
    }
}
