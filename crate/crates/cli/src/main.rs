//! Command-line front end: runs every party in one process, or a single
//! party (or the OT mediator) of a multi-process socket deployment.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::net::{SocketAddr, TcpListener};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use clap::{Parser, ValueEnum};
use distrsa::cluster::{run_cluster, Backend, ClusterOptions, ClusterRun};
use distrsa::metrics::{write_json_lines, AttemptLog, PhaseMetrics};
use distrsa::ot::run_mediator;
use distrsa::protocol::RunOptions;
use distrsa::shares::RandomShares;
use distrsa::transport::SocketEndpoint;
use distrsa::{run_party, Address, HashFunction, PartyId, Phase, ProtocolConfig, ProtocolError, RunOutcome, TrialDivisionMode};
use rand::rngs::StdRng;
use rand::SeedableRng;

const EXIT_FAILURE: u8 = 1;
const EXIT_GAVE_UP: u8 = 2;
const EXIT_USAGE: u8 = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Transport {
    Memory,
    Socket,
}

/// Jointly generate an RSA modulus N = p*q whose factors stay additively
/// shared among n parties.
#[derive(Debug, Parser)]
#[command(name = "distrsa", version)]
struct Cli {
    /// Number of parties; a power of two, at least 2.
    #[arg(short = 'n', long, default_value_t = 4)]
    parties: u16,

    /// Bit length k of each party's candidate shares.
    #[arg(short = 'k', long, default_value_t = 32)]
    bits: u32,

    /// Every odd prime below this bound is trial-divided out.
    #[arg(short = 'B', long, default_value_t = 541)]
    trial_bound: u64,

    /// Repetitions of the filtering biprimality test.
    #[arg(short = 's', long, default_value_t = 40)]
    filter_rounds: u32,

    /// Public seed, hex encoded.
    #[arg(long, env = "DISTRSA_SEED")]
    seed: String,

    /// Hash behind the public pairing and leader choices.
    #[arg(long, default_value = "sha256", value_parser = parse_hash)]
    hash: HashFunction,

    /// Trial-division variant: `tree`, or `pair` for two parties.
    #[arg(long, default_value = "tree", value_parser = parse_trial_division)]
    trial_division: TrialDivisionMode,

    /// Give up after this many candidate attempts.
    #[arg(long, default_value_t = 1_000_000)]
    max_attempts: u64,

    #[arg(long, value_enum, default_value_t = Transport::Memory)]
    transport: Transport,

    /// Run only this endpoint: a party index in 1..=n, or `mediator`.
    /// Requires `--transport socket` and `--peers`.
    #[arg(long, requires = "peers")]
    party_id: Option<String>,

    /// Comma-separated listen addresses of parties 1..=n, then the mediator.
    #[arg(long, value_delimiter = ',')]
    peers: Vec<SocketAddr>,

    /// Reconstruct p and q after the run and check them. Simulation only.
    #[arg(long)]
    verify: bool,

    /// Write per-attempt, per-party, per-phase counters as JSON lines.
    #[arg(long)]
    metrics_out: Option<PathBuf>,

    /// Single logical clock for the in-memory transport; output is
    /// reproducible for a fixed seed.
    #[arg(long)]
    deterministic: bool,
}

fn parse_hash(s: &str) -> Result<HashFunction, String> {
    s.parse().map_err(|e: distrsa::ConfigError| e.to_string())
}

fn parse_trial_division(s: &str) -> Result<TrialDivisionMode, String> {
    s.parse().map_err(|e: distrsa::ConfigError| e.to_string())
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Run(ProtocolError),
    Io(io::Error),
}

impl From<ProtocolError> for CliError {
    fn from(e: ProtocolError) -> Self {
        match e {
            ProtocolError::Config(c) => CliError::Usage(c.to_string()),
            other => CliError::Run(other),
        }
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Io(e)
    }
}

/// Which endpoint a single-endpoint invocation runs.
enum Role {
    Party(PartyId),
    Mediator,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(code) => code,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            eprintln!("run with --help for usage");
            ExitCode::from(EXIT_USAGE)
        }
        Err(CliError::Run(e @ ProtocolError::GaveUp { .. })) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_GAVE_UP)
        }
        Err(CliError::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_FAILURE)
        }
        Err(CliError::Io(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_FAILURE)
        }
    }
}

fn build_config(cli: &Cli) -> Result<ProtocolConfig, CliError> {
    let seed = hex::decode(cli.seed.trim_start_matches("0x")).map_err(|e| CliError::Usage(format!("seed is not valid hex: {e}")))?;
    if seed.is_empty() {
        return Err(CliError::Usage("seed must not be empty".into()));
    }
    let mut config = ProtocolConfig::new(cli.parties, cli.bits, seed)
        .and_then(|c| c.with_trial_bound(cli.trial_bound))
        .and_then(|c| c.with_filter_rounds(cli.filter_rounds))
        .and_then(|c| c.with_max_attempts(cli.max_attempts))
        .and_then(|c| c.with_trial_division(cli.trial_division))
        .map_err(|e| CliError::Usage(e.to_string()))?;
    config.hash = cli.hash;
    Ok(config)
}

fn parse_role(raw: &str, parties: u16) -> Result<Role, CliError> {
    if raw.eq_ignore_ascii_case("mediator") {
        return Ok(Role::Mediator);
    }
    let index: u16 = raw.parse().map_err(|_| CliError::Usage(format!("--party-id {raw:?} is neither an index nor `mediator`")))?;
    PartyId::new(index, parties).map(Role::Party).map_err(|e| CliError::Usage(e.to_string()))
}

fn run(cli: &Cli) -> Result<ExitCode, CliError> {
    let config = build_config(cli)?;
    if cli.deterministic && cli.transport != Transport::Memory {
        return Err(CliError::Usage("--deterministic needs the memory transport".into()));
    }
    match &cli.party_id {
        Some(raw) => {
            if cli.transport != Transport::Socket {
                return Err(CliError::Usage("--party-id needs --transport socket".into()));
            }
            if cli.verify {
                return Err(CliError::Usage("--verify needs every party's shares; run without --party-id".into()));
            }
            let role = parse_role(raw, config.parties())?;
            run_single(cli, &config, role)
        }
        None => {
            if !cli.peers.is_empty() {
                return Err(CliError::Usage("--peers is only used with --party-id".into()));
            }
            run_local(cli, &config)
        }
    }
}

/// All parties in this process.
fn run_local(cli: &Cli, config: &ProtocolConfig) -> Result<ExitCode, CliError> {
    let backend = match cli.transport {
        Transport::Memory => Backend::Memory,
        Transport::Socket => Backend::Socket,
    };
    let options = ClusterOptions { backend, deterministic: cli.deterministic, verify: cli.verify };
    let start = Instant::now();
    let run = run_cluster(config, options)?;
    let elapsed = start.elapsed();

    let logs: Vec<AttemptLog> = run.outcomes.iter().flat_map(|o| o.attempt_logs.iter().cloned()).collect();
    if let Some(path) = &cli.metrics_out {
        write_metrics(path, &logs)?;
    }
    let stdout = io::stdout();
    let mut out = stdout.lock();
    print_modulus(&mut out, run.modulus(), run.attempts())?;
    print_summary(&mut out, config, &run.outcomes)?;
    let verified = print_verification(&mut out, &run)?;
    out.flush()?;
    eprintln!("finished in {}", human(elapsed));
    Ok(if verified { ExitCode::SUCCESS } else { ExitCode::from(EXIT_FAILURE) })
}

/// One endpoint of a socket deployment.
fn run_single(cli: &Cli, config: &ProtocolConfig, role: Role) -> Result<ExitCode, CliError> {
    let endpoints = usize::from(config.parties()) + 1;
    if cli.peers.len() != endpoints {
        return Err(CliError::Usage(format!("--peers needs {endpoints} addresses (parties 1..={}, then the mediator)", config.parties())));
    }
    let directory: BTreeMap<Address, SocketAddr> = config
        .party_ids()
        .map(Address::Party)
        .chain(std::iter::once(Address::Mediator))
        .zip(cli.peers.iter().copied())
        .collect();
    let me = match role {
        Role::Party(p) => Address::Party(p),
        Role::Mediator => Address::Mediator,
    };
    let listener = TcpListener::bind(directory[&me])?;
    let mut handle = SocketEndpoint::join(me, config.parties(), listener, &directory, Duration::from_secs(60))
        .map_err(ProtocolError::from)?;

    match role {
        Role::Mediator => {
            let stats = run_mediator(handle).map_err(ProtocolError::from)?;
            eprintln!("mediator delivered {} transfers, rejected {}", stats.delivered, stats.rejected);
            Ok(ExitCode::SUCCESS)
        }
        Role::Party(_) => {
            let start = Instant::now();
            let mut source = RandomShares::new(StdRng::from_entropy());
            let mut rng = StdRng::from_entropy();
            let outcome = run_party(config, &mut handle, &mut source, &mut rng, RunOptions::default())?;
            drop(handle);
            if let Some(path) = &cli.metrics_out {
                write_metrics(path, &outcome.attempt_logs)?;
            }
            let stdout = io::stdout();
            let mut out = stdout.lock();
            print_modulus(&mut out, &outcome.modulus, outcome.attempts)?;
            print_summary(&mut out, config, std::slice::from_ref(&outcome))?;
            out.flush()?;
            eprintln!("finished in {}", human(start.elapsed()));
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn write_metrics(path: &PathBuf, logs: &[AttemptLog]) -> Result<(), CliError> {
    let mut file = BufWriter::new(File::create(path)?);
    write_json_lines(logs, &mut file)?;
    file.flush()?;
    Ok(())
}

fn print_modulus(out: &mut impl Write, modulus: &distrsa::Natural, attempts: u64) -> io::Result<()> {
    writeln!(out, "N={modulus}")?;
    writeln!(out, "N_hex=0x{}", modulus.to_str_radix(16))?;
    writeln!(out, "bits={}", modulus.bits())?;
    writeln!(out, "attempts={attempts}")
}

/// Per-party communications and OT setups summed over all attempts.
fn print_summary(out: &mut impl Write, config: &ProtocolConfig, outcomes: &[RunOutcome]) -> io::Result<()> {
    writeln!(out)?;
    write!(out, "{:<8}", "party")?;
    for phase in Phase::PROTOCOL {
        write!(out, " {:>16}", phase.name())?;
    }
    writeln!(out, " {:>12}", "ot_inits")?;
    let mut totals = PhaseMetrics::default();
    for outcome in outcomes {
        let party = outcome.attempt_logs.first().map(|l| l.party.to_string()).unwrap_or_default();
        write_row(out, &party, &outcome.metrics, &Phase::PROTOCOL)?;
        totals.accumulate(&outcome.metrics);
    }
    if outcomes.len() > 1 {
        write_row(out, "total", &totals, &Phase::PROTOCOL)?;
    }
    writeln!(
        out,
        "(n={}, k={}, B={}, s={}, hash={})",
        config.parties(),
        config.bits,
        config.trial_bound,
        config.filter_rounds,
        config.hash
    )
}

fn write_row(out: &mut impl Write, label: &str, metrics: &PhaseMetrics, phases: &[Phase]) -> io::Result<()> {
    write!(out, "{label:<8}")?;
    let mut inits = 0;
    for &phase in phases {
        let c = metrics.counters(phase);
        inits += c.ot_inits;
        write!(out, " {:>16}", c.communications())?;
    }
    writeln!(out, " {inits:>12}")
}

fn print_verification(out: &mut impl Write, run: &ClusterRun) -> io::Result<bool> {
    let Some(v) = &run.verification else {
        return Ok(true);
    };
    writeln!(out)?;
    if v.ok() {
        writeln!(out, "VERIFIED p prime, q prime, p·q = N")?;
    } else {
        writeln!(
            out,
            "VERIFICATION FAILED p prime: {}, q prime: {}, p·q = N: {}, p ≡ q ≡ 3 (mod 4): {}",
            v.p_prime, v.q_prime, v.product_matches, v.three_mod_four
        )?;
    }
    Ok(v.ok())
}

fn human(d: Duration) -> String {
    if d.as_secs() >= 1 {
        format!("{:.2}s", d.as_secs_f64())
    } else {
        format!("{}ms", d.as_millis())
    }
}
