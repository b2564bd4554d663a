use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::AtomicBool;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};

use satpep_bench::daemon::{self, ClientOptions, DaemonError, ServerOptions};
use satpep_bench::metrics::{self, Metric};
use satpep_bench::runner::{self, Mode};
use satpep_bench::{BenchError, Scenario};
use satpep_core::runtime::seed_from_env;
use satpep_core::testbed::TransportKind;
use satpep_core::transport::TransportConfig;

#[derive(Parser)]
#[command(name = "satpep", version, about = "Satellite PEP laboratory: scenarios, sweeps, reports and tunnel daemons")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario file and write its records.
    Run(RunArgs),
    /// Run a scenario whose workload is a sweep.
    Sweep(RunArgs),
    /// Summarize a records file, optionally writing an ECDF.
    Report {
        records: PathBuf,
        /// Metric to write an ECDF for.
        #[arg(long)]
        ecdf: Option<Metric>,
        /// ECDF output path (default: next to the records file).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Terminal-side tunnel daemon.
    PepClient {
        #[arg(long)]
        listen: SocketAddr,
        #[arg(long)]
        server: SocketAddr,
        #[command(flatten)]
        tunnel: TunnelArgs,
    },
    /// Gateway-side tunnel daemon.
    PepServer {
        #[arg(long)]
        listen: SocketAddr,
        #[command(flatten)]
        tunnel: TunnelArgs,
        /// Terrestrial dial timeout in milliseconds.
        #[arg(long, default_value_t = 5000)]
        dial_timeout_ms: u64,
    },
}

#[derive(Args)]
struct RunArgs {
    scenario: PathBuf,
    /// Overrides the scenario seed (and the environment).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Only run this transport (repeatable).
    #[arg(long = "transport")]
    transports: Vec<TransportKind>,
    /// Run jobs one after another.
    #[arg(long)]
    sequential: bool,
}

#[derive(Args)]
struct TunnelArgs {
    #[arg(long)]
    psk_file: PathBuf,
    #[arg(long)]
    max_streams: Option<u64>,
    #[arg(long)]
    ack_threshold: Option<u64>,
    #[arg(long)]
    initial_cwnd: Option<u64>,
}

impl TunnelArgs {
    fn config(&self) -> TransportConfig {
        let mut c = TransportConfig::default();
        if let Some(v) = self.max_streams {
            c.max_concurrent_streams = v;
        }
        if let Some(v) = self.ack_threshold {
            c.ack_elicitation_threshold = v;
        }
        if let Some(v) = self.initial_cwnd {
            c.initial_cwnd_packets = v;
        }
        c
    }
}

fn run(args: &RunArgs, must_sweep: bool) -> Result<(), BenchError> {
    let mut scenario = Scenario::load(&args.scenario)?;
    if must_sweep && scenario.workload.sweep().is_none() {
        return Err(BenchError::Schema("sweep needs a workload of kind \"sweep\"".into()));
    }
    scenario.seed = args.seed.unwrap_or_else(|| seed_from_env(scenario.seed));
    if !args.transports.is_empty() {
        runner::restrict(&mut scenario, &args.transports);
    }
    let mode = if args.sequential { Mode::Sequential } else { Mode::preferred() };
    let report = runner::run_scenario(&scenario, mode)?;
    for v in &report.confidentiality_violations {
        eprintln!("confidentiality check failed: {v}");
    }

    std::fs::create_dir_all(&args.out).map_err(|e| BenchError::io(&args.out, e))?;
    let csv_path = args.out.join(format!("{}.csv", scenario.name));
    metrics::emit_csv(&report.records, &csv_path)?;
    let summary_path = args.out.join(format!("{}.summary.csv", scenario.name));
    write_summary(&report.records, &summary_path)?;
    println!("{} records -> {}", report.records.len(), csv_path.display());
    print_summary(&report.records)?;
    if !report.confidentiality_violations.is_empty() {
        return Err(BenchError::Run("confidentiality check failed".into()));
    }
    Ok(())
}

fn write_summary(records: &[metrics::MetricRecord], path: &Path) -> Result<(), BenchError> {
    let f = std::fs::File::create(path).map_err(|e| BenchError::io(path, e))?;
    metrics::write_summary(&metrics::summarize(records), f)
}

fn print_summary(records: &[metrics::MetricRecord]) -> Result<(), BenchError> {
    metrics::write_summary(&metrics::summarize(records), std::io::stdout().lock())
}

fn report(records: &Path, ecdf: Option<Metric>, out: Option<PathBuf>) -> Result<(), BenchError> {
    let recs = metrics::load_csv(records)?;
    if recs.is_empty() {
        return Err(BenchError::Empty);
    }
    print_summary(&recs)?;
    if let Some(m) = ecdf {
        let path = out.unwrap_or_else(|| {
            let stem = records.file_stem().and_then(|s| s.to_str()).unwrap_or("records");
            records.with_file_name(format!("{stem}.ecdf_{}.csv", m.as_str()))
        });
        let f = std::fs::File::create(&path).map_err(|e| BenchError::io(&path, e))?;
        metrics::emit_ecdf(&recs, m, std::io::BufWriter::new(f))?;
        eprintln!("ecdf -> {}", path.display());
    }
    Ok(())
}

fn daemon_exit(r: Result<(), DaemonError>) -> ExitCode {
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                DaemonError::Io(..) => 3,
                DaemonError::BadPsk | DaemonError::Config(_) => 2,
            })
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let stop = AtomicBool::new(false);
    let result = match cli.cmd {
        Cmd::Run(a) => run(&a, false),
        Cmd::Sweep(a) => run(&a, true),
        Cmd::Report { records, ecdf, out } => report(&records, ecdf, out),
        Cmd::PepClient { listen, server, tunnel } => {
            return daemon_exit(daemon::read_psk(&tunnel.psk_file).and_then(|psk| {
                let opts = ClientOptions {
                    listen,
                    server,
                    psk,
                    transport: tunnel.config(),
                };
                daemon::run_client(opts, &stop, |a| eprintln!("pep-client listening on {a}"))
            }))
        }
        Cmd::PepServer {
            listen,
            tunnel,
            dial_timeout_ms,
        } => {
            return daemon_exit(daemon::read_psk(&tunnel.psk_file).and_then(|psk| {
                let opts = ServerOptions {
                    listen,
                    psk,
                    transport: tunnel.config(),
                    dial_timeout: Duration::from_millis(dial_timeout_ms),
                };
                daemon::run_server(opts, &stop, |a| eprintln!("pep-server listening on {a}"))
            }))
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
