//! Command-line experiment runner.
//!
//! Every subcommand runs a deterministic experiment, writes its CSV
//! artifact (to `--out` or stdout), prints one line per invariant check,
//! and exits 0 only when every check passed. `converge` additionally
//! supports a two-process socket mode (`--transport socket` with
//! `--listen` on one host and `--connect` on the other).

use std::fmt;
use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use nebula::bench::{
    run_convergence, run_grad_check, run_start_step_sweep, run_sweep, run_throughput,
    BenchOutput, InvariantCheck, SweepPlan,
};
use nebula::netsim::{Endpoint, ReplayGuard, SessionCredential, TcpLink, SECRET_ENV_VAR};
use nebula::orchestrator::config::Scenario;
use nebula::orchestrator::{
    run_scenario1_socket_discriminator, run_scenario1_socket_generator,
    run_scenario2_socket_decoder, run_scenario2_socket_encoder, ExperimentConfig,
    Scenario1Settings, Scenario2Settings, TraceEventKind,
};
use nebula::CODE_VERSION;

#[derive(Parser)]
#[command(
    name = "bench-cli",
    version = CODE_VERSION,
    about = "Deterministic experiment runner for collaborative WAN training studies"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Codec-schedule sweep: baseline, FP16+INT8, and FP16(SVD(p))+INT8 rows.
    Sweep(CommonArgs),
    /// Delayed-compression sweep over activation start steps.
    StartStep {
        #[command(flatten)]
        common: CommonArgs,
        /// Activation steps to compare, ascending.
        #[arg(long, value_delimiter = ',', default_values_t = [0u64, 100, 200, 1000])]
        starts: Vec<u64>,
    },
    /// Throughput comparison across link presets and sub-worker counts.
    Throughput(CommonArgs),
    /// Loss curve for the configured scenario, optionally hot-started from
    /// a locally trained checkpoint.
    Converge {
        #[command(flatten)]
        common: CommonArgs,
        /// Single-cluster steps to train before the checkpoint/resume seam.
        #[arg(long, default_value_t = 0)]
        hot_start: u64,
    },
    /// Finite-difference verification of every backward pass.
    GradCheck {
        /// Seed for the randomized instances.
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Transport {
    /// In-process simulated link (deterministic).
    Sim,
    /// Real TCP between two processes (wall clock).
    Socket,
}

impl fmt::Display for Transport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Transport::Sim => "sim",
            Transport::Socket => "socket",
        })
    }
}

#[derive(Args)]
struct CommonArgs {
    /// TOML experiment configuration.
    #[arg(long)]
    config: PathBuf,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the config's run seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Where the run executes.
    #[arg(long, value_enum, default_value_t = Transport::Sim)]
    transport: Transport,
    /// Two-process mode: accept the peer here (this process becomes the
    /// discriminator/decoder side).
    #[arg(long, conflicts_with = "connect")]
    listen: Option<String>,
    /// Two-process mode: dial the listening peer (this process becomes the
    /// generator/encoder side).
    #[arg(long)]
    connect: Option<String>,
}

impl CommonArgs {
    fn load_config(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::from_file(&self.config)
            .with_context(|| format!("loading {}", self.config.display()))?;
        if let Some(seed) = self.seed {
            cfg.run.seed = seed;
        }
        Ok(cfg)
    }

    fn require_sim(&self, subcommand: &str) -> Result<()> {
        if self.transport == Transport::Socket {
            bail!(
                "`{subcommand}` runs many isolated simulations and has no two-process form; \
                 only `converge` supports --transport socket"
            );
        }
        Ok(())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<bool> {
    let (output, out_path) = match cli.command {
        Command::Sweep(common) => {
            common.require_sim("sweep")?;
            let cfg = common.load_config()?;
            (run_sweep(&SweepPlan::table_sweep(cfg))?, common.out)
        }
        Command::StartStep { common, starts } => {
            common.require_sim("start-step")?;
            let cfg = common.load_config()?;
            (run_start_step_sweep(&cfg, &starts)?, common.out)
        }
        Command::Throughput(common) => {
            common.require_sim("throughput")?;
            let cfg = common.load_config()?;
            (run_throughput(&cfg)?, common.out)
        }
        Command::Converge { common, hot_start } => {
            let cfg = common.load_config()?;
            if hot_start != 0 {
                // Run metadata: desk-scale budgets stand in for full-scale
                // schedules at roughly 1:88 (1,000 steps here ≈ 88,000 there).
                eprintln!(
                    "hot start: {hot_start} checkpointed steps, then {} over the WAN (desk-scale budget, ~1:88 of a full-scale schedule)",
                    cfg.run.steps
                );
            }
            match common.transport {
                Transport::Sim => (run_convergence(&cfg, hot_start)?, common.out),
                Transport::Socket => {
                    if hot_start != 0 {
                        bail!("--hot-start needs the deterministic simulator; drop it or use --transport sim");
                    }
                    (converge_socket(&cfg, &common)?, common.out)
                }
            }
        }
        Command::GradCheck { seed, out } => (run_grad_check(seed), out),
    };
    emit(&output, out_path.as_deref())?;
    Ok(output.all_pass())
}

/// Writes the CSV (file or stdout) and prints one line per check. When the
/// CSV goes to stdout the check lines move to stderr so the artifact stays
/// clean.
fn emit(output: &BenchOutput, out_path: Option<&std::path::Path>) -> Result<()> {
    let checks_to_stderr = match out_path {
        Some(path) => {
            std::fs::write(path, &output.csv)
                .with_context(|| format!("writing {}", path.display()))?;
            println!("wrote {}", path.display());
            false
        }
        None => {
            print!("{}", output.csv);
            std::io::stdout().flush()?;
            true
        }
    };
    for check in &output.checks {
        let line = format!(
            "[{}] {} — {}",
            if check.pass { "PASS" } else { "FAIL" },
            check.name,
            check.detail
        );
        if checks_to_stderr {
            eprintln!("{line}");
        } else {
            println!("{line}");
        }
    }
    Ok(())
}

/// Runs this process's side of the configured scenario over TCP. The
/// listening process takes the discriminator/decoder role, the connecting
/// process the generator/encoder role. Both must share the config file and
/// the secret in `NEBULA_SECRET`.
fn converge_socket(cfg: &ExperimentConfig, common: &CommonArgs) -> Result<BenchOutput> {
    let (role_left, addr) = match (&common.connect, &common.listen) {
        (Some(addr), None) => (true, addr.clone()),
        (None, Some(addr)) => (false, addr.clone()),
        (None, None) => bail!("--transport socket needs --listen or --connect"),
        _ => unreachable!("clap rejects --listen with --connect"),
    };
    let secret = SessionCredential::secret_from_env()
        .unwrap_or_else(|| b"nebula-sim-secret".to_vec());
    if SessionCredential::secret_from_env().is_none() {
        eprintln!("warning: {SECRET_ENV_VAR} is unset; using the built-in demo secret");
    }
    // Wall-clock nonce: socket runs are not replayable, and the responder
    // rejects nonce reuse within its lifetime.
    let nonce_seed = SystemTime::now().duration_since(UNIX_EPOCH)?.as_nanos() as u64;

    match (cfg.run.scenario, role_left) {
        (Scenario::Scenario1, true) => {
            let settings = Scenario1Settings::from_config(cfg)?;
            let cred = SessionCredential::from_seed("generator", secret, nonce_seed);
            let mut ep = Endpoint::new(TcpLink::connect(&addr)?);
            ep.handshake_initiate(&cred)?;
            eprintln!("session established with {addr}; running {} rounds", settings.rounds);
            let art = run_scenario1_socket_generator(ep, &settings)?;
            print_trace_summary(&art.trace);
            let csv = curve_csv(cfg, "scenario1", "generator", &["generator_loss"], |w| {
                for (i, loss) in art.round_losses.iter().enumerate() {
                    w(i as u64, &[*loss]);
                }
            });
            let tensor_recv = art
                .trace
                .events
                .iter()
                .any(|e| e.kind == TraceEventKind::Recv && e.label != "token");
            let checks = vec![
                opt_steps_check(art.opt.t, settings.rounds),
                series_len_check(art.round_losses.len() as u64, settings.rounds),
                InvariantCheck {
                    name: "only pacing tokens flowed back".into(),
                    pass: !tensor_recv,
                    detail: format!("{} frames received", recv_count(&art.trace)),
                },
            ];
            Ok(BenchOutput { csv, checks })
        }
        (Scenario::Scenario1, false) => {
            let settings = Scenario1Settings::from_config(cfg)?;
            let cred = SessionCredential::from_seed("discriminator-root", secret, nonce_seed);
            let ep = accept_one(&addr, &cred)?;
            let art = run_scenario1_socket_discriminator(ep, &settings)?;
            let csv = curve_csv(cfg, "scenario1", "discriminator", &["rtd_loss", "clm_loss"], |w| {
                for (i, (rtd, clm)) in art.round_losses.iter().enumerate() {
                    w(i as u64, &[*rtd, *clm]);
                }
            });
            let checks = vec![
                opt_steps_check(art.opt.t, settings.rounds),
                series_len_check(art.round_losses.len() as u64, settings.rounds),
            ];
            Ok(BenchOutput { csv, checks })
        }
        (Scenario::Scenario2, true) => {
            let settings = Scenario2Settings::from_config(cfg)?;
            let cred = SessionCredential::from_seed("encoder", secret, nonce_seed);
            let mut ep = Endpoint::new(TcpLink::connect(&addr)?);
            ep.handshake_initiate(&cred)?;
            eprintln!("session established with {addr}; running {} steps", settings.steps);
            let art = run_scenario2_socket_encoder(ep, &settings)?;
            print_trace_summary(&art.trace);
            let csv = curve_csv(cfg, "scenario2", "encoder", &[], |_| {});
            let checks = vec![opt_steps_check(art.opt.t, settings.steps)];
            Ok(BenchOutput { csv, checks })
        }
        (Scenario::Scenario2, false) => {
            let settings = Scenario2Settings::from_config(cfg)?;
            let cred = SessionCredential::from_seed("decoder", secret, nonce_seed);
            let ep = accept_one(&addr, &cred)?;
            let art = run_scenario2_socket_decoder(ep, &settings)?;
            let csv = curve_csv(cfg, "scenario2", "decoder", &["train_loss"], |w| {
                for (i, loss) in art.step_losses.iter().enumerate() {
                    w(i as u64, &[*loss]);
                }
            });
            let checks = vec![
                opt_steps_check(art.opt.t, settings.steps),
                series_len_check(art.step_losses.len() as u64, settings.steps),
            ];
            Ok(BenchOutput { csv, checks })
        }
    }
}

fn accept_one(addr: &str, cred: &SessionCredential) -> Result<Endpoint<TcpLink>> {
    let (listener, local) = TcpLink::bind(addr)?;
    eprintln!("listening on {local}");
    let mut ep = Endpoint::new(TcpLink::accept(&listener)?);
    ep.handshake_respond(cred, &mut ReplayGuard::new())?;
    eprintln!("session established");
    Ok(ep)
}

fn opt_steps_check(actual: u64, budget: u64) -> InvariantCheck {
    InvariantCheck {
        name: "optimizer stepped once per step of the budget".into(),
        pass: actual == budget,
        detail: format!("{actual} of {budget}"),
    }
}

fn series_len_check(actual: u64, budget: u64) -> InvariantCheck {
    InvariantCheck {
        name: "loss series spans the budget".into(),
        pass: actual == budget,
        detail: format!("{actual} of {budget}"),
    }
}

fn recv_count(trace: &nebula::orchestrator::ProtocolTrace) -> usize {
    trace.events.iter().filter(|e| e.kind == TraceEventKind::Recv).count()
}

/// Builds the per-side loss CSV: fixed provenance columns plus whatever
/// loss components this side computed.
fn curve_csv(
    cfg: &ExperimentConfig,
    scenario: &str,
    side: &str,
    loss_columns: &[&str],
    fill: impl FnOnce(&mut dyn FnMut(u64, &[f64])),
) -> String {
    let mut csv = String::from("scenario,side,step");
    for col in loss_columns {
        csv.push(',');
        csv.push_str(col);
    }
    csv.push_str(",seed,config_hash,code_version\n");
    let tail = format!("{},{},{}", cfg.run.seed, cfg.config_hash(), CODE_VERSION);
    let mut write_row = |step: u64, losses: &[f64]| {
        csv.push_str(&format!("{scenario},{side},{step}"));
        for loss in losses {
            csv.push_str(&format!(",{loss:.9}"));
        }
        csv.push_str(&format!(",{tail}\n"));
    };
    fill(&mut write_row);
    csv
}

/// Byte summary for the sending side, kept on stderr so the CSV artifact
/// stays a pure table.
fn print_trace_summary(trace: &nebula::orchestrator::ProtocolTrace) {
    let sent = trace.sent_bytes_where(|_| true);
    eprintln!("sent {sent} charged bytes over {} events", trace.events.len());
}
