//! `hvac-coop`: batch driver for cooperative HVAC scheduling scenarios.

mod socket;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use hvac_coop::agent::AgentError;
use hvac_coop::coordinator::{CoordinatorError, DecayScope, ErrorNorm};
use hvac_coop::protocol::DriverError;
use hvac_coop::scenario::{
    load_scenario, read_scenario, run_baseline, run_scenario, synth_scenario, validate, write_report,
    write_synth_scenario, RhoMode, RunError, Scenario, ScenarioError, ScenarioReport, TransportKind,
};

/// Process exit statuses. Usage errors exit with 2 through clap.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exit {
    Ok = 0,
    Invalid = 1,
    NonConvergence = 3,
    Infeasible = 4,
    Io = 5,
    Protocol = 6,
    Rationality = 7,
}

impl From<Exit> for ExitCode {
    fn from(e: Exit) -> Self {
        ExitCode::from(e as u8)
    }
}

#[derive(Debug)]
pub struct Failure {
    pub exit: Exit,
    pub message: String,
}

impl Failure {
    pub fn new(exit: Exit, message: impl Into<String>) -> Self {
        Self {
            exit,
            message: message.into(),
        }
    }
}

impl From<ScenarioError> for Failure {
    fn from(e: ScenarioError) -> Self {
        let exit = match e {
            ScenarioError::Io { .. } => Exit::Io,
            ScenarioError::Parse { .. } | ScenarioError::Invalid(_) => Exit::Invalid,
        };
        Failure::new(exit, e.to_string())
    }
}

impl From<AgentError> for Failure {
    fn from(e: AgentError) -> Self {
        Failure::new(Exit::Infeasible, e.to_string())
    }
}

impl From<DriverError> for Failure {
    fn from(e: DriverError) -> Self {
        match e {
            DriverError::Agent(a) | DriverError::Coordinator(CoordinatorError::Agent(a)) => a.into(),
            DriverError::Coordinator(CoordinatorError::Config(m)) => Failure::new(Exit::Invalid, m),
            other => Failure::new(Exit::Protocol, other.to_string()),
        }
    }
}

impl From<RunError> for Failure {
    fn from(e: RunError) -> Self {
        if let Some(a) = e.agent_error() {
            return a.clone().into();
        }
        match e {
            RunError::Driver(d) => d.into(),
            RunError::Coordinator(CoordinatorError::Config(m)) => Failure::new(Exit::Invalid, m),
            other => Failure::new(Exit::Protocol, other.to_string()),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "hvac-coop", version, about = "Cooperative HVAC scheduling with peer-to-peer energy trading")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the distributed trading scheme and write the report files.
    Run(RunArgs),
    /// Solve every user's standalone problem without trading.
    Baseline(BaselineArgs),
    /// Run both and check that cooperation does not raise the system cost.
    Compare(RunArgs),
    /// Generate a synthetic scenario with CSV traces.
    Synth(SynthArgs),
    /// Check a scenario file and list every problem found.
    Validate(ValidateArgs),
    /// Serve one user over a socket connection (started by `run --transport socket`).
    #[command(hide = true)]
    Agent(socket::AgentArgs),
}

#[derive(Args, Debug)]
struct OutArg {
    /// Output directory.
    #[arg(long, short, env = "HVAC_COOP_OUT", default_value = "out")]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Transport {
    Inproc,
    Socket,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum RhoArg {
    Fixed,
    Decaying,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ScopeArg {
    Penalty,
    DualStep,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum NormArg {
    L1,
    L2,
}

#[derive(Args, Debug)]
struct RunArgs {
    scenario: PathBuf,
    #[command(flatten)]
    out: OutArg,
    #[arg(long, value_enum, default_value = "inproc")]
    transport: Transport,
    /// Stop once the summed trade disagreement falls to this value.
    #[arg(long)]
    tolerance: Option<f64>,
    #[arg(long, value_enum)]
    rho_mode: Option<RhoArg>,
    #[arg(long)]
    rho0: Option<f64>,
    /// With a decaying step: decay the penalty too, or only the dual step.
    #[arg(long, value_enum)]
    decay_scope: Option<ScopeArg>,
    #[arg(long, value_enum)]
    norm: Option<NormArg>,
    #[arg(long)]
    max_iter: Option<usize>,
    /// With `--transport socket`: wait for externally started agents instead
    /// of spawning them.
    #[arg(long, requires = "transport")]
    remote_agents: bool,
    /// Coordinator listen address for `--transport socket`.
    #[arg(long, default_value = "127.0.0.1:0")]
    listen: String,
}

#[derive(Args, Debug)]
struct BaselineArgs {
    scenario: PathBuf,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[command(flatten)]
    out: OutArg,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    users: usize,
    #[arg(long, default_value_t = 24)]
    horizon: usize,
}

#[derive(Args, Debug)]
struct ValidateArgs {
    scenario: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => cmd_run(&a, false),
        Command::Compare(a) => cmd_run(&a, true),
        Command::Baseline(a) => cmd_baseline(&a),
        Command::Synth(a) => cmd_synth(&a),
        Command::Validate(a) => cmd_validate(&a),
        Command::Agent(a) => socket::cmd_agent(&a),
    };
    match result {
        Ok(exit) => exit.into(),
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.exit.into()
        }
    }
}

fn apply_overrides(scenario: &mut Scenario, a: &RunArgs) -> Result<(), Failure> {
    let admm = &mut scenario.config.admm;
    if let Some(t) = a.tolerance {
        admm.tolerance = t;
    }
    if let Some(m) = a.rho_mode {
        admm.rho_mode = match m {
            RhoArg::Fixed => RhoMode::Fixed,
            RhoArg::Decaying => RhoMode::Decaying,
        };
    }
    if let Some(r) = a.rho0 {
        admm.rho0 = r;
    }
    if let Some(d) = a.decay_scope {
        admm.decay_scope = match d {
            ScopeArg::Penalty => DecayScope::Penalty,
            ScopeArg::DualStep => DecayScope::DualStep,
        };
    }
    if let Some(n) = a.norm {
        admm.norm = match n {
            NormArg::L1 => ErrorNorm::L1,
            NormArg::L2 => ErrorNorm::L2,
        };
    }
    if let Some(k) = a.max_iter {
        admm.max_iter = k;
    }
    scenario.admm = admm.to_config();
    scenario
        .admm
        .validate()
        .map_err(|e| Failure::new(Exit::Invalid, e.to_string()))
}

fn print_costs(report: &ScenarioReport) {
    println!("{:>8} {:>14} {:>14} {:>10}", "user", "standalone", "cooperative", "saving %");
    for r in report.cost_rows() {
        println!(
            "{:>8} {:>14.6} {:>14.6} {:>10.3}",
            r.user, r.emp_cost, r.coop_cost, r.reduction_pct
        );
    }
}

fn write_all(report: &ScenarioReport, out: &Path) -> Result<(), Failure> {
    let files = write_report(report, out)?;
    println!("wrote {} files to {}", files.len(), out.display());
    Ok(())
}

fn cmd_run(a: &RunArgs, compare: bool) -> Result<Exit, Failure> {
    if a.remote_agents && !matches!(a.transport, Transport::Socket) {
        return Err(Failure::new(Exit::Invalid, "--remote-agents needs --transport socket"));
    }
    let mut scenario = load_scenario(&a.scenario)?;
    apply_overrides(&mut scenario, a)?;
    let report = match a.transport {
        Transport::Inproc => run_scenario(&scenario, TransportKind::Inproc)?,
        Transport::Socket => socket::run_processes(&a.scenario, &scenario, &a.out.out, &a.listen, a.remote_agents)?,
    };
    write_all(&report, &a.out.out)?;
    println!(
        "{} after {} iterations (final error {:.3e})",
        if report.converged { "converged" } else { "stopped without consensus" },
        report.iterations,
        report.convergence.last().map_or(0.0, |r| r.error)
    );
    if compare {
        print_costs(&report);
    }
    if !report.converged {
        return Err(Failure::new(
            Exit::NonConvergence,
            format!("no consensus within {} iterations; partial results written", scenario.admm.max_iter),
        ));
    }
    let arbitrage: usize = report.users.iter().map(|u| u.arbitrage_slots).sum();
    if arbitrage > 0 {
        eprintln!("note: {arbitrage} user-slot(s) buy from the grid while selling to peers");
    }
    if compare && report.system.coop_cost > report.system.emp_cost + 1e-6 {
        return Err(Failure::new(
            Exit::Rationality,
            format!(
                "cooperative system cost {} exceeds standalone cost {}",
                report.system.coop_cost, report.system.emp_cost
            ),
        ));
    }
    Ok(Exit::Ok)
}

fn cmd_baseline(a: &BaselineArgs) -> Result<Exit, Failure> {
    let scenario = load_scenario(&a.scenario)?;
    let report = run_baseline(&scenario)?;
    write_all(&report, &a.out.out)?;
    print_costs(&report);
    Ok(Exit::Ok)
}

fn cmd_synth(a: &SynthArgs) -> Result<Exit, Failure> {
    if a.users == 0 || a.horizon == 0 {
        return Err(Failure::new(Exit::Invalid, "--users and --horizon must be positive"));
    }
    let config = synth_scenario(a.seed, a.users, a.horizon);
    let path = write_synth_scenario(&a.out.out, config).map_err(|e| {
        Failure::new(Exit::Io, format!("cannot write to {}: {e}", a.out.out.display()))
    })?;
    println!("{}", path.display());
    Ok(Exit::Ok)
}

fn cmd_validate(a: &ValidateArgs) -> Result<Exit, Failure> {
    let config = read_scenario(&a.scenario)?;
    let base = a.scenario.parent().unwrap_or(Path::new("."));
    match validate(&config, base) {
        Ok(s) => {
            println!(
                "{}: ok ({} users, {} slots)",
                a.scenario.display(),
                s.n_users(),
                s.grid.horizon_len
            );
            Ok(Exit::Ok)
        }
        Err(findings) => {
            println!("{:>6}  {:<18} message", "user", "field");
            for f in &findings {
                let user = f.user.map_or("-".to_string(), |u| u.to_string());
                println!("{user:>6}  {:<18} {}", f.field, f.message);
            }
            Err(Failure::new(Exit::Invalid, format!("{} problem(s) found", findings.len())))
        }
    }
}
