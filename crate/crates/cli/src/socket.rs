//! Multi-process socket mode: the coordinator listens on TCP and every user
//! runs as its own `hvac-coop agent` process.

use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::time::Duration;

use clap::Args;

use hvac_coop::protocol::{run_agent_loop, run_coordinator, BarrierSettings, SocketAgent, SocketHub};
use hvac_coop::scenario::{
    emp_costs, load_agent_outcome, load_scenario, save_agent_outcome, Scenario, ScenarioReport,
};
use hvac_coop::LocalAgent;

use crate::{Exit, Failure};

#[derive(Args, Debug)]
pub struct AgentArgs {
    /// Coordinator address.
    #[arg(long)]
    connect: String,
    #[arg(long)]
    scenario: PathBuf,
    /// Zero-based user index.
    #[arg(long)]
    user: usize,
    /// Directory receiving `user_NN.json` with this user's settled outcome.
    #[arg(long)]
    out_dir: PathBuf,
    /// Seconds to keep retrying the connection.
    #[arg(long, default_value_t = 30)]
    connect_timeout: u64,
}

fn outcome_path(dir: &Path, user: usize) -> PathBuf {
    dir.join(format!("user_{user:02}.json"))
}

fn io_failure(what: &str, e: std::io::Error) -> Failure {
    Failure::new(Exit::Io, format!("{what}: {e}"))
}

pub fn cmd_agent(a: &AgentArgs) -> Result<Exit, Failure> {
    let scenario = load_scenario(&a.scenario)?;
    let params = scenario
        .users
        .get(a.user)
        .cloned()
        .ok_or_else(|| Failure::new(Exit::Invalid, format!("scenario has no user {}", a.user)))?;
    let mut agent = LocalAgent::new(params, scenario.tariff.clone(), scenario.grid, scenario.n_users())?;
    let mut ep = SocketAgent::connect(&a.connect, a.user, Duration::from_secs(a.connect_timeout))
        .map_err(|e| Failure::new(Exit::Protocol, e.to_string()))?;
    let outcome = run_agent_loop(&mut agent, &mut ep)?;
    save_agent_outcome(&outcome_path(&a.out_dir, a.user), &outcome)?;
    Ok(Exit::Ok)
}

fn spawn_agents(scenario_path: &Path, addr: &str, n: usize, dir: &Path) -> Result<Vec<Child>, Failure> {
    let exe = std::env::current_exe().map_err(|e| io_failure("cannot locate own executable", e))?;
    let mut children = Vec::with_capacity(n);
    for u in 0..n {
        let child = Command::new(&exe)
            .arg("agent")
            .arg("--connect")
            .arg(addr)
            .arg("--scenario")
            .arg(scenario_path)
            .arg("--user")
            .arg(u.to_string())
            .arg("--out-dir")
            .arg(dir)
            .stdin(Stdio::null())
            .stdout(Stdio::null())
            .spawn();
        match child {
            Ok(c) => children.push(c),
            Err(e) => {
                reap(children, true);
                return Err(io_failure("cannot start agent process", e));
            }
        }
    }
    Ok(children)
}

/// Waits for every child. Returns a failing exit status if any, preferring
/// the infeasibility status since other agents fail as a consequence of it.
fn reap(children: Vec<Child>, kill: bool) -> Option<i32> {
    let failures: Vec<i32> = children
        .into_iter()
        .map(|mut c| {
            if kill {
                let _ = c.kill();
            }
            c.wait().ok().and_then(|s| s.code()).unwrap_or(-1)
        })
        .filter(|&code| code != 0)
        .collect();
    let infeasible = Exit::Infeasible as i32;
    if failures.contains(&infeasible) {
        Some(infeasible)
    } else {
        failures.first().copied()
    }
}

/// Runs the scenario with one agent process per user. With `remote`, the
/// agents are started elsewhere and must write their outcome files to
/// `out/agents`.
pub fn run_processes(
    scenario_path: &Path,
    scenario: &Scenario,
    out: &Path,
    listen: &str,
    remote: bool,
) -> Result<ScenarioReport, Failure> {
    let n = scenario.n_users();
    let emp = emp_costs(scenario)?;
    let agent_dir = out.join("agents");
    std::fs::create_dir_all(&agent_dir).map_err(|e| io_failure(&agent_dir.display().to_string(), e))?;

    let listener = SocketHub::bind(listen).map_err(|e| Failure::new(Exit::Protocol, format!("bind {listen}: {e}")))?;
    let addr = listener
        .local_addr()
        .map_err(|e| Failure::new(Exit::Protocol, e.to_string()))?
        .to_string();
    let (children, accept_timeout) = if remote {
        eprintln!("waiting for {n} agents on {addr}");
        (Vec::new(), Duration::from_secs(600))
    } else {
        let scenario_path = std::path::absolute(scenario_path).map_err(|e| io_failure("scenario path", e))?;
        (spawn_agents(&scenario_path, &addr, n, &agent_dir)?, Duration::from_secs(30))
    };

    let coord = SocketHub::accept(&listener, n, accept_timeout)
        .map_err(|e| Failure::new(Exit::Protocol, e.to_string()))
        .and_then(|mut hub| {
            run_coordinator(&mut hub, scenario.grid.horizon_len, scenario.admm.clone(), &BarrierSettings::default())
                .map_err(Failure::from)
        });
    let failed = coord.is_err();
    let worst = reap(children, failed);
    let coord = match (coord, worst) {
        (Err(_), Some(code)) if code == Exit::Infeasible as i32 => {
            return Err(Failure::new(Exit::Infeasible, "an agent could not solve its local problem"));
        }
        (Err(f), _) => return Err(f),
        (Ok(_), Some(code)) => {
            return Err(Failure::new(Exit::Protocol, format!("agent process exited with status {code}")));
        }
        (Ok(c), None) => c,
    };

    let outcomes = (0..n)
        .map(|u| load_agent_outcome(&outcome_path(&agent_dir, u)))
        .collect::<Result<Vec<_>, _>>()?;
    if !remote {
        std::fs::remove_dir_all(&agent_dir).map_err(|e| io_failure(&agent_dir.display().to_string(), e))?;
    }
    Ok(ScenarioReport::assemble(scenario, &emp, &coord.into_outcome(outcomes)))
}
