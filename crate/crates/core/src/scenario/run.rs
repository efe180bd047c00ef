use std::path::Path;
use std::time::Duration;

use crate::agent::{AgentError, AgentOutcome, LocalAgent};
use crate::coordinator::{run, CoordinatorError, RunOutcome};
use crate::protocol::{
    inproc_pair, run_agent_loop, run_coordinator, BarrierSettings, Direction, DriverError, SocketAgent, SocketHub,
    Tap, TransportError,
};

use super::{Scenario, ScenarioError, ScenarioReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransportKind {
    /// Agents called directly, no framing.
    Direct,
    /// Encoded frames over in-process channels.
    Inproc,
    /// Encoded frames over loopback TCP, agents on threads of this process.
    Socket,
}

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Coordinator(#[from] CoordinatorError),
    #[error(transparent)]
    Driver(#[from] DriverError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("agent thread panicked")]
    Panic,
}

impl RunError {
    /// The agent error behind this failure, if any.
    pub fn agent_error(&self) -> Option<&AgentError> {
        match self {
            RunError::Agent(e)
            | RunError::Coordinator(CoordinatorError::Agent(e))
            | RunError::Driver(DriverError::Agent(e))
            | RunError::Driver(DriverError::Coordinator(CoordinatorError::Agent(e))) => Some(e),
            _ => None,
        }
    }
}

/// One agent per user of the scenario.
pub fn agents(s: &Scenario) -> Result<Vec<LocalAgent<f64>>, AgentError> {
    s.users
        .iter()
        .map(|u| LocalAgent::new(u.clone(), s.tariff.clone(), s.grid, s.n_users()))
        .collect()
}

/// Standalone optimum of every user, priced as an outcome with no trades.
pub fn baseline_outcomes(s: &Scenario) -> Result<Vec<AgentOutcome<f64>>, AgentError> {
    agents(s)?
        .iter_mut()
        .map(|a| {
            let (schedule, _) = a.solve_emp()?;
            a.priced(schedule)
        })
        .collect()
}

/// Standalone cost of every user, the benchmark of the cooperative run.
pub fn emp_costs(s: &Scenario) -> Result<Vec<f64>, AgentError> {
    Ok(baseline_outcomes(s)?.iter().map(AgentOutcome::cooperative_cost).collect())
}

pub fn save_agent_outcome(path: &Path, outcome: &AgentOutcome<f64>) -> Result<(), ScenarioError> {
    let text = serde_json::to_string(outcome).expect("outcome serializes");
    std::fs::write(path, text).map_err(|source| ScenarioError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_agent_outcome(path: &Path) -> Result<AgentOutcome<f64>, ScenarioError> {
    let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| ScenarioError::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn run_baseline(s: &Scenario) -> Result<ScenarioReport, AgentError> {
    Ok(ScenarioReport::baseline(s, &baseline_outcomes(s)?))
}

pub type CapturedFrames = Vec<(Direction, Vec<u8>)>;

/// Runs the cooperative scheme and reports it against the standalone costs.
/// A run that stops at the iteration limit still yields a report, with
/// `converged` unset.
pub fn run_scenario(s: &Scenario, transport: TransportKind) -> Result<ScenarioReport, RunError> {
    run_scenario_captured(s, transport).map(|(r, _)| r)
}

/// As [`run_scenario`], also returning every frame seen by the coordinator.
pub fn run_scenario_captured(
    s: &Scenario,
    transport: TransportKind,
) -> Result<(ScenarioReport, CapturedFrames), RunError> {
    let emp = emp_costs(s)?;
    let (outcome, frames) = match transport {
        TransportKind::Direct => {
            let outcome = match run(&mut agents(s)?, s.admm.clone()) {
                Ok(o) => o,
                Err(CoordinatorError::NonConvergence { outcome, .. }) => *outcome,
                Err(e) => return Err(e.into()),
            };
            (outcome, Vec::new())
        }
        TransportKind::Inproc => {
            let (hub, eps) = inproc_pair(s.n_users());
            let mut agents = agents(s)?;
            drive(s, hub, &mut agents, eps.into_iter().map(Ok).collect())?
        }
        TransportKind::Socket => {
            let listener = SocketHub::bind("127.0.0.1:0").map_err(TransportError::from)?;
            let addr = listener.local_addr().map_err(TransportError::from)?.to_string();
            let mut agents = agents(s)?;
            let n = s.n_users();
            // connect from threads so the accept loop below can see them
            let eps: Vec<Result<SocketAgent, TransportError>> = std::thread::scope(|scope| {
                let handles: Vec<_> = (0..n)
                    .map(|u| {
                        let addr = addr.clone();
                        scope.spawn(move || SocketAgent::connect(&addr, u, Duration::from_secs(10)))
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().unwrap()).collect()
            });
            let hub = SocketHub::accept(&listener, n, Duration::from_secs(10))?;
            drive(s, hub, &mut agents, eps)?
        }
    };
    Ok((ScenarioReport::assemble(s, &emp, &outcome), frames))
}

fn drive<H, E>(
    s: &Scenario,
    hub: H,
    agents: &mut [LocalAgent<f64>],
    endpoints: Vec<Result<E, TransportError>>,
) -> Result<(RunOutcome<f64>, CapturedFrames), RunError>
where
    H: crate::protocol::CoordinatorEndpoint,
    E: crate::protocol::AgentEndpoint + Send,
{
    let endpoints = endpoints.into_iter().collect::<Result<Vec<_>, _>>()?;
    let (mut hub, log) = Tap::new(hub);
    let horizon = s.grid.horizon_len;
    let (coord, outcomes) = std::thread::scope(|scope| {
        let handles: Vec<_> = agents
            .iter_mut()
            .zip(endpoints)
            .map(|(a, mut ep)| scope.spawn(move || run_agent_loop(a, &mut ep)))
            .collect();
        let coord = run_coordinator(&mut hub, horizon, s.admm.clone(), &BarrierSettings::default());
        // agents block on their links until the hub goes away
        drop(hub);
        let outcomes: Vec<_> = handles.into_iter().map(|h| h.join().map_err(|_| RunError::Panic)).collect();
        (coord, outcomes)
    });
    let coord = coord?;
    let outcomes = outcomes
        .into_iter()
        .map(|r| r.and_then(|o| o.map_err(RunError::from)))
        .collect::<Result<Vec<_>, _>>()?;
    let frames = std::mem::take(&mut *log.lock().unwrap());
    Ok((coord.into_outcome(outcomes), frames))
}
