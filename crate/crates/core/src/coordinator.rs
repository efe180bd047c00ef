//! Consensus on pairwise trades.
//!
//! Each iteration the agents solve their local problems against the current
//! consensus trades `p̂` and multipliers `λ`; the coordinator then projects the
//! proposals onto the antisymmetric subspace and takes a dual ascent step:
//!
//! ```text
//!     p̂_ij = [ρ(p_ij - p_ji) - (λ_ij - λ_ji)] / 2ρ,   p̂_ji = -p̂_ij
//!     λ_ij += ρ (p̂_ij - p_ij)
//! ```
//!
//! With a decaying step size, [`DecayScope`] selects whether the decay applies
//! to the penalty (local problems and projection) as well as the dual step, or
//! to the dual step alone.

use serde::{Deserialize, Serialize};

use crate::agent::{add_household, AgentError, AgentOutcome, LocalAgent};
use crate::model::{operating_cost, Schedule, Tariff, TimeGrid, TradeMatrix, UserParams};
use crate::num::Scalar;
use crate::protocol::CoordinatorBroadcast;
use crate::qp::{solve_from, QpBuilder, QpStatus, SolverSettings};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "rho0", rename_all = "snake_case")]
pub enum StepSize<T> {
    Fixed(T),
    /// `ρ0 / k` at iteration `k`.
    Decaying(T),
}

/// Which updates follow a decaying step size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DecayScope {
    /// Penalty and dual step both use `ρ(k)`.
    #[default]
    Penalty,
    /// The penalty stays at `ρ0`; only the dual step uses `ρ(k)`.
    DualStep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ErrorNorm {
    #[default]
    L1,
    L2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdmmConfig<T> {
    pub step: StepSize<T>,
    pub tolerance: T,
    pub norm: ErrorNorm,
    pub max_iter: usize,
    #[serde(default)]
    pub decay: DecayScope,
}

impl<T: Scalar> Default for AdmmConfig<T> {
    fn default() -> Self {
        Self {
            step: StepSize::Decaying(T::one()),
            tolerance: T::lit(1e-6),
            norm: ErrorNorm::L1,
            max_iter: 2000,
            decay: DecayScope::Penalty,
        }
    }
}

impl<T: Scalar> AdmmConfig<T> {
    pub fn validate(&self) -> Result<(), CoordinatorError> {
        let rho0 = match self.step {
            StepSize::Fixed(r) | StepSize::Decaying(r) => r,
        };
        if !(rho0 > T::zero() && rho0.is_finite()) {
            return Err(CoordinatorError::Config(format!("rho0 must be positive, got {rho0}")));
        }
        if !(self.tolerance > T::zero()) {
            return Err(CoordinatorError::Config(format!(
                "tolerance must be positive, got {}",
                self.tolerance
            )));
        }
        if self.max_iter == 0 {
            return Err(CoordinatorError::Config("max_iter must be at least 1".into()));
        }
        Ok(())
    }

    pub fn stepsize(&self, k: usize) -> T {
        match self.step {
            StepSize::Fixed(r) => r,
            StepSize::Decaying(r) => r / T::from_usize(k.max(1)).unwrap(),
        }
    }

    /// Augmented-Lagrangian penalty at iteration `k`.
    pub fn penalty(&self, k: usize) -> T {
        match (self.step, self.decay) {
            (StepSize::Decaying(r), DecayScope::DualStep) => r,
            _ => self.stepsize(k),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord<T> {
    pub iteration: usize,
    pub error: T,
    /// Dual step size of the iteration.
    pub rho: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome<T> {
    pub converged: bool,
    pub iterations: usize,
    pub history: Vec<IterationRecord<T>>,
    /// Settled trades per user: the consensus values, antisymmetric by
    /// construction.
    pub final_trades: Vec<TradeMatrix<T>>,
    pub final_duals: Vec<TradeMatrix<T>>,
    pub outcomes: Vec<AgentOutcome<T>>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CoordinatorError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("barrier violated at iteration {iteration}: no proposal from users {missing:?}")]
    MissingProposals { iteration: usize, missing: Vec<usize> },
    #[error("proposal from user {user} has the wrong shape: {detail}")]
    Shape { user: usize, detail: String },
    #[error("no consensus after {} iterations (last error {last_error:e})", .outcome.iterations)]
    NonConvergence {
        last_error: f64,
        outcome: Box<RunOutcome<f64>>,
    },
    #[error(transparent)]
    Agent(#[from] AgentError),
}

/// The coordinator's state: consensus trades, multipliers and error history.
#[derive(Debug, Clone)]
pub struct Coordinator<T> {
    config: AdmmConfig<T>,
    aux: Vec<TradeMatrix<T>>,
    duals: Vec<TradeMatrix<T>>,
    iteration: usize,
    history: Vec<IterationRecord<T>>,
}

fn slot_of(i: usize, j: usize) -> usize {
    if j < i {
        j
    } else {
        j - 1
    }
}

impl<T: Scalar> Coordinator<T> {
    pub fn new(n_users: usize, horizon: usize, config: AdmmConfig<T>) -> Result<Self, CoordinatorError> {
        config.validate()?;
        let zeros: Vec<_> = (0..n_users)
            .map(|i| TradeMatrix::for_user(i, n_users, horizon))
            .collect();
        Ok(Self {
            config,
            aux: zeros.clone(),
            duals: zeros,
            iteration: 0,
            history: Vec::new(),
        })
    }

    pub fn n_users(&self) -> usize {
        self.aux.len()
    }

    pub fn config(&self) -> &AdmmConfig<T> {
        &self.config
    }

    /// Number of completed iterations.
    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn aux(&self) -> &[TradeMatrix<T>] {
        &self.aux
    }

    pub fn duals(&self) -> &[TradeMatrix<T>] {
        &self.duals
    }

    pub fn history(&self) -> &[IterationRecord<T>] {
        &self.history
    }

    pub fn stepsize(&self, k: usize) -> T {
        self.config.stepsize(k)
    }

    /// Penalty for the iteration about to start.
    pub fn next_rho(&self) -> T {
        self.config.penalty(self.iteration + 1)
    }

    pub fn check_proposals(&self, proposals: &[TradeMatrix<T>]) -> Result<(), CoordinatorError> {
        let n = self.n_users();
        if proposals.len() < n {
            return Err(CoordinatorError::MissingProposals {
                iteration: self.iteration + 1,
                missing: (proposals.len()..n).collect(),
            });
        }
        for (i, (p, a)) in proposals.iter().zip(&self.aux).enumerate() {
            if p.counterparties != a.counterparties {
                return Err(CoordinatorError::Shape {
                    user: i,
                    detail: format!("counterparties {:?}, expected {:?}", p.counterparties, a.counterparties),
                });
            }
            if p.rows.iter().zip(&a.rows).any(|(x, y)| x.len() != y.len()) {
                return Err(CoordinatorError::Shape {
                    user: i,
                    detail: "trade row length differs from the horizon".into(),
                });
            }
        }
        if proposals.len() > n {
            return Err(CoordinatorError::Shape {
                user: n,
                detail: format!("{} proposals for {n} users", proposals.len()),
            });
        }
        Ok(())
    }

    /// Consensus projection of the proposals for penalty `rho`.
    pub fn hlp_update(&mut self, proposals: &[TradeMatrix<T>], rho: T) -> Result<(), CoordinatorError> {
        self.check_proposals(proposals)?;
        let n = self.n_users();
        let two_rho = T::lit(2.0) * rho;
        for i in 0..n {
            for j in i + 1..n {
                let (ki, kj) = (slot_of(i, j), slot_of(j, i));
                for t in 0..self.aux[i].rows[ki].len() {
                    let dp = proposals[i].rows[ki][t] - proposals[j].rows[kj][t];
                    let dl = self.duals[i].rows[ki][t] - self.duals[j].rows[kj][t];
                    let v = (rho * dp - dl) / two_rho;
                    self.aux[i].rows[ki][t] = v;
                    self.aux[j].rows[kj][t] = -v;
                }
            }
        }
        Ok(())
    }

    pub fn dual_update(&mut self, proposals: &[TradeMatrix<T>], rho: T) {
        for ((d, a), p) in self.duals.iter_mut().zip(&self.aux).zip(proposals) {
            for ((dr, ar), pr) in d.rows.iter_mut().zip(&a.rows).zip(&p.rows) {
                for ((l, x), y) in dr.iter_mut().zip(ar).zip(pr) {
                    *l += rho * (*x - *y);
                }
            }
        }
    }

    /// `Σ_i ‖p̂_i - p_i‖` in the configured norm.
    pub fn convergence_error(&self, proposals: &[TradeMatrix<T>]) -> T {
        self.aux
            .iter()
            .zip(proposals)
            .map(|(a, p)| {
                let diffs = a
                    .rows
                    .iter()
                    .zip(&p.rows)
                    .flat_map(|(x, y)| x.iter().zip(y).map(|(u, v)| *u - *v));
                match self.config.norm {
                    ErrorNorm::L1 => diffs.map(|d| d.abs()).sum::<T>(),
                    ErrorNorm::L2 => diffs.map(|d| d * d).sum::<T>().sqrt(),
                }
            })
            .sum()
    }

    /// One full coordinator iteration: projection, dual step, error and
    /// history. Returns the convergence error.
    pub fn step(&mut self, proposals: &[TradeMatrix<T>]) -> Result<T, CoordinatorError> {
        let rho = self.stepsize(self.iteration + 1);
        self.hlp_update(proposals, self.next_rho())?;
        self.dual_update(proposals, rho);
        let error = self.convergence_error(proposals);
        self.iteration += 1;
        self.history.push(IterationRecord {
            iteration: self.iteration,
            error,
            rho,
        });
        Ok(error)
    }

    pub fn converged(&self) -> bool {
        self.history
            .last()
            .is_some_and(|r| r.error <= self.config.tolerance)
    }

    /// Message for `user` ahead of the next iteration, or the closing message
    /// carrying the settled trades when `done` is set.
    pub fn broadcast_for(&self, user: usize, done: bool) -> CoordinatorBroadcast {
        let to_f64 = |m: &TradeMatrix<T>| TradeMatrix {
            counterparties: m.counterparties.clone(),
            rows: m
                .rows
                .iter()
                .map(|r| r.iter().map(|v| v.as_f64()).collect())
                .collect(),
        };
        CoordinatorBroadcast {
            iteration: if done { self.iteration } else { self.iteration + 1 },
            aux_row: to_f64(&self.aux[user]),
            dual_row: to_f64(&self.duals[user]),
            rho: self.next_rho().as_f64(),
            done,
        }
    }

    /// Packages the run once agents have reported their final outcomes.
    pub fn into_outcome(self, outcomes: Vec<AgentOutcome<T>>) -> RunOutcome<T> {
        RunOutcome {
            converged: self.converged(),
            iterations: self.iteration,
            history: self.history,
            final_trades: self.aux,
            final_duals: self.duals,
            outcomes,
        }
    }
}

/// Runs the trading loop with all agents in this process, solving the local
/// problems of one iteration concurrently.
pub fn run<T: Scalar>(agents: &mut [LocalAgent<T>], config: AdmmConfig<T>) -> Result<RunOutcome<T>, CoordinatorError> {
    let n = agents.len();
    for (i, a) in agents.iter().enumerate() {
        if a.id() != i {
            return Err(CoordinatorError::Config(format!("agent at position {i} has id {}", a.id())));
        }
    }
    let horizon = agents.first().map_or(0, LocalAgent::horizon);
    let mut coord = Coordinator::new(n, horizon, config)?;
    loop {
        let k = coord.iteration() + 1;
        let rho = coord.next_rho();
        let results: Vec<Result<TradeMatrix<T>, AgentError>> = std::thread::scope(|s| {
            let handles: Vec<_> = agents
                .iter_mut()
                .enumerate()
                .map(|(i, agent)| {
                    let aux = coord.aux()[i].clone();
                    let duals = coord.duals()[i].clone();
                    s.spawn(move || {
                        agent.set_coupling(k, aux, duals)?;
                        Ok(agent.solve_llp(rho)?.trades.clone())
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("agent thread panicked")).collect()
        });
        let proposals = results.into_iter().collect::<Result<Vec<_>, _>>()?;
        coord.step(&proposals)?;
        if coord.converged() || coord.iteration() >= coord.config().max_iter {
            break;
        }
    }
    let outcomes = agents
        .iter_mut()
        .zip(coord.aux())
        .map(|(a, trades)| a.finalize(trades.clone()))
        .collect::<Result<Vec<_>, _>>()?;
    let outcome = coord.into_outcome(outcomes);
    if outcome.converged {
        Ok(outcome)
    } else {
        Err(non_convergence(outcome))
    }
}

pub(crate) fn non_convergence<T: Scalar>(outcome: RunOutcome<T>) -> CoordinatorError {
    let outcome = outcome_to_f64(&outcome);
    CoordinatorError::NonConvergence {
        last_error: outcome.history.last().map_or(f64::NAN, |r| r.error),
        outcome: Box::new(outcome),
    }
}

fn map_matrix<T: Scalar>(m: &TradeMatrix<T>) -> TradeMatrix<f64> {
    TradeMatrix {
        counterparties: m.counterparties.clone(),
        rows: m
            .rows
            .iter()
            .map(|r| r.iter().map(|v| v.as_f64()).collect())
            .collect(),
    }
}

fn map_vec<T: Scalar>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.as_f64()).collect()
}

/// Converts an outcome of any precision to `f64` for reporting.
pub fn outcome_to_f64<T: Scalar>(o: &RunOutcome<T>) -> RunOutcome<f64> {
    RunOutcome {
        converged: o.converged,
        iterations: o.iterations,
        history: o
            .history
            .iter()
            .map(|r| IterationRecord {
                iteration: r.iteration,
                error: r.error.as_f64(),
                rho: r.rho.as_f64(),
            })
            .collect(),
        final_trades: o.final_trades.iter().map(map_matrix).collect(),
        final_duals: o.final_duals.iter().map(map_matrix).collect(),
        outcomes: o
            .outcomes
            .iter()
            .map(|a| AgentOutcome {
                user: a.user,
                schedule: Schedule {
                    renewable_use: map_vec(&a.schedule.renewable_use),
                    grid_draw: map_vec(&a.schedule.grid_draw),
                    hvac_power: map_vec(&a.schedule.hvac_power),
                    indoor_temp: map_vec(&a.schedule.indoor_temp),
                    trades: map_matrix(&a.schedule.trades),
                },
                operating_cost: a.operating_cost.as_f64(),
                grid_cost: a.grid_cost.as_f64(),
                discomfort_cost: a.discomfort_cost.as_f64(),
                trading_payment: a.trading_payment.as_f64(),
                arbitrage_slots: a.arbitrage_slots,
                max_feasibility_residual: a.max_feasibility_residual.as_f64(),
            })
            .collect(),
    }
}

/// Optimum of the joint problem solved in one place.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CentralizedSolution<T> {
    /// Σ_i operating cost; peer payments cancel in the sum.
    pub objective: T,
    /// Per-user schedules with no trade rows.
    pub schedules: Vec<Schedule<T>>,
    /// Net peer import of each user per slot.
    pub net_import: Vec<Vec<T>>,
}

/// Solves the joint problem over all users directly.
///
/// Pairwise trades enter the joint objective only through payments that cancel
/// in the sum, and any per-slot net imports that sum to zero can be realized
/// by antisymmetric pairwise trades. The joint optimum is therefore that of the
/// pooled problem with one shared balance row per slot, which is what is solved
/// here.
pub fn solve_centralized<T: Scalar>(
    users: &[UserParams<T>],
    tariff: &Tariff<T>,
    grid: &TimeGrid<T>,
    settings: &SolverSettings<T>,
) -> Result<CentralizedSolution<T>, AgentError> {
    for u in users {
        // same validation as a standalone agent
        LocalAgent::new(u.clone(), tariff.clone(), *grid, users.len())?;
    }
    let h = grid.horizon_len;
    let mut b = QpBuilder::new();
    let vars: Vec<_> = users
        .iter()
        .map(|u| add_household(&mut b, u, tariff, grid, &format!("u{}.", u.id)))
        .collect();
    for t in 0..h {
        let mut terms = Vec::new();
        let mut load = T::zero();
        for (u, v) in users.iter().zip(&vars) {
            terms.push((v.renewable.start + t, T::one()));
            terms.push((v.grid.start + t, T::one()));
            terms.push((v.hvac.start + t, -T::one()));
            load += u.inflexible_load[t];
        }
        b.add_eq(terms, load);
    }
    let problem = b.build();
    let sol = solve_from(&problem, settings, None).map_err(|source| AgentError::Qp { user: 0, source })?;
    match sol.status {
        QpStatus::Optimal => {}
        QpStatus::Infeasible => return Err(AgentError::Infeasible { user: 0 }),
        QpStatus::IterationLimit => {
            return Err(AgentError::SolverStalled {
                user: 0,
                iterations: sol.iterations,
                residual: sol.kkt_residual.as_f64(),
            })
        }
    }
    let x = &sol.primal;
    let mut objective = T::zero();
    let mut schedules = Vec::new();
    let mut net_import = Vec::new();
    for (u, v) in users.iter().zip(&vars) {
        let s = Schedule {
            renewable_use: x[v.renewable.clone()].to_vec(),
            grid_draw: x[v.grid.clone()].iter().map(|g| g.max(T::zero())).collect(),
            hvac_power: x[v.hvac.clone()].to_vec(),
            indoor_temp: x[v.temp.clone()].to_vec(),
            trades: TradeMatrix::zeros(Vec::new(), h),
        };
        objective += operating_cost(&s, u, tariff, grid).map_err(|source| AgentError::Model { user: u.id, source })?;
        net_import.push(
            (0..h)
                .map(|t| u.inflexible_load[t] + s.hvac_power[t] - s.renewable_use[t] - s.grid_draw[t])
                .collect(),
        );
        schedules.push(s);
    }
    Ok(CentralizedSolution {
        objective,
        schedules,
        net_import,
    })
}
