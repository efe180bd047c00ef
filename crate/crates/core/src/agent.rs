//! A household's private optimizer.
//!
//! The agent owns its [`UserParams`] and never exposes them: the only thing
//! that leaves it is a [`TradeProposal`] carrying its id, the iteration and its
//! pairwise trades.

use std::ops::Range;

use crate::model::{
    discomfort_cost, grid_cost, operating_cost, trading_payment, ModelError, Schedule, Tariff,
    TimeGrid, TradeMatrix, UserParams, Violation,
};
use crate::num::Scalar;
use crate::protocol::{CoordinatorBroadcast, TradeProposal};
use crate::qp::{solve_from, InitialPoint, QpBuilder, QpError, QpSolution, QpStatus, SolverSettings};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AgentError {
    #[error("user {user}: invalid parameters: {}", describe(.violations))]
    InvalidParams { user: usize, violations: Vec<Violation> },
    #[error("user {user}: no schedule satisfies the comfort band within the supply limits")]
    Infeasible { user: usize },
    #[error("user {user}: solver stopped after {iterations} iterations (KKT residual {residual:e})")]
    SolverStalled {
        user: usize,
        iterations: usize,
        residual: f64,
    },
    #[error("user {user}: {source}")]
    Qp { user: usize, source: QpError },
    #[error("user {user}: {source}")]
    Model { user: usize, source: ModelError },
    #[error("user {user}: coupling data does not match the trade layout: {detail}")]
    Shape { user: usize, detail: String },
    #[error("user {user}: no local solve has run for this iteration")]
    NotReady { user: usize },
    #[error("user {user}: outbound message rejected: {detail}")]
    Schema { user: usize, detail: String },
}

fn describe(v: &[Violation]) -> String {
    v.iter()
        .map(|v| format!("{}: {}", v.field, v.message))
        .collect::<Vec<_>>()
        .join("; ")
}

/// Variable indices of one household inside a [`QpBuilder`].
#[derive(Debug, Clone)]
pub(crate) struct HouseholdVars {
    pub renewable: Range<usize>,
    pub grid: Range<usize>,
    pub hvac: Range<usize>,
    pub temp: Range<usize>,
}

/// Adds one household's decisions, physical constraints and operating cost to
/// `b`. The load balance is left to the caller since it differs between the
/// standalone, trading and pooled problems.
pub(crate) fn add_household<T: Scalar>(
    b: &mut QpBuilder<T>,
    params: &UserParams<T>,
    tariff: &Tariff<T>,
    grid: &TimeGrid<T>,
    prefix: &str,
) -> HouseholdVars {
    let h = params.horizon();
    let vars = HouseholdVars {
        renewable: b.add_vars(&format!("{prefix}p_re"), h),
        grid: b.add_vars(&format!("{prefix}p_g"), h),
        hvac: b.add_vars(&format!("{prefix}p_ac"), h),
        temp: b.add_vars(&format!("{prefix}t_in"), h),
    };
    let leak = params.leak_rate();
    let drive = leak * params.hvac_efficiency * params.thermal_resistance;
    let beta = params.comfort_weight;

    for t in 0..h {
        let (re, g, ac, tin) = (
            vars.renewable.start + t,
            vars.grid.start + t,
            vars.hvac.start + t,
            vars.temp.start + t,
        );
        b.add_bounds(re, T::zero(), params.renewable_avail[t]);
        b.add_bounds(g, T::zero(), params.grid_cap);
        b.add_bounds(ac, T::zero(), params.hvac_cap);
        b.add_bounds(tin, params.temp_min, params.temp_max);

        // T[t] - (1 - a) T[t-1] + a η R p[t] = a T_out[t]
        let outdoor = leak * params.outdoor_temp[t];
        if t == 0 {
            b.add_eq(
                vec![(tin, T::one()), (ac, drive)],
                outdoor + (T::one() - leak) * params.temp_initial,
            );
        } else {
            b.add_eq(
                vec![(tin, T::one()), (tin - 1, leak - T::one()), (ac, drive)],
                outdoor,
            );
        }

        b.add_linear(g, tariff.energy_price * grid.slot_hours);
        if beta != T::zero() {
            b.add_quadratic(tin, tin, beta);
            b.add_linear(tin, -T::lit(2.0) * beta * params.temp_ref);
            b.add_offset(beta * params.temp_ref * params.temp_ref);
        }
    }
    if tariff.peak_price > T::zero() {
        let draws: Vec<usize> = vars.grid.clone().collect();
        let peak = b.epigraph_max(&draws, &format!("{prefix}peak"));
        b.add_linear(peak, tariff.peak_price);
    }
    vars
}

fn household_schedule<T: Scalar>(
    x: &[T],
    vars: &HouseholdVars,
    trades: TradeMatrix<T>,
) -> Schedule<T> {
    // the QP enforces the bounds to solver tolerance; clamp the sign of the
    // supply terms so billing never sees a -1e-16 draw
    let nonneg = |r: &Range<usize>| x[r.clone()].iter().map(|v| v.max(T::zero())).collect();
    Schedule {
        renewable_use: nonneg(&vars.renewable),
        grid_draw: nonneg(&vars.grid),
        hvac_power: nonneg(&vars.hvac),
        indoor_temp: x[vars.temp.clone()].to_vec(),
        trades,
    }
}

fn check_status<T: Scalar>(user: usize, sol: &QpSolution<T>) -> Result<(), AgentError> {
    match sol.status {
        QpStatus::Optimal => Ok(()),
        QpStatus::Infeasible => Err(AgentError::Infeasible { user }),
        QpStatus::IterationLimit => Err(AgentError::SolverStalled {
            user,
            iterations: sol.iterations,
            residual: sol.kkt_residual.as_f64(),
        }),
    }
}

fn validate_inputs<T: Scalar>(
    params: &UserParams<T>,
    tariff: &Tariff<T>,
    grid: &TimeGrid<T>,
) -> Result<(), AgentError> {
    let user = params.id;
    grid.validate()
        .and_then(|_| tariff.validate(grid.horizon_len))
        .map_err(|source| AgentError::Model { user, source })?;
    let violations = params.violations(grid.horizon_len);
    if !violations.is_empty() {
        return Err(AgentError::InvalidParams { user, violations });
    }
    Ok(())
}

/// Standalone energy management: the user's cheapest schedule without trading.
/// Returns the schedule and its operating cost, the non-cooperative benchmark.
pub fn solve_emp<T: Scalar>(
    params: &UserParams<T>,
    tariff: &Tariff<T>,
    grid: &TimeGrid<T>,
) -> Result<(Schedule<T>, T), AgentError> {
    solve_emp_with(params, tariff, grid, &SolverSettings::default())
}

pub fn solve_emp_with<T: Scalar>(
    params: &UserParams<T>,
    tariff: &Tariff<T>,
    grid: &TimeGrid<T>,
    settings: &SolverSettings<T>,
) -> Result<(Schedule<T>, T), AgentError> {
    validate_inputs(params, tariff, grid)?;
    let user = params.id;
    let mut b = QpBuilder::new();
    let vars = add_household(&mut b, params, tariff, grid, "");
    for t in 0..params.horizon() {
        b.add_eq(
            vec![
                (vars.renewable.start + t, T::one()),
                (vars.grid.start + t, T::one()),
                (vars.hvac.start + t, -T::one()),
            ],
            params.inflexible_load[t],
        );
    }
    let problem = b.build();
    let sol = solve_from(&problem, settings, None).map_err(|source| AgentError::Qp { user, source })?;
    check_status(user, &sol)?;
    let schedule = household_schedule(&sol.primal, &vars, TradeMatrix::zeros(Vec::new(), params.horizon()));
    let cost = operating_cost(&schedule, params, tariff, grid).map_err(|source| AgentError::Model { user, source })?;
    Ok((schedule, cost))
}

/// One household taking part in the distributed trading loop.
#[derive(Debug, Clone)]
pub struct LocalAgent<T> {
    params: UserParams<T>,
    tariff: Tariff<T>,
    grid: TimeGrid<T>,
    received_aux: TradeMatrix<T>,
    received_duals: TradeMatrix<T>,
    iteration: usize,
    solved_iteration: Option<usize>,
    last_schedule: Option<Schedule<T>>,
    warm_start: Option<InitialPoint<T>>,
    settings: SolverSettings<T>,
}

impl<T: Scalar> LocalAgent<T> {
    pub fn new(
        params: UserParams<T>,
        tariff: Tariff<T>,
        grid: TimeGrid<T>,
        n_users: usize,
    ) -> Result<Self, AgentError> {
        validate_inputs(&params, &tariff, &grid)?;
        let h = grid.horizon_len;
        let zeros = TradeMatrix::for_user(params.id, n_users, h);
        Ok(Self {
            received_aux: zeros.clone(),
            received_duals: zeros,
            params,
            tariff,
            grid,
            iteration: 0,
            solved_iteration: None,
            last_schedule: None,
            warm_start: None,
            settings: SolverSettings::default(),
        })
    }

    pub fn with_settings(mut self, settings: SolverSettings<T>) -> Self {
        self.settings = settings;
        self
    }

    pub fn id(&self) -> usize {
        self.params.id
    }

    pub fn horizon(&self) -> usize {
        self.grid.horizon_len
    }

    pub fn counterparties(&self) -> &[usize] {
        &self.received_aux.counterparties
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn last_schedule(&self) -> Option<&Schedule<T>> {
        self.last_schedule.as_ref()
    }

    pub fn solve_emp(&self) -> Result<(Schedule<T>, T), AgentError> {
        solve_emp_with(&self.params, &self.tariff, &self.grid, &self.settings)
    }

    /// Installs the coordinator's consensus trades and multipliers for
    /// `iteration`.
    pub fn set_coupling(
        &mut self,
        iteration: usize,
        aux: TradeMatrix<T>,
        duals: TradeMatrix<T>,
    ) -> Result<(), AgentError> {
        for (name, m) in [("aux", &aux), ("duals", &duals)] {
            if m.counterparties != self.received_aux.counterparties
                || m.rows.iter().any(|r| r.len() != self.horizon())
            {
                return Err(AgentError::Shape {
                    user: self.id(),
                    detail: format!("{name} rows do not cover counterparties {:?}", self.counterparties()),
                });
            }
        }
        self.iteration = iteration;
        self.received_aux = aux;
        self.received_duals = duals;
        Ok(())
    }

    pub fn apply_broadcast(&mut self, msg: &CoordinatorBroadcast) -> Result<(), AgentError> {
        let convert = |m: &TradeMatrix<f64>| TradeMatrix {
            counterparties: m.counterparties.clone(),
            rows: m
                .rows
                .iter()
                .map(|r| r.iter().map(|&v| T::lit(v)).collect())
                .collect(),
        };
        self.set_coupling(msg.iteration, convert(&msg.aux_row), convert(&msg.dual_row))
    }

    /// Objective of the local trading subproblem at `schedule`:
    /// operating cost + trading payment + Σ (ρ/2)(p̂ - p)² - λ p.
    pub fn llp_objective(&self, schedule: &Schedule<T>, rho: T) -> Result<T, AgentError> {
        let user = self.id();
        let base = operating_cost(schedule, &self.params, &self.tariff, &self.grid)
            .map_err(|source| AgentError::Model { user, source })?;
        let pay = trading_payment(&schedule.trades, &self.tariff, &self.grid);
        let mut coupling = T::zero();
        for (k, row) in schedule.trades.rows.iter().enumerate() {
            for (t, &p) in row.iter().enumerate() {
                let gap = self.received_aux.rows[k][t] - p;
                coupling += rho * T::lit(0.5) * gap * gap - self.received_duals.rows[k][t] * p;
            }
        }
        Ok(base + pay + coupling)
    }

    /// Solves the local trading subproblem for the installed coupling data and
    /// penalty `rho`.
    pub fn solve_llp(&mut self, rho: T) -> Result<&Schedule<T>, AgentError> {
        let user = self.id();
        let h = self.horizon();
        let mut b = QpBuilder::new();
        let vars = add_household(&mut b, &self.params, &self.tariff, &self.grid, "");
        let cps = self.received_aux.counterparties.clone();
        let trade_start = b.num_vars();
        for &j in &cps {
            b.add_vars(&format!("p_et[{j}]"), h);
        }
        let trade = |k: usize, t: usize| trade_start + k * h + t;
        let half = T::lit(0.5);
        for k in 0..cps.len() {
            for t in 0..h {
                let v = trade(k, t);
                let aux = self.received_aux.rows[k][t];
                let dual = self.received_duals.rows[k][t];
                b.add_quadratic(v, v, half * rho);
                b.add_linear(v, self.tariff.trade_price[t] * self.grid.slot_hours - rho * aux - dual);
                b.add_offset(half * rho * aux * aux);
            }
        }
        for t in 0..h {
            let mut terms = vec![
                (vars.renewable.start + t, T::one()),
                (vars.grid.start + t, T::one()),
                (vars.hvac.start + t, -T::one()),
            ];
            terms.extend((0..cps.len()).map(|k| (trade(k, t), T::one())));
            b.add_eq(terms, self.params.inflexible_load[t]);
        }
        let problem = b.build();
        let sol = solve_from(&problem, &self.settings, self.warm_start.as_ref())
            .map_err(|source| AgentError::Qp { user, source })?;
        check_status(user, &sol)?;

        let rows = (0..cps.len())
            .map(|k| sol.primal[trade(k, 0)..trade(k, 0) + h].to_vec())
            .collect();
        let trades = TradeMatrix {
            counterparties: cps,
            rows,
        };
        self.warm_start = Some(InitialPoint::from(&sol));
        self.solved_iteration = Some(self.iteration);
        self.last_schedule = Some(household_schedule(&sol.primal, &vars, trades));
        Ok(self.last_schedule.as_ref().unwrap())
    }

    /// The proposal for the current iteration. Only the id, the iteration and
    /// the trade rows are copied out.
    pub fn outbound_message(&self) -> Result<TradeProposal, AgentError> {
        let user = self.id();
        let schedule = match (&self.last_schedule, self.solved_iteration) {
            (Some(s), Some(k)) if k == self.iteration => s,
            _ => return Err(AgentError::NotReady { user }),
        };
        let proposal = TradeProposal {
            user_id: user,
            iteration: self.iteration,
            trades: TradeMatrix {
                counterparties: schedule.trades.counterparties.clone(),
                rows: schedule
                    .trades
                    .rows
                    .iter()
                    .map(|r| r.iter().map(|v| v.as_f64()).collect())
                    .collect(),
            },
        };
        proposal
            .audit(self.horizon())
            .map_err(|detail| AgentError::Schema { user, detail })?;
        Ok(proposal)
    }

    /// Replaces the trades of the last local schedule with the final consensus
    /// trades and prices the result.
    pub fn finalize(&mut self, consensus: TradeMatrix<T>) -> Result<AgentOutcome<T>, AgentError> {
        let user = self.id();
        let mut schedule = self
            .last_schedule
            .clone()
            .ok_or(AgentError::NotReady { user })?;
        if consensus.counterparties != schedule.trades.counterparties {
            return Err(AgentError::Shape {
                user,
                detail: "consensus trades use a different counterparty layout".into(),
            });
        }
        schedule.trades = consensus;
        self.priced(schedule)
    }

    /// Prices `schedule` for this user.
    pub fn priced(&self, schedule: Schedule<T>) -> Result<AgentOutcome<T>, AgentError> {
        let user = self.id();
        let grid_bill = grid_cost(&schedule.grid_draw, &self.tariff, &self.grid)
            .map_err(|source| AgentError::Model { user, source })?;
        let discomfort = discomfort_cost(&schedule.indoor_temp, &self.params);
        let payment = trading_payment(&schedule.trades, &self.tariff, &self.grid);
        let arbitrage_slots = (0..self.horizon())
            .filter(|&t| schedule.grid_draw[t] > T::lit(1e-9) && schedule.trades.net(t) < T::lit(-1e-9))
            .count();
        let feasibility = schedule.feasibility(&self.params);
        Ok(AgentOutcome {
            user,
            operating_cost: grid_bill + discomfort,
            grid_cost: grid_bill,
            discomfort_cost: discomfort,
            trading_payment: payment,
            arbitrage_slots,
            max_feasibility_residual: feasibility.max(),
            schedule,
        })
    }
}

/// A user's priced schedule at the end of a run.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AgentOutcome<T> {
    pub user: usize,
    pub schedule: Schedule<T>,
    pub operating_cost: T,
    pub grid_cost: T,
    pub discomfort_cost: T,
    pub trading_payment: T,
    /// Slots where the user buys from the grid while selling to peers.
    pub arbitrage_slots: usize,
    pub max_feasibility_residual: T,
}

impl<T: Scalar> AgentOutcome<T> {
    pub fn cooperative_cost(&self) -> T {
        self.operating_cost + self.trading_payment
    }
}
