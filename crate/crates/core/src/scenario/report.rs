use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::agent::AgentOutcome;
use crate::coordinator::{IterationRecord, RunOutcome};
use crate::model::{Schedule, TradeMatrix};

use super::{AdmmSection, Scenario, ScenarioError};

/// Trades smaller than this are left out of the ledger.
pub const TRADE_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserSchedule {
    pub renewable_use: Vec<f64>,
    pub grid_draw: Vec<f64>,
    pub hvac_power: Vec<f64>,
    pub indoor_temp: Vec<f64>,
    /// Net peer purchase per slot; negative when selling.
    pub net_trade: Vec<f64>,
}

impl From<&Schedule<f64>> for UserSchedule {
    fn from(s: &Schedule<f64>) -> Self {
        let h = s.grid_draw.len();
        Self {
            renewable_use: s.renewable_use.clone(),
            grid_draw: s.grid_draw.clone(),
            hvac_power: s.hvac_power.clone(),
            indoor_temp: s.indoor_temp.clone(),
            net_trade: (0..h).map(|t| s.trades.net(t)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserReport {
    pub user: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    /// Standalone optimum without trading.
    pub emp_cost: f64,
    /// Operating cost plus trading payment.
    pub coop_cost: f64,
    pub reduction_pct: f64,
    pub grid_cost: f64,
    pub discomfort_cost: f64,
    pub trading_payment: f64,
    /// Slots where the user buys from the grid while selling to peers.
    pub arbitrage_slots: usize,
    pub max_feasibility_residual: f64,
    pub schedule: UserSchedule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeRow {
    pub buyer: usize,
    pub seller: usize,
    pub slot: usize,
    pub kw: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemSummary {
    pub emp_cost: f64,
    pub coop_cost: f64,
    pub reduction_pct: f64,
    pub payment_sum: f64,
    pub max_feasibility_residual: f64,
    /// Largest `|p̂_ij + p̂_ji|` over the settled trades.
    pub max_antisymmetry_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub n_users: usize,
    pub horizon: usize,
    pub slot_hours: f64,
    pub admm: AdmmSection,
    pub converged: bool,
    pub iterations: usize,
    pub convergence: Vec<IterationRecord<f64>>,
    pub users: Vec<UserReport>,
    pub trades: Vec<TradeRow>,
    pub system: SystemSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub user: String,
    pub emp_cost: f64,
    pub coop_cost: f64,
    pub reduction_pct: f64,
}

pub fn reduction_pct(emp: f64, coop: f64) -> f64 {
    if emp == 0.0 {
        0.0
    } else {
        100.0 * (emp - coop) / emp
    }
}

fn ledger(final_trades: &[TradeMatrix<f64>]) -> (Vec<TradeRow>, f64) {
    let mut rows = Vec::new();
    let mut asym = 0.0f64;
    for (i, m) in final_trades.iter().enumerate() {
        for (k, &j) in m.counterparties.iter().enumerate() {
            if j < i {
                continue;
            }
            let back = final_trades[j].row_for(i).unwrap_or(&[]);
            for (t, &v) in m.rows[k].iter().enumerate() {
                asym = asym.max((v + back.get(t).copied().unwrap_or(0.0)).abs());
                if v.abs() > TRADE_EPS {
                    let (buyer, seller) = if v > 0.0 { (i, j) } else { (j, i) };
                    rows.push(TradeRow {
                        buyer,
                        seller,
                        slot: t,
                        kw: v.abs(),
                    });
                }
            }
        }
    }
    rows.sort_by_key(|r| (r.slot, r.buyer, r.seller));
    (rows, asym)
}

impl ScenarioReport {
    /// Combines the standalone costs with the outcome of a cooperative run.
    pub fn assemble(scenario: &Scenario, emp_costs: &[f64], run: &RunOutcome<f64>) -> Self {
        let users: Vec<UserReport> = run
            .outcomes
            .iter()
            .map(|o| user_report(scenario, o, emp_costs[o.user]))
            .collect();
        let (trades, asym) = ledger(&run.final_trades);
        Self::finish(scenario, run.converged, run.iterations, run.history.clone(), users, trades, asym)
    }

    /// Report of the standalone schedules alone: no trades, no iterations.
    pub fn baseline(scenario: &Scenario, emp: &[AgentOutcome<f64>]) -> Self {
        let users = emp.iter().map(|o| user_report(scenario, o, o.cooperative_cost())).collect();
        Self::finish(scenario, true, 0, Vec::new(), users, Vec::new(), 0.0)
    }

    fn finish(
        scenario: &Scenario,
        converged: bool,
        iterations: usize,
        convergence: Vec<IterationRecord<f64>>,
        users: Vec<UserReport>,
        trades: Vec<TradeRow>,
        max_antisymmetry_error: f64,
    ) -> Self {
        let emp_cost: f64 = users.iter().map(|u| u.emp_cost).sum();
        let coop_cost: f64 = users.iter().map(|u| u.coop_cost).sum();
        let system = SystemSummary {
            emp_cost,
            coop_cost,
            reduction_pct: reduction_pct(emp_cost, coop_cost),
            payment_sum: users.iter().map(|u| u.trading_payment).sum(),
            max_feasibility_residual: users.iter().map(|u| u.max_feasibility_residual).fold(0.0, f64::max),
            max_antisymmetry_error,
        };
        Self {
            n_users: scenario.n_users(),
            horizon: scenario.grid.horizon_len,
            slot_hours: scenario.grid.slot_hours,
            admm: scenario.config.admm.clone(),
            converged,
            iterations,
            convergence,
            users,
            trades,
            system,
        }
    }

    pub fn cost_rows(&self) -> Vec<CostRow> {
        let mut rows: Vec<CostRow> = self
            .users
            .iter()
            .map(|u| CostRow {
                user: u.user.to_string(),
                emp_cost: u.emp_cost,
                coop_cost: u.coop_cost,
                reduction_pct: u.reduction_pct,
            })
            .collect();
        rows.push(CostRow {
            user: "system".into(),
            emp_cost: self.system.emp_cost,
            coop_cost: self.system.coop_cost,
            reduction_pct: self.system.reduction_pct,
        });
        rows
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

fn user_report(scenario: &Scenario, o: &AgentOutcome<f64>, emp_cost: f64) -> UserReport {
    let coop = o.cooperative_cost();
    UserReport {
        user: o.user,
        name: scenario.config.users.get(o.user).and_then(|u| u.name.clone()),
        emp_cost,
        coop_cost: coop,
        reduction_pct: reduction_pct(emp_cost, coop),
        grid_cost: o.grid_cost,
        discomfort_cost: o.discomfort_cost,
        trading_payment: o.trading_payment,
        arbitrage_slots: o.arbitrage_slots,
        max_feasibility_residual: o.max_feasibility_residual,
        schedule: UserSchedule::from(&o.schedule),
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ScenarioError + '_ {
    move |source| ScenarioError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn csv_err(path: &Path) -> impl Fn(::csv::Error) -> ScenarioError + '_ {
    move |e| ScenarioError::Io {
        path: path.to_path_buf(),
        source: e.into(),
    }
}

fn write_csv<R: Serialize>(path: &Path, header: &[&str], rows: impl IntoIterator<Item = R>) -> Result<(), ScenarioError> {
    let mut w = ::csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(csv_err(path))?;
    w.write_record(header).map_err(csv_err(path))?;
    for r in rows {
        w.serialize(r).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Writes `report.json`, `convergence.csv`, `schedules.csv`, `trades.csv` and
/// `costs.csv` into `dir`, creating it if needed.
pub fn write_report(report: &ScenarioReport, dir: &Path) -> Result<Vec<PathBuf>, ScenarioError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let path = |name: &str| dir.join(name);

    let json = path("report.json");
    std::fs::write(&json, report.to_json()).map_err(io_err(&json))?;

    let conv = path("convergence.csv");
    write_csv(
        &conv,
        &["iteration", "error", "rho"],
        report.convergence.iter().map(|r| (r.iteration, r.error, r.rho)),
    )?;

    let sched = path("schedules.csv");
    write_csv(
        &sched,
        &["user", "slot", "p_RE", "p_G", "p_AC", "T_IN"],
        report.users.iter().flat_map(|u| {
            let s = &u.schedule;
            (0..s.grid_draw.len()).map(move |t| {
                (u.user, t, s.renewable_use[t], s.grid_draw[t], s.hvac_power[t], s.indoor_temp[t])
            })
        }),
    )?;

    let trades = path("trades.csv");
    write_csv(
        &trades,
        &["buyer", "seller", "slot", "kW"],
        report.trades.iter().map(|r| (r.buyer, r.seller, r.slot, r.kw)),
    )?;

    let costs = path("costs.csv");
    write_csv(
        &costs,
        &["user", "emp_cost", "coop_cost", "reduction_pct"],
        report.cost_rows(),
    )?;
    Ok(vec![json, conv, sched, trades, costs])
}
