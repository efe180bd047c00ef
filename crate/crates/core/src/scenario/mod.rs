//! Scenario files, trace ingestion, synthetic data and run reports.
//!
//! A scenario is a TOML document:
//!
//! ```toml
//! seed = 7
//!
//! [grid]
//! horizon = 24
//! slot_hours = 1.0
//!
//! [tariff]
//! energy_price = 0.15      # $/kWh
//! peak_price = 0.6         # $/kW on the horizon peak
//! trade_price = 0.075      # scalar or one value per slot; defaults to half the energy price
//!
//! [admm]
//! rho_mode = "fixed"       # or "decaying"
//! rho0 = 1.0
//! tolerance = 1e-6
//! norm = "l1"              # or "l2"
//! max_iter = 2000
//! decay_scope = "penalty"  # decaying mode only: "penalty" or "dual_step"
//!
//! [[users]]
//! comfort_weight = 0.05
//! renewable_avail = { csv = "traces/user_00.csv", column = "renewable_kw" }
//! inflexible_load = [1.0, 1.2, ...]
//! outdoor_temp = { csv = "traces/user_00.csv", column = "outdoor_temp_c" }
//! ```
//!
//! Users are numbered by their position in the file. Scalar user fields are
//! optional and default to the values of [`UserParams::with_defaults`]; the
//! initial indoor temperature defaults to the user's reference temperature.
//!
//! Trace CSV files have a header row and one row per slot. Relative paths are
//! resolved against the scenario file's directory.

mod report;
mod run;
mod synth;

pub use report::{write_report, CostRow, ScenarioReport, SystemSummary, TradeRow, UserReport};
pub use run::{
    agents, baseline_outcomes, emp_costs, load_agent_outcome, run_baseline, run_scenario, run_scenario_captured,
    save_agent_outcome, CapturedFrames, RunError, TransportKind,
};
pub use synth::{synth_scenario, synth_traces, write_synth_scenario, SynthProfile, Traces};

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::coordinator::{AdmmConfig, DecayScope, ErrorNorm, StepSize};
use crate::model::{Tariff, TimeGrid, UserParams};

/// Column names of the trace CSV files written by the generator.
pub const TRACE_COLUMNS: [&str; 4] = ["slot", "renewable_kw", "load_kw", "outdoor_temp_c"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TraceSource {
    Inline(Vec<f64>),
    Csv { csv: PathBuf, column: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PriceSpec {
    Flat(f64),
    PerSlot(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub horizon: usize,
    #[serde(default = "one")]
    pub slot_hours: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TariffSection {
    pub energy_price: f64,
    pub peak_price: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trade_price: Option<PriceSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RhoMode {
    Fixed,
    #[default]
    Decaying,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdmmSection {
    #[serde(default)]
    pub rho_mode: RhoMode,
    #[serde(default = "one")]
    pub rho0: f64,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default)]
    pub norm: ErrorNorm,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default)]
    pub decay_scope: DecayScope,
}

fn default_tolerance() -> f64 {
    1e-6
}

fn default_max_iter() -> usize {
    2000
}

impl Default for AdmmSection {
    fn default() -> Self {
        Self {
            rho_mode: RhoMode::default(),
            rho0: 1.0,
            tolerance: default_tolerance(),
            norm: ErrorNorm::L1,
            max_iter: default_max_iter(),
            decay_scope: DecayScope::Penalty,
        }
    }
}

impl UserSection {
    /// A user with the given traces and every scalar left at its default.
    pub fn with_traces(renewable_avail: TraceSource, inflexible_load: TraceSource, outdoor_temp: TraceSource) -> Self {
        Self {
            name: None,
            thermal_capacitance: None,
            thermal_resistance: None,
            hvac_efficiency: None,
            comfort_weight: None,
            temp_ref: None,
            temp_min: None,
            temp_max: None,
            temp_initial: None,
            grid_cap: None,
            hvac_cap: None,
            renewable_avail,
            inflexible_load,
            outdoor_temp,
        }
    }
}

impl AdmmSection {
    pub fn to_config(&self) -> AdmmConfig<f64> {
        AdmmConfig {
            step: match self.rho_mode {
                RhoMode::Fixed => StepSize::Fixed(self.rho0),
                RhoMode::Decaying => StepSize::Decaying(self.rho0),
            },
            tolerance: self.tolerance,
            norm: self.norm,
            max_iter: self.max_iter,
            decay: self.decay_scope,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UserSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thermal_capacitance: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thermal_resistance: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hvac_efficiency: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comfort_weight: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temp_ref: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temp_min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temp_max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temp_initial: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid_cap: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hvac_cap: Option<f64>,
    pub renewable_avail: TraceSource,
    pub inflexible_load: TraceSource,
    pub outdoor_temp: TraceSource,
}

/// A scenario file as written, before traces are resolved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub grid: GridSection,
    pub tariff: TariffSection,
    #[serde(default)]
    pub admm: AdmmSection,
    pub users: Vec<UserSection>,
}

/// A validated scenario with all traces loaded.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub grid: TimeGrid<f64>,
    pub tariff: Tariff<f64>,
    pub users: Vec<UserParams<f64>>,
    pub admm: AdmmConfig<f64>,
}

impl Scenario {
    pub fn n_users(&self) -> usize {
        self.users.len()
    }
}

/// One problem found while validating a scenario.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Finding {
    pub user: Option<usize>,
    pub field: String,
    pub message: String,
}

impl fmt::Display for Finding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.user {
            Some(u) => write!(f, "user {u}: {}: {}", self.field, self.message),
            None => write!(f, "{}: {}", self.field, self.message),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{} problem(s) in scenario:\n{}", .0.len(), .0.iter().map(|f| format!("  {f}")).collect::<Vec<_>>().join("\n"))]
    Invalid(Vec<Finding>),
}

pub fn parse_scenario(text: &str) -> Result<ScenarioConfig, String> {
    toml::from_str(text).map_err(|e| e.to_string())
}

pub fn read_scenario(path: &Path) -> Result<ScenarioConfig, ScenarioError> {
    let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_scenario(&text).map_err(|message| ScenarioError::Parse {
        path: path.to_path_buf(),
        message,
    })
}

/// Reads, resolves and validates a scenario file.
pub fn load_scenario(path: &Path) -> Result<Scenario, ScenarioError> {
    let config = read_scenario(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    validate(&config, base).map_err(ScenarioError::Invalid)
}

pub fn write_scenario(config: &ScenarioConfig) -> String {
    toml::to_string(config).expect("scenario config serializes")
}

fn load_trace(src: &TraceSource, base: &Path) -> Result<Vec<f64>, String> {
    match src {
        TraceSource::Inline(v) => Ok(v.clone()),
        TraceSource::Csv { csv, column } => {
            let path = base.join(csv);
            let mut rdr = ::csv::Reader::from_path(&path).map_err(|e| format!("{}: {e}", path.display()))?;
            let headers = rdr.headers().map_err(|e| format!("{}: {e}", path.display()))?.clone();
            let idx = headers
                .iter()
                .position(|h| h.trim() == column)
                .ok_or_else(|| format!("{}: no column '{column}'", path.display()))?;
            let mut out = Vec::new();
            for (row, rec) in rdr.records().enumerate() {
                let rec = rec.map_err(|e| format!("{}: {e}", path.display()))?;
                let cell = rec.get(idx).unwrap_or("").trim();
                let v: f64 = cell.parse().map_err(|_| {
                    format!("{}: row {}: '{cell}' is not a number", path.display(), row + 2)
                })?;
                out.push(v);
            }
            Ok(out)
        }
    }
}

fn source_label(src: &TraceSource) -> String {
    match src {
        TraceSource::Inline(_) => "inline values".into(),
        TraceSource::Csv { csv, column } => format!("{} column {column}", csv.display()),
    }
}

/// Resolves traces and checks every invariant. All problems are collected
/// rather than stopping at the first.
pub fn validate(config: &ScenarioConfig, base: &Path) -> Result<Scenario, Vec<Finding>> {
    let mut findings = Vec::new();
    let mut global = |field: &str, message: String| {
        findings.push(Finding {
            user: None,
            field: field.into(),
            message,
        })
    };
    let grid = TimeGrid {
        horizon_len: config.grid.horizon,
        slot_hours: config.grid.slot_hours,
    };
    if let Err(e) = grid.validate() {
        global("grid", e.to_string());
    }
    let h = grid.horizon_len;
    let trade_price = match &config.tariff.trade_price {
        None => vec![0.5 * config.tariff.energy_price; h],
        Some(PriceSpec::Flat(p)) => vec![*p; h],
        Some(PriceSpec::PerSlot(v)) => v.clone(),
    };
    let tariff = Tariff {
        energy_price: config.tariff.energy_price,
        peak_price: config.tariff.peak_price,
        trade_price,
    };
    if let Err(e) = tariff.validate(h) {
        global("tariff", e.to_string());
    }
    let admm = config.admm.to_config();
    if let Err(e) = admm.validate() {
        global("admm", e.to_string());
    }
    if config.users.is_empty() {
        global("users", "at least one user is required".into());
    }

    let mut users = Vec::new();
    for (id, u) in config.users.iter().enumerate() {
        let mut p = UserParams::<f64>::with_defaults(id, h);
        let mut traces_ok = true;
        for (field, src, slot) in [
            ("renewable_avail", &u.renewable_avail, &mut p.renewable_avail),
            ("inflexible_load", &u.inflexible_load, &mut p.inflexible_load),
            ("outdoor_temp", &u.outdoor_temp, &mut p.outdoor_temp),
        ] {
            match load_trace(src, base) {
                Ok(v) if v.len() == h => *slot = v,
                Ok(v) => {
                    traces_ok = false;
                    findings.push(Finding {
                        user: Some(id),
                        field: field.into(),
                        message: format!("{} has {} values, expected {h}", source_label(src), v.len()),
                    });
                }
                Err(message) => {
                    traces_ok = false;
                    findings.push(Finding {
                        user: Some(id),
                        field: field.into(),
                        message,
                    });
                }
            }
        }
        let set = |dst: &mut f64, v: Option<f64>| {
            if let Some(v) = v {
                *dst = v;
            }
        };
        set(&mut p.thermal_capacitance, u.thermal_capacitance);
        set(&mut p.thermal_resistance, u.thermal_resistance);
        set(&mut p.hvac_efficiency, u.hvac_efficiency);
        set(&mut p.comfort_weight, u.comfort_weight);
        set(&mut p.temp_ref, u.temp_ref);
        p.temp_initial = u.temp_initial.unwrap_or(p.temp_ref);
        set(&mut p.temp_min, u.temp_min);
        set(&mut p.temp_max, u.temp_max);
        set(&mut p.grid_cap, u.grid_cap);
        set(&mut p.hvac_cap, u.hvac_cap);
        if traces_ok {
            for v in p.violations(h) {
                findings.push(Finding {
                    user: Some(id),
                    field: v.field,
                    message: v.message,
                });
            }
        }
        users.push(p);
    }
    if findings.is_empty() {
        Ok(Scenario {
            config: config.clone(),
            grid,
            tariff,
            users,
            admm,
        })
    } else {
        Err(findings)
    }
}
