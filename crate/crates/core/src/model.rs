//! Households, tariffs, thermal dynamics and cost functions.
//!
//! Power quantities are kW held for one slot; costs multiply by
//! [`TimeGrid::slot_hours`] wherever energy is billed.

use serde::{Deserialize, Serialize};

use crate::num::Scalar;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("{what}: expected length {expected}, got {got}")]
    Shape {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{0}")]
    Domain(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid<T> {
    pub horizon_len: usize,
    pub slot_hours: T,
}

impl<T: Scalar> TimeGrid<T> {
    pub fn hourly(horizon_len: usize) -> Self {
        Self {
            horizon_len,
            slot_hours: T::one(),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.horizon_len == 0 {
            return Err(ModelError::Domain("horizon must contain at least one slot".into()));
        }
        if !(self.slot_hours > T::zero()) || !self.slot_hours.is_finite() {
            return Err(ModelError::Domain("slot_hours must be positive".into()));
        }
        Ok(())
    }
}

/// Private parameters of one household.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserParams<T> {
    pub id: usize,
    pub thermal_capacitance: T,
    pub thermal_resistance: T,
    /// Positive when cooling, negative when heating.
    pub hvac_efficiency: T,
    /// $/°C² per slot.
    pub comfort_weight: T,
    pub temp_ref: T,
    pub temp_min: T,
    pub temp_max: T,
    pub temp_initial: T,
    /// kW per slot.
    pub grid_cap: T,
    /// kW per slot.
    pub hvac_cap: T,
    pub renewable_avail: Vec<T>,
    pub inflexible_load: Vec<T>,
    pub outdoor_temp: Vec<T>,
}

/// A broken parameter invariant, naming the offending field.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub field: String,
    pub message: String,
}

impl<T: Scalar> UserParams<T> {
    /// Household with the default thermal constants and flat traces.
    pub fn with_defaults(id: usize, horizon: usize) -> Self {
        let temp_ref = T::lit(24.0);
        Self {
            id,
            thermal_capacitance: T::lit(3.3),
            thermal_resistance: T::lit(1.35),
            hvac_efficiency: T::lit(2.5),
            comfort_weight: T::lit(0.05),
            temp_ref,
            temp_min: T::lit(20.0),
            temp_max: T::lit(27.0),
            temp_initial: temp_ref,
            grid_cap: T::lit(10.0),
            hvac_cap: T::lit(10.0),
            renewable_avail: vec![T::zero(); horizon],
            inflexible_load: vec![T::one(); horizon],
            outdoor_temp: vec![temp_ref; horizon],
        }
    }

    pub fn horizon(&self) -> usize {
        self.outdoor_temp.len()
    }

    /// Every invariant violation; empty when the parameters are usable.
    pub fn violations(&self, horizon: usize) -> Vec<Violation> {
        let mut out = Vec::new();
        let mut flag = |field: &str, message: String| {
            out.push(Violation {
                field: field.to_string(),
                message,
            })
        };
        let finite = [
            ("thermal_capacitance", self.thermal_capacitance),
            ("thermal_resistance", self.thermal_resistance),
            ("hvac_efficiency", self.hvac_efficiency),
            ("comfort_weight", self.comfort_weight),
            ("temp_ref", self.temp_ref),
            ("temp_min", self.temp_min),
            ("temp_max", self.temp_max),
            ("temp_initial", self.temp_initial),
            ("grid_cap", self.grid_cap),
            ("hvac_cap", self.hvac_cap),
        ];
        for (field, v) in finite {
            if !v.is_finite() {
                flag(field, format!("must be finite, got {v}"));
            }
        }
        if self.temp_min > self.temp_max {
            flag(
                "temp_min",
                format!("temp_min {} exceeds temp_max {}", self.temp_min, self.temp_max),
            );
        } else if self.temp_ref < self.temp_min || self.temp_ref > self.temp_max {
            flag(
                "temp_ref",
                format!(
                    "temp_ref {} outside [{}, {}]",
                    self.temp_ref, self.temp_min, self.temp_max
                ),
            );
        }
        if !(self.thermal_capacitance > T::zero()) {
            flag("thermal_capacitance", "must be positive".into());
        }
        if !(self.thermal_resistance > T::zero()) {
            flag("thermal_resistance", "must be positive".into());
        }
        if self.hvac_efficiency == T::zero() {
            flag("hvac_efficiency", "must be nonzero".into());
        }
        if self.comfort_weight < T::zero() {
            flag("comfort_weight", "must be nonnegative".into());
        }
        if self.grid_cap < T::zero() {
            flag("grid_cap", "must be nonnegative".into());
        }
        if self.hvac_cap < T::zero() {
            flag("hvac_cap", "must be nonnegative".into());
        }
        for (field, trace) in [
            ("renewable_avail", &self.renewable_avail),
            ("inflexible_load", &self.inflexible_load),
            ("outdoor_temp", &self.outdoor_temp),
        ] {
            if trace.len() != horizon {
                flag(
                    field,
                    format!("trace has {} entries, horizon is {horizon}", trace.len()),
                );
            } else if let Some(t) = trace.iter().position(|v| !v.is_finite()) {
                flag(field, format!("non-finite value at slot {t}"));
            }
        }
        if let Some(t) = self.renewable_avail.iter().position(|v| *v < T::zero()) {
            flag("renewable_avail", format!("negative value at slot {t}"));
        }
        out
    }

    /// `1 / (C R)`, the fraction of the indoor/outdoor gap closed per slot.
    pub fn leak_rate(&self) -> T {
        T::one() / (self.thermal_capacitance * self.thermal_resistance)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tariff<T> {
    /// $/kWh bought from the grid.
    pub energy_price: T,
    /// $/kW on the horizon's peak grid draw.
    pub peak_price: T,
    /// $/kWh paid between peers, per slot.
    pub trade_price: Vec<T>,
}

impl<T: Scalar> Tariff<T> {
    /// Trade price defaulting to half the grid energy price in every slot.
    pub fn with_default_trade_price(energy_price: T, peak_price: T, horizon: usize) -> Self {
        Self {
            energy_price,
            peak_price,
            trade_price: vec![T::lit(0.5) * energy_price; horizon],
        }
    }

    pub fn validate(&self, horizon: usize) -> Result<(), ModelError> {
        if !(self.energy_price >= T::zero()) {
            return Err(ModelError::Domain("energy_price must be nonnegative".into()));
        }
        if !(self.peak_price >= T::zero()) {
            return Err(ModelError::Domain("peak_price must be nonnegative".into()));
        }
        if self.trade_price.len() != horizon {
            return Err(ModelError::Shape {
                what: "trade_price",
                expected: horizon,
                got: self.trade_price.len(),
            });
        }
        if self.trade_price.iter().any(|p| !p.is_finite()) {
            return Err(ModelError::Domain("trade_price must be finite".into()));
        }
        Ok(())
    }
}

/// Pairwise trades of one user: one row per counterparty, one column per slot.
/// Positive entries are purchases from that counterparty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeMatrix<T> {
    pub counterparties: Vec<usize>,
    pub rows: Vec<Vec<T>>,
}

impl<T: Scalar> TradeMatrix<T> {
    pub fn zeros(counterparties: Vec<usize>, horizon: usize) -> Self {
        let rows = vec![vec![T::zero(); horizon]; counterparties.len()];
        Self {
            counterparties,
            rows,
        }
    }

    /// Counterparties of `user` among `n_users`, in ascending id order.
    pub fn for_user(user: usize, n_users: usize, horizon: usize) -> Self {
        Self::zeros((0..n_users).filter(|&j| j != user).collect(), horizon)
    }

    pub fn horizon(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    /// Net purchase in slot `t` summed over counterparties.
    pub fn net(&self, t: usize) -> T {
        self.rows.iter().fold(T::zero(), |acc, r| acc + r[t])
    }

    pub fn row_for(&self, counterparty: usize) -> Option<&[T]> {
        self.counterparties
            .iter()
            .position(|&c| c == counterparty)
            .map(|k| self.rows[k].as_slice())
    }
}

/// One user's decisions over the horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule<T> {
    pub renewable_use: Vec<T>,
    pub grid_draw: Vec<T>,
    pub hvac_power: Vec<T>,
    /// Indoor temperature at the end of each slot.
    pub indoor_temp: Vec<T>,
    pub trades: TradeMatrix<T>,
}

/// Largest violation of each household constraint family.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FeasibilityResiduals<T> {
    pub renewable_bounds: T,
    pub grid_bounds: T,
    pub hvac_bounds: T,
    pub temperature_band: T,
    pub thermal_dynamics: T,
    pub balance: T,
}

impl<T: Scalar> FeasibilityResiduals<T> {
    pub fn max(&self) -> T {
        self.renewable_bounds
            .max(self.grid_bounds)
            .max(self.hvac_bounds)
            .max(self.temperature_band)
            .max(self.thermal_dynamics)
            .max(self.balance)
    }
}

impl<T: Scalar> Schedule<T> {
    /// Measures how far the schedule is from satisfying the supply bounds,
    /// temperature band, thermal recursion and the per-slot balance including
    /// its trades.
    pub fn feasibility(&self, params: &UserParams<T>) -> FeasibilityResiduals<T> {
        let mut r = FeasibilityResiduals {
            renewable_bounds: T::zero(),
            grid_bounds: T::zero(),
            hvac_bounds: T::zero(),
            temperature_band: T::zero(),
            thermal_dynamics: T::zero(),
            balance: T::zero(),
        };
        let over = |v: T, lo: T, hi: T| (lo - v).max(v - hi).max(T::zero());
        let mut prev = params.temp_initial;
        for t in 0..params.horizon() {
            r.renewable_bounds = r
                .renewable_bounds
                .max(over(self.renewable_use[t], T::zero(), params.renewable_avail[t]));
            r.grid_bounds = r
                .grid_bounds
                .max(over(self.grid_draw[t], T::zero(), params.grid_cap));
            r.hvac_bounds = r
                .hvac_bounds
                .max(over(self.hvac_power[t], T::zero(), params.hvac_cap));
            r.temperature_band = r
                .temperature_band
                .max(over(self.indoor_temp[t], params.temp_min, params.temp_max));
            let expected = thermal_step(prev, params.outdoor_temp[t], self.hvac_power[t], params);
            r.thermal_dynamics = r
                .thermal_dynamics
                .max((expected - self.indoor_temp[t]).abs());
            prev = self.indoor_temp[t];
            let supply = self.renewable_use[t] + self.grid_draw[t] + self.trades.net(t);
            let demand = self.hvac_power[t] + params.inflexible_load[t];
            r.balance = r.balance.max((supply - demand).abs());
        }
        r
    }
}

/// Indoor temperature after one slot:
/// `T_prev - (T_prev - T_out + η R p_ac) / (C R)`.
pub fn thermal_step<T: Scalar>(t_prev: T, t_out: T, p_ac: T, params: &UserParams<T>) -> T {
    let r = params.thermal_resistance;
    t_prev - (t_prev - t_out + params.hvac_efficiency * r * p_ac) / (params.thermal_capacitance * r)
}

/// Indoor temperature at the end of every slot, starting from `temp_initial`.
pub fn trajectory<T: Scalar>(hvac_power: &[T], params: &UserParams<T>) -> Result<Vec<T>, ModelError> {
    let h = params.horizon();
    if hvac_power.len() != h {
        return Err(ModelError::Shape {
            what: "hvac_power",
            expected: h,
            got: hvac_power.len(),
        });
    }
    let mut temp = params.temp_initial;
    Ok(hvac_power
        .iter()
        .zip(&params.outdoor_temp)
        .map(|(&p, &out)| {
            temp = thermal_step(temp, out, p, params);
            temp
        })
        .collect())
}

/// Two-part grid bill: energy charge plus a peak charge on the largest draw.
pub fn grid_cost<T: Scalar>(grid_draw: &[T], tariff: &Tariff<T>, grid: &TimeGrid<T>) -> Result<T, ModelError> {
    if let Some(t) = grid_draw.iter().position(|p| *p < T::zero()) {
        return Err(ModelError::Domain(format!(
            "negative grid draw {} in slot {t}",
            grid_draw[t]
        )));
    }
    let energy: T = grid_draw.iter().copied().sum();
    let peak = grid_draw.iter().fold(T::zero(), |m, p| m.max(*p));
    Ok(tariff.energy_price * energy * grid.slot_hours + tariff.peak_price * peak)
}

/// `β Σ_t (T_in[t] - T_ref)²`
pub fn discomfort_cost<T: Scalar>(indoor_temp: &[T], params: &UserParams<T>) -> T {
    let sq: T = indoor_temp
        .iter()
        .map(|&t| (t - params.temp_ref) * (t - params.temp_ref))
        .sum();
    params.comfort_weight * sq
}

pub fn operating_cost<T: Scalar>(
    schedule: &Schedule<T>,
    params: &UserParams<T>,
    tariff: &Tariff<T>,
    grid: &TimeGrid<T>,
) -> Result<T, ModelError> {
    Ok(grid_cost(&schedule.grid_draw, tariff, grid)? + discomfort_cost(&schedule.indoor_temp, params))
}

/// Payment for net peer purchases at the platform price.
pub fn trading_payment<T: Scalar>(trades: &TradeMatrix<T>, tariff: &Tariff<T>, grid: &TimeGrid<T>) -> T {
    let h = trades.horizon();
    (0..h)
        .map(|t| tariff.trade_price[t] * trades.net(t))
        .sum::<T>()
        * grid.slot_hours
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn params(h: usize) -> UserParams<f64> {
        UserParams::with_defaults(0, h)
    }

    #[test]
    fn equilibrium_without_hvac() {
        let p = params(1);
        assert_eq!(thermal_step(20.0, 20.0, 0.0, &p), 20.0);
    }

    #[test]
    fn thermal_step_hand_value() {
        let p = params(1);
        let t = thermal_step(25.0, 30.0, 1.0, &p);
        // 25 - (25 - 30 + 2.5·1.35·1) / (3.3·1.35)
        let expected = 25.0 + 1.625 / 4.455;
        assert!((t - expected).abs() < 1e-12);
        assert!((t - 25.364_758_698).abs() < 1e-8);
    }

    #[test]
    fn heating_and_cooling_signs() {
        let mut p = params(1);
        assert!(thermal_step(22.0, 22.0, 1.0, &p) < 22.0);
        p.hvac_efficiency = -2.5;
        assert!(thermal_step(22.0, 22.0, 1.0, &p) > 22.0);
    }

    #[test]
    fn trajectory_constant_at_equilibrium() {
        let mut p = params(6);
        p.outdoor_temp = vec![p.temp_initial; 6];
        let traj = trajectory(&[0.0; 6], &p).unwrap();
        assert!(traj.iter().all(|&t| t == p.temp_initial));
    }

    #[test]
    fn trajectory_single_slot() {
        let mut p = params(1);
        p.outdoor_temp = vec![31.0];
        let traj = trajectory(&[0.7], &p).unwrap();
        assert_eq!(traj, vec![thermal_step(p.temp_initial, 31.0, 0.7, &p)]);
    }

    #[test]
    fn trajectory_matches_manual_recursion() {
        let mut p = params(5);
        p.outdoor_temp = vec![28.0, 30.5, 33.0, 31.2, 26.4];
        p.temp_initial = 23.1;
        let hvac = [0.3, 1.7, 0.0, 2.2, 0.9];
        let traj = trajectory(&hvac, &p).unwrap();
        let a = 1.0 / (3.3 * 1.35);
        let mut prev = 23.1;
        for t in 0..5 {
            let next = prev - a * (prev - p.outdoor_temp[t] + 2.5 * 1.35 * hvac[t]);
            assert!((traj[t] - next).abs() < 1e-12);
            prev = next;
        }
    }

    #[test]
    fn trajectory_rejects_wrong_length() {
        let p = params(3);
        assert!(matches!(
            trajectory(&[0.0; 2], &p),
            Err(ModelError::Shape { expected: 3, got: 2, .. })
        ));
    }

    #[test]
    fn grid_cost_hand_values() {
        let grid = TimeGrid::<f64>::hourly(3);
        let tariff = Tariff {
            energy_price: 0.1,
            peak_price: 5.0,
            trade_price: vec![0.0; 3],
        };
        assert_eq!(grid_cost(&[0.0; 3], &tariff, &grid).unwrap(), 0.0);
        assert!((grid_cost(&[1.0, 2.0, 3.0], &tariff, &grid).unwrap() - 15.6).abs() < 1e-12);
        let flat = Tariff {
            peak_price: 0.0,
            ..tariff.clone()
        };
        assert!((grid_cost(&[1.0, 2.0, 3.0], &flat, &grid).unwrap() - 0.6).abs() < 1e-12);
        assert!(matches!(
            grid_cost(&[1.0, -0.5, 0.0], &tariff, &grid),
            Err(ModelError::Domain(_))
        ));
    }

    #[test]
    fn slot_hours_scale_energy_charge_only() {
        let grid = TimeGrid::<f64> {
            horizon_len: 2,
            slot_hours: 0.5,
        };
        let tariff = Tariff {
            energy_price: 0.2,
            peak_price: 1.0,
            trade_price: vec![1.0, 1.0],
        };
        assert!((grid_cost(&[2.0, 4.0], &tariff, &grid).unwrap() - (0.6 + 4.0)).abs() < 1e-12);
    }

    #[test]
    fn discomfort_hand_values() {
        let mut p = params(2);
        p.comfort_weight = 2.0;
        p.temp_ref = 22.0;
        assert_eq!(discomfort_cost(&[22.0, 22.0], &p), 0.0);
        assert_eq!(discomfort_cost(&[21.0, 23.0], &p), 4.0);
        p.comfort_weight = 0.0;
        assert_eq!(discomfort_cost(&[10.0, 40.0], &p), 0.0);
    }

    #[test]
    fn operating_cost_adds_components() {
        let grid = TimeGrid::<f64>::hourly(3);
        let mut p = params(3);
        p.comfort_weight = 2.0;
        p.temp_ref = 22.0;
        let tariff = Tariff {
            energy_price: 0.1,
            peak_price: 5.0,
            trade_price: vec![0.0; 3],
        };
        let s = Schedule {
            renewable_use: vec![0.0; 3],
            grid_draw: vec![1.0, 2.0, 3.0],
            hvac_power: vec![0.0; 3],
            indoor_temp: vec![21.0, 23.0, 22.0],
            trades: TradeMatrix::zeros(vec![], 3),
        };
        // 15.6 + 4
        let total = operating_cost(&s, &p, &tariff, &grid).unwrap();
        assert!((total - 19.6).abs() < 1e-12);
        let parts = grid_cost(&s.grid_draw, &tariff, &grid).unwrap() + discomfort_cost(&s.indoor_temp, &p);
        assert_eq!(total, parts);
        let zero = Schedule {
            grid_draw: vec![0.0; 3],
            indoor_temp: vec![22.0; 3],
            ..s
        };
        assert_eq!(operating_cost(&zero, &p, &tariff, &grid).unwrap(), 0.0);
    }

    #[test]
    fn trading_payment_hand_values() {
        let grid = TimeGrid::<f64>::hourly(2);
        let tariff = Tariff {
            energy_price: 0.0,
            peak_price: 0.0,
            trade_price: vec![1.0, 2.0],
        };
        let trades = TradeMatrix {
            counterparties: vec![1, 2],
            rows: vec![vec![2.0, -1.5], vec![1.0, 0.5]],
        };
        assert!((trading_payment(&trades, &tariff, &grid) - 1.0).abs() < 1e-12);
        assert_eq!(trading_payment(&TradeMatrix::zeros(vec![1, 2], 2), &tariff, &grid), 0.0);
        let free = Tariff {
            trade_price: vec![0.0, 0.0],
            ..tariff
        };
        assert_eq!(trading_payment(&trades, &free, &grid), 0.0);
    }

    #[test]
    fn violations_name_fields() {
        let mut p = params(3);
        assert!(p.violations(3).is_empty());
        p.temp_min = 30.0;
        p.renewable_avail = vec![0.0; 2];
        let v = p.violations(3);
        assert_eq!(v.len(), 2);
        assert_eq!(v[0].field, "temp_min");
        assert_eq!(v[1].field, "renewable_avail");
    }

    proptest! {
        #[test]
        fn thermal_step_is_affine(
            a in (-30.0f64..40.0, -30.0f64..40.0, -5.0f64..5.0),
            b in (-30.0f64..40.0, -30.0f64..40.0, -5.0f64..5.0),
            w in 0.0f64..1.0,
        ) {
            let p = params(1);
            let mix = |x: f64, y: f64| w * x + (1.0 - w) * y;
            let lhs = thermal_step(mix(a.0, b.0), mix(a.1, b.1), mix(a.2, b.2), &p);
            let rhs = mix(thermal_step(a.0, a.1, a.2, &p), thermal_step(b.0, b.1, b.2, &p));
            prop_assert!((lhs - rhs).abs() < 1e-12);
        }

        #[test]
        fn grid_cost_convex_and_homogeneous(
            x in proptest::collection::vec(0.0f64..10.0, 6),
            y in proptest::collection::vec(0.0f64..10.0, 6),
            s in 0.0f64..5.0,
        ) {
            let grid = TimeGrid::<f64>::hourly(6);
            let tariff = Tariff { energy_price: 0.15, peak_price: 2.0, trade_price: vec![0.0; 6] };
            let mid: Vec<f64> = x.iter().zip(&y).map(|(a, b)| 0.5 * (a + b)).collect();
            let f = |v: &[f64]| grid_cost(v, &tariff, &grid).unwrap();
            prop_assert!(f(&mid) <= 0.5 * (f(&x) + f(&y)) + 1e-12);
            let scaled: Vec<f64> = x.iter().map(|v| v * s).collect();
            prop_assert!((f(&scaled) - s * f(&x)).abs() < 1e-9);
        }

        #[test]
        fn discomfort_nonnegative(temps in proptest::collection::vec(10.0f64..40.0, 1..8), beta in 0.0f64..3.0) {
            let mut p = params(temps.len());
            p.comfort_weight = beta;
            let c = discomfort_cost(&temps, &p);
            prop_assert!(c >= 0.0);
            if beta > 0.0 && temps.iter().any(|t| *t != p.temp_ref) {
                prop_assert!(c > 0.0);
            }
        }

        #[test]
        fn antisymmetric_trades_cancel(
            n in 2usize..6,
            seed_vals in proptest::collection::vec(-5.0f64..5.0, 60),
            prices in proptest::collection::vec(0.0f64..1.0, 4),
        ) {
            let h = 4;
            let grid = TimeGrid::<f64>::hourly(h);
            let tariff = Tariff { energy_price: 0.0, peak_price: 0.0, trade_price: prices };
            let mut next = seed_vals.iter().cycle();
            let mut pair = vec![vec![vec![0.0; h]; n]; n];
            for i in 0..n {
                for j in (i + 1)..n {
                    for t in 0..h {
                        let v = *next.next().unwrap();
                        pair[i][j][t] = v;
                        pair[j][i][t] = -v;
                    }
                }
            }
            let total: f64 = (0..n)
                .map(|i| {
                    let mut m = TradeMatrix::for_user(i, n, h);
                    for (k, &j) in m.counterparties.clone().iter().enumerate() {
                        m.rows[k] = pair[i][j].clone();
                    }
                    trading_payment(&m, &tariff, &grid)
                })
                .sum();
            prop_assert!(total.abs() < 1e-9);
        }
    }
}
