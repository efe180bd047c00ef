use std::f64::consts::PI;
use std::io;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Weibull};

use crate::model::TimeGrid;

use super::{
    write_scenario, AdmmSection, GridSection, RhoMode, ScenarioConfig, TariffSection, TraceSource, UserSection,
    TRACE_COLUMNS,
};

/// Shape parameters of one household's synthetic traces.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthProfile {
    /// Clock hour of slot 0.
    pub start_hour: f64,
    pub solar_peak_kw: f64,
    pub wind_mean_kw: f64,
    pub load_mean_kw: f64,
    /// Relative amplitude of the daily load cycle.
    pub load_swing: f64,
    pub temp_mean_c: f64,
    pub temp_amplitude_c: f64,
    pub temp_noise_c: f64,
}

impl Default for SynthProfile {
    fn default() -> Self {
        Self {
            start_hour: 0.0,
            solar_peak_kw: 3.0,
            wind_mean_kw: 0.0,
            load_mean_kw: 1.2,
            load_swing: 0.35,
            temp_mean_c: 29.0,
            temp_amplitude_c: 5.0,
            temp_noise_c: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Traces {
    pub renewable: Vec<f64>,
    pub load: Vec<f64>,
    pub outdoor_temp: Vec<f64>,
}

fn round4(v: f64) -> f64 {
    (v * 1e4).round() / 1e4
}

fn hour_of(grid: &TimeGrid<f64>, start: f64, t: usize) -> f64 {
    (start + t as f64 * grid.slot_hours).rem_euclid(24.0)
}

/// Solar is a half-sine between 06:00 and 18:00 scaled by a per-slot cloud
/// factor; wind is Weibull with shape 2; load follows a daily cycle peaking in
/// the evening with multiplicative noise; outdoor temperature is a sinusoid
/// peaking at 15:00 plus Gaussian noise. Values are rounded to 1e-4 so they
/// survive a trip through decimal text unchanged.
pub fn synth_traces(seed: u64, grid: &TimeGrid<f64>, profile: &SynthProfile) -> Traces {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = grid.horizon_len;
    let temp_noise = Normal::new(0.0, profile.temp_noise_c.max(0.0)).unwrap();
    let load_noise = Normal::new(1.0, 0.1).unwrap();
    // Weibull(k=2) has mean scale·Γ(1.5)
    let wind = Weibull::new((profile.wind_mean_kw / 0.886_226_925).max(1e-12), 2.0).unwrap();

    let mut out = Traces {
        renewable: Vec::with_capacity(h),
        load: Vec::with_capacity(h),
        outdoor_temp: Vec::with_capacity(h),
    };
    for t in 0..h {
        let hour = hour_of(grid, profile.start_hour, t);
        let sun = if (6.0..=18.0).contains(&hour) {
            (PI * (hour - 6.0) / 12.0).sin().max(0.0)
        } else {
            0.0
        };
        let cloud = rng.random_range(0.7..=1.0);
        let w = if profile.wind_mean_kw > 0.0 {
            wind.sample(&mut rng)
        } else {
            0.0
        };
        out.renewable.push(round4(profile.solar_peak_kw * sun * cloud + w).max(0.0));

        let cycle = 1.0 + profile.load_swing * (2.0 * PI * (hour - 19.0) / 24.0).cos();
        let noise: f64 = load_noise.sample(&mut rng);
        let noise = noise.max(0.05);
        out.load.push(round4(profile.load_mean_kw * cycle * noise).max(0.0));

        let diurnal = profile.temp_amplitude_c * (2.0 * PI * (hour - 15.0) / 24.0).cos();
        out.outdoor_temp
            .push(round4(profile.temp_mean_c + diurnal + temp_noise.sample(&mut rng)));
    }
    out
}

/// A heterogeneous neighbourhood of `n_users` households sharing one weather
/// trace, with inline traces. Roughly half the households have rooftop PV.
pub fn synth_scenario(seed: u64, n_users: usize, horizon: usize) -> ScenarioConfig {
    let grid = TimeGrid::hourly(horizon);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weather = synth_traces(
        seed.wrapping_add(0x5eed),
        &grid,
        &SynthProfile {
            solar_peak_kw: 0.0,
            ..SynthProfile::default()
        },
    )
    .outdoor_temp;

    let users = (0..n_users)
        .map(|i| {
            let has_pv = i % 2 == 0;
            let profile = SynthProfile {
                solar_peak_kw: if has_pv { rng.random_range(3.0..6.0) } else { 0.0 },
                wind_mean_kw: if i % 3 == 1 { rng.random_range(0.2..0.6) } else { 0.0 },
                load_mean_kw: rng.random_range(0.8..1.8),
                ..SynthProfile::default()
            };
            let tr = synth_traces(seed.wrapping_mul(1000).wrapping_add(i as u64), &grid, &profile);
            let temp_ref = round4(rng.random_range(22.0..25.0));
            UserSection {
                name: Some(format!("house-{i:02}")),
                comfort_weight: Some(round4(rng.random_range(0.06..0.3))),
                temp_ref: Some(temp_ref),
                temp_min: Some(temp_ref - 3.0),
                temp_max: Some(temp_ref + 3.0),
                grid_cap: Some(8.0),
                hvac_cap: Some(4.0),
                ..UserSection::with_traces(
                    TraceSource::Inline(tr.renewable),
                    TraceSource::Inline(tr.load),
                    TraceSource::Inline(weather.clone()),
                )
            }
        })
        .collect();

    ScenarioConfig {
        seed: Some(seed),
        grid: GridSection {
            horizon,
            slot_hours: 1.0,
        },
        tariff: TariffSection {
            energy_price: 0.45,
            peak_price: 1.8,
            trade_price: None,
        },
        admm: AdmmSection {
            rho_mode: RhoMode::Fixed,
            ..AdmmSection::default()
        },
        users,
    }
}

fn inline(src: &TraceSource) -> &[f64] {
    match src {
        TraceSource::Inline(v) => v,
        TraceSource::Csv { .. } => &[],
    }
}

/// Writes `config` to `dir/scenario.toml`, moving inline traces into one
/// `traces/user_NN.csv` file per user.
pub fn write_synth_scenario(dir: &Path, mut config: ScenarioConfig) -> io::Result<PathBuf> {
    let traces = dir.join("traces");
    std::fs::create_dir_all(&traces)?;
    for (i, u) in config.users.iter_mut().enumerate() {
        let rel = PathBuf::from("traces").join(format!("user_{i:02}.csv"));
        let mut w = ::csv::Writer::from_path(dir.join(&rel))?;
        w.write_record(TRACE_COLUMNS)?;
        let (re, load, temp) = (
            inline(&u.renewable_avail),
            inline(&u.inflexible_load),
            inline(&u.outdoor_temp),
        );
        for t in 0..config.grid.horizon {
            let cell = |v: &[f64]| v.get(t).map_or(String::new(), |x| x.to_string());
            w.write_record([t.to_string(), cell(re), cell(load), cell(temp)])?;
        }
        w.flush()?;
        let col = |c: &str| TraceSource::Csv {
            csv: rel.clone(),
            column: c.to_string(),
        };
        u.renewable_avail = col(TRACE_COLUMNS[1]);
        u.inflexible_load = col(TRACE_COLUMNS[2]);
        u.outdoor_temp = col(TRACE_COLUMNS[3]);
    }
    let path = dir.join("scenario.toml");
    std::fs::write(&path, write_scenario(&config))?;
    Ok(path)
}
