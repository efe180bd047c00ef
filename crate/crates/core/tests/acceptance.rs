//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hvac_coop::coordinator::solve_centralized;
use hvac_coop::linalg::Matrix;
use hvac_coop::protocol::{decode_frame, Message, BROADCAST_FIELDS, TRADE_PROPOSAL_FIELDS};
use hvac_coop::qp::SolverSettings;
use hvac_coop::scenario::{
    agents, emp_costs, load_scenario, run_scenario, run_scenario_captured, synth_scenario, validate, Scenario,
    ScenarioReport, TransportKind,
};
use hvac_coop::{check_kkt, run, solve, Coordinator, ErrorNorm, QpProblem, QpStatus, RunOutcome, TradeMatrix};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

struct Case {
    name: String,
    scenario: Scenario,
    outcome: RunOutcome<f64>,
    report: ScenarioReport,
    elapsed: Duration,
}

fn solve_case(name: &str, scenario: Scenario) -> Case {
    let emp = emp_costs(&scenario).expect("standalone solve");
    let start = Instant::now();
    let outcome = match run(&mut agents(&scenario).expect("agents"), scenario.admm.clone()) {
        Ok(o) => o,
        Err(hvac_coop::CoordinatorError::NonConvergence { outcome, .. }) => *outcome,
        Err(e) => panic!("{name}: {e}"),
    };
    let elapsed = start.elapsed();
    let report = ScenarioReport::assemble(&scenario, &emp, &outcome);
    Case {
        name: name.to_string(),
        scenario,
        outcome,
        report,
        elapsed,
    }
}

fn cases() -> Vec<Case> {
    let mut out = vec![
        solve_case("reference 10x24", load_scenario(&fixtures().join("reference/scenario.toml")).unwrap()),
        solve_case("pair 2x4", load_scenario(&fixtures().join("pair.toml")).unwrap()),
    ];
    for (n, h) in [(2, 4), (3, 24), (5, 24), (10, 4)] {
        let s = validate(&synth_scenario(7, n, h), Path::new(".")).unwrap();
        out.push(solve_case(&format!("synth {n}x{h}"), s));
    }
    out
}

type Verdict = Result<String, String>;
type Criterion<'a> = (&'static str, Box<dyn FnOnce() -> Verdict + 'a>);

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn equivalence(cases: &[Case]) -> Verdict {
    let mut worst = 0.0f64;
    let mut total = Duration::ZERO;
    let mut failures = Vec::new();
    for c in cases {
        total += c.elapsed;
        let s = &c.scenario;
        let cen = solve_centralized(&s.users, &s.tariff, &s.grid, &SolverSettings::default()).unwrap();
        let admm: f64 = c.outcome.outcomes.iter().map(|o| o.cooperative_cost()).sum();
        let rel = (admm - cen.objective).abs() / cen.objective.abs().max(1.0);
        worst = worst.max(rel);
        if !c.outcome.converged || rel > 1e-3 {
            failures.push(format!("{} (converged {}, rel gap {rel:.2e})", c.name, c.outcome.converged));
        }
    }
    let fixed = cases
        .iter()
        .all(|c| c.scenario.admm.step == hvac_coop::StepSize::Fixed(1.0) && c.scenario.admm.tolerance == 1e-6);
    check(
        failures.is_empty() && fixed && cases.len() >= 5 && total <= Duration::from_secs(60),
        format!(
            "{} scenarios, worst relative gap {worst:.2e}, ADMM time {:.1}s{}",
            cases.len(),
            total.as_secs_f64(),
            if failures.is_empty() { String::new() } else { format!("; failing: {}", failures.join(", ")) }
        ),
    )
}

// Exhaustive active-set oracle for small QPs: every choice of active
// inequality rows gives a linear KKT system; the optimum is the cheapest
// primal-feasible, dual-feasible solution among them.

fn gauss_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-10 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            if f != 0.0 {
                for c in col..n {
                    a[r][c] -= f * a[col][c];
                }
                b[r] -= f * b[col];
            }
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    Some(x)
}

struct Dense {
    q: Vec<Vec<f64>>,
    c: Vec<f64>,
    aeq: Vec<Vec<f64>>,
    beq: Vec<f64>,
    ain: Vec<Vec<f64>>,
    bin: Vec<f64>,
}

impl Dense {
    fn objective(&self, x: &[f64]) -> f64 {
        let n = x.len();
        let mut f = 0.0;
        for i in 0..n {
            f += self.c[i] * x[i];
            for j in 0..n {
                f += 0.5 * x[i] * self.q[i][j] * x[j];
            }
        }
        f
    }

    fn kkt_for(&self, active: &[usize]) -> Option<(Vec<f64>, f64)> {
        let n = self.c.len();
        let rows: Vec<(&Vec<f64>, f64)> = self
            .aeq
            .iter()
            .zip(&self.beq)
            .map(|(r, b)| (r, *b))
            .chain(active.iter().map(|&i| (&self.ain[i], self.bin[i])))
            .collect();
        let m = rows.len();
        let mut a = vec![vec![0.0; n + m]; n + m];
        let mut rhs = vec![0.0; n + m];
        for i in 0..n {
            a[i][..n].copy_from_slice(&self.q[i]);
            rhs[i] = -self.c[i];
        }
        for (k, (row, b)) in rows.iter().enumerate() {
            for j in 0..n {
                a[n + k][j] = row[j];
                a[j][n + k] = row[j];
            }
            rhs[n + k] = *b;
        }
        let sol = gauss_solve(a, rhs)?;
        let x = sol[..n].to_vec();
        let mult = &sol[n + self.aeq.len()..];
        if mult.iter().any(|&m| m < -1e-9) {
            return None;
        }
        for (row, b) in self.ain.iter().zip(&self.bin) {
            let ax: f64 = row.iter().zip(&x).map(|(r, v)| r * v).sum();
            if ax > b + 1e-9 {
                return None;
            }
        }
        let f = self.objective(&x);
        Some((x, f))
    }

    /// Rows come in (upper, lower) pairs per variable followed by free rows;
    /// a variable's two bound rows are never active together.
    fn oracle(&self, n_boxed: usize) -> Option<f64> {
        let n_free = self.ain.len() - 2 * n_boxed;
        let mut best: Option<f64> = None;
        let total = 3usize.pow(n_boxed as u32) << n_free;
        for code in 0..total {
            let mut active = Vec::new();
            let mut k = code;
            for v in 0..n_boxed {
                match k % 3 {
                    1 => active.push(2 * v),
                    2 => active.push(2 * v + 1),
                    _ => {}
                }
                k /= 3;
            }
            for f in 0..n_free {
                if k >> f & 1 == 1 {
                    active.push(2 * n_boxed + f);
                }
            }
            if let Some((_, f)) = self.kkt_for(&active) {
                best = Some(best.map_or(f, |b: f64| b.min(f)));
            }
        }
        best
    }

    fn to_problem(&self) -> QpProblem<f64> {
        let mat = |rows: &[Vec<f64>], cols: usize| {
            if rows.is_empty() {
                Matrix::zeros(0, cols)
            } else {
                Matrix::from_rows(rows)
            }
        };
        let n = self.c.len();
        QpProblem::unconstrained(Matrix::from_rows(&self.q), self.c.clone())
            .with_eq(mat(&self.aeq, n), self.beq.clone())
            .with_ineq(mat(&self.ain, n), self.bin.clone())
    }
}

fn random_qp(rng: &mut ChaCha8Rng) -> Dense {
    let n = rng.random_range(1..=10usize);
    let rank = rng.random_range(1..=n);
    let l: Vec<Vec<f64>> = (0..n).map(|_| (0..rank).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let q: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| (0..rank).map(|k| l[i][k] * l[j][k]).sum()).collect())
        .collect();
    let c: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
    let x0: Vec<f64> = (0..n).map(|_| rng.random_range(-0.5..0.5)).collect();
    let mut ain = Vec::new();
    let mut bin = Vec::new();
    for (i, &x) in x0.iter().enumerate() {
        let mut e = vec![0.0; n];
        e[i] = 1.0;
        ain.push(e.clone());
        bin.push(x + rng.random_range(0.1..1.5));
        e[i] = -1.0;
        ain.push(e);
        bin.push(-x + rng.random_range(0.1..1.5));
    }
    let dot = |r: &[f64]| r.iter().zip(&x0).map(|(a, b)| a * b).sum::<f64>();
    let n_free = if n <= 8 { rng.random_range(0..=2) } else { rng.random_range(0..=1) };
    for _ in 0..n_free {
        let r: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        bin.push(dot(&r) + rng.random_range(0.0..0.5));
        ain.push(r);
    }
    let (mut aeq, mut beq) = (Vec::new(), Vec::new());
    if n >= 2 && rng.random_bool(0.5) {
        let r: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        beq.push(dot(&r));
        aeq.push(r);
    }
    Dense { q, c, aeq, beq, ain, bin }
}

fn qp_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let settings = SolverSettings::default();
    let (mut worst_gap, mut worst_kkt) = (0.0f64, 0.0f64);
    let mut failures = Vec::new();
    for k in 0..100 {
        let d = random_qp(&mut rng);
        let n = d.c.len();
        let expected = d.oracle(n).expect("box-constrained QP has an optimum");
        let p = d.to_problem();
        let sol = solve(&p, &settings).unwrap();
        if sol.status != QpStatus::Optimal {
            failures.push(format!("#{k} status {:?}", sol.status));
            continue;
        }
        let kkt = check_kkt(&p, &sol);
        let gap = (sol.objective - expected).abs() / expected.abs().max(1.0);
        worst_gap = worst_gap.max(gap);
        worst_kkt = worst_kkt.max(kkt);
        if gap > 1e-6 || kkt > 1e-8 {
            failures.push(format!("#{k} gap {gap:.1e} kkt {kkt:.1e}"));
        }
    }
    check(
        failures.is_empty(),
        format!(
            "100 random QPs, worst objective gap {worst_gap:.2e}, worst KKT {worst_kkt:.2e}{}",
            if failures.is_empty() { String::new() } else { format!("; failing: {}", failures.join(", ")) }
        ),
    )
}

fn single(v: f64) -> TradeMatrix<f64> {
    TradeMatrix {
        counterparties: vec![1],
        rows: vec![vec![v]],
    }
}

fn pair(a: f64, b: f64) -> Vec<TradeMatrix<f64>> {
    vec![
        single(a),
        TradeMatrix {
            counterparties: vec![0],
            rows: vec![vec![b]],
        },
    ]
}

fn coordinator_updates(reference: &Scenario) -> Verdict {
    let config = hvac_coop::AdmmConfig {
        step: hvac_coop::StepSize::Fixed(1.0),
        tolerance: 1e-6,
        norm: ErrorNorm::L1,
        max_iter: 10,
        decay: hvac_coop::DecayScope::Penalty,
    };
    // one-sided proposal: the projection splits the disagreement evenly
    let mut c = Coordinator::new(2, 1, config.clone()).unwrap();
    let err = c.step(&pair(1.0, 0.0)).unwrap();
    let hand = c.aux()[0].rows[0][0] == 0.5
        && c.aux()[1].rows[0][0] == -0.5
        && c.duals()[0].rows[0][0] == -0.5
        && c.duals()[1].rows[0][0] == -0.5
        && err == 1.0;
    // consistent proposals are a fixed point with zero error
    let mut c = Coordinator::new(2, 1, config.clone()).unwrap();
    let err_fixed = c.step(&pair(0.3, -0.3)).unwrap();
    let fixed = c.aux()[0].rows[0][0] == 0.3 && err_fixed == 0.0 && c.duals()[0].rows[0][0] == 0.0;

    // antisymmetry after every update of a full 10-user run
    let mut agents = agents(reference).unwrap();
    let n = agents.len();
    let h = reference.grid.horizon_len;
    let mut coord = Coordinator::new(n, h, reference.admm.clone()).unwrap();
    let mut worst = 0.0f64;
    loop {
        let k = coord.iteration() + 1;
        let rho = coord.next_rho();
        let mut proposals = Vec::with_capacity(n);
        for (i, a) in agents.iter_mut().enumerate() {
            a.set_coupling(k, coord.aux()[i].clone(), coord.duals()[i].clone()).unwrap();
            proposals.push(a.solve_llp(rho).unwrap().trades.clone());
        }
        coord.step(&proposals).unwrap();
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let (a, b) = (coord.aux()[i].row_for(j).unwrap(), coord.aux()[j].row_for(i).unwrap());
                for t in 0..h {
                    worst = worst.max((a[t] + b[t]).abs());
                }
            }
        }
        if coord.converged() || coord.iteration() >= coord.config().max_iter {
            break;
        }
    }
    check(
        hand && fixed && worst <= 1e-12,
        format!(
            "hand cases {}, max |p̂_ij + p̂_ji| = {worst:.1e} over {} iterations",
            if hand && fixed { "exact" } else { "WRONG" },
            coord.iteration()
        ),
    )
}

fn feasibility(cases: &[Case]) -> Verdict {
    let (mut eq, mut bounds) = (0.0f64, 0.0f64);
    for c in cases {
        for (o, p) in c.outcome.outcomes.iter().zip(&c.scenario.users) {
            let r = o.schedule.feasibility(p);
            eq = eq.max(r.balance).max(r.thermal_dynamics);
            bounds = bounds
                .max(r.renewable_bounds)
                .max(r.grid_bounds)
                .max(r.hvac_bounds)
                .max(r.temperature_band);
        }
    }
    check(
        eq <= 1e-5 && bounds <= 1e-9,
        format!("max balance/thermal residual {eq:.1e}, max bound/band excess {bounds:.1e}"),
    )
}

fn rationality(cases: &[Case]) -> Verdict {
    let mut lines = Vec::new();
    let mut ok = true;
    for c in cases {
        let s = &c.report.system;
        ok &= s.coop_cost <= s.emp_cost + 1e-6;
        if c.name.starts_with("pair") {
            ok &= s.reduction_pct > 0.0;
        }
        lines.push(format!("{} {:.2}%", c.name, s.reduction_pct));
    }
    check(ok, format!("system reductions: {}", lines.join(", ")))
}

fn convergence_shape(reference: &Case) -> Verdict {
    let errors: Vec<f64> = reference.outcome.history.iter().map(|r| r.error).collect();
    let half = errors.len() / 2;
    let monotone = errors[half..].windows(2).all(|w| w[1] <= w[0]);
    check(
        reference.outcome.converged && errors.len() <= 200 && monotone,
        format!(
            "{} iterations to {:.1e}, final half non-increasing: {monotone}",
            errors.len(),
            errors.last().copied().unwrap_or(f64::NAN)
        ),
    )
}

fn payments(cases: &[Case]) -> Verdict {
    let worst = cases
        .iter()
        .map(|c| c.outcome.outcomes.iter().map(|o| o.trading_payment).sum::<f64>().abs())
        .fold(0.0, f64::max);
    check(worst <= 1e-9, format!("max |Σ payments| = {worst:.1e}"))
}

fn tag(v: f64, k: u64) -> f64 {
    // distinctive low mantissa bits, value unchanged to ~1e-10 relative
    f64::from_bits((v.to_bits() & !0xF_FFFF) | 0x5_E700 | (k & 0xFF))
}

fn privacy() -> Verdict {
    let mut s = load_scenario(&fixtures().join("pair.toml")).unwrap();
    let mut sentinels = Vec::new();
    let mut k = 0;
    let mut mark = |v: &mut f64| {
        *v = tag(*v, k);
        sentinels.push(*v);
        k += 1;
    };
    for u in &mut s.users {
        for f in [
            &mut u.thermal_capacitance,
            &mut u.thermal_resistance,
            &mut u.hvac_efficiency,
            &mut u.comfort_weight,
            &mut u.temp_ref,
            &mut u.temp_min,
            &mut u.temp_max,
            &mut u.temp_initial,
            &mut u.grid_cap,
            &mut u.hvac_cap,
        ] {
            mark(f);
        }
        for v in u.renewable_avail.iter_mut().chain(&mut u.inflexible_load).chain(&mut u.outdoor_temp) {
            if *v != 0.0 {
                mark(v);
            }
        }
    }
    let (report, frames) = run_scenario_captured(&s, TransportKind::Socket).unwrap();
    let mut leaks = 0;
    let (mut proposals, mut broadcasts) = (0, 0);
    let mut schema_ok = true;
    let want = |f: &[&str]| f.iter().map(|s| s.to_string()).collect::<BTreeSet<_>>();
    for (_, frame) in &frames {
        for sv in &sentinels {
            let le = sv.to_le_bytes();
            leaks += frame.windows(8).filter(|w| *w == le).count();
            let text = sv.to_string();
            leaks += frame.windows(text.len()).filter(|w| *w == text.as_bytes()).count();
        }
        let keys = |v: serde_json::Value| v.as_object().unwrap().keys().cloned().collect::<BTreeSet<_>>();
        match decode_frame(frame).unwrap() {
            Message::Proposal(p) => {
                proposals += 1;
                schema_ok &= keys(serde_json::to_value(&p).unwrap()) == want(&TRADE_PROPOSAL_FIELDS);
            }
            Message::Broadcast(b) => {
                broadcasts += 1;
                schema_ok &= keys(serde_json::to_value(&b).unwrap()) == want(&BROADCAST_FIELDS);
                schema_ok &= b.aux_row.rows.len() == 1 && b.dual_row.rows.len() == 1;
            }
            Message::Join { .. } => {}
        }
    }
    check(
        report.converged && leaks == 0 && schema_ok && proposals > 0 && broadcasts > 0,
        format!(
            "{} sentinels, {} frames ({proposals} proposals, {broadcasts} broadcasts), {leaks} hits, schemas {}",
            sentinels.len(),
            frames.len(),
            if schema_ok { "exact" } else { "WRONG" }
        ),
    )
}

fn determinism(reference: &Case) -> Verdict {
    let s = &reference.scenario;
    let base = reference.report.to_json();
    let repeat = run_scenario(s, TransportKind::Direct).unwrap().to_json();
    let inproc = run_scenario(s, TransportKind::Inproc).unwrap().to_json();
    let socket = run_scenario(s, TransportKind::Socket).unwrap().to_json();
    let same = [&repeat, &inproc, &socket].iter().all(|j| **j == base);
    check(
        same,
        format!("report.json of {} bytes, repeat/inproc/socket identical: {same}", base.len()),
    )
}

fn guarded(f: impl FnOnce() -> Verdict) -> Verdict {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    })
}

fn main() {
    let all = cases();
    let reference = &all[0];
    let criteria: Vec<Criterion> = vec![
        ("distributed matches centralized", Box::new(|| equivalence(&all))),
        ("QP solver matches enumeration oracle", Box::new(qp_oracle)),
        ("coordinator updates and antisymmetry", Box::new(|| coordinator_updates(&reference.scenario))),
        ("feasibility at termination", Box::new(|| feasibility(&all))),
        ("cooperation is rational", Box::new(|| rationality(&all))),
        ("convergence curve shape", Box::new(|| convergence_shape(reference))),
        ("payments conserve", Box::new(|| payments(&all))),
        ("private parameters stay private", Box::new(privacy)),
        ("reports are deterministic", Box::new(|| determinism(reference))),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.into_iter().enumerate() {
        match guarded(f) {
            Ok(d) => println!("PASS [{}] {name}: {d}", i + 1),
            Err(d) => {
                failed += 1;
                println!("FAIL [{}] {name}: {d}", i + 1);
            }
        }
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
