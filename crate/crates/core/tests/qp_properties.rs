use hvac_coop::linalg::Matrix;
use hvac_coop::qp::SolverSettings;
use hvac_coop::{check_kkt, solve, QpProblem, QpStatus};
use proptest::prelude::*;

fn boxed_qp(n: usize, l: &[f64], c: &[f64], ub: &[f64]) -> QpProblem<f64> {
    let mut q = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            q[(i, j)] = (0..n).map(|k| l[i * n + k] * l[j * n + k]).sum();
        }
    }
    let mut a = Matrix::zeros(2 * n, n);
    let mut b = vec![0.0; 2 * n];
    for i in 0..n {
        a[(2 * i, i)] = 1.0;
        b[2 * i] = ub[i];
        a[(2 * i + 1, i)] = -1.0;
        b[2 * i + 1] = ub[i];
    }
    QpProblem::unconstrained(q, c.to_vec()).with_ineq(a, b)
}

fn scaled(p: &QpProblem<f64>, s: f64) -> QpProblem<f64> {
    let mut out = p.clone();
    out.quadratic = p.quadratic.scale(s);
    out.linear = p.linear.iter().map(|v| v * s).collect();
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn scaling_objective_scales_optimum(
        n in 1usize..6,
        l in prop::collection::vec(-1.0f64..1.0, 36),
        c in prop::collection::vec(-2.0f64..2.0, 6),
        ub in prop::collection::vec(0.2f64..2.0, 6),
        s in 0.01f64..100.0,
    ) {
        let p = boxed_qp(n, &l[..n * n], &c[..n], &ub[..n]);
        let settings = SolverSettings::default();
        let base = solve(&p, &settings).unwrap();
        let sc = solve(&scaled(&p, s), &settings).unwrap();
        prop_assert_eq!(base.status, QpStatus::Optimal);
        prop_assert_eq!(sc.status, QpStatus::Optimal);
        prop_assert!(check_kkt(&p, &base) <= 1e-8);
        let tol = 1e-6 * base.objective.abs().max(1.0);
        prop_assert!((sc.objective / s - base.objective).abs() <= tol,
            "scaled {} vs {}", sc.objective / s, base.objective);
        // the scaled optimum is also optimal for the original problem
        prop_assert!((p.objective(&sc.primal) - base.objective).abs() <= tol);
    }

    #[test]
    fn single_precision_agrees_with_double(
        n in 1usize..5,
        l in prop::collection::vec(-1.0f64..1.0, 25),
        c in prop::collection::vec(-2.0f64..2.0, 5),
        ub in prop::collection::vec(0.2f64..2.0, 5),
    ) {
        let p = boxed_qp(n, &l[..n * n], &c[..n], &ub[..n]);
        let d = solve(&p, &SolverSettings::default()).unwrap();
        let mut q32 = Matrix::<f32>::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                q32[(i, j)] = p.quadratic[(i, j)] as f32;
            }
        }
        let mut a32 = Matrix::<f32>::zeros(2 * n, n);
        for i in 0..2 * n {
            for j in 0..n {
                a32[(i, j)] = p.ineq_matrix[(i, j)] as f32;
            }
        }
        let p32 = QpProblem::unconstrained(q32, p.linear.iter().map(|&v| v as f32).collect())
            .with_ineq(a32, p.ineq_rhs.iter().map(|&v| v as f32).collect());
        let s = solve(&p32, &SolverSettings::default()).unwrap();
        prop_assert_eq!(s.status, QpStatus::Optimal);
        prop_assert!((s.objective as f64 - d.objective).abs() <= 1e-3 * d.objective.abs().max(1.0));
    }
}
