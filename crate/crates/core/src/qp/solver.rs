use crate::linalg::{Cholesky, CsrMatrix, Matrix};
use crate::num::{norm_inf, Scalar};

use super::polish::Polisher;
use super::{kkt_residual, QpError, QpProblem, QpSolution, QpStatus};

#[derive(Debug, Clone)]
pub struct SolverSettings<T> {
    /// Bound on the KKT residual of an `Optimal` answer.
    pub tol: T,
    pub max_iter: usize,
    /// Initial penalty of the splitting iteration.
    pub rho: T,
    /// Proximal regularization on the primal update.
    pub sigma: T,
    /// Over-relaxation factor in (0, 2).
    pub alpha: T,
    pub check_interval: usize,
    pub polish_interval: usize,
    pub adaptive_rho_interval: usize,
    /// Relative tolerance of the primal infeasibility certificate.
    pub infeasibility_tol: T,
    pub check_psd: bool,
}

impl<T: Scalar> Default for SolverSettings<T> {
    fn default() -> Self {
        Self {
            tol: T::default_qp_tol(),
            max_iter: 20_000,
            rho: T::lit(0.1),
            sigma: T::lit(1e-6),
            alpha: T::lit(1.6),
            check_interval: 10,
            polish_interval: 50,
            adaptive_rho_interval: 50,
            infeasibility_tol: T::lit(1e-6),
            check_psd: true,
        }
    }
}

impl<T: Scalar> SolverSettings<T> {
    pub fn with_tol(mut self, tol: T) -> Self {
        self.tol = tol;
        self
    }

    pub fn with_max_iter(mut self, max_iter: usize) -> Self {
        self.max_iter = max_iter;
        self
    }
}

/// Starting point for [`solve_from`]; usually the answer to a nearby problem.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialPoint<T> {
    pub primal: Vec<T>,
    pub eq_duals: Vec<T>,
    pub ineq_duals: Vec<T>,
}

impl<T: Scalar> From<&QpSolution<T>> for InitialPoint<T> {
    fn from(s: &QpSolution<T>) -> Self {
        Self {
            primal: s.primal.clone(),
            eq_duals: s.eq_duals.clone(),
            ineq_duals: s.ineq_duals.clone(),
        }
    }
}

pub fn solve<T: Scalar>(
    problem: &QpProblem<T>,
    settings: &SolverSettings<T>,
) -> Result<QpSolution<T>, QpError> {
    solve_from(problem, settings, None)
}

/// Solves `problem`, optionally starting from `initial`. A starting point whose
/// dimensions do not match the problem is ignored.
pub fn solve_from<T: Scalar>(
    problem: &QpProblem<T>,
    settings: &SolverSettings<T>,
    initial: Option<&InitialPoint<T>>,
) -> Result<QpSolution<T>, QpError> {
    if settings.check_psd {
        problem.validate()?;
    } else {
        problem.validate_shape()?;
    }
    let n = problem.num_vars();
    let me = problem.eq_rhs.len();
    let mi = problem.ineq_rhs.len();
    let initial = initial.filter(|i| {
        i.primal.len() == n && i.eq_duals.len() == me && i.ineq_duals.len() == mi
    });

    let polisher = Polisher::new(problem, settings.tol);
    if let Some(init) = initial {
        let guess = init.ineq_duals.iter().map(|&m| m > T::zero()).collect();
        if let Some(sol) = polisher.polish(guess, 25) {
            return Ok(sol);
        }
    }

    let mut admm = Splitting::new(problem, settings, initial);
    let mut last_guess: Option<Vec<bool>> = None;
    let mut y_prev = admm.y.clone();

    for k in 1..=settings.max_iter {
        let checking = k % settings.check_interval == 0;
        if checking {
            y_prev.copy_from_slice(&admm.y);
        }
        admm.step();
        if !checking {
            continue;
        }

        if admm.certifies_infeasible(&y_prev) {
            return Ok(admm.solution(problem, QpStatus::Infeasible, k));
        }

        let res = admm.residuals();
        let converged = res.primal <= settings.tol * (T::one() + res.primal_scale)
            && res.dual <= settings.tol * (T::one() + res.dual_scale);
        let loose = res.primal <= T::lit(1e-3) * (T::one() + res.primal_scale)
            && res.dual <= T::lit(1e-3) * (T::one() + res.dual_scale);

        if converged || loose || k % settings.polish_interval == 0 {
            let guess = admm.active_guess();
            if last_guess.as_ref() != Some(&guess) {
                let rounds = if converged { 25 } else { 8 };
                if let Some(mut sol) = polisher.polish(guess.clone(), rounds) {
                    sol.iterations = k;
                    return Ok(sol);
                }
                last_guess = Some(guess);
            }
        }
        if converged {
            let sol = admm.solution(problem, QpStatus::Optimal, k);
            if sol.kkt_residual <= settings.tol {
                return Ok(sol);
            }
        }
        if k % settings.adaptive_rho_interval == 0 {
            admm.adapt_rho(&res);
        }
    }

    let guess = admm.active_guess();
    if last_guess.as_ref() != Some(&guess) {
        if let Some(mut sol) = polisher.polish(guess, 25) {
            sol.iterations = settings.max_iter;
            return Ok(sol);
        }
    }
    let sol = admm.solution(problem, QpStatus::IterationLimit, settings.max_iter);
    if sol.kkt_residual <= settings.tol {
        return Ok(QpSolution {
            status: QpStatus::Optimal,
            ..sol
        });
    }
    Ok(sol)
}

struct Residuals<T> {
    primal: T,
    dual: T,
    primal_scale: T,
    dual_scale: T,
}

/// Over-relaxed operator-splitting iteration on `l <= A x <= u`, where the
/// first `me` rows of `A` are equalities.
struct Splitting<'a, T> {
    problem: &'a QpProblem<T>,
    settings: &'a SolverSettings<T>,
    a: CsrMatrix<T>,
    me: usize,
    lower: Vec<T>,
    upper: Vec<T>,
    rho: T,
    rho_vec: Vec<T>,
    factor: Cholesky<T>,
    x: Vec<T>,
    z: Vec<T>,
    y: Vec<T>,
    // scratch
    rhs: Vec<T>,
    tmp_m: Vec<T>,
    z_relax: Vec<T>,
}

const EQ_RHO_SCALE: f64 = 1e3;

impl<'a, T: Scalar> Splitting<'a, T> {
    fn new(
        problem: &'a QpProblem<T>,
        settings: &'a SolverSettings<T>,
        initial: Option<&InitialPoint<T>>,
    ) -> Self {
        let n = problem.num_vars();
        let me = problem.eq_rhs.len();
        let a = CsrMatrix::stack(&problem.eq_matrix, &problem.ineq_matrix, n);
        let m = a.rows();
        let mut lower = problem.eq_rhs.clone();
        lower.extend(std::iter::repeat_n(T::neg_infinity(), problem.ineq_rhs.len()));
        let mut upper = problem.eq_rhs.clone();
        upper.extend_from_slice(&problem.ineq_rhs);

        let (x, y) = match initial {
            Some(init) => {
                let mut y = init.eq_duals.clone();
                y.extend_from_slice(&init.ineq_duals);
                (init.primal.clone(), y)
            }
            None => (vec![T::zero(); n], vec![T::zero(); m]),
        };
        let mut z = vec![T::zero(); m];
        a.mul_vec_into(&x, &mut z);
        for i in 0..m {
            z[i] = z[i].max(lower[i]).min(upper[i]);
        }

        let rho = settings.rho;
        let rho_vec = Self::rho_vector(rho, me, m);
        let factor = Self::factorize(problem, &a, settings.sigma, &rho_vec);
        Self {
            problem,
            settings,
            a,
            me,
            lower,
            upper,
            rho,
            rho_vec,
            factor,
            x,
            z,
            y,
            rhs: vec![T::zero(); n],
            tmp_m: vec![T::zero(); m],
            z_relax: vec![T::zero(); m],
        }
    }

    fn rho_vector(rho: T, me: usize, m: usize) -> Vec<T> {
        (0..m)
            .map(|i| if i < me { rho * T::lit(EQ_RHO_SCALE) } else { rho })
            .collect()
    }

    fn factorize(problem: &QpProblem<T>, a: &CsrMatrix<T>, sigma: T, rho_vec: &[T]) -> Cholesky<T> {
        let n = problem.num_vars();
        let mut sigma = sigma;
        loop {
            let mut k: Matrix<T> = problem.quadratic.clone();
            for i in 0..n {
                k[(i, i)] += sigma;
            }
            a.add_weighted_gram(rho_vec, &mut k);
            match Cholesky::factor(&k) {
                Ok(f) => return f,
                // PSD up to rounding; lift the proximal term until it factors
                Err(_) => sigma *= T::lit(10.0),
            }
        }
    }

    fn step(&mut self) {
        let alpha = self.settings.alpha;
        let sigma = self.settings.sigma;
        let m = self.z.len();

        for i in 0..m {
            self.tmp_m[i] = self.rho_vec[i] * self.z[i] - self.y[i];
        }
        self.a.tr_mul_vec_into(&self.tmp_m, &mut self.rhs);
        for (r, (&x, &q)) in self.rhs.iter_mut().zip(self.x.iter().zip(&self.problem.linear)) {
            *r += sigma * x - q;
        }
        self.factor.solve_in_place(&mut self.rhs);
        let x_tilde = &self.rhs;
        self.a.mul_vec_into(x_tilde, &mut self.tmp_m);

        for (x, &xt) in self.x.iter_mut().zip(x_tilde) {
            *x = alpha * xt + (T::one() - alpha) * *x;
        }
        for i in 0..m {
            self.z_relax[i] = alpha * self.tmp_m[i] + (T::one() - alpha) * self.z[i];
            let z_new = (self.z_relax[i] + self.y[i] / self.rho_vec[i])
                .max(self.lower[i])
                .min(self.upper[i]);
            self.y[i] += self.rho_vec[i] * (self.z_relax[i] - z_new);
            self.z[i] = z_new;
        }
    }

    fn residuals(&mut self) -> Residuals<T> {
        let n = self.x.len();
        self.a.mul_vec_into(&self.x, &mut self.tmp_m);
        let mut primal = T::zero();
        for (ax, z) in self.tmp_m.iter().zip(&self.z) {
            primal = primal.max((*ax - *z).abs());
        }
        let primal_scale = norm_inf(&self.tmp_m).max(norm_inf(&self.z));

        let px = self.problem.quadratic.mul_vec(&self.x);
        let mut aty = vec![T::zero(); n];
        self.a.tr_mul_vec_into(&self.y, &mut aty);
        let mut dual = T::zero();
        for i in 0..n {
            dual = dual.max((px[i] + self.problem.linear[i] + aty[i]).abs());
        }
        let dual_scale = norm_inf(&px)
            .max(norm_inf(&aty))
            .max(norm_inf(&self.problem.linear));
        Residuals {
            primal,
            dual,
            primal_scale,
            dual_scale,
        }
    }

    /// Primal infeasibility certificate from the dual increment.
    fn certifies_infeasible(&self, y_prev: &[T]) -> bool {
        let dy: Vec<T> = self.y.iter().zip(y_prev).map(|(a, b)| *a - *b).collect();
        let norm = norm_inf(&dy);
        if norm <= T::epsilon() * T::lit(1e3) {
            return false;
        }
        let eps = self.settings.infeasibility_tol * norm;
        let mut support = T::zero();
        for (i, &d) in dy.iter().enumerate() {
            if i >= self.me && d < -eps {
                return false;
            }
            if i < self.me || d > T::zero() {
                support += self.upper[i] * d;
            }
        }
        if support >= -eps {
            return false;
        }
        let mut atdy = vec![T::zero(); self.x.len()];
        self.a.tr_mul_vec_into(&dy, &mut atdy);
        norm_inf(&atdy) <= eps
    }

    fn adapt_rho(&mut self, res: &Residuals<T>) {
        let tiny = T::lit(1e-30);
        let prim = res.primal / (res.primal_scale + tiny);
        let dual = res.dual / (res.dual_scale + tiny);
        if prim <= tiny || dual <= tiny {
            return;
        }
        let new_rho = (self.rho * (prim / dual).sqrt())
            .max(T::lit(1e-6))
            .min(T::lit(1e6));
        let ratio = new_rho / self.rho;
        if ratio > T::lit(5.0) || ratio < T::lit(0.2) {
            self.rho = new_rho;
            self.rho_vec = Self::rho_vector(new_rho, self.me, self.z.len());
            self.factor = Self::factorize(self.problem, &self.a, self.settings.sigma, &self.rho_vec);
        }
    }

    fn active_guess(&self) -> Vec<bool> {
        (self.me..self.z.len())
            .map(|i| self.upper[i] - self.z[i] < self.y[i])
            .collect()
    }

    fn solution(&self, problem: &QpProblem<T>, status: QpStatus, iterations: usize) -> QpSolution<T> {
        let nu = self.y[..self.me].to_vec();
        let mu: Vec<T> = self.y[self.me..].iter().map(|v| v.max(T::zero())).collect();
        let kkt = kkt_residual(problem, &self.x, &nu, &mu);
        QpSolution {
            objective: problem.objective(&self.x),
            primal: self.x.clone(),
            eq_duals: nu,
            ineq_duals: mu,
            status,
            kkt_residual: kkt,
            iterations,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qp::check_kkt;

    fn settings() -> SolverSettings<f64> {
        SolverSettings::default()
    }

    #[test]
    fn active_lower_bound() {
        // min (x-1)² s.t. x >= 2
        let p = QpProblem::unconstrained(Matrix::from_rows(&[[2.0]]), vec![-2.0])
            .with_offset(1.0)
            .with_ineq(Matrix::from_rows(&[[-1.0]]), vec![-2.0]);
        let s = solve(&p, &settings()).unwrap();
        assert_eq!(s.status, QpStatus::Optimal);
        assert!((s.primal[0] - 2.0).abs() < 1e-9);
        assert!((s.objective - 1.0).abs() < 1e-9);
        assert!(check_kkt(&p, &s) <= 1e-8);
    }

    #[test]
    fn symmetric_equality() {
        let p = QpProblem::unconstrained(Matrix::from_rows(&[[2.0, 0.0], [0.0, 2.0]]), vec![0.0, 0.0])
            .with_eq(Matrix::from_rows(&[[1.0, 1.0]]), vec![1.0]);
        let s = solve(&p, &settings()).unwrap();
        assert_eq!(s.status, QpStatus::Optimal);
        assert!((s.primal[0] - 0.5).abs() < 1e-9);
        assert!((s.primal[1] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn linear_program_vertex() {
        // min -x - y s.t. x + 2y <= 4, 3x + y <= 6, x,y >= 0  → (1.6, 1.2)
        let p = QpProblem::unconstrained(Matrix::zeros(2, 2), vec![-1.0, -1.0]).with_ineq(
            Matrix::from_rows(&[[1.0, 2.0], [3.0, 1.0], [-1.0, 0.0], [0.0, -1.0]]),
            vec![4.0, 6.0, 0.0, 0.0],
        );
        let s = solve(&p, &settings()).unwrap();
        assert_eq!(s.status, QpStatus::Optimal);
        assert!((s.primal[0] - 1.6).abs() < 1e-9);
        assert!((s.primal[1] - 1.2).abs() < 1e-9);
    }

    #[test]
    fn infeasible_box() {
        // x <= 1 and x >= 2
        let p = QpProblem::unconstrained(Matrix::from_rows(&[[1.0]]), vec![0.0])
            .with_ineq(Matrix::from_rows(&[[1.0], [-1.0]]), vec![1.0, -2.0]);
        let s = solve(&p, &settings()).unwrap();
        assert_eq!(s.status, QpStatus::Infeasible);
    }

    #[test]
    fn infeasible_equalities() {
        let p = QpProblem::unconstrained(Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]), vec![0.0, 0.0])
            .with_eq(Matrix::from_rows(&[[1.0, 1.0], [1.0, 1.0]]), vec![1.0, 2.0]);
        let s = solve(&p, &settings()).unwrap();
        assert_eq!(s.status, QpStatus::Infeasible);
    }

    #[test]
    fn iteration_limit_on_unbounded() {
        // min -x s.t. x >= 0 has no minimizer
        let p = QpProblem::unconstrained(Matrix::zeros(1, 1), vec![-1.0])
            .with_ineq(Matrix::from_rows(&[[-1.0]]), vec![0.0]);
        let s = solve(&p, &settings().with_max_iter(200)).unwrap();
        assert_eq!(s.status, QpStatus::IterationLimit);
    }

    #[test]
    fn warm_start_short_circuits() {
        let p = QpProblem::unconstrained(Matrix::from_rows(&[[2.0, 0.5], [0.5, 1.0]]), vec![-1.0, 3.0])
            .with_ineq(Matrix::from_rows(&[[0.0, -1.0], [1.0, 1.0]]), vec![0.0, 0.2]);
        let cold = solve(&p, &settings()).unwrap();
        assert_eq!(cold.status, QpStatus::Optimal);
        let warm = solve_from(&p, &settings(), Some(&InitialPoint::from(&cold))).unwrap();
        assert_eq!(warm.status, QpStatus::Optimal);
        assert_eq!(warm.iterations, 0);
        for (a, b) in warm.primal.iter().zip(&cold.primal) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn single_precision_solve() {
        let p = QpProblem::unconstrained(Matrix::from_rows(&[[2.0f32, 0.0], [0.0, 2.0]]), vec![0.0, 0.0])
            .with_eq(Matrix::from_rows(&[[1.0f32, 1.0]]), vec![1.0]);
        let s = solve(&p, &SolverSettings::<f32>::default()).unwrap();
        assert_eq!(s.status, QpStatus::Optimal);
        assert!((s.primal[0] - 0.5).abs() < 1e-4);
    }

    #[test]
    fn empty_problem() {
        let p = QpProblem::<f64>::unconstrained(Matrix::zeros(0, 0), vec![]);
        let s = solve(&p, &settings()).unwrap();
        assert_eq!(s.status, QpStatus::Optimal);
        assert!(s.primal.is_empty());
    }
}
