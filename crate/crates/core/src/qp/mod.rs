//! Dense convex quadratic programming.
//!
//! Problems take the form
//!
//! ```text
//!     minimize     ½ xᵀ Q x + cᵀ x + offset
//!     subject to   A_eq x  = b_eq
//!                  A_in x <= b_in
//! ```
//!
//! [`solve`] runs an over-relaxed operator-splitting iteration and refines its
//! iterate by solving the KKT system on the identified active set. Optimality is
//! certified by [`check_kkt`], which evaluates the KKT conditions directly from
//! the problem data.

mod builder;
mod dump;
mod polish;
mod solver;

pub use builder::{epigraph_max, QpBuilder};
pub use dump::write_matrix_market;
pub use solver::{solve, solve_from, InitialPoint, SolverSettings};

use serde::{Deserialize, Serialize};

use crate::linalg::{is_psd, Matrix};
use crate::num::{dot, norm_inf, Scalar};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QpProblem<T> {
    /// Symmetric positive semidefinite Hessian `Q`.
    pub quadratic: Matrix<T>,
    pub linear: Vec<T>,
    /// Constant added to the objective; does not affect the argmin.
    pub offset: T,
    pub eq_matrix: Matrix<T>,
    pub eq_rhs: Vec<T>,
    pub ineq_matrix: Matrix<T>,
    pub ineq_rhs: Vec<T>,
    /// Optional labels, used by diagnostics and the matrix dump.
    pub var_names: Option<Vec<String>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QpStatus {
    Optimal,
    Infeasible,
    IterationLimit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QpSolution<T> {
    pub primal: Vec<T>,
    pub eq_duals: Vec<T>,
    /// Multipliers of `A_in x <= b_in`; nonnegative at an optimum.
    pub ineq_duals: Vec<T>,
    pub objective: T,
    pub status: QpStatus,
    pub kkt_residual: T,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum QpError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("quadratic term is not symmetric")]
    NotSymmetric,
    #[error("quadratic term is not positive semidefinite")]
    NotPsd,
    #[error("problem data contains non-finite values")]
    NonFinite,
}

impl<T: Scalar> QpProblem<T> {
    /// Unconstrained problem with the given objective.
    pub fn unconstrained(quadratic: Matrix<T>, linear: Vec<T>) -> Self {
        let n = linear.len();
        Self {
            quadratic,
            linear,
            offset: T::zero(),
            eq_matrix: Matrix::zeros(0, n),
            eq_rhs: Vec::new(),
            ineq_matrix: Matrix::zeros(0, n),
            ineq_rhs: Vec::new(),
            var_names: None,
        }
    }

    pub fn num_vars(&self) -> usize {
        self.linear.len()
    }

    pub fn with_eq(mut self, a: Matrix<T>, b: Vec<T>) -> Self {
        self.eq_matrix = a;
        self.eq_rhs = b;
        self
    }

    pub fn with_ineq(mut self, a: Matrix<T>, b: Vec<T>) -> Self {
        self.ineq_matrix = a;
        self.ineq_rhs = b;
        self
    }

    pub fn with_offset(mut self, offset: T) -> Self {
        self.offset = offset;
        self
    }

    /// Checks dimensions, finiteness, symmetry and the PSD property.
    pub fn validate(&self) -> Result<(), QpError> {
        self.validate_shape()?;
        if !is_psd(&self.quadratic, T::psd_tol()) {
            return Err(QpError::NotPsd);
        }
        Ok(())
    }

    pub(crate) fn validate_shape(&self) -> Result<(), QpError> {
        let n = self.num_vars();
        let q = &self.quadratic;
        if q.rows() != n || q.cols() != n {
            return Err(QpError::Dimension(format!(
                "Q is {}x{}, expected {n}x{n}",
                q.rows(),
                q.cols()
            )));
        }
        if self.eq_matrix.cols() != n || self.eq_matrix.rows() != self.eq_rhs.len() {
            return Err(QpError::Dimension(format!(
                "A_eq is {}x{} with {} rhs entries, expected {n} columns",
                self.eq_matrix.rows(),
                self.eq_matrix.cols(),
                self.eq_rhs.len()
            )));
        }
        if self.ineq_matrix.cols() != n || self.ineq_matrix.rows() != self.ineq_rhs.len() {
            return Err(QpError::Dimension(format!(
                "A_in is {}x{} with {} rhs entries, expected {n} columns",
                self.ineq_matrix.rows(),
                self.ineq_matrix.cols(),
                self.ineq_rhs.len()
            )));
        }
        if let Some(names) = &self.var_names {
            if names.len() != n {
                return Err(QpError::Dimension(format!(
                    "{} variable names for {n} variables",
                    names.len()
                )));
            }
        }
        let finite = |v: &[T]| v.iter().all(|x| x.is_finite());
        if !(finite(q.as_slice())
            && finite(&self.linear)
            && self.offset.is_finite()
            && finite(self.eq_matrix.as_slice())
            && finite(&self.eq_rhs)
            && finite(self.ineq_matrix.as_slice())
            && finite(&self.ineq_rhs))
        {
            return Err(QpError::NonFinite);
        }
        let scale = norm_inf(q.as_slice()).max(T::one());
        if !q.is_symmetric(scale * T::lit(1e-12).max(T::epsilon() * T::lit(16.0))) {
            return Err(QpError::NotSymmetric);
        }
        Ok(())
    }

    /// `½ xᵀ Q x + cᵀ x + offset`
    pub fn objective(&self, x: &[T]) -> T {
        let qx = self.quadratic.mul_vec(x);
        T::lit(0.5) * dot(x, &qx) + dot(&self.linear, x) + self.offset
    }
}

/// Largest violation among stationarity, primal feasibility, dual feasibility
/// and complementary slackness, evaluated straight from the problem data.
pub fn check_kkt<T: Scalar>(problem: &QpProblem<T>, solution: &QpSolution<T>) -> T {
    kkt_residual(
        problem,
        &solution.primal,
        &solution.eq_duals,
        &solution.ineq_duals,
    )
}

pub(crate) fn kkt_residual<T: Scalar>(problem: &QpProblem<T>, x: &[T], nu: &[T], mu: &[T]) -> T {
    let mut grad = problem.quadratic.mul_vec(x);
    for (g, c) in grad.iter_mut().zip(&problem.linear) {
        *g += *c;
    }
    let eq_t = problem.eq_matrix.tr_mul_vec(nu);
    let in_t = problem.ineq_matrix.tr_mul_vec(mu);
    let stationarity = grad
        .iter()
        .zip(&eq_t)
        .zip(&in_t)
        .fold(T::zero(), |acc, ((g, e), i)| acc.max((*g + *e + *i).abs()));

    let eq_viol = problem
        .eq_matrix
        .mul_vec(x)
        .iter()
        .zip(&problem.eq_rhs)
        .fold(T::zero(), |acc, (ax, b)| acc.max((*ax - *b).abs()));

    let mut ineq_viol = T::zero();
    let mut comp = T::zero();
    for ((ax, b), m) in problem
        .ineq_matrix
        .mul_vec(x)
        .iter()
        .zip(&problem.ineq_rhs)
        .zip(mu)
    {
        ineq_viol = ineq_viol.max(*ax - *b);
        comp = comp.max((*m * (*b - *ax)).abs());
    }
    let dual_viol = mu.iter().fold(T::zero(), |acc, m| acc.max(-*m));

    stationarity
        .max(eq_viol)
        .max(ineq_viol)
        .max(dual_viol)
        .max(comp)
}
