//! Active-set refinement of an approximate QP iterate.
//!
//! Given a guess of which inequalities are tight, the equality-constrained KKT
//! system is solved directly. Single-variable rows fix their variable instead of
//! entering the KKT matrix, which keeps the system small for bound-heavy
//! problems. A few primal-dual repair rounds swap constraints whose multiplier
//! has the wrong sign or which are violated.

use std::collections::HashSet;

use crate::linalg::{CsrMatrix, Ldlt, Matrix};
use crate::num::Scalar;

use super::{kkt_residual, QpProblem, QpSolution, QpStatus};

#[derive(Debug, Clone, Copy)]
enum RowRef {
    Eq(usize),
    In(usize),
}

pub(crate) struct Polisher<'a, T> {
    problem: &'a QpProblem<T>,
    eq: CsrMatrix<T>,
    ineq: CsrMatrix<T>,
    tol: T,
}

struct ActiveSolve<T> {
    x: Vec<T>,
    nu: Vec<T>,
    mu: Vec<T>,
}

impl<'a, T: Scalar> Polisher<'a, T> {
    pub(crate) fn new(problem: &'a QpProblem<T>, tol: T) -> Self {
        Self {
            problem,
            eq: CsrMatrix::from_dense(&problem.eq_matrix),
            ineq: CsrMatrix::from_dense(&problem.ineq_matrix),
            tol,
        }
    }

    /// Attempts to turn an active-set guess into a certified optimum.
    pub(crate) fn polish(&self, mut active: Vec<bool>, rounds: usize) -> Option<QpSolution<T>> {
        let mut seen = HashSet::new();
        for round in 0..rounds {
            if !seen.insert(active.clone()) {
                return None;
            }
            let ActiveSolve { x, nu, mu } = self.solve_active(&active)?;
            let residual = kkt_residual(self.problem, &x, &nu, &mu);
            if residual <= self.tol {
                return Some(QpSolution {
                    objective: self.problem.objective(&x),
                    primal: x,
                    eq_duals: nu,
                    ineq_duals: mu,
                    status: QpStatus::Optimal,
                    kkt_residual: residual,
                    iterations: 0,
                });
            }

            let mut ax = vec![T::zero(); self.ineq.rows()];
            self.ineq.mul_vec_into(&x, &mut ax);
            let mut wrong_sign: Vec<(usize, T)> = Vec::new();
            let mut violated: Vec<(usize, T)> = Vec::new();
            for i in 0..active.len() {
                let excess = ax[i] - self.problem.ineq_rhs[i];
                if active[i] && mu[i] < -self.tol {
                    wrong_sign.push((i, mu[i]));
                } else if !active[i] && excess > self.tol {
                    violated.push((i, excess));
                }
            }
            if wrong_sign.is_empty() && violated.is_empty() {
                return None;
            }
            if round < 3 {
                wrong_sign.iter().for_each(|&(i, _)| active[i] = false);
                violated.iter().for_each(|&(i, _)| active[i] = true);
            } else if let Some(&(i, _)) = violated
                .iter()
                .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            {
                active[i] = true;
            } else if let Some(&(i, _)) = wrong_sign
                .iter()
                .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            {
                active[i] = false;
            }
        }
        None
    }

    fn solve_active(&self, active: &[bool]) -> Option<ActiveSolve<T>> {
        let p = self.problem;
        let n = p.num_vars();
        let (me, mi) = (self.eq.rows(), self.ineq.rows());
        let delta = T::lit(1e-9).max(T::epsilon() * T::lit(100.0));

        let mut fixed: Vec<Option<(RowRef, T)>> = vec![None; n];
        let mut value = vec![T::zero(); n];
        let mut general: Vec<RowRef> = Vec::new();

        let mut classify = |row: RowRef, csr: &CsrMatrix<T>, idx: usize, rhs: T| {
            match csr.row_nnz(idx) {
                0 => {}
                1 => {
                    let (j, a) = csr.row(idx).next().unwrap();
                    if fixed[j].is_none() {
                        fixed[j] = Some((row, a));
                        value[j] = rhs / a;
                    }
                }
                _ => general.push(row),
            }
        };
        for r in 0..me {
            classify(RowRef::Eq(r), &self.eq, r, p.eq_rhs[r]);
        }
        for i in (0..mi).filter(|&i| active[i]) {
            classify(RowRef::In(i), &self.ineq, i, p.ineq_rhs[i]);
        }
        let row_of = |r: RowRef| match r {
            RowRef::Eq(k) => (self.eq.row(k).collect::<Vec<_>>(), p.eq_rhs[k]),
            RowRef::In(k) => (self.ineq.row(k).collect::<Vec<_>>(), p.ineq_rhs[k]),
        };
        general.retain(|&r| row_of(r).0.iter().any(|(j, _)| fixed[*j].is_none()));

        let free: Vec<usize> = (0..n).filter(|&j| fixed[j].is_none()).collect();
        let mut pos = vec![usize::MAX; n];
        for (a, &j) in free.iter().enumerate() {
            pos[j] = a;
        }
        let nf = free.len();
        let size = nf + general.len();

        let mut k = Matrix::zeros(size, size);
        let mut rhs = vec![T::zero(); size];
        for (a, &j) in free.iter().enumerate() {
            let qrow = p.quadratic.row(j);
            for (b, &l) in free.iter().enumerate() {
                k[(a, b)] = qrow[l];
            }
            k[(a, a)] += delta;
            let mut r = -p.linear[j];
            for (l, f) in fixed.iter().enumerate() {
                if f.is_some() {
                    r -= qrow[l] * value[l];
                }
            }
            rhs[a] = r;
        }
        for (g, &row) in general.iter().enumerate() {
            let (terms, b) = row_of(row);
            let mut r = b;
            for (j, v) in terms {
                if fixed[j].is_some() {
                    r -= v * value[j];
                } else {
                    k[(nf + g, pos[j])] += v;
                    k[(pos[j], nf + g)] += v;
                }
            }
            k[(nf + g, nf + g)] = -delta;
            rhs[nf + g] = r;
        }

        let factor = Ldlt::factor(&k).ok()?;
        let mut sol = rhs.clone();
        factor.solve_in_place(&mut sol);
        // iterative refinement against the unregularized system
        for _ in 0..10 {
            let mut resid = k.mul_vec(&sol);
            for (a, r) in resid.iter_mut().enumerate() {
                let reg = if a < nf { delta } else { -delta };
                *r = rhs[a] - (*r - reg * sol[a]);
            }
            let scale = crate::num::norm_inf(&rhs).max(T::one());
            if crate::num::norm_inf(&resid) <= T::epsilon() * scale {
                break;
            }
            factor.solve_in_place(&mut resid);
            for (s, d) in sol.iter_mut().zip(&resid) {
                *s += *d;
            }
        }
        if sol.iter().any(|v| !v.is_finite()) {
            return None;
        }

        let mut x = value;
        for (a, &j) in free.iter().enumerate() {
            x[j] = sol[a];
        }
        let mut nu = vec![T::zero(); me];
        let mut mu = vec![T::zero(); mi];
        for (g, &row) in general.iter().enumerate() {
            match row {
                RowRef::Eq(r) => nu[r] = sol[nf + g],
                RowRef::In(i) => mu[i] = sol[nf + g],
            }
        }

        // multipliers of the fixing rows from the stationarity residual
        let mut grad = p.quadratic.mul_vec(&x);
        for (g, c) in grad.iter_mut().zip(&p.linear) {
            *g += *c;
        }
        let mut tmp = vec![T::zero(); n];
        self.eq.tr_mul_vec_into(&nu, &mut tmp);
        grad.iter_mut().zip(&tmp).for_each(|(g, t)| *g += *t);
        self.ineq.tr_mul_vec_into(&mu, &mut tmp);
        grad.iter_mut().zip(&tmp).for_each(|(g, t)| *g += *t);
        for (j, f) in fixed.iter().enumerate() {
            if let Some((row, a)) = *f {
                let y = -grad[j] / a;
                match row {
                    RowRef::Eq(r) => nu[r] = y,
                    RowRef::In(i) => mu[i] = y,
                }
            }
        }
        Some(ActiveSolve { x, nu, mu })
    }
}
