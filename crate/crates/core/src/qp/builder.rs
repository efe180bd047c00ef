use std::ops::Range;

use crate::linalg::Matrix;
use crate::num::Scalar;

use super::QpProblem;

type Row<T> = (Vec<(usize, T)>, T);

/// Incremental construction of a [`QpProblem`] from named variables and
/// sparse constraint rows.
#[derive(Debug, Clone, Default)]
pub struct QpBuilder<T> {
    names: Vec<String>,
    quad: Vec<(usize, usize, T)>,
    linear: Vec<T>,
    offset: T,
    eq: Vec<Row<T>>,
    ineq: Vec<Row<T>>,
}

impl<T: Scalar> QpBuilder<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            quad: Vec::new(),
            linear: Vec::new(),
            offset: T::zero(),
            eq: Vec::new(),
            ineq: Vec::new(),
        }
    }

    pub fn num_vars(&self) -> usize {
        self.names.len()
    }

    pub fn add_var(&mut self, name: impl Into<String>) -> usize {
        self.names.push(name.into());
        self.linear.push(T::zero());
        self.names.len() - 1
    }

    /// Adds `count` variables named `prefix[0]`, `prefix[1]`, ...
    pub fn add_vars(&mut self, prefix: &str, count: usize) -> Range<usize> {
        let start = self.num_vars();
        for k in 0..count {
            self.add_var(format!("{prefix}[{k}]"));
        }
        start..start + count
    }

    /// Adds `weight · x_i · x_j` to the objective (`weight · x_i²` when `i == j`).
    pub fn add_quadratic(&mut self, i: usize, j: usize, weight: T) {
        if i == j {
            self.quad.push((i, i, weight + weight));
        } else {
            self.quad.push((i, j, weight));
            self.quad.push((j, i, weight));
        }
    }

    pub fn add_linear(&mut self, i: usize, coeff: T) {
        self.linear[i] += coeff;
    }

    pub fn add_offset(&mut self, value: T) {
        self.offset += value;
    }

    pub fn add_eq(&mut self, terms: Vec<(usize, T)>, rhs: T) {
        self.eq.push((terms, rhs));
    }

    /// `Σ coeff·x <= rhs`
    pub fn add_le(&mut self, terms: Vec<(usize, T)>, rhs: T) {
        self.ineq.push((terms, rhs));
    }

    /// `lo <= x_i <= hi`; infinite sides are skipped.
    pub fn add_bounds(&mut self, i: usize, lo: T, hi: T) {
        if lo.is_finite() {
            self.add_le(vec![(i, -T::one())], -lo);
        }
        if hi.is_finite() {
            self.add_le(vec![(i, T::one())], hi);
        }
    }

    /// Epigraph of `max` over `vars`: introduces `m` with `x_v <= m` for every
    /// listed variable and returns the index of `m`. Placing a nonnegative cost
    /// on `m` makes it equal the maximum at any optimum.
    pub fn epigraph_max(&mut self, vars: &[usize], name: &str) -> usize {
        assert!(!vars.is_empty(), "epigraph over an empty variable list");
        let m = self.add_var(name);
        for &v in vars {
            self.add_le(vec![(v, T::one()), (m, -T::one())], T::zero());
        }
        m
    }

    pub fn build(self) -> QpProblem<T> {
        let n = self.names.len();
        let mut q = Matrix::zeros(n, n);
        for (i, j, v) in self.quad {
            q[(i, j)] += v;
        }
        let dense = |rows: &[Row<T>]| {
            let mut a = Matrix::zeros(rows.len(), n);
            for (r, (terms, _)) in rows.iter().enumerate() {
                for &(j, v) in terms {
                    a[(r, j)] += v;
                }
            }
            (a, rows.iter().map(|(_, b)| *b).collect::<Vec<_>>())
        };
        let (eq_matrix, eq_rhs) = dense(&self.eq);
        let (ineq_matrix, ineq_rhs) = dense(&self.ineq);
        QpProblem {
            quadratic: q,
            linear: self.linear,
            offset: self.offset,
            eq_matrix,
            eq_rhs,
            ineq_matrix,
            ineq_rhs,
            var_names: Some(self.names),
        }
    }
}

/// Free-function form of [`QpBuilder::epigraph_max`].
pub fn epigraph_max<T: Scalar>(builder: &mut QpBuilder<T>, vars: &[usize]) -> usize {
    builder.epigraph_max(vars, "max")
}
