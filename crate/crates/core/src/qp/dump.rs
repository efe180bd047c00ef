use std::io::{self, Write};

use crate::linalg::Matrix;
use crate::num::Scalar;

use super::QpProblem;

/// Writes `problem` as a sequence of coordinate-format blocks in the style of
/// Matrix Market: one `%%block` header per matrix or vector, a size line, then
/// one `row col value` line per nonzero (1-based indices).
pub fn write_matrix_market<T: Scalar, W: Write>(problem: &QpProblem<T>, mut out: W) -> io::Result<()> {
    writeln!(out, "%%MatrixMarket qp-dump coordinate real general")?;
    if let Some(names) = &problem.var_names {
        for (i, name) in names.iter().enumerate() {
            writeln!(out, "% var {} {}", i + 1, name)?;
        }
    }
    writeln!(out, "% offset {}", problem.offset)?;
    write_block(&mut out, "Q", &problem.quadratic)?;
    write_vector(&mut out, "c", &problem.linear)?;
    write_block(&mut out, "A_eq", &problem.eq_matrix)?;
    write_vector(&mut out, "b_eq", &problem.eq_rhs)?;
    write_block(&mut out, "A_in", &problem.ineq_matrix)?;
    write_vector(&mut out, "b_in", &problem.ineq_rhs)?;
    Ok(())
}

fn write_block<T: Scalar, W: Write>(out: &mut W, name: &str, m: &Matrix<T>) -> io::Result<()> {
    let nnz = m.as_slice().iter().filter(|v| **v != T::zero()).count();
    writeln!(out, "%%block {name}")?;
    writeln!(out, "{} {} {}", m.rows(), m.cols(), nnz)?;
    for i in 0..m.rows() {
        for (j, v) in m.row(i).iter().enumerate() {
            if *v != T::zero() {
                writeln!(out, "{} {} {:e}", i + 1, j + 1, v.as_f64())?;
            }
        }
    }
    Ok(())
}

fn write_vector<T: Scalar, W: Write>(out: &mut W, name: &str, v: &[T]) -> io::Result<()> {
    writeln!(out, "%%block {name}")?;
    writeln!(out, "{} 1 {}", v.len(), v.len())?;
    for (i, x) in v.iter().enumerate() {
        writeln!(out, "{} 1 {:e}", i + 1, x.as_f64())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dump_lists_nonzeros() {
        let p = QpProblem::unconstrained(Matrix::from_rows(&[[2.0, 0.0], [0.0, 0.0]]), vec![1.0, -1.0])
            .with_eq(Matrix::from_rows(&[[1.0, 1.0]]), vec![1.0]);
        let mut buf = Vec::new();
        write_matrix_market(&p, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.contains("%%block Q\n2 2 1\n1 1 2e0\n"));
        assert!(text.contains("%%block A_eq\n1 2 2\n"));
        assert!(text.contains("%%block A_in\n0 2 0\n"));
    }
}
