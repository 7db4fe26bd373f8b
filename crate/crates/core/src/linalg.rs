//! Dense linear solves for small systems.

use alloc::vec::Vec;

use crate::{Error, Result};

/// Solves `A x = b` by Gaussian elimination with partial pivoting.
///
/// `a` is given as columns (as produced by stacking HVPs); it is consumed.
pub fn solve_columns(cols: Vec<Vec<f64>>, b: &[f64]) -> Result<Vec<f64>> {
    let n = b.len();
    if cols.len() != n || cols.iter().any(|c| c.len() != n) {
        return Err(Error::contract("dense solve: matrix is not square with rhs size"));
    }
    // row-major working copy
    let mut m = alloc::vec![0.0; n * n];
    for (j, col) in cols.iter().enumerate() {
        for (i, v) in col.iter().enumerate() {
            m[i * n + j] = *v;
        }
    }
    let mut x = b.to_vec();
    for k in 0..n {
        let (piv, pmax) = (k..n)
            .map(|i| (i, m[i * n + k].abs()))
            .fold((k, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
        if !(pmax > 0.0) {
            return Err(Error::Solver {
                iteration: k,
                message: "singular matrix in dense solve".into(),
            });
        }
        if piv != k {
            for j in 0..n {
                m.swap(k * n + j, piv * n + j);
            }
            x.swap(k, piv);
        }
        let d = m[k * n + k];
        for i in k + 1..n {
            let f = m[i * n + k] / d;
            if f == 0.0 {
                continue;
            }
            for j in k..n {
                m[i * n + j] -= f * m[k * n + j];
            }
            x[i] -= f * x[k];
        }
    }
    for k in (0..n).rev() {
        let mut s = x[k];
        for j in k + 1..n {
            s -= m[k * n + j] * x[j];
        }
        x[k] = s / m[k * n + k];
    }
    Ok(x)
}
