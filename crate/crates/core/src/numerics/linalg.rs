use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::error::{Error, Result};

const MAX_JACOBI_SWEEPS: usize = 64;

/// Eigendecomposition of a symmetric matrix: `M = Q · diag(values) · Qᵀ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EigenPair {
    /// Orthonormal eigenvectors, one per column.
    pub vectors: Matrix,
    /// Eigenvalues in descending order, matching the columns of `vectors`.
    pub values: Vec<f64>,
}

impl EigenPair {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// Eigenvalues with negative rounding noise clamped to zero.
    pub fn clamped_values(&self) -> Vec<f64> {
        self.values.iter().map(|&v| v.max(0.0)).collect()
    }

    pub fn reconstruct(&self) -> Matrix {
        let n = self.dim();
        let q = &self.vectors;
        Matrix::from_fn(n, n, |i, j| {
            (0..n).map(|k| q[(i, k)] * self.values[k] * q[(j, k)]).sum()
        })
    }
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// The input is symmetrized as `(M + Mᵀ)/2` first.
pub fn sym_eig(m: &Matrix) -> Result<EigenPair> {
    if !m.is_square() {
        return Err(Error::shape(
            "sym_eig",
            format!("{}x{} is not square", m.rows(), m.cols()),
        ));
    }
    if !m.is_finite() {
        return Err(Error::numeric(format!(
            "sym_eig: non-finite entries in {0}x{0} input",
            m.rows()
        )));
    }
    let n = m.rows();
    let mut a = m.symmetrize()?;
    let mut q = Matrix::identity(n);
    let scale = a.frobenius();

    let mut converged = scale == 0.0;
    for _ in 0..MAX_JACOBI_SWEEPS {
        if converged {
            break;
        }
        let off: f64 = (0..n)
            .flat_map(|i| (0..i).map(move |j| (i, j)))
            .map(|(i, j)| a[(i, j)] * a[(i, j)])
            .sum();
        if off.sqrt() <= 1e-15 * scale {
            converged = true;
            break;
        }
        for p in 0..n {
            for r in p + 1..n {
                rotate(&mut a, &mut q, p, r);
            }
        }
    }
    if !converged {
        return Err(Error::numeric(format!(
            "sym_eig: Jacobi iteration did not converge for a {n}x{n} matrix"
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(j, j)].total_cmp(&a[(i, i)]));
    let values = order.iter().map(|&k| a[(k, k)]).collect();
    let vectors = Matrix::from_fn(n, n, |i, j| q[(i, order[j])]);
    Ok(EigenPair { vectors, values })
}

/// One Jacobi rotation annihilating `a[(p, r)]`, accumulated into `q`.
fn rotate(a: &mut Matrix, q: &mut Matrix, p: usize, r: usize) {
    let apr = a[(p, r)];
    if apr == 0.0 {
        return;
    }
    let n = a.rows();
    let theta = (a[(r, r)] - a[(p, p)]) / (2.0 * apr);
    let t = if theta.abs() > 1e150 {
        0.5 / theta
    } else {
        theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
    };
    let c = 1.0 / (t * t + 1.0).sqrt();
    let s = t * c;

    for k in 0..n {
        let akp = a[(k, p)];
        let akr = a[(k, r)];
        a[(k, p)] = c * akp - s * akr;
        a[(k, r)] = s * akp + c * akr;
    }
    for k in 0..n {
        let apk = a[(p, k)];
        let ark = a[(r, k)];
        a[(p, k)] = c * apk - s * ark;
        a[(r, k)] = s * apk + c * ark;
    }
    a[(p, r)] = 0.0;
    a[(r, p)] = 0.0;
    for k in 0..n {
        let qkp = q[(k, p)];
        let qkr = q[(k, r)];
        q[(k, p)] = c * qkp - s * qkr;
        q[(k, r)] = s * qkp + c * qkr;
    }
}

/// Inverse of a symmetric positive definite matrix through an `L·D·Lᵀ`
/// (square-root-free Cholesky) factorization. Only the lower triangle of `m`
/// is read.
pub fn sym_inverse(m: &Matrix) -> Result<Matrix> {
    if !m.is_square() {
        return Err(Error::shape(
            "sym_inverse",
            format!("{}x{} is not square", m.rows(), m.cols()),
        ));
    }
    let n = m.rows();
    let (l, d) = ldl(m)?;

    // Solve L·y = e_col, scale by D⁻¹, then Lᵀ·x = z.
    let mut inv = Matrix::zeros(n, n);
    let mut y = vec![0.0; n];
    for col in 0..n {
        for i in 0..n {
            let mut s = if i == col { 1.0 } else { 0.0 };
            for k in 0..i {
                s -= l[(i, k)] * y[k];
            }
            y[i] = s;
        }
        for i in 0..n {
            y[i] /= d[i];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in i + 1..n {
                s -= l[(k, i)] * inv[(k, col)];
            }
            inv[(i, col)] = s;
        }
    }
    let inv = inv.symmetrize()?;
    if !inv.is_finite() {
        return Err(Error::numeric(format!(
            "sym_inverse: non-finite inverse of a {n}x{n} matrix"
        )));
    }
    Ok(inv)
}

fn ldl(m: &Matrix) -> Result<(Matrix, Vec<f64>)> {
    let n = m.rows();
    let mut l = Matrix::identity(n);
    let mut d = vec![0.0; n];
    for j in 0..n {
        let mut dj = m[(j, j)];
        for k in 0..j {
            dj -= l[(j, k)] * l[(j, k)] * d[k];
        }
        if !(dj > 0.0) || !dj.is_finite() {
            return Err(Error::numeric(format!(
                "sym_inverse: {n}x{n} matrix is not positive definite (pivot {j} = {dj:e})"
            )));
        }
        d[j] = dj;
        for i in j + 1..n {
            let mut s = m[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)] * d[k];
            }
            l[(i, j)] = s / dj;
        }
    }
    Ok((l, d))
}

/// Solves `a · x = b` by LU factorization with partial pivoting.
pub fn solve(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if !a.is_square() || a.rows() != b.rows() {
        return Err(Error::shape(
            "solve",
            format!(
                "{}x{} system with {}x{} right-hand side",
                a.rows(),
                a.cols(),
                b.rows(),
                b.cols()
            ),
        ));
    }
    let n = a.rows();
    let mut lu = a.clone();
    let mut x = b.clone();
    let scale = a.max_abs();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| lu[(i, col)].abs().total_cmp(&lu[(j, col)].abs()))
            .unwrap_or(col);
        if lu[(pivot, col)].abs() <= f64::EPSILON * scale * n as f64 || scale == 0.0 {
            return Err(Error::numeric(format!(
                "solve: {n}x{n} system is singular to working precision"
            )));
        }
        if pivot != col {
            for j in 0..n {
                let t = lu[(col, j)];
                lu[(col, j)] = lu[(pivot, j)];
                lu[(pivot, j)] = t;
            }
            for j in 0..x.cols() {
                let t = x[(col, j)];
                x[(col, j)] = x[(pivot, j)];
                x[(pivot, j)] = t;
            }
        }
        for i in col + 1..n {
            let f = lu[(i, col)] / lu[(col, col)];
            if f == 0.0 {
                continue;
            }
            for j in col..n {
                lu[(i, j)] -= f * lu[(col, j)];
            }
            for j in 0..x.cols() {
                x[(i, j)] -= f * x[(col, j)];
            }
        }
    }
    for j in 0..x.cols() {
        for i in (0..n).rev() {
            let mut s = x[(i, j)];
            for k in i + 1..n {
                s -= lu[(i, k)] * x[(k, j)];
            }
            x[(i, j)] = s / lu[(i, i)];
        }
    }
    Ok(x)
}
