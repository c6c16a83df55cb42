use super::Matrix;
use crate::error::{Error, Result};

/// Element cap for [`kron`]; the Kronecker product is an oracle-only tool.
pub const DEFAULT_KRON_CAP: usize = 1_000_000;

/// Kronecker product `a ⊗ b` under the default element cap.
pub fn kron(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    kron_with_cap(a, b, DEFAULT_KRON_CAP)
}

pub fn kron_with_cap(a: &Matrix, b: &Matrix, cap: usize) -> Result<Matrix> {
    let rows = a.rows() * b.rows();
    let cols = a.cols() * b.cols();
    let requested = rows.saturating_mul(cols);
    if requested > cap {
        return Err(Error::Capacity { requested, cap });
    }
    let (br, bc) = b.shape();
    Ok(Matrix::from_fn(rows, cols, |i, j| {
        a[(i / br, j / bc)] * b[(i % br, j % bc)]
    }))
}

/// Column-stacking vectorization: column `j` of `m` occupies entries
/// `j·rows .. (j+1)·rows` of the returned `(rows·cols) × 1` matrix.
pub fn vec(m: &Matrix) -> Matrix {
    let (rows, cols) = m.shape();
    Matrix::from_fn(rows * cols, 1, |k, _| m[(k % rows, k / rows)])
}

/// Inverse of [`vec`].
pub fn unvec(v: &Matrix, rows: usize, cols: usize) -> Result<Matrix> {
    if v.cols() != 1 || v.rows() != rows * cols {
        return Err(Error::shape(
            "unvec",
            format!(
                "{}x{} cannot be reshaped to {rows}x{cols}",
                v.rows(),
                v.cols()
            ),
        ));
    }
    Ok(Matrix::from_fn(rows, cols, |i, j| v[(j * rows + i, 0)]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::matmul;
    use proptest::prelude::*;

    fn symmetric(n: usize, vals: &[f64]) -> Matrix {
        let m = Matrix::from_fn(n, n, |i, j| vals[i * n + j]);
        m.symmetrize().unwrap()
    }

    #[test]
    fn scalar_and_identity_products() {
        let k = kron(&Matrix::from_rows(&[[2.0]]), &Matrix::from_rows(&[[3.0]])).unwrap();
        assert_eq!(k, Matrix::from_rows(&[[6.0]]));
        assert_eq!(
            kron(&Matrix::identity(2), &Matrix::identity(3)).unwrap(),
            Matrix::identity(6)
        );
    }

    #[test]
    fn cap_guards_oracle_misuse() {
        let a = Matrix::zeros(40, 40);
        let b = Matrix::zeros(30, 30);
        assert!(matches!(kron(&a, &b), Err(Error::Capacity { requested: 1_440_000, .. })));
        assert!(kron_with_cap(&a, &b, 2_000_000).is_ok());
    }

    #[test]
    fn vec_is_column_stacking() {
        let m = Matrix::from_rows(&[[1.0, 3.0], [2.0, 4.0]]);
        assert_eq!(vec(&m).into_vec(), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn unvec_rejects_size_mismatch() {
        let v = Matrix::zeros(5, 1);
        assert!(matches!(unvec(&v, 2, 3), Err(Error::Shape { .. })));
        assert!(matches!(unvec(&Matrix::zeros(6, 2), 2, 3), Err(Error::Shape { .. })));
    }

    #[test]
    fn mixed_product_identity() {
        // (A⊗G)·vec(X) == vec(G·X·Aᵀ) with A 3×3, G 2×2, X 2×3.
        let a = Matrix::from_rows(&[[1.0, -2.0, 0.5], [0.3, 2.0, 1.0], [-1.0, 0.0, 4.0]]);
        let g = Matrix::from_rows(&[[2.0, 1.0], [-0.5, 3.0]]);
        let x = Matrix::from_rows(&[[1.0, 2.0, 3.0], [-4.0, 5.0, -6.0]]);
        let lhs = matmul(&kron(&a, &g).unwrap(), &vec(&x)).unwrap();
        let rhs = vec(&matmul(&matmul(&g, &x).unwrap(), &a.transpose()).unwrap());
        assert!(lhs.max_abs_diff(&rhs).unwrap() <= 1e-12);
    }

    proptest! {
        #[test]
        fn vec_unvec_round_trip(rows in 1usize..6, cols in 1usize..6, seed in any::<u64>()) {
            let m = Matrix::from_fn(rows, cols, |i, j| ((seed.wrapping_add((i * 7 + j) as u64)) % 1000) as f64 / 7.0 - 50.0);
            let back = unvec(&vec(&m), rows, cols).unwrap();
            prop_assert_eq!(&back, &m);
            let v = vec(&m);
            prop_assert_eq!(vec(&unvec(&v, rows, cols).unwrap()), v);
        }

        #[test]
        fn symmetric_kron_action(
            da in 1usize..=6,
            dg in 1usize..=6,
            vals in prop::collection::vec(-2.0f64..2.0, 36 * 3),
        ) {
            let a = symmetric(da, &vals[..]);
            let g = symmetric(dg, &vals[36..]);
            let x = Matrix::from_fn(dg, da, |i, j| vals[72 + i * da + j]);
            let lhs = matmul(&kron(&a, &g).unwrap(), &vec(&x)).unwrap();
            let rhs = vec(&matmul(&matmul(&g, &x).unwrap(), &a).unwrap());
            let tol = 1e-12 * x.max_abs().max(f64::MIN_POSITIVE);
            prop_assert!(lhs.max_abs_diff(&rhs).unwrap() <= tol.max(1e-300));
        }
    }
}
