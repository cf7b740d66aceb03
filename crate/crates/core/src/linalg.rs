//! Small dense linear-algebra helpers on top of `nalgebra`.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{LabError, Result};

/// Largest condition number accepted before a system is declared singular.
pub const MAX_CONDITION: f64 = 1e12;

/// Symmetric part `(A + Aᵀ)/2` and the largest entrywise asymmetry of `A`.
pub fn symmetrize(a: &DMatrix<f64>) -> (DMatrix<f64>, f64) {
    let at = a.transpose();
    let asymmetry = (a - &at).amax();
    ((a + at) * 0.5, asymmetry)
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(sym: &DMatrix<f64>) -> f64 {
    sym.clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Two-norm condition number from the singular values.
pub fn condition_number(a: &DMatrix<f64>) -> f64 {
    let sv = a.singular_values();
    let max = sv.max();
    let min = sv.min();
    if min <= 0.0 || !min.is_finite() {
        f64::INFINITY
    } else {
        max / min
    }
}

fn guarded_lu(a: &DMatrix<f64>) -> Result<nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>> {
    let condition = condition_number(a);
    if condition > MAX_CONDITION {
        return Err(LabError::SingularW { condition });
    }
    Ok(a.clone().lu())
}

/// `A⁻¹ B` computed by an LU solve.
pub fn solve_left(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let lu = guarded_lu(a)?;
    lu.solve(b).ok_or(LabError::SingularW {
        condition: f64::INFINITY,
    })
}

/// `B A⁻¹` computed as the transpose of `A⁻ᵀ Bᵀ`.
pub fn solve_right(b: &DMatrix<f64>, a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(solve_left(&a.transpose(), &b.transpose())?.transpose())
}

/// `A⁻¹ v` for a single right-hand side.
pub fn solve_vector(a: &DMatrix<f64>, v: &DVector<f64>) -> Result<DVector<f64>> {
    let lu = guarded_lu(a)?;
    lu.solve(v).ok_or(LabError::SingularW {
        condition: f64::INFINITY,
    })
}

/// Lower Cholesky factor, retrying once with a diagonal jitter of `1e-12·tr/d`.
pub fn cholesky_with_jitter(sym: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    if let Some(chol) = Cholesky::new(sym.clone()) {
        return Some(chol.l());
    }
    let d = sym.nrows().max(1);
    let jitter = 1e-12 * sym.trace().abs() / d as f64;
    let shifted = sym + DMatrix::identity(sym.nrows(), sym.ncols()) * jitter;
    Cholesky::new(shifted).map(|c| c.l())
}

/// `tr(A B)` without forming the product.
pub fn trace_of_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.component_mul(&b.transpose()).sum()
}

/// True when `a` is exactly the identity.
pub fn is_identity(a: &DMatrix<f64>) -> bool {
    a.is_square()
        && a.iter().enumerate().all(|(idx, &v)| {
            let (r, c) = (idx % a.nrows(), idx / a.nrows());
            v == if r == c { 1.0 } else { 0.0 }
        })
}

/// Serde adapters storing matrices as row-major nested arrays and vectors as flat arrays.
pub mod serde_rows {
    use nalgebra::{DMatrix, DVector};
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
        m.row_iter().map(|r| r.iter().copied().collect()).collect()
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>, String> {
        let nrows = rows.len();
        let ncols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != ncols) {
            return Err("ragged matrix rows".to_string());
        }
        Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
    }

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        to_rows(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        from_rows(&rows).map_err(D::Error::custom)
    }

    pub mod vector {
        use super::*;

        pub fn serialize<S: Serializer>(v: &DVector<f64>, s: S) -> Result<S::Ok, S::Error> {
            v.as_slice().serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DVector<f64>, D::Error> {
            Ok(DVector::from_vec(Vec::<f64>::deserialize(d)?))
        }
    }
}
