//! Small dense linear-algebra helpers shared by the estimators.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, Matrix3, SymmetricEigen, Vector3};

use crate::error::{Error, Result};

/// Condition number above which an innovation covariance is rejected.
pub const MAX_INNOVATION_CONDITION: f64 = 1e12;

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let a = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = a;
            m[(j, i)] = a;
        }
    }
}

/// Cholesky factor of a symmetric positive-definite matrix whose condition
/// number must stay below `max_condition`.
pub struct SpdFactor {
    chol: Cholesky<f64, Dyn>,
}

impl SpdFactor {
    pub fn new(m: &DMatrix<f64>, max_condition: f64) -> Result<Self> {
        let n = m.nrows();
        if n == 0 {
            return Err(Error::validation("empty matrix"));
        }
        // Jacobi scaling keeps the conditioning test independent of units.
        let d: Vec<f64> = (0..n).map(|i| m[(i, i)]).collect();
        if d.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
            return Err(Error::SingularInnovation {
                condition: f64::INFINITY,
            });
        }
        let scaled = DMatrix::from_fn(n, n, |i, j| m[(i, j)] / (d[i] * d[j]).sqrt());
        let chol = Cholesky::new(scaled).ok_or(Error::SingularInnovation {
            condition: f64::INFINITY,
        })?;
        // Pivot ratio of the scaled factor estimates the condition number.
        let pivots = chol.l_dirty().diagonal();
        let (lo, hi) = pivots
            .iter()
            .fold((f64::INFINITY, 0.0_f64), |(lo, hi), &p| (lo.min(p), hi.max(p)));
        let condition = (hi / lo).powi(2);
        if !(condition < max_condition) {
            return Err(Error::SingularInnovation { condition });
        }
        let chol = Cholesky::new(m.clone()).ok_or(Error::SingularInnovation { condition })?;
        Ok(Self { chol })
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }

    pub fn ln_det(&self) -> f64 {
        self.chol.l().diagonal().iter().map(|x| 2.0 * x.ln()).sum()
    }

    /// `log N(r; 0, S)` for this factor `S`.
    pub fn gaussian_log_density(&self, residual: &DVector<f64>) -> f64 {
        let n = residual.len() as f64;
        let mahalanobis = residual.dot(&self.solve_vec(residual));
        -0.5 * (n * (2.0 * std::f64::consts::PI).ln() + self.ln_det() + mahalanobis)
    }
}

/// Builds a block-diagonal matrix from square blocks.
pub fn block_diag(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let n: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(n, n);
    let mut k = 0;
    for b in blocks {
        out.view_mut((k, k), (b.nrows(), b.ncols())).copy_from(b);
        k += b.nrows();
    }
    out
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.clone()).eigenvalues.min()
}

/// Serializes a 3×3 matrix as three rows.
pub mod mat3_rows {
    use nalgebra::Matrix3;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &Matrix3<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: [[f64; 3]; 3] = std::array::from_fn(|i| std::array::from_fn(|j| m[(i, j)]));
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Matrix3<f64>, D::Error> {
        let rows = <[[f64; 3]; 3]>::deserialize(d)?;
        Ok(Matrix3::from_fn(|i, j| rows[i][j]))
    }
}
