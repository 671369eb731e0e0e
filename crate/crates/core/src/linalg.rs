//! Dense symmetric positive-definite helpers built on `nalgebra`'s Cholesky.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Diagonal increments tried, in order, when a factorization fails.
pub const JITTER_LADDER: [f64; 3] = [1e-10, 1e-8, 1e-6];

/// Condition-number level above which results carry a warning.
pub const CONDITION_WARN: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JitterPolicy {
    /// Fail on the first unsuccessful factorization.
    Disabled,
    /// Retry with `ε·I` for each `ε` in [`JITTER_LADDER`].
    #[default]
    Ladder,
}

/// A symmetric positive-definite matrix kept together with its Cholesky factor.
#[derive(Debug, Clone)]
pub struct SpdMatrix {
    matrix: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    jitter: f64,
}

impl SpdMatrix {
    /// Factorizes `matrix`, escalating jitter under [`JitterPolicy::Ladder`].
    /// The stored matrix includes whatever jitter was applied.
    pub fn new(matrix: DMatrix<f64>, policy: JitterPolicy, context: &str) -> Result<Self> {
        if matrix.nrows() != matrix.ncols() {
            return Err(Error::Dimension(format!(
                "{context}: matrix is {}x{}, expected square",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        if let Some(chol) = Cholesky::new(matrix.clone()) {
            return Ok(SpdMatrix { matrix, chol, jitter: 0.0 });
        }
        if policy == JitterPolicy::Ladder {
            for &eps in JITTER_LADDER.iter() {
                let mut jittered = matrix.clone();
                for i in 0..jittered.nrows() {
                    jittered[(i, i)] += eps;
                }
                if let Some(chol) = Cholesky::new(jittered.clone()) {
                    return Ok(SpdMatrix { matrix: jittered, chol, jitter: eps });
                }
            }
        }
        Err(Error::rank(context, "matrix is not positive definite"))
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn chol(&self) -> &Cholesky<f64, Dyn> {
        &self.chol
    }

    /// Diagonal increment applied to obtain a factorization (0 if none).
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    /// `L⁻¹ b` with the lower Cholesky factor.
    pub fn half_solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol
            .l_dirty()
            .solve_lower_triangular(b)
            .expect("cholesky factor has a positive diagonal")
    }

    pub fn log_det(&self) -> f64 {
        log_det_chol(&self.chol)
    }

    /// `bᵀ A⁻¹ b`.
    pub fn quad_form(&self, b: &DVector<f64>) -> f64 {
        let l = self.chol.l_dirty();
        let half = l.solve_lower_triangular(b).expect("cholesky factor has a positive diagonal");
        half.norm_squared()
    }

    /// Rough condition number from the factor's diagonal, `(max Lᵢᵢ / min Lᵢᵢ)²`.
    pub fn condition_estimate(&self) -> f64 {
        condition_estimate(&self.chol)
    }
}

pub fn log_det_chol(chol: &Cholesky<f64, Dyn>) -> f64 {
    let l = chol.l_dirty();
    2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
}

pub fn condition_estimate(chol: &Cholesky<f64, Dyn>) -> f64 {
    let l = chol.l_dirty();
    let n = l.nrows();
    if n == 0 {
        return 1.0;
    }
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for i in 0..n {
        let d = l[(i, i)].abs();
        lo = lo.min(d);
        hi = hi.max(d);
    }
    (hi / lo).powi(2)
}

/// Replaces `m` by `(m + mᵀ)/2`.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Lower-triangular factor usable for sampling from a PSD matrix. Falls back
/// to the jitter ladder relative to the matrix's scale.
pub fn psd_factor(m: &DMatrix<f64>, context: &str) -> Result<DMatrix<f64>> {
    if m.nrows() == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    if let Some(c) = Cholesky::new(m.clone()) {
        return Ok(c.unpack());
    }
    let scale = (0..m.nrows()).map(|i| m[(i, i)].abs()).fold(0.0, f64::max).max(1e-300);
    for &eps in JITTER_LADDER.iter() {
        let mut j = m.clone();
        for i in 0..j.nrows() {
            j[(i, i)] += eps * scale;
        }
        if let Some(c) = Cholesky::new(j) {
            return Ok(c.unpack());
        }
    }
    Err(Error::rank(context, "scale matrix is not positive semi-definite"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ladder_rescues_singular_matrix() {
        let m = DMatrix::from_element(2, 2, 1.0);
        let err = SpdMatrix::new(m.clone(), JitterPolicy::Disabled, "ones").unwrap_err();
        assert!(matches!(err, Error::NumericalRank { .. }));
        let spd = SpdMatrix::new(m, JitterPolicy::Ladder, "ones").unwrap();
        assert!(spd.jitter() > 0.0);
    }

    #[test]
    fn log_det_and_quad_form() {
        let m = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let spd = SpdMatrix::new(m.clone(), JitterPolicy::Disabled, "t").unwrap();
        assert!((spd.log_det() - 11.0f64.ln()).abs() < 1e-14);
        let b = DVector::from_vec(vec![1.0, 2.0]);
        let direct = (b.transpose() * m.try_inverse().unwrap() * &b)[(0, 0)];
        assert!((spd.quad_form(&b) - direct).abs() < 1e-14);
    }
}
