//! Small dense least-squares helpers shared by the GPS stages, the linear
//! baselines and the semi-synthetic ground truth.

use nalgebra::{DMatrix, DVector};

use crate::error::{CgctError, Result};

/// Ridge added to the normal equations when a design is rank deficient.
pub const RANK_JITTER: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct LeastSquares {
    pub coef: DVector<f64>,
    /// True when the design was rank deficient and [`RANK_JITTER`] was used.
    pub jittered: bool,
}

/// Ordinary least squares via Householder QR, falling back to jittered
/// normal equations when the design is (numerically) rank deficient.
pub fn ols(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<LeastSquares> {
    if x.nrows() != y.len() {
        return Err(CgctError::DimensionMismatch {
            expected: x.nrows(),
            got: y.len(),
        });
    }
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(CgctError::NonFinite("least-squares input".into()));
    }
    let k = x.ncols();
    if x.nrows() >= k && k > 0 {
        let qr = x.clone().qr();
        let r = qr.r();
        let diag_max = (0..k).map(|i| r[(i, i)].abs()).fold(0.0, f64::max);
        let full_rank = diag_max > 0.0 && (0..k).all(|i| r[(i, i)].abs() > 1e-10 * diag_max);
        if full_rank {
            let qty = qr.q().transpose() * y;
            let upper = r.view((0, 0), (k, k)).into_owned();
            if let Some(coef) = upper.solve_upper_triangular(&qty.rows(0, k).into_owned()) {
                return Ok(LeastSquares {
                    coef,
                    jittered: false,
                });
            }
        }
    }
    let coef = ridge(x, y, &DVector::from_element(k, RANK_JITTER))?;
    Ok(LeastSquares {
        coef,
        jittered: true,
    })
}

/// Solves `(XᵀX + diag(penalty)) β = Xᵀy`.
pub fn ridge(x: &DMatrix<f64>, y: &DVector<f64>, penalty: &DVector<f64>) -> Result<DVector<f64>> {
    if x.nrows() != y.len() {
        return Err(CgctError::DimensionMismatch {
            expected: x.nrows(),
            got: y.len(),
        });
    }
    let mut gram = x.transpose() * x;
    for i in 0..gram.nrows() {
        gram[(i, i)] += penalty[i];
    }
    let rhs = x.transpose() * y;
    match gram.clone().cholesky() {
        Some(ch) => Ok(ch.solve(&rhs)),
        None => gram
            .lu()
            .solve(&rhs)
            .ok_or_else(|| CgctError::InvalidData("singular regularized design".into())),
    }
}

/// Prepends a column of ones.
pub fn with_intercept(x: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::from_element(x.nrows(), x.ncols() + 1, 1.0);
    out.view_mut((0, 1), (x.nrows(), x.ncols())).copy_from(x);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_line() {
        let x = with_intercept(&DMatrix::from_column_slice(3, 1, &[0.0, 1.0, 2.0]));
        let y = DVector::from_vec(vec![1.0, 3.0, 5.0]);
        let fit = ols(&x, &y).unwrap();
        assert!(!fit.jittered);
        assert!((fit.coef[0] - 1.0).abs() < 1e-12);
        assert!((fit.coef[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn rank_deficient_uses_jitter() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 2.0, 4.0, 3.0, 6.0]);
        let y = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let fit = ols(&x, &y).unwrap();
        assert!(fit.jittered);
        let resid = &y - &x * &fit.coef;
        assert!(resid.norm() < 1e-6);
    }
}
