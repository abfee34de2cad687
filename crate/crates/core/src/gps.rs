//! Two-stage generalized propensity score estimator.
//!
//! Stage one models the treatment as `A | z ~ N(βᵀ[1, z], σ²)`; the GPS of a
//! unit at treatment `a` is that density. Stage two regresses the outcome on
//! `[1, a, a², R, R², a·R]`. Both stages are ordinary least squares, so the
//! estimator has `r + 8` parameters.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{CgctError, Result};
use crate::linalg::{ols, with_intercept};
use crate::sample::Sample;

pub const SIGMA_MIN: f64 = 1e-6;
pub const OUTCOME_TERMS: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreatmentModel {
    /// Intercept first.
    pub beta: Vec<f64>,
    pub sigma: f64,
    #[serde(default)]
    pub jittered: bool,
}

impl TreatmentModel {
    pub fn dims(&self) -> usize {
        self.beta.len() - 1
    }

    pub fn mean(&self, z: &[f64]) -> f64 {
        self.beta[0] + self.beta[1..].iter().zip(z).map(|(b, v)| b * v).sum::<f64>()
    }

    pub fn density(&self, a: f64, z: &[f64]) -> f64 {
        normal_pdf(a, self.mean(z), self.sigma)
    }
}

pub fn normal_pdf(x: f64, mean: f64, sigma: f64) -> f64 {
    let d = (x - mean) / sigma;
    (-0.5 * d * d).exp() / (sigma * (2.0 * PI).sqrt())
}

/// OLS of `a` on `[1, z]`; `σ² = Σ residual² / n`, clamped at [`SIGMA_MIN`].
pub fn fit_treatment_model(z: &DMatrix<f64>, a: &DVector<f64>) -> Result<TreatmentModel> {
    let n = z.nrows();
    if n != a.len() {
        return Err(CgctError::DimensionMismatch { expected: n, got: a.len() });
    }
    if n <= z.ncols() + 1 {
        return Err(CgctError::InvalidArgument(format!(
            "treatment model needs more than {} rows, got {n}",
            z.ncols() + 1
        )));
    }
    let design = with_intercept(z);
    let fit = ols(&design, a)?;
    let resid = a - &design * &fit.coef;
    let sigma = (resid.norm_squared() / n as f64).sqrt().max(SIGMA_MIN);
    Ok(TreatmentModel {
        beta: fit.coef.iter().copied().collect(),
        sigma,
        jittered: fit.jittered,
    })
}

/// Gaussian density of `a` at mean `βᵀ[1, z]` and std `σ`.
pub fn gps_density(a: f64, z: &[f64], tm: &TreatmentModel) -> f64 {
    tm.density(a, z)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeModel {
    /// α₀..α₅ on `[1, a, a², R, R², a·R]`.
    pub alpha: Vec<f64>,
    #[serde(default)]
    pub jittered: bool,
}

pub fn outcome_features(a: f64, r: f64) -> [f64; OUTCOME_TERMS] {
    [1.0, a, a * a, r, r * r, a * r]
}

impl OutcomeModel {
    pub fn predict(&self, a: f64, r: f64) -> f64 {
        outcome_features(a, r)
            .iter()
            .zip(&self.alpha)
            .map(|(f, c)| f * c)
            .sum()
    }
}

pub fn outcome_design(a: &DVector<f64>, r: &DVector<f64>) -> DMatrix<f64> {
    let rows: Vec<[f64; OUTCOME_TERMS]> = a.iter().zip(r.iter()).map(|(&a, &r)| outcome_features(a, r)).collect();
    DMatrix::from_fn(rows.len(), OUTCOME_TERMS, |i, j| rows[i][j])
}

pub fn fit_outcome_model(y: &DVector<f64>, a: &DVector<f64>, r: &DVector<f64>) -> Result<OutcomeModel> {
    if y.len() != a.len() || y.len() != r.len() {
        return Err(CgctError::DimensionMismatch { expected: y.len(), got: a.len().min(r.len()) });
    }
    if y.len() < OUTCOME_TERMS {
        return Err(CgctError::InvalidArgument(format!(
            "outcome model needs at least {OUTCOME_TERMS} rows, got {}",
            y.len()
        )));
    }
    let fit = ols(&outcome_design(a, r), y)?;
    Ok(OutcomeModel {
        alpha: fit.coef.iter().copied().collect(),
        jittered: fit.jittered,
    })
}

/// Fitted two-stage estimator; all inputs in scaled treatment units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpsModel {
    pub treatment: TreatmentModel,
    pub outcome: OutcomeModel,
}

impl GpsModel {
    pub fn fit(s: &Sample) -> Result<Self> {
        let treatment = fit_treatment_model(&s.features, &s.a)?;
        let r = DVector::from_fn(s.n(), |i, _| {
            let z: Vec<f64> = s.features.row(i).iter().copied().collect();
            treatment.density(s.a[i], &z)
        });
        let outcome = fit_outcome_model(&s.y, &s.a, &r)?;
        Ok(Self { treatment, outcome })
    }

    pub fn dims(&self) -> usize {
        self.treatment.dims()
    }

    /// `r + 1` treatment coefficients, `σ`, and six outcome coefficients.
    pub fn parameter_count(&self) -> usize {
        self.treatment.beta.len() + 1 + self.outcome.alpha.len()
    }

    pub fn predict(&self, a: f64, z: &[f64]) -> f64 {
        self.outcome.predict(a, self.treatment.density(a, z))
    }

    /// `dŷ/da` through both the polynomial terms and the density.
    pub fn derivative(&self, a: f64, z: &[f64]) -> f64 {
        let mu = self.treatment.mean(z);
        let s2 = self.treatment.sigma * self.treatment.sigma;
        let r = self.treatment.density(a, z);
        let dr = -r * (a - mu) / s2;
        let c = &self.outcome.alpha;
        c[1] + 2.0 * c[2] * a + c[5] * r + (c[3] + 2.0 * c[4] * r + c[5] * a) * dr
    }
}
