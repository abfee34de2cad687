//! Semi-synthetic outcomes with known response curves.
//!
//! A linear model with treatment-covariate interactions is fitted on the real
//! outcomes; its predictions ("pseudo-means") are min-max normalized and
//! square-rooted to give non-linear ground-truth curves, and training
//! outcomes add N(0, 0.01²) noise.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, MinMaxScaler, Scalers};
use crate::error::{CgctError, Result};
use crate::linalg::ols;
use crate::quadrature::{lattice, LATTICE_NODES};

pub const NOISE_STD: f64 = 0.01;
/// Seed of the semi-synthetic outcome noise; fixed so every method and run
/// sees the same data.
pub const DATA_SEED: u64 = 2016;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub intercept: f64,
    pub treatment_effect: f64,
    pub covariate_effects: Vec<f64>,
    pub interaction_effects: Vec<f64>,
    pub noise_std: f64,
    #[serde(default)]
    pub jittered: bool,
}

/// Design row `[1, a, x, a·x]`.
pub fn ground_truth_features(a: f64, x: &[f64]) -> Vec<f64> {
    let mut f = Vec::with_capacity(2 * x.len() + 2);
    f.push(1.0);
    f.push(a);
    f.extend_from_slice(x);
    f.extend(x.iter().map(|v| a * v));
    f
}

/// OLS on `[1, a, x₁..x_p, a·x₁..a·x_p]` with scaled `x` and `a`.
pub fn fit_ground_truth(x: &DMatrix<f64>, a: &DVector<f64>, y: &DVector<f64>) -> Result<GroundTruth> {
    let n = x.nrows();
    if a.len() != n || y.len() != n {
        return Err(CgctError::DimensionMismatch { expected: n, got: a.len().min(y.len()) });
    }
    let p = x.ncols();
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|i| ground_truth_features(a[i], &x.row(i).iter().copied().collect::<Vec<_>>()))
        .collect();
    let design = DMatrix::from_fn(n, 2 * p + 2, |i, j| rows[i][j]);
    let fit = ols(&design, y)?;
    let c = &fit.coef;
    Ok(GroundTruth {
        intercept: c[0],
        treatment_effect: c[1],
        covariate_effects: c.rows(2, p).iter().copied().collect(),
        interaction_effects: c.rows(2 + p, p).iter().copied().collect(),
        noise_std: NOISE_STD,
        jittered: fit.jittered,
    })
}

impl GroundTruth {
    pub fn pseudo_mean(&self, a: f64, x: &[f64]) -> f64 {
        let lin: f64 = self.covariate_effects.iter().zip(x).map(|(b, v)| b * v).sum();
        let inter: f64 = self.interaction_effects.iter().zip(x).map(|(g, v)| g * v).sum();
        self.intercept + self.treatment_effect * a + lin + a * inter
    }
}

/// `sqrt(clip(scaled pseudo-mean, 0, 1))`.
pub fn curve_value(scaler: &MinMaxScaler, mu: f64) -> Result<f64> {
    Ok(scaler.transform_scalar(mu)?.clamp(0.0, 1.0).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingOutcomes {
    pub pseudo_means: Vec<f64>,
    pub scaler: MinMaxScaler,
    /// Noise-free `sqrt(μ̂)`.
    pub clean: Vec<f64>,
    pub outcomes: Vec<f64>,
}

/// Outcomes at the observed treatments; the pseudo-mean scaler is fitted on
/// these `n` values.
pub fn gen_training(gt: &GroundTruth, x: &DMatrix<f64>, a: &DVector<f64>, seed: u64) -> Result<TrainingOutcomes> {
    let pseudo_means: Vec<f64> = (0..x.nrows())
        .map(|i| gt.pseudo_mean(a[i], &x.row(i).iter().copied().collect::<Vec<_>>()))
        .collect();
    let scaler = MinMaxScaler::fit_values(&pseudo_means)?;
    let clean = pseudo_means.iter().map(|&m| curve_value(&scaler, m)).collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, gt.noise_std).map_err(|e| CgctError::InvalidArgument(e.to_string()))?;
    let outcomes = clean.iter().map(|c| c + noise.sample(&mut rng)).collect();
    Ok(TrainingOutcomes {
        pseudo_means,
        scaler,
        clean,
        outcomes,
    })
}

/// Noise-free curves (rows = units) on `grid`.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalTruth {
    pub grid: Vec<f64>,
    pub curves: DMatrix<f64>,
    pub scaler: MinMaxScaler,
}

impl EvalTruth {
    pub fn points(&self) -> usize {
        self.curves.len()
    }
}

/// Curves with the pseudo-mean scaler fitted on all `n × grid` values.
pub fn gen_eval(gt: &GroundTruth, x: &DMatrix<f64>, grid: &[f64]) -> Result<EvalTruth> {
    let mu = pseudo_mean_grid(gt, x, grid);
    let scaler = MinMaxScaler::fit_values(mu.as_slice())?;
    gen_eval_with_scaler(gt, x, grid, &scaler)
}

pub fn gen_eval_with_scaler(gt: &GroundTruth, x: &DMatrix<f64>, grid: &[f64], scaler: &MinMaxScaler) -> Result<EvalTruth> {
    let mu = pseudo_mean_grid(gt, x, grid);
    let mut curves = DMatrix::zeros(x.nrows(), grid.len());
    for (c, &m) in curves.iter_mut().zip(mu.iter()) {
        *c = curve_value(scaler, m)?;
    }
    Ok(EvalTruth {
        grid: grid.to_vec(),
        curves,
        scaler: scaler.clone(),
    })
}

fn pseudo_mean_grid(gt: &GroundTruth, x: &DMatrix<f64>, grid: &[f64]) -> DMatrix<f64> {
    let rows: Vec<Vec<f64>> = (0..x.nrows()).map(|i| x.row(i).iter().copied().collect()).collect();
    DMatrix::from_fn(x.nrows(), grid.len(), |i, j| gt.pseudo_mean(grid[j], &rows[i]))
}

/// Training data with semi-synthetic outcomes plus ground-truth curves for
/// an evaluation year, all in the training year's scaled units.
#[derive(Debug, Clone)]
pub struct SemiSynthetic {
    pub train: Dataset,
    pub eval: Dataset,
    pub truth: GroundTruth,
    pub scalers: Scalers,
    pub training: TrainingOutcomes,
    pub eval_truth: EvalTruth,
    /// Treatment interval of the lattice, scaled.
    pub interval: (f64, f64),
}

impl SemiSynthetic {
    /// `train` and `eval` must be imputed. The lattice spans the scaled
    /// training treatment interval `[0, 1]`.
    pub fn build(train: &Dataset, eval: &Dataset, nodes: usize, seed: u64) -> Result<Self> {
        let scalers = Scalers::fit(train)?;
        let x = scalers.scale_covariates(train)?;
        let a = scalers.scale_treatments(train)?;
        let truth = fit_ground_truth(&x, &a, &train.outcomes())?;
        let training = gen_training(&truth, &x, &a, seed)?;
        let train_ss = train.with_outcomes(&training.outcomes)?;
        let x_eval = scalers.scale_covariates(eval)?;
        let interval = (0.0, 1.0);
        let eval_truth = gen_eval(&truth, &x_eval, &lattice(interval.0, interval.1, nodes))?;
        Ok(Self {
            train: train_ss,
            eval: eval.clone(),
            truth,
            scalers,
            training,
            eval_truth,
            interval,
        })
    }

    pub fn standard(train: &Dataset, eval: &Dataset) -> Result<Self> {
        Self::build(train, eval, LATTICE_NODES, DATA_SEED)
    }

    /// Sidecar document: coefficients and both pseudo-mean scalers.
    pub fn sidecar(&self) -> serde_json::Value {
        serde_json::json!({
            "ground_truth": self.truth,
            "training_pseudo_mean_scaler": self.training.scaler,
            "eval_pseudo_mean_scaler": self.eval_truth.scaler,
            "covariate_scaler": self.scalers.covariates,
            "treatment_scaler": self.scalers.treatment,
            "grid": self.eval_truth.grid,
        })
    }
}
