//! Repeated-run evaluation against ground-truth curves, hyperparameter
//! selection and the ablation matrix.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{CgctError, Result, Stage};
use crate::inference::InferenceKind;
use crate::pipeline::{sample_std, train_cgct, AblationFlags, CgCtModel, MethodConfig};
use crate::quadrature::{mise, Mise};
use crate::semi_synthetic::SemiSynthetic;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    SqrtMise,
    Rmse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub seed: u64,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub metric: MetricKind,
    pub mean: f64,
    pub std: f64,
    /// Successful runs.
    pub runs: usize,
    pub seeds: Vec<u64>,
    pub per_run: Vec<f64>,
    pub failures: Vec<RunFailure>,
    pub partial: bool,
    pub config: MethodConfig,
    pub flags: AblationFlags,
    pub data_hash: String,
}

/// Mean and sample standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    (v.iter().sum::<f64>() / v.len() as f64, sample_std(v))
}

/// MISE of a trained model's curves for the evaluation units.
pub fn evaluate_model(model: &CgCtModel, setup: &SemiSynthetic) -> Result<Mise> {
    let x = model.scalers.scale_covariates(&setup.eval)?;
    let pred = model.predict_lattice(&x, &setup.eval_truth.grid)?;
    mise(&pred, &setup.eval_truth.curves, setup.interval.0, setup.interval.1)
}

/// Trains with seeds `base_seed..base_seed + runs` and reports sqrt-MISE.
pub fn repeat_runs(cfg: &MethodConfig, setup: &SemiSynthetic, runs: usize, base_seed: u64, label: &str) -> Result<EvalReport> {
    collect_runs(cfg, &setup.train, runs, base_seed, label, MetricKind::SqrtMise, |model| {
        Ok(evaluate_model(model, setup)?.sqrt_mise)
    })
}

/// Factual RMSE on `eval` of models trained on `train`, for data without
/// ground-truth curves.
pub fn repeat_runs_factual(
    cfg: &MethodConfig,
    train: &Dataset,
    eval: &Dataset,
    runs: usize,
    base_seed: u64,
    label: &str,
) -> Result<EvalReport> {
    collect_runs(cfg, train, runs, base_seed, label, MetricKind::Rmse, |model| {
        let pred = model.predict_factual(eval)?;
        Ok(((pred - eval.outcomes()).norm_squared() / eval.n() as f64).sqrt())
    })
}

fn collect_runs<F>(
    cfg: &MethodConfig,
    train: &Dataset,
    runs: usize,
    base_seed: u64,
    label: &str,
    metric: MetricKind,
    score: F,
) -> Result<EvalReport>
where
    F: Fn(&CgCtModel) -> Result<f64> + Sync,
{
    if runs == 0 {
        return Err(CgctError::InvalidArgument("runs must be >= 1".into()).at(Stage::Evaluation));
    }
    let seeds: Vec<u64> = (0..runs as u64).map(|k| base_seed + k).collect();
    let results: Vec<Result<f64>> = seeds
        .par_iter()
        .map(|&seed| score(&train_cgct(train, cfg, seed)?))
        .collect();
    let mut per_run = Vec::new();
    let mut ok_seeds = Vec::new();
    let mut failures = Vec::new();
    for (seed, r) in seeds.iter().zip(results) {
        match r {
            Ok(v) if v.is_finite() => {
                per_run.push(v);
                ok_seeds.push(*seed);
            }
            Ok(v) => failures.push(RunFailure { seed: *seed, message: format!("non-finite score {v}") }),
            Err(e) => failures.push(RunFailure { seed: *seed, message: e.to_string() }),
        }
    }
    if per_run.is_empty() {
        return Err(CgctError::InvalidData(format!(
            "all {runs} runs of {label} failed; first: {}",
            failures[0].message
        ))
        .at(Stage::Evaluation));
    }
    let (mean, std) = mean_std(&per_run);
    Ok(EvalReport {
        method: label.to_string(),
        metric,
        mean,
        std,
        runs: per_run.len(),
        seeds: ok_seeds,
        per_run,
        partial: !failures.is_empty(),
        failures,
        config: cfg.clone(),
        flags: cfg.flags,
        data_hash: train.content_hash(),
    })
}

/// Seeded 80/20 split of `0..n` into (train, validation).
pub fn split_indices(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (n as f64 * 0.8).round() as usize;
    let val = idx.split_off(n_train.min(n));
    (idx, val)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub best: usize,
    pub best_config: MethodConfig,
    /// Validation factual MSE per grid point; infinite when training failed.
    pub scores: Vec<f64>,
}

/// Picks the configuration with the lowest validation factual MSE on one
/// seeded 80/20 split shared by all grid points; ties go to the earlier one.
pub fn tune(grid: &[MethodConfig], d: &Dataset, seed: u64) -> Result<TuneResult> {
    if grid.is_empty() {
        return Err(CgctError::InvalidArgument("empty hyperparameter grid".into()).at(Stage::Evaluation));
    }
    let (train_idx, val_idx) = split_indices(d.n(), seed);
    let train = d.resample(&train_idx)?;
    let val = d.resample(&val_idx)?;
    let scores: Vec<f64> = grid
        .par_iter()
        .map(|cfg| validation_mse(cfg, &train, &val, seed).unwrap_or(f64::INFINITY))
        .collect();
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s < scores[best] || (!scores[best].is_finite() && s.is_finite()) {
            best = i;
        }
    }
    if !scores[best].is_finite() {
        return Err(CgctError::InvalidData("every grid point failed to train".into()).at(Stage::Evaluation));
    }
    Ok(TuneResult {
        best,
        best_config: grid[best].clone(),
        scores,
    })
}

pub fn validation_mse(cfg: &MethodConfig, train: &Dataset, val: &Dataset, seed: u64) -> Result<f64> {
    let model = train_cgct(train, cfg, seed)?;
    let pred = model.predict_factual(val)?;
    let y = val.outcomes();
    let mse = (pred - y).norm_squared() / val.n() as f64;
    if mse.is_finite() {
        Ok(mse)
    } else {
        Err(CgctError::NonFinite("validation predictions".into()))
    }
}

/// Every (flags, inference model) cell. `configs` gives the settings used
/// for each outcome model; the flags are overridden per row.
pub fn ablation_matrix(
    setup: &SemiSynthetic,
    configs: &[(InferenceKind, MethodConfig)],
    runs: usize,
    base_seed: u64,
) -> Result<Vec<EvalReport>> {
    let mut reports = Vec::new();
    for flags in AblationFlags::ALL {
        for (kind, cfg) in configs {
            let cell = MethodConfig { flags, ..cfg.clone() };
            let label = format!("{}/{}", flags.label(), kind);
            reports.push(repeat_runs(&cell, setup, runs, base_seed, &label)?);
        }
    }
    Ok(reports)
}

/// Text table: rows Base/BAE/CF-GEN/CG-CT, one column per outcome model.
pub fn format_ablation_table(reports: &[EvalReport], kinds: &[InferenceKind]) -> String {
    let mut out = format!("{:<8}", "");
    for k in kinds {
        out.push_str(&format!("{:>20}", k.as_str().to_uppercase()));
    }
    out.push('\n');
    for flags in AblationFlags::ALL {
        out.push_str(&format!("{:<8}", flags.label()));
        for k in kinds {
            let cell = reports
                .iter()
                .find(|r| r.flags == flags && r.config.inference.kind() == *k);
            match cell {
                Some(r) => out.push_str(&format!("{:>20}", format!("{:.3} ± {:.3}", r.mean, r.std))),
                None => out.push_str(&format!("{:>20}", "-")),
            }
        }
        out.push('\n');
    }
    out
}
