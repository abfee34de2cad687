//! Budget-constrained allocation over fitted response curves.
//!
//! Minimizes expected new infections `Σ (1 - ŷᵢ(aᵢ)) rᵢ pᵢ` subject to
//! `0 ≤ aᵢ ≤ L` and `Σ aᵢ ≤ B` by multi-start projected gradient descent.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{CgctError, Result, Stage};
use crate::pipeline::{sample_std, train_cgct, CgCtModel, MethodConfig};

pub const FEASIBILITY_TOL: f64 = 1e-6;
pub const DEFAULT_MAX_ITERATIONS: usize = 2_000;
pub const DEFAULT_RESAMPLES: usize = 100;
const RANDOM_STARTS: usize = 3;

/// Per-unit response curves in USD millions.
pub trait Responses: Sync {
    fn n(&self) -> usize;
    fn predict(&self, i: usize, a: f64) -> Result<f64>;
    /// `dŷᵢ/da` per USD million.
    fn derivative(&self, i: usize, a: f64) -> Result<f64>;
}

/// Curves of a trained model for fixed covariate rows.
pub struct ModelResponses<'a> {
    pub model: &'a CgCtModel,
    /// Representation of each unit.
    pub features: Vec<Vec<f64>>,
}

impl<'a> ModelResponses<'a> {
    pub fn new(model: &'a CgCtModel, d: &Dataset) -> Result<Self> {
        let x = model.scalers.scale_covariates(d)?;
        let z = model.features_scaled(&x)?;
        let features = (0..z.nrows()).map(|i| z.row(i).iter().copied().collect()).collect();
        Ok(Self { model, features })
    }
}

impl Responses for ModelResponses<'_> {
    fn n(&self) -> usize {
        self.features.len()
    }

    fn predict(&self, i: usize, a: f64) -> Result<f64> {
        self.model.predict_scaled(self.model.scale_treatment(a)?, &self.features[i])
    }

    fn derivative(&self, i: usize, a: f64) -> Result<f64> {
        self.model.derivative_usd(a, &self.features[i])
    }
}

/// `ŷᵢ(a) = interceptᵢ + slopeᵢ · a`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearResponses {
    pub intercept: Vec<f64>,
    pub slope: Vec<f64>,
}

impl Responses for LinearResponses {
    fn n(&self) -> usize {
        self.slope.len()
    }

    fn predict(&self, i: usize, a: f64) -> Result<f64> {
        Ok(self.intercept[i] + self.slope[i] * a)
    }

    fn derivative(&self, i: usize, _a: f64) -> Result<f64> {
        Ok(self.slope[i])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationProblem {
    /// USD millions.
    pub budget: f64,
    /// Per-country upper bound, USD millions.
    pub bound: f64,
    pub countries: Vec<String>,
    /// New infections per person per year.
    pub rates: Vec<f64>,
    pub populations: Vec<f64>,
    /// Current allocation, USD millions.
    pub observed: Vec<f64>,
    /// Fixed allocations by country id.
    #[serde(default)]
    pub pins: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Budget {
    ObservedTotal,
    Amount(f64),
}

impl AllocationProblem {
    /// Problem for the units of `decision`. Rates come from `previous` when
    /// it has the same country, else from the decision year.
    pub fn from_dataset(
        decision: &Dataset,
        previous: Option<&Dataset>,
        budget: Budget,
        bound: f64,
        pins: BTreeMap<String, f64>,
    ) -> Result<Self> {
        let observed: Vec<f64> = decision.records.iter().map(|r| r.treatment_a).collect();
        let rates = decision
            .records
            .iter()
            .map(|r| {
                previous
                    .and_then(|p| p.get(&r.country_id))
                    .map_or(r.infection_rate_r, |p| p.infection_rate_r)
            })
            .collect();
        let budget = match budget {
            Budget::ObservedTotal => observed.iter().sum(),
            Budget::Amount(b) => b,
        };
        let p = Self {
            budget,
            bound,
            countries: decision.records.iter().map(|r| r.country_id.clone()).collect(),
            rates,
            populations: decision.records.iter().map(|r| r.population_p).collect(),
            observed,
            pins,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn n(&self) -> usize {
        self.countries.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        if self.rates.len() != n || self.populations.len() != n || self.observed.len() != n {
            return Err(CgctError::DimensionMismatch {
                expected: n,
                got: self.rates.len().min(self.populations.len()).min(self.observed.len()),
            });
        }
        if !(self.budget > 0.0) || !self.budget.is_finite() {
            return Err(CgctError::InvalidArgument(format!("budget {} must be > 0", self.budget)));
        }
        if !(self.bound > 0.0) || !self.bound.is_finite() {
            return Err(CgctError::InvalidArgument(format!("bound {} must be > 0", self.bound)));
        }
        let mut pinned = 0.0;
        for (c, &v) in &self.pins {
            if !self.countries.contains(c) {
                return Err(CgctError::UnknownCountry(c.clone()));
            }
            if !(0.0..=self.bound).contains(&v) {
                return Err(CgctError::OutOfRange(format!("pin {v} for {c} outside [0, {}]", self.bound)));
            }
            pinned += v;
        }
        if pinned > self.budget + FEASIBILITY_TOL {
            return Err(CgctError::Infeasible(format!("pins total {pinned} exceeds budget {}", self.budget)));
        }
        Ok(())
    }

    fn pin_vector(&self) -> Vec<Option<f64>> {
        self.countries.iter().map(|c| self.pins.get(c).copied()).collect()
    }

    /// Projection onto the feasible set with pins held fixed.
    pub fn project(&self, a: &[f64]) -> Vec<f64> {
        let pins = self.pin_vector();
        let pinned: f64 = pins.iter().flatten().sum();
        let free: Vec<usize> = (0..a.len()).filter(|&i| pins[i].is_none()).collect();
        let sub: Vec<f64> = free.iter().map(|&i| a[i]).collect();
        let projected = project_feasible(&sub, (self.budget - pinned).max(0.0), self.bound);
        let mut out: Vec<f64> = pins.iter().map(|p| p.unwrap_or(0.0)).collect();
        for (&i, v) in free.iter().zip(projected) {
            out[i] = v;
        }
        out
    }
}

/// Euclidean projection onto `{0 ≤ aᵢ ≤ L, Σ aᵢ ≤ B}` by bisection on the
/// budget multiplier.
pub fn project_feasible(a: &[f64], budget: f64, bound: f64) -> Vec<f64> {
    let clamp = |tau: f64| -> Vec<f64> { a.iter().map(|&v| (v - tau).clamp(0.0, bound)).collect() };
    let boxed = clamp(0.0);
    if boxed.iter().sum::<f64>() <= budget {
        return boxed;
    }
    let (mut lo, mut hi) = (0.0, a.iter().copied().fold(0.0, f64::max));
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if clamp(mid).iter().sum::<f64>() > budget {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut out = clamp(hi);
    // Final rescale so the budget holds exactly despite rounding.
    let total: f64 = out.iter().sum();
    if total > budget && total > 0.0 {
        let f = budget / total;
        out.iter_mut().for_each(|v| *v *= f);
    }
    out
}

/// `Σ (1 - ŷᵢ(aᵢ)) rᵢ pᵢ`.
pub fn expected_infections(resp: &dyn Responses, allocation: &[f64], problem: &AllocationProblem) -> Result<f64> {
    if allocation.len() != problem.n() || resp.n() != problem.n() {
        return Err(CgctError::DimensionMismatch { expected: problem.n(), got: allocation.len() });
    }
    let mut total = 0.0;
    for (i, &a) in allocation.iter().enumerate() {
        if !(-1e-9..=problem.bound + 1e-9).contains(&a) {
            return Err(CgctError::OutOfRange(format!(
                "allocation {a} for {} outside [0, {}]",
                problem.countries[i], problem.bound
            )));
        }
        total += (1.0 - resp.predict(i, a)?) * problem.rates[i] * problem.populations[i];
    }
    if !total.is_finite() {
        return Err(CgctError::NonFinite("expected infections".into()));
    }
    Ok(total)
}

/// Expected infections at an allocation that may lie outside the bound
/// (the observed allocation).
pub fn expected_infections_unbounded(resp: &dyn Responses, allocation: &[f64], problem: &AllocationProblem) -> Result<f64> {
    let mut total = 0.0;
    for (i, &a) in allocation.iter().enumerate() {
        total += (1.0 - resp.predict(i, a)?) * problem.rates[i] * problem.populations[i];
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartSummary {
    pub label: String,
    pub initial_objective: f64,
    pub objective: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationPlan {
    pub countries: Vec<String>,
    pub allocation: Vec<f64>,
    pub current: Vec<f64>,
    /// Expected new infections of the plan.
    pub objective: f64,
    /// Expected new infections at the current allocation.
    pub current_objective: f64,
    /// Objective of the projected current allocation (first warm start).
    pub warm_start_objective: f64,
    pub budget: f64,
    pub bound: f64,
    /// `Σ aᵢ - B` (≤ 0 when feasible).
    pub budget_residual: f64,
    /// Largest violation of `0 ≤ aᵢ ≤ L`.
    pub box_violation: f64,
    pub iterations: usize,
    pub starts: Vec<StartSummary>,
}

impl AllocationPlan {
    pub fn reduction(&self) -> f64 {
        self.current_objective - self.objective
    }

    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["country", "current_aid", "suggested_aid", "delta"])?;
        for i in 0..self.countries.len() {
            w.write_record([
                self.countries[i].clone(),
                self.current[i].to_string(),
                self.allocation[i].to_string(),
                (self.allocation[i] - self.current[i]).to_string(),
            ])?;
        }
        w.flush().map_err(|source| CgctError::Io { path: "<writer>".into(), source })?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub max_iterations: usize,
    pub tolerance: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iterations: DEFAULT_MAX_ITERATIONS,
            tolerance: 1e-10,
        }
    }
}

fn gradient(resp: &dyn Responses, a: &[f64], problem: &AllocationProblem, pins: &[Option<f64>]) -> Result<Vec<f64>> {
    (0..a.len())
        .map(|i| {
            if pins[i].is_some() {
                Ok(0.0)
            } else {
                Ok(-resp.derivative(i, a[i])? * problem.rates[i] * problem.populations[i])
            }
        })
        .collect()
}

/// Projected gradient descent with Armijo backtracking and step growth.
/// The objective never increases between accepted iterates.
fn descend(resp: &dyn Responses, problem: &AllocationProblem, start: Vec<f64>, opts: &SolverOptions) -> Result<(Vec<f64>, f64, usize)> {
    let pins = problem.pin_vector();
    let mut x = problem.project(&start);
    let mut f = expected_infections(resp, &x, problem)?;
    let mut step = f64::NAN;
    let mut iterations = 0;
    while iterations < opts.max_iterations {
        iterations += 1;
        let g = gradient(resp, &x, problem, &pins)?;
        let gmax = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if gmax == 0.0 {
            break;
        }
        if !step.is_finite() {
            step = problem.bound / gmax;
        }
        let mut accepted = None;
        while step * gmax > 1e-14 * problem.bound {
            let trial: Vec<f64> = x.iter().zip(&g).map(|(xi, gi)| xi - step * gi).collect();
            let y = problem.project(&trial);
            let moved: f64 = y.iter().zip(&x).map(|(a, b)| (a - b).powi(2)).sum();
            if moved == 0.0 {
                break;
            }
            let fy = expected_infections(resp, &y, problem)?;
            if fy <= f - 1e-4 * moved / step {
                accepted = Some((y, fy, moved));
                break;
            }
            step *= 0.5;
        }
        let Some((y, fy, moved)) = accepted else { break };
        let done = moved.sqrt() <= opts.tolerance * problem.bound.max(1.0) || (f - fy) <= f64::EPSILON * f.abs();
        x = y;
        f = fy;
        step *= 2.0;
        if done {
            break;
        }
    }
    Ok((x, f, iterations))
}

/// Label, initial objective, final point, final objective, iterations.
type StartResult = (String, f64, Vec<f64>, f64, usize);

/// Best plan over warm starts: current allocation, uniform `B/n`, and three
/// seeded random feasible points.
pub fn optimize_allocation(resp: &dyn Responses, problem: &AllocationProblem, seed: u64, opts: &SolverOptions) -> Result<AllocationPlan> {
    problem.validate().map_err(|e| e.at(Stage::Allocation))?;
    if resp.n() != problem.n() {
        return Err(CgctError::DimensionMismatch { expected: problem.n(), got: resp.n() }.at(Stage::Allocation));
    }
    let n = problem.n();
    let mut starts = vec![
        ("current".to_string(), problem.observed.clone()),
        ("uniform".to_string(), vec![problem.budget / n as f64; n]),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for k in 0..RANDOM_STARTS {
        let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let total: f64 = raw.iter().sum();
        let scaled = raw.iter().map(|v| v / total * problem.budget).collect();
        starts.push((format!("random{k}"), scaled));
    }
    let results: Vec<Result<StartResult>> = starts
        .into_par_iter()
        .map(|(label, s)| {
            let init = problem.project(&s);
            let f0 = expected_infections(resp, &init, problem)?;
            let (x, f, it) = descend(resp, problem, init, opts)?;
            Ok((label, f0, x, f, it))
        })
        .collect();
    let results = results.into_iter().collect::<Result<Vec<_>>>().map_err(|e| e.at(Stage::Allocation))?;
    let warm_start_objective = results[0].1;
    let best = results
        .iter()
        .enumerate()
        .min_by(|a, b| a.1 .3.total_cmp(&b.1 .3).then(a.0.cmp(&b.0)))
        .map(|(i, _)| i)
        .unwrap_or(0);
    let (_, _, allocation, objective, _) = results[best].clone();
    let total: f64 = allocation.iter().sum();
    let box_violation = allocation
        .iter()
        .map(|&a| (-a).max(a - problem.bound).max(0.0))
        .fold(0.0, f64::max);
    if total - problem.budget > FEASIBILITY_TOL || box_violation > FEASIBILITY_TOL {
        return Err(CgctError::Infeasible(format!(
            "plan violates constraints (budget residual {}, box {box_violation})",
            total - problem.budget
        ))
        .at(Stage::Allocation));
    }
    let current_objective = expected_infections_unbounded(resp, &problem.observed, problem).map_err(|e| e.at(Stage::Allocation))?;
    Ok(AllocationPlan {
        countries: problem.countries.clone(),
        current: problem.observed.clone(),
        allocation,
        objective,
        current_objective,
        warm_start_objective,
        budget: problem.budget,
        bound: problem.bound,
        budget_residual: total - problem.budget,
        box_violation,
        iterations: results.iter().map(|r| r.4).sum(),
        starts: results
            .into_iter()
            .map(|(label, f0, _, f, iterations)| StartSummary {
                label,
                initial_objective: f0,
                objective: f,
                iterations,
            })
            .collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    /// Current minus suggested expected infections, per resample.
    pub reductions: Vec<f64>,
    /// Reduction as a percentage of current expected infections.
    pub percentages: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub percent_mean: f64,
    pub percent_std: f64,
    pub failures: Vec<String>,
    pub partial: bool,
}

/// Resamples `n` units with replacement `resamples` times. `run` receives
/// the drawn indices and a per-resample seed and returns
/// `(current, suggested)` expected infections.
pub fn bootstrap_ci<F>(n: usize, resamples: usize, seed: u64, run: F) -> Result<BootstrapResult>
where
    F: Fn(&[usize], u64) -> Result<(f64, f64)> + Sync,
{
    if resamples < 2 {
        return Err(CgctError::InvalidArgument("bootstrap needs at least 2 resamples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draws: Vec<Vec<usize>> = (0..resamples).map(|_| (0..n).map(|_| rng.random_range(0..n)).collect()).collect();
    let outcomes: Vec<Result<(f64, f64)>> = draws
        .par_iter()
        .enumerate()
        .map(|(k, idx)| run(idx, seed.wrapping_add(k as u64 + 1)))
        .collect();
    let mut reductions = Vec::new();
    let mut percentages = Vec::new();
    let mut failures = Vec::new();
    for (k, r) in outcomes.into_iter().enumerate() {
        match r {
            Ok((current, suggested)) => {
                reductions.push(current - suggested);
                percentages.push(if current != 0.0 { 100.0 * (current - suggested) / current } else { 0.0 });
            }
            Err(e) => failures.push(format!("resample {k}: {e}")),
        }
    }
    if reductions.is_empty() {
        return Err(CgctError::InvalidData(format!("every bootstrap resample failed; first: {}", failures[0])).at(Stage::Allocation));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(BootstrapResult {
        mean: mean(&reductions),
        std: sample_std(&reductions),
        percent_mean: mean(&percentages),
        percent_std: sample_std(&percentages),
        partial: !failures.is_empty(),
        reductions,
        percentages,
        failures,
    })
}

/// Plan for the decision-year units under a trained model, with the
/// model's bound `A_max + σ̂_A`.
pub fn plan_for_model(
    model: &CgCtModel,
    decision: &Dataset,
    previous: Option<&Dataset>,
    budget: Budget,
    pins: BTreeMap<String, f64>,
    seed: u64,
    opts: &SolverOptions,
) -> Result<AllocationPlan> {
    let problem = AllocationProblem::from_dataset(decision, previous, budget, model.treatment_bound(), pins)
        .map_err(|e| e.at(Stage::Allocation))?;
    let resp = ModelResponses::new(model, decision).map_err(|e| e.at(Stage::Allocation))?;
    optimize_allocation(&resp, &problem, seed, opts)
}

/// Bootstrap over training countries: each resample refits the pipeline and
/// re-plans the decision year.
#[allow(clippy::too_many_arguments)]
pub fn bootstrap_pipeline(
    cfg: &MethodConfig,
    train: &Dataset,
    decision: &Dataset,
    previous: Option<&Dataset>,
    budget: Budget,
    resamples: usize,
    seed: u64,
    opts: &SolverOptions,
) -> Result<BootstrapResult> {
    bootstrap_ci(train.n(), resamples, seed, |idx, s| {
        let model = train_cgct(&train.resample(idx)?, cfg, s)?;
        let plan = plan_for_model(&model, decision, previous, budget, BTreeMap::new(), s, opts)?;
        Ok((plan.current_objective, plan.objective))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn projection_examples() {
        assert_eq!(project_feasible(&[0.5, 1.0], 3.0, 2.0), vec![0.5, 1.0]);
        let p = project_feasible(&[8.0], 4.0, 10.0);
        assert!((p[0] - 4.0).abs() < 1e-12);
        let p = project_feasible(&[5.0, 5.0, -1.0], 4.0, 3.0);
        assert!((p[0] - 2.0).abs() < 1e-9 && (p[1] - 2.0).abs() < 1e-9 && p[2] == 0.0);
    }

    #[test]
    fn infection_extremes() {
        let problem = AllocationProblem {
            budget: 1.0,
            bound: 1.0,
            countries: vec!["A".into(), "B".into()],
            rates: vec![0.01, 0.002],
            populations: vec![1e6, 5e6],
            observed: vec![0.5, 0.5],
            pins: BTreeMap::new(),
        };
        let zero = LinearResponses { intercept: vec![0.0; 2], slope: vec![0.0; 2] };
        let one = LinearResponses { intercept: vec![1.0; 2], slope: vec![0.0; 2] };
        assert!((expected_infections(&zero, &[0.2, 0.3], &problem).unwrap() - 20_000.0).abs() < 1e-9);
        assert_eq!(expected_infections(&one, &[0.2, 0.3], &problem).unwrap(), 0.0);
        assert!(expected_infections(&one, &[2.0, 0.3], &problem).is_err());
    }
}
