mod common;

use std::collections::BTreeMap;
use std::path::PathBuf;

use cgct::allocation::{
    bootstrap_ci, expected_infections, optimize_allocation, plan_for_model, project_feasible, AllocationProblem, Budget, LinearResponses,
    Responses, SolverOptions, FEASIBILITY_TOL,
};
use cgct::data::{impute_knn, load_dataset, Dataset, DEFAULT_KNN_K};
use cgct::pipeline::{train_cgct, Method};
use cgct::{CgctError, Result, Stage};
use common::*;
use proptest::prelude::*;
use rand::Rng;

fn bundled(year: i32) -> Dataset {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/hiv_panel.csv");
    impute_knn(&load_dataset(path, year).unwrap(), DEFAULT_KNN_K).unwrap()
}

fn problem(rates: Vec<f64>, populations: Vec<f64>, budget: f64, bound: f64) -> AllocationProblem {
    let n = rates.len();
    AllocationProblem {
        budget,
        bound,
        countries: (0..n).map(|i| format!("C{i}")).collect(),
        rates,
        populations,
        observed: vec![budget / n as f64; n],
        pins: BTreeMap::new(),
    }
}

fn assert_feasible(a: &[f64], budget: f64, bound: f64) {
    assert!(a.iter().sum::<f64>() <= budget + FEASIBILITY_TOL, "budget exceeded: {}", a.iter().sum::<f64>());
    assert!(a.iter().all(|&v| (-FEASIBILITY_TOL..=bound + FEASIBILITY_TOL).contains(&v)), "box violated: {a:?}");
}

/// `ŷᵢ(a) = cᵢ + sᵢa − qᵢa²`: concave responses with a closed-form optimum.
struct Quadratic {
    c: Vec<f64>,
    s: Vec<f64>,
    q: Vec<f64>,
}

impl Responses for Quadratic {
    fn n(&self) -> usize {
        self.c.len()
    }
    fn predict(&self, i: usize, a: f64) -> Result<f64> {
        Ok(self.c[i] + self.s[i] * a - self.q[i] * a * a)
    }
    fn derivative(&self, i: usize, a: f64) -> Result<f64> {
        Ok(self.s[i] - 2.0 * self.q[i] * a)
    }
}

/// KKT solution of `min Σ wᵢ(qᵢa² − sᵢa)` over the box and budget:
/// `aᵢ(μ) = clip((wᵢsᵢ − μ) / (2wᵢqᵢ), 0, L)` with `μ ≥ 0` found by
/// bisection on the budget.
fn quadratic_oracle(r: &Quadratic, w: &[f64], budget: f64, bound: f64) -> Vec<f64> {
    let at = |mu: f64| -> Vec<f64> {
        (0..w.len()).map(|i| ((w[i] * r.s[i] - mu) / (2.0 * w[i] * r.q[i])).clamp(0.0, bound)).collect()
    };
    if at(0.0).iter().sum::<f64>() <= budget {
        return at(0.0);
    }
    let (mut lo, mut hi) = (0.0, 1e12);
    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        if at(mid).iter().sum::<f64>() > budget {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    at(hi)
}

#[test]
fn projection_matches_grid_oracle() {
    let mut g = rng(31);
    for k in 0..40 {
        let n = 1 + k % 3;
        let u: Vec<f64> = (0..n).map(|_| g.random_range(-1.0..3.0)).collect();
        let bound = g.random_range(0.2..2.0);
        let budget = g.random_range(0.1..2.5);
        let got = project_feasible(&u, budget, bound);
        let want = grid_projection(&u, budget, bound);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-6, "u={u:?} B={budget} L={bound}: {got:?} vs {want:?}");
        }
        assert_feasible(&got, budget, bound);
    }
}

#[test]
fn greedy_oracle_agrees_on_linear_responses() {
    let mut g = rng(32);
    for k in 0..25 {
        let n = 3 + k % 8;
        let slope: Vec<f64> = (0..n).map(|_| g.random_range(-0.02..0.1)).collect();
        let intercept: Vec<f64> = (0..n).map(|_| g.random_range(0.0..0.3)).collect();
        let rates: Vec<f64> = (0..n).map(|_| g.random_range(1e-4..1e-2)).collect();
        let pops: Vec<f64> = (0..n).map(|_| g.random_range(1e5..1e7)).collect();
        let bound = g.random_range(1.0..5.0);
        let budget = g.random_range(0.5..bound * n as f64);
        let p = problem(rates.clone(), pops.clone(), budget, bound);
        let resp = LinearResponses { intercept, slope: slope.clone() };
        let plan = optimize_allocation(&resp, &p, k as u64, &SolverOptions::default()).unwrap();
        let weights: Vec<f64> = (0..n).map(|i| slope[i] * rates[i] * pops[i]).collect();
        let greedy = greedy_linear(&weights, budget, bound);
        let f_greedy = expected_infections(&resp, &greedy, &p).unwrap();
        assert!(
            (plan.objective - f_greedy).abs() <= 1e-6 * f_greedy.abs().max(1.0),
            "instance {k}: {} vs greedy {f_greedy}",
            plan.objective
        );
        assert_feasible(&plan.allocation, budget, bound);
    }
}

#[test]
fn concave_responses_reach_the_kkt_point() {
    let mut g = rng(33);
    for k in 0..20 {
        let n = 2 + k % 6;
        let r = Quadratic {
            c: (0..n).map(|_| g.random_range(0.0..0.2)).collect(),
            s: (0..n).map(|_| g.random_range(0.0..0.2)).collect(),
            q: (0..n).map(|_| g.random_range(0.01..0.05)).collect(),
        };
        let rates: Vec<f64> = (0..n).map(|_| g.random_range(1e-3..1e-2)).collect();
        let pops: Vec<f64> = (0..n).map(|_| g.random_range(1e6..1e7)).collect();
        let bound = 3.0;
        // Even instances leave the budget slack so only the box binds.
        let budget = if k % 2 == 0 { 100.0 } else { g.random_range(0.5..2.0 * n as f64) };
        let p = problem(rates.clone(), pops.clone(), budget, bound);
        let plan = optimize_allocation(&r, &p, 7, &SolverOptions::default()).unwrap();
        let w: Vec<f64> = (0..n).map(|i| rates[i] * pops[i]).collect();
        let want = quadratic_oracle(&r, &w, budget, bound);
        let f_want = expected_infections(&r, &want, &p).unwrap();
        assert!(plan.objective <= f_want + 1e-6 * f_want.max(1.0), "instance {k}: {} vs {f_want}", plan.objective);
        for (a, b) in plan.allocation.iter().zip(&want) {
            assert!((a - b).abs() < 1e-4, "instance {k}: {:?} vs {want:?}", plan.allocation);
        }
    }
}

#[test]
fn pinned_countries_keep_their_allocation() {
    let n = 6;
    let resp = LinearResponses { intercept: vec![0.1; n], slope: vec![0.05, 0.04, 0.03, 0.02, 0.01, 0.06] };
    let mut p = problem(vec![0.005; n], vec![1e6; n], 5.0, 2.0);
    p.pins.insert("C0".into(), 0.25);
    p.pins.insert("C5".into(), 0.0);
    let plan = optimize_allocation(&resp, &p, 1, &SolverOptions::default()).unwrap();
    assert_eq!(plan.allocation[0], 0.25);
    assert_eq!(plan.allocation[5], 0.0);
    assert_feasible(&plan.allocation, 5.0, 2.0);
    // Remaining 4.75 fills C1 and C2 to the bound, then C3.
    assert!((plan.allocation[1] - 2.0).abs() < 1e-6 && (plan.allocation[2] - 2.0).abs() < 1e-6);
    assert!((plan.allocation[3] - 0.75).abs() < 1e-6 && plan.allocation[4].abs() < 1e-6);
    let again = optimize_allocation(&resp, &p, 2, &SolverOptions::default()).unwrap();
    assert_eq!(again.allocation[0], 0.25);
}

#[test]
fn invalid_problems_are_rejected() {
    let resp = LinearResponses { intercept: vec![0.0; 2], slope: vec![0.1; 2] };
    let opts = SolverOptions::default();
    let mut p = problem(vec![0.01; 2], vec![1e6; 2], 1.0, 1.0);
    p.pins.insert("ZZZ".into(), 0.1);
    let err = optimize_allocation(&resp, &p, 0, &opts).unwrap_err();
    assert_eq!(err.stage(), Some(Stage::Allocation));
    assert!(matches!(err.root(), CgctError::UnknownCountry(_)));

    let mut p = problem(vec![0.01; 2], vec![1e6; 2], 1.0, 1.0);
    p.pins.insert("C0".into(), 0.8);
    p.pins.insert("C1".into(), 0.8);
    assert!(matches!(optimize_allocation(&resp, &p, 0, &opts).unwrap_err().root(), CgctError::Infeasible(_)));

    let mut p = problem(vec![0.01; 2], vec![1e6; 2], 1.0, 1.0);
    p.pins.insert("C0".into(), 1.5);
    assert!(matches!(optimize_allocation(&resp, &p, 0, &opts).unwrap_err().root(), CgctError::OutOfRange(_)));

    let p = problem(vec![0.01; 2], vec![1e6; 2], 0.0, 1.0);
    assert!(optimize_allocation(&resp, &p, 0, &opts).is_err());
}

#[test]
fn model_plans_are_feasible_and_never_worse_than_observed() {
    let d16 = bundled(2016);
    let d15 = bundled(2015);
    let opts = SolverOptions::default();
    for method in [Method::Gps, Method::Lm] {
        let model = train_cgct(&d16, &method.default_config(), 1).unwrap();
        for seed in 0..3 {
            let plan = plan_for_model(&model, &d16, Some(&d15), Budget::ObservedTotal, BTreeMap::new(), seed, &opts).unwrap();
            assert_feasible(&plan.allocation, plan.budget, plan.bound);
            assert!(plan.budget_residual <= FEASIBILITY_TOL && plan.box_violation <= FEASIBILITY_TOL);
            assert!(plan.objective <= plan.current_objective, "{:?}: {} > {}", method, plan.objective, plan.current_objective);
            assert!(plan.objective <= plan.warm_start_objective);
            assert_eq!(plan.starts.len(), 5);
            assert!((plan.budget - d16.treatments().sum()).abs() < 1e-9);
        }
    }
}

#[test]
fn plan_csv_lists_every_country() {
    let resp = LinearResponses { intercept: vec![0.0; 3], slope: vec![0.1, 0.2, 0.3] };
    let p = problem(vec![0.01; 3], vec![1e6; 3], 1.0, 1.0);
    let plan = optimize_allocation(&resp, &p, 0, &SolverOptions::default()).unwrap();
    let mut out = Vec::new();
    plan.write_csv(&mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "country,current_aid,suggested_aid,delta");
    assert_eq!(lines.len(), 4);
    assert!(lines[3].starts_with("C2,"));
}

#[test]
fn bootstrap_statistics() {
    let constant = bootstrap_ci(10, 20, 3, |_, _| Ok((100.0, 90.0))).unwrap();
    assert_eq!(constant.mean, 10.0);
    assert_eq!(constant.std, 0.0);
    assert_eq!(constant.percent_mean, 10.0);
    assert_eq!(constant.reductions.len(), 20);

    let res = bootstrap_ci(8, 30, 4, |idx, _| {
        let s: f64 = idx.iter().map(|&i| i as f64).sum();
        Ok((100.0 + s, 100.0))
    })
    .unwrap();
    let m = res.reductions.iter().sum::<f64>() / 30.0;
    let sd = (res.reductions.iter().map(|r| (r - m).powi(2)).sum::<f64>() / 29.0).sqrt();
    assert!((res.mean - m).abs() < 1e-12 && (res.std - sd).abs() < 1e-12);
    assert!(res.std > 0.0);
    for (r, p) in res.reductions.iter().zip(&res.percentages) {
        assert!((p - 100.0 * r / (100.0 + r)).abs() < 1e-9);
    }
    let again = bootstrap_ci(8, 30, 4, |idx, _| Ok((100.0 + idx.iter().map(|&i| i as f64).sum::<f64>(), 100.0))).unwrap();
    assert_eq!(res, again);

    let partial = bootstrap_ci(5, 10, 1, |_, s| if s % 2 == 0 { Err(CgctError::Infeasible("x".into())) } else { Ok((2.0, 1.0)) }).unwrap();
    assert!(partial.partial && !partial.failures.is_empty());
    assert!(bootstrap_ci(5, 1, 1, |_, _| Ok((1.0, 1.0))).is_err());
    assert!(bootstrap_ci(5, 3, 1, |_, _| Err(CgctError::Infeasible("x".into()))).is_err());
}

proptest! {
    #[test]
    fn projection_is_feasible_idempotent_and_nonexpansive(
        u in proptest::collection::vec(-5.0f64..5.0, 1..12),
        shift in proptest::collection::vec(-1.0f64..1.0, 12),
        budget in 0.1f64..10.0,
        bound in 0.1f64..3.0,
    ) {
        let p = project_feasible(&u, budget, bound);
        prop_assert!(p.iter().sum::<f64>() <= budget + 1e-9);
        prop_assert!(p.iter().all(|&v| (0.0..=bound).contains(&v)));
        let pp = project_feasible(&p, budget, bound);
        for (a, b) in p.iter().zip(&pp) {
            prop_assert!((a - b).abs() < 1e-9);
        }
        let v: Vec<f64> = u.iter().zip(&shift).map(|(a, b)| a + b).collect();
        let pv = project_feasible(&v, budget, bound);
        let d_in: f64 = u.iter().zip(&v).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let d_out: f64 = p.iter().zip(&pv).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        prop_assert!(d_out <= d_in + 1e-9);
    }
}
