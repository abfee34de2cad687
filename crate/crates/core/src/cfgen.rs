//! Counterfactual generator.
//!
//! A synthetic twin of a unit is a weighted combination of observed rows
//! whose treatment equals a target value exactly and whose representation is
//! as close as possible to the unit's representation:
//!
//! ```text
//! w* = argmin_w ||z̃ - Zᵀw||² + alpha ||w||₁   s.t.  Aᵀw = ã
//! ```
//!
//! The weighted outcome `Yᵀw*` is the counterfactual prediction. Weights may
//! be negative and generated outcomes are not clipped.
//!
//! The solver is ADMM on the split `w = v` with the L1 term on `v`; every
//! `w`-step is an exact projection onto the affine constraint. The quadratic
//! has rank `r`, so `(2ZZᵀ + rho I)⁻¹` is applied through Woodbury in
//! `O(n r)`. A final polish re-solves the KKT system on the detected support
//! and sign pattern.

use std::io::Write;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CgctError, Result};
use crate::sample::{Provenance, Sample};

pub const MAX_ITERATIONS: usize = 10_000;
pub const OBJECTIVE_TOL: f64 = 1e-9;
pub const CONSTRAINT_TOL: f64 = 1e-6;
const POLISH_STEPS: usize = 50;

/// Target of one twin solve. The norm order of the penalty is fixed at 1.
#[derive(Debug, Clone, PartialEq)]
pub struct TwinQuery {
    pub target: DVector<f64>,
    pub treatment: f64,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightSolution {
    pub weights: DVector<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub constraint_residual: f64,
    pub polished: bool,
}

/// Reusable solver for one `(Z, A, alpha)`; queries differ only in the
/// target representation and treatment.
#[derive(Debug, Clone)]
pub struct TwinSolver {
    z: DMatrix<f64>,
    a: DVector<f64>,
    a_norm2: f64,
    alpha: f64,
    rho0: f64,
}

/// Woodbury pieces for `M = 2ZZᵀ + rho I`.
struct Factor {
    rho: f64,
    inner: Cholesky<f64, Dyn>,
    m_inv_a: DVector<f64>,
    a_m_inv_a: f64,
}

impl TwinSolver {
    pub fn new(z: DMatrix<f64>, a: DVector<f64>, alpha: f64) -> Result<Self> {
        if z.nrows() == 0 {
            return Err(CgctError::InvalidArgument("twin solver needs n >= 1 rows".into()));
        }
        if z.nrows() != a.len() {
            return Err(CgctError::DimensionMismatch {
                expected: z.nrows(),
                got: a.len(),
            });
        }
        if !(alpha >= 0.0) {
            return Err(CgctError::InvalidArgument(format!("alpha {alpha} must be >= 0")));
        }
        if z.iter().chain(a.iter()).any(|v| !v.is_finite()) {
            return Err(CgctError::NonFinite("twin solver input".into()));
        }
        let n = z.nrows() as f64;
        let scale = 2.0 * z.norm_squared() / n;
        let rho0 = scale.max(alpha).max(1e-3);
        let a_norm2 = a.norm_squared();
        Ok(Self {
            z,
            a,
            a_norm2,
            alpha,
            rho0,
        })
    }

    pub fn n(&self) -> usize {
        self.z.nrows()
    }

    fn factor(&self, rho: f64) -> Result<Factor> {
        let r = self.z.ncols();
        let mut inner = self.z.transpose() * &self.z;
        for i in 0..r {
            inner[(i, i)] += 0.5 * rho;
        }
        let inner = inner
            .cholesky()
            .ok_or_else(|| CgctError::NonFinite("woodbury factor".into()))?;
        let mut f = Factor {
            rho,
            inner,
            m_inv_a: DVector::zeros(0),
            a_m_inv_a: 0.0,
        };
        f.m_inv_a = self.apply_m_inv(&f, &self.a);
        f.a_m_inv_a = self.a.dot(&f.m_inv_a);
        Ok(f)
    }

    fn apply_m_inv(&self, f: &Factor, b: &DVector<f64>) -> DVector<f64> {
        if self.z.ncols() == 0 {
            return b / f.rho;
        }
        let t = f.inner.solve(&(self.z.transpose() * b));
        (b - &self.z * t) / f.rho
    }

    /// Objective value `||z̃ - Zᵀw||² + alpha ||w||₁`.
    pub fn objective(&self, q: &TwinQuery, w: &DVector<f64>) -> f64 {
        let fit = &q.target - self.z.transpose() * w;
        fit.norm_squared() + q.alpha * w.lp_norm(1)
    }

    pub fn solve(&self, q: &TwinQuery) -> Result<WeightSolution> {
        let n = self.n();
        if q.target.len() != self.z.ncols() {
            return Err(CgctError::DimensionMismatch {
                expected: self.z.ncols(),
                got: q.target.len(),
            });
        }
        if (q.alpha - self.alpha).abs() > 0.0 {
            return Err(CgctError::InvalidArgument(
                "query alpha differs from the solver's alpha".into(),
            ));
        }
        let constrained = self.a_norm2 > 0.0;
        if !constrained && q.treatment != 0.0 {
            return Err(CgctError::Infeasible(format!(
                "all observed treatments are zero but target treatment is {}",
                q.treatment
            )));
        }
        let zt = 2.0 * (&self.z * &q.target);
        let threshold = |v: f64, k: f64| v.signum() * (v.abs() - k).max(0.0);

        let mut factor = self.factor(self.rho0)?;
        let mut w = DVector::zeros(n);
        let mut v = DVector::zeros(n);
        let mut u = DVector::zeros(n);
        let mut prev_obj = f64::INFINITY;
        let mut iterations = 0;
        let mut converged = false;
        while iterations < MAX_ITERATIONS {
            iterations += 1;
            let rhs = &zt + (&v - &u) * factor.rho;
            let mut wn = self.apply_m_inv(&factor, &rhs);
            if constrained {
                let gap = self.a.dot(&wn) - q.treatment;
                wn.axpy(-gap / factor.a_m_inv_a, &factor.m_inv_a, 1.0);
            }
            w = wn;
            let v_prev = v.clone();
            let k = self.alpha / factor.rho;
            v = (&w + &u).map(|x| threshold(x, k));
            u += &w - &v;

            let primal = (&w - &v).amax();
            let dual = factor.rho * (&v - &v_prev).amax();
            let obj = self.objective(q, &w);
            if (prev_obj - obj).abs() < OBJECTIVE_TOL && primal < OBJECTIVE_TOL && dual < OBJECTIVE_TOL {
                converged = true;
                break;
            }
            prev_obj = obj;
            if iterations % 50 == 0 {
                let rescale = if primal > 10.0 * dual {
                    2.0
                } else if dual > 10.0 * primal {
                    0.5
                } else {
                    1.0
                };
                if rescale != 1.0 {
                    let rho = (factor.rho * rescale).clamp(1e-6, 1e8);
                    u *= factor.rho / rho;
                    factor = self.factor(rho)?;
                }
            }
        }

        let mut best = w.clone();
        let mut best_obj = self.objective(q, &best);
        let mut polished = false;
        for candidate in [&v, &w] {
            if let Some(p) = self.polish(q, candidate) {
                let obj = self.objective(q, &p);
                if obj <= best_obj + 1e-15 * best_obj.abs().max(1.0) {
                    best = p;
                    best_obj = obj;
                    polished = true;
                }
            }
        }
        let residual = (self.a.dot(&best) - q.treatment).abs();
        if residual > CONSTRAINT_TOL {
            return Err(CgctError::Infeasible(format!(
                "constraint residual {residual:e} exceeds {CONSTRAINT_TOL:e}"
            )));
        }
        if !converged && !polished && kkt_residual(&self.z, &self.a, q, &best) > 1e-5 {
            return Err(CgctError::NoConvergence {
                iterations,
                residual: kkt_residual(&self.z, &self.a, q, &best),
            });
        }
        Ok(WeightSolution {
            weights: best,
            objective: best_obj,
            iterations,
            constraint_residual: residual,
            polished,
        })
    }

    /// Active-set refinement from the support and signs of `w`: solve the
    /// KKT system on the support, drop coefficients whose sign flips, add the
    /// most violating off-support index, repeat. Returns a point only when
    /// it is a valid optimality certificate.
    fn polish(&self, q: &TwinQuery, w: &DVector<f64>) -> Option<DVector<f64>> {
        let n = self.n();
        let tiny = 1e-9 * w.amax().max(1.0);
        // (index, sign, magnitude at the start point)
        let mut active: Vec<(usize, f64, f64)> =
            (0..n).filter(|&i| w[i].abs() > tiny).map(|i| (i, w[i].signum(), w[i].abs())).collect();
        for _ in 0..2 * n + POLISH_STEPS {
            let Some((out, lambda)) = self.support_solve(q, &active) else {
                // More active coefficients than the support system can pin
                // down: the smooth part is flat along the null space, where
                // the L1 term decreases until a coefficient reaches zero.
                let drop = self.null_space_exit(&active)?;
                active.remove(drop);
                continue;
            };
            let flipped: Vec<usize> = active
                .iter()
                .filter(|&&(i, sign, _)| out[i] * sign <= 0.0)
                .map(|&(i, _, _)| i)
                .collect();
            if !flipped.is_empty() {
                active.retain(|(i, _, _)| !flipped.contains(i));
                continue;
            }
            let grad = 2.0 * &self.z * (self.z.transpose() * &out - &q.target);
            let worst = (0..n)
                .filter(|&i| out[i] == 0.0)
                .map(|i| (i, grad[i] + lambda * self.a[i]))
                .filter(|&(_, g)| g.abs() > q.alpha * (1.0 + 1e-7) + 1e-9)
                .max_by(|x, y| x.1.abs().total_cmp(&y.1.abs()));
            match worst {
                None => return Some(out),
                Some((i, g)) => {
                    for (j, _, mag) in active.iter_mut() {
                        *mag = out[*j].abs();
                    }
                    active.push((i, -g.signum(), 0.0));
                }
            }
        }
        None
    }

    /// Position in `active` of the first coefficient to reach zero when
    /// moving along the null-space descent direction of the L1 term.
    fn null_space_exit(&self, active: &[(usize, f64, f64)]) -> Option<usize> {
        let s = active.len();
        let rows = self.z.ncols() + 1;
        let m = DMatrix::from_fn(rows, s, |r, c| {
            let i = active[c].0;
            if r < self.z.ncols() {
                self.z[(i, r)]
            } else {
                self.a[i]
            }
        });
        let svd = m.svd(false, true);
        let v_t = svd.v_t?;
        let tol = 1e-10 * svd.singular_values.max().max(1e-300);
        let theta = DVector::from_iterator(s, active.iter().map(|&(_, sign, _)| sign));
        let mut d = -&theta;
        for (k, &sv) in svd.singular_values.iter().enumerate() {
            if sv > tol {
                let row = v_t.row(k).transpose();
                d -= &row * row.dot(&d);
            }
        }
        if d.amax() <= 1e-12 {
            return None;
        }
        (0..s)
            .filter(|&c| d[c] * active[c].1 < 0.0)
            .min_by(|&x, &y| (active[x].2 / d[x].abs()).total_cmp(&(active[y].2 / d[y].abs())))
    }

    /// Minimizer of the smooth problem with `w` restricted to `active` and
    /// the L1 term replaced by its signed linear form; also returns the
    /// constraint multiplier.
    fn support_solve(&self, q: &TwinQuery, active: &[(usize, f64, f64)]) -> Option<(DVector<f64>, f64)> {
        let n = self.n();
        let constrained = self.a_norm2 > 0.0;
        let s = active.len();
        let k = s + usize::from(constrained);
        if k == 0 {
            return None;
        }
        if s == 0 {
            return (q.treatment == 0.0).then(|| (DVector::zeros(n), 0.0));
        }
        let zs = DMatrix::from_fn(s, self.z.ncols(), |i, j| self.z[(active[i].0, j)]);
        let mut kkt = DMatrix::zeros(k, k);
        let mut rhs = DVector::zeros(k);
        kkt.view_mut((0, 0), (s, s)).copy_from(&(2.0 * &zs * zs.transpose()));
        let zt = 2.0 * (&zs * &q.target);
        for (ii, &(i, sign, _)) in active.iter().enumerate() {
            rhs[ii] = zt[ii] - q.alpha * sign;
            if constrained {
                kkt[(ii, s)] = self.a[i];
                kkt[(s, ii)] = self.a[i];
            }
        }
        if constrained {
            rhs[s] = q.treatment;
        }
        let sol = kkt.clone().svd(true, true).solve(&rhs, 1e-12).ok()?;
        if (&kkt * &sol - &rhs).amax() > 1e-9 * rhs.amax().max(1.0) {
            return None;
        }
        let mut out = DVector::zeros(n);
        for (ii, &(i, _, _)) in active.iter().enumerate() {
            out[i] = sol[ii];
        }
        if (self.a.dot(&out) - q.treatment).abs() > 1e-10 * q.treatment.abs().max(1.0) {
            return None;
        }
        Some((out, if constrained { sol[s] } else { 0.0 }))
    }
}

/// Solves one twin problem from scratch.
pub fn solve_weights(
    z_mat: &DMatrix<f64>,
    a_vec: &DVector<f64>,
    q: &TwinQuery,
) -> Result<WeightSolution> {
    TwinSolver::new(z_mat.clone(), a_vec.clone(), q.alpha)?.solve(q)
}

/// Largest violation of the first-order optimality conditions
/// `0 ∈ 2Z(Zᵀw - z̃) + alpha ∂||w||₁ + lambda A`, minimized over `lambda`.
pub fn kkt_residual(z: &DMatrix<f64>, a: &DVector<f64>, q: &TwinQuery, w: &DVector<f64>) -> f64 {
    let n = w.len();
    let grad = 2.0 * z * (z.transpose() * w - &q.target);
    let tiny = 1e-9 * w.amax().max(1.0);
    let violation = |lambda: f64| -> f64 {
        (0..n)
            .map(|i| {
                let g = grad[i] + lambda * a[i];
                if w[i].abs() > tiny {
                    (g + q.alpha * w[i].signum()).abs()
                } else {
                    (g.abs() - q.alpha).max(0.0)
                }
            })
            .fold(0.0, f64::max)
    };
    // Max of convex functions of lambda: ternary search on a wide bracket.
    let scale = grad.amax().max(q.alpha).max(1.0) / a.amax().max(1e-12);
    let (mut lo, mut hi) = (-10.0 * scale, 10.0 * scale);
    if a.amax() == 0.0 {
        return violation(0.0);
    }
    for _ in 0..200 {
        let m1 = lo + (hi - lo) / 3.0;
        let m2 = hi - (hi - lo) / 3.0;
        if violation(m1) <= violation(m2) {
            hi = m2;
        } else {
            lo = m1;
        }
    }
    violation(0.5 * (lo + hi))
}

/// Counterfactual outcome `Yᵀw*` of a twin of row `i` at treatment `ã`.
pub fn generate_twin(d_hat: &Sample, i: usize, treatment: f64, alpha: f64) -> Result<f64> {
    let solver = TwinSolver::new(d_hat.features.clone(), d_hat.a.clone(), alpha)?;
    twin_outcome(&solver, d_hat, i, treatment)
}

fn twin_outcome(solver: &TwinSolver, d_hat: &Sample, i: usize, treatment: f64) -> Result<f64> {
    if i >= d_hat.n() {
        return Err(CgctError::InvalidArgument(format!("row {i} out of range")));
    }
    let q = TwinQuery {
        target: d_hat.features.row(i).transpose(),
        treatment,
        alpha: solver.alpha,
    };
    let sol = solver.solve(&q)?;
    Ok(d_hat.y.dot(&sol.weights))
}

/// Observed rows followed by `m` generated twins per row.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedDataset {
    pub sample: Sample,
    pub provenance: Vec<Provenance>,
}

impl AugmentedDataset {
    pub fn generated(&self) -> usize {
        self.provenance
            .iter()
            .filter(|p| matches!(p, Provenance::Generated { .. }))
            .count()
    }

    /// CSV with columns `provenance,source,y,a,z0..`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["provenance".to_string(), "source".into(), "draw".into(), "y".into(), "a".into()];
        header.extend((0..self.sample.dims()).map(|j| format!("z{j}")));
        w.write_record(&header)?;
        for (i, p) in self.provenance.iter().enumerate() {
            let (kind, source, draw) = match *p {
                Provenance::Observed { row } => ("observed", row, String::new()),
                Provenance::Generated { source, draw } => ("generated", source, draw.to_string()),
            };
            let mut row = vec![
                kind.to_string(),
                source.to_string(),
                draw,
                self.sample.y[i].to_string(),
                self.sample.a[i].to_string(),
            ];
            row.extend(self.sample.features.row(i).iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
        w.flush().map_err(|source| CgctError::Io {
            path: "<writer>".into(),
            source,
        })?;
        Ok(())
    }
}

/// Draws `m` treatments per row uniformly on the observed treatment range and
/// appends one twin per draw. Pure function of `(d_hat, m, alpha, seed)`.
pub fn augment(d_hat: &Sample, m: usize, alpha: f64, seed: u64) -> Result<AugmentedDataset> {
    let n = d_hat.n();
    let mut provenance: Vec<Provenance> = (0..n).map(|row| Provenance::Observed { row }).collect();
    if m == 0 {
        return Ok(AugmentedDataset {
            sample: d_hat.clone(),
            provenance,
        });
    }
    let (a_min, a_max) = d_hat.treatment_range();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draws: Vec<(usize, usize, f64)> = (0..n)
        .flat_map(|i| (0..m).map(move |j| (i, j)))
        .map(|(i, j)| {
            let t = if a_max > a_min {
                rng.random_range(a_min..=a_max)
            } else {
                a_min
            };
            (i, j, t)
        })
        .collect();
    let solver = TwinSolver::new(d_hat.features.clone(), d_hat.a.clone(), alpha)?;
    let outcomes: Vec<f64> = draws
        .par_iter()
        .map(|&(i, j, t)| {
            twin_outcome(&solver, d_hat, i, t).map_err(|e| CgctError::Twin {
                context: format!("twin for row {i}, draw {j} (treatment {t})"),
                source: Box::new(e),
            })
        })
        .collect::<Result<_>>()?;

    let total = n * (m + 1);
    let mut y = Vec::with_capacity(total);
    let mut a = Vec::with_capacity(total);
    y.extend(d_hat.y.iter());
    a.extend(d_hat.a.iter());
    let k = d_hat.dims();
    let mut features = DMatrix::zeros(total, k);
    features.view_mut((0, 0), (n, k)).copy_from(&d_hat.features);
    for (row, (&(i, j, t), &yt)) in draws.iter().zip(&outcomes).enumerate() {
        y.push(yt);
        a.push(t);
        features.row_mut(n + row).copy_from(&d_hat.features.row(i));
        provenance.push(Provenance::Generated { source: i, draw: j });
    }
    Ok(AugmentedDataset {
        sample: Sample::new(DVector::from_vec(y), DVector::from_vec(a), features)?,
        provenance,
    })
}

/// Summary of an augmentation run, kept in model metadata.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentationInfo {
    pub observed_rows: usize,
    pub generated_rows: usize,
    pub alpha: f64,
}
