//! Independent reference implementations used as test oracles.

#![allow(dead_code, clippy::needless_range_loop)]

pub mod nets;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(lo..hi))
}

pub fn random_vector(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.random_range(lo..hi))
}

/// Gauss-Jordan elimination with partial pivoting on a dense system.
pub fn gauss_solve(a: &[Vec<f64>], b: &[f64]) -> Option<Vec<f64>> {
    let n = b.len();
    let mut m: Vec<Vec<f64>> = a.iter().zip(b).map(|(row, &v)| {
        let mut r = row.clone();
        r.push(v);
        r
    }).collect();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))?;
        if m[pivot][col].abs() < 1e-300 {
            return None;
        }
        m.swap(col, pivot);
        let p = m[col][col];
        for v in m[col].iter_mut() {
            *v /= p;
        }
        for i in 0..n {
            if i != col {
                let f = m[i][col];
                if f != 0.0 {
                    for j in col..=n {
                        m[i][j] -= f * m[col][j];
                    }
                }
            }
        }
    }
    Some(m.into_iter().map(|r| r[n]).collect())
}

/// Least squares through the normal equations `XᵀX β = Xᵀy`.
pub fn normal_equations(x: &DMatrix<f64>, y: &DVector<f64>) -> Vec<f64> {
    let k = x.ncols();
    let gram: Vec<Vec<f64>> = (0..k)
        .map(|i| (0..k).map(|j| (0..x.nrows()).map(|r| x[(r, i)] * x[(r, j)]).sum()).collect())
        .collect();
    let rhs: Vec<f64> = (0..k).map(|i| (0..x.nrows()).map(|r| x[(r, i)] * y[r]).sum()).collect();
    gauss_solve(&gram, &rhs).expect("non-singular normal equations")
}

/// Central finite-difference gradient.
pub fn fd_gradient(params: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = params.to_vec();
    (0..p.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + h;
            let up = f(&p);
            p[i] = orig - h;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖g - fd‖ / max(‖g‖, ‖fd‖, floor)`.
pub fn relative_error(g: &[f64], fd: &[f64]) -> f64 {
    let diff: f64 = g.iter().zip(fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let na: f64 = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-8)
}

/// Exhaustive oracle for `min ||t - Zᵀw||² + alpha ||w||₁ s.t. aᵀw = ã`.
///
/// Every sign pattern in `{-1, 0, +1}ⁿ` fixes the L1 term to a linear one;
/// the resulting equality-constrained quadratic is solved through its KKT
/// system and the true objective of each candidate is compared.
pub fn twin_oracle(z: &DMatrix<f64>, a: &DVector<f64>, target: &DVector<f64>, treatment: f64, alpha: f64) -> (f64, Vec<f64>) {
    let n = z.nrows();
    let objective = |w: &[f64]| -> f64 {
        let fit: f64 = (0..z.ncols())
            .map(|j| (target[j] - (0..n).map(|i| z[(i, j)] * w[i]).sum::<f64>()).powi(2))
            .sum();
        fit + alpha * w.iter().map(|v| v.abs()).sum::<f64>()
    };
    let mut best = (f64::INFINITY, vec![0.0; n]);
    for code in 0..3usize.pow(n as u32) {
        let mut c = code;
        let signs: Vec<i32> = (0..n)
            .map(|_| {
                let s = (c % 3) as i32 - 1;
                c /= 3;
                s
            })
            .collect();
        let support: Vec<usize> = (0..n).filter(|&i| signs[i] != 0).collect();
        if support.is_empty() {
            if treatment == 0.0 && objective(&vec![0.0; n]) < best.0 {
                best = (objective(&vec![0.0; n]), vec![0.0; n]);
            }
            continue;
        }
        let k = support.len();
        // Rows of the KKT system [2Q a; aᵀ 0].
        let mut sys = vec![vec![0.0; k + 1]; k + 1];
        let mut rhs = vec![0.0; k + 1];
        for (p, &i) in support.iter().enumerate() {
            for (q, &j) in support.iter().enumerate() {
                sys[p][q] = 2.0 * (0..z.ncols()).map(|c| z[(i, c)] * z[(j, c)]).sum::<f64>();
            }
            sys[p][k] = a[i];
            sys[k][p] = a[i];
            rhs[p] = 2.0 * (0..z.ncols()).map(|c| z[(i, c)] * target[c]).sum::<f64>() - alpha * signs[i] as f64;
        }
        rhs[k] = treatment;
        // Small ridge keeps singular supports solvable; candidates are
        // re-checked against the exact constraint below.
        for (p, row) in sys.iter_mut().enumerate().take(k) {
            row[p] += 1e-12;
        }
        let Some(sol) = gauss_solve(&sys, &rhs) else { continue };
        let mut w = vec![0.0; n];
        for (p, &i) in support.iter().enumerate() {
            w[i] = sol[p];
        }
        let residual: f64 = (0..n).map(|i| a[i] * w[i]).sum::<f64>() - treatment;
        if residual.abs() > 1e-8 || w.iter().any(|v| !v.is_finite()) {
            continue;
        }
        let f = objective(&w);
        if f < best.0 {
            best = (f, w);
        }
    }
    best
}

/// Brute-force projection onto `{0 ≤ aᵢ ≤ L, Σ aᵢ ≤ B}` for `n ≤ 3`: a
/// coarse grid search followed by successive grid refinement.
pub fn grid_projection(u: &[f64], budget: f64, bound: f64) -> Vec<f64> {
    let n = u.len();
    let dist = |x: &[f64]| -> f64 { x.iter().zip(u).map(|(a, b)| (a - b).powi(2)).sum() };
    let steps = 40usize;
    let mut center = vec![0.5 * bound; n];
    let mut half = 0.5 * bound;
    let mut best = vec![0.0; n];
    for _ in 0..60 {
        let mut best_d = f64::INFINITY;
        let total = (steps + 1).pow(n as u32);
        for code in 0..total {
            let mut c = code;
            let x: Vec<f64> = (0..n)
                .map(|i| {
                    let k = c % (steps + 1);
                    c /= steps + 1;
                    (center[i] - half + 2.0 * half * k as f64 / steps as f64).clamp(0.0, bound)
                })
                .collect();
            if x.iter().sum::<f64>() > budget {
                continue;
            }
            let d = dist(&x);
            if d < best_d {
                best_d = d;
                best = x;
            }
        }
        center = best.clone();
        half *= 0.25;
    }
    best
}

/// Optimal plan for separable linear responses `ŷᵢ = cᵢ + sᵢ a`: fill units
/// in decreasing `rᵢpᵢsᵢ` (positive only) up to `L` until the budget runs out.
pub fn greedy_linear(weights: &[f64], budget: f64, bound: f64) -> Vec<f64> {
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&i, &j| weights[j].total_cmp(&weights[i]));
    let mut left = budget;
    let mut out = vec![0.0; weights.len()];
    for i in order {
        if weights[i] <= 0.0 || left <= 0.0 {
            break;
        }
        out[i] = bound.min(left);
        left -= out[i];
    }
    out
}

/// Mean of `y` rows of the `k` nearest rows by Euclidean distance over
/// mutually observed coordinates, normalized by their count.
pub fn knn_oracle(rows: &[Vec<Option<f64>>], target: usize, col: usize, k: usize) -> f64 {
    let mut dists: Vec<(f64, usize)> = Vec::new();
    for (i, r) in rows.iter().enumerate() {
        if i == target || r[col].is_none() {
            continue;
        }
        let mut sum = 0.0;
        let mut shared = 0;
        for (a, b) in r.iter().zip(&rows[target]) {
            if let (Some(a), Some(b)) = (a, b) {
                sum += (a - b).powi(2);
                shared += 1;
            }
        }
        let d = if shared == 0 { f64::INFINITY } else { (sum / shared as f64).sqrt() };
        dists.push((d, i));
    }
    dists.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
    dists.iter().take(k).map(|&(_, i)| rows[i][col].unwrap()).sum::<f64>() / k as f64
}
