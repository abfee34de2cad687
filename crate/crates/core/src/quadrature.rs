//! Romberg integration on equally spaced samples and the curve metrics
//! built on it.

use nalgebra::DMatrix;

use crate::error::{CgctError, Result};

/// Default lattice: 2^6 + 1 nodes, i.e. 64 subintervals.
pub const LATTICE_LEVEL: u32 = 6;
pub const LATTICE_NODES: usize = (1 << LATTICE_LEVEL) + 1;

/// `nodes` equally spaced points on `[lo, hi]`, endpoints included.
pub fn lattice(lo: f64, hi: f64, nodes: usize) -> Vec<f64> {
    match nodes {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..nodes)
            .map(|k| {
                if k + 1 == nodes {
                    hi
                } else {
                    lo + (hi - lo) * k as f64 / (nodes - 1) as f64
                }
            })
            .collect(),
    }
}

/// Romberg integral of samples `f` taken on `2^k + 1` equally spaced nodes
/// spanning `[lo, hi]`.
pub fn romberg(f: &[f64], lo: f64, hi: f64) -> Result<f64> {
    let m = f.len().checked_sub(1).filter(|m| m.is_power_of_two()).ok_or_else(|| {
        CgctError::InvalidArgument(format!("Romberg needs 2^k + 1 samples, got {}", f.len()))
    })?;
    let levels = m.trailing_zeros() as usize;
    let h = hi - lo;
    let mut table: Vec<Vec<f64>> = Vec::with_capacity(levels + 1);
    for level in 0..=levels {
        let stride = m >> level;
        let trap = if level == 0 {
            0.5 * h * (f[0] + f[m])
        } else {
            let step = h / (1usize << level) as f64;
            let mids: f64 = (0..(1usize << (level - 1))).map(|j| f[stride * (2 * j + 1)]).sum();
            0.5 * table[level - 1][0] + step * mids
        };
        let mut row = vec![trap];
        let mut factor = 1.0;
        for j in 1..=level {
            factor *= 4.0;
            let prev = table[level - 1][j - 1];
            row.push(row[j - 1] + (row[j - 1] - prev) / (factor - 1.0));
        }
        table.push(row);
    }
    Ok(table[levels][levels])
}

/// Romberg integral of a function on `2^level + 1` nodes.
pub fn romberg_fn(f: impl Fn(f64) -> f64, lo: f64, hi: f64, level: u32) -> f64 {
    let values: Vec<f64> = lattice(lo, hi, (1 << level) + 1).into_iter().map(f).collect();
    romberg(&values, lo, hi).expect("lattice has 2^k + 1 nodes")
}

/// Mean integrated squared error and its square root.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mise {
    pub mise: f64,
    pub sqrt_mise: f64,
}

/// Curves are rows (country x lattice node) on the same lattice over
/// `[lo, hi]`; the integral of each row's squared error is averaged over rows.
pub fn mise(pred: &DMatrix<f64>, truth: &DMatrix<f64>, lo: f64, hi: f64) -> Result<Mise> {
    if pred.shape() != truth.shape() {
        return Err(CgctError::InvalidArgument(format!(
            "lattice mismatch: prediction {:?} vs truth {:?}",
            pred.shape(),
            truth.shape()
        )));
    }
    if pred.nrows() == 0 {
        return Err(CgctError::InvalidArgument("no curves to compare".into()));
    }
    let mut total = 0.0;
    for i in 0..pred.nrows() {
        let sq: Vec<f64> = (0..pred.ncols()).map(|j| (pred[(i, j)] - truth[(i, j)]).powi(2)).collect();
        total += romberg(&sq, lo, hi)?;
    }
    let mise = total / pred.nrows() as f64;
    Ok(Mise {
        mise,
        sqrt_mise: mise.max(0.0).sqrt(),
    })
}

pub fn rmse(pred: &[f64], obs: &[f64]) -> Result<f64> {
    if pred.is_empty() || pred.len() != obs.len() {
        return Err(CgctError::InvalidArgument(format!(
            "rmse needs equal non-empty inputs, got {} and {}",
            pred.len(),
            obs.len()
        )));
    }
    let ss: f64 = pred.iter().zip(obs).map(|(p, o)| (p - o).powi(2)).sum();
    Ok((ss / pred.len() as f64).sqrt())
}
