//! Network helpers shared by the gradient and update checks.

#![allow(clippy::needless_range_loop)]

use cgct::bae::BalancingEncoder;
use cgct::nn::DenseNet;
use nalgebra::{DMatrix, DVector};
use rand::Rng;

/// Random weights and biases, so no pre-activation sits exactly on a ReLU
/// kink (zero-initialized biases put dead-unit outputs there).
pub fn randomize(net: &mut DenseNet, rng: &mut rand_chacha::ChaCha8Rng) {
    let p: Vec<f64> = (0..net.parameter_count()).map(|_| rng.random_range(-1.0..1.0)).collect();
    net.set_flat_params(&p).unwrap();
}

/// Forward-mode dual number for exact first derivatives.
#[derive(Clone, Copy, Debug)]
pub struct Dual(pub f64, pub f64);

impl Dual {
    pub fn c(v: f64) -> Self {
        Dual(v, 0.0)
    }
    pub fn add(self, o: Dual) -> Dual {
        Dual(self.0 + o.0, self.1 + o.1)
    }
    pub fn sub(self, o: Dual) -> Dual {
        Dual(self.0 - o.0, self.1 - o.1)
    }
    pub fn mul(self, o: Dual) -> Dual {
        Dual(self.0 * o.0, self.0 * o.1 + self.1 * o.0)
    }
    pub fn relu(self) -> Dual {
        if self.0 > 0.0 { self } else { Dual(0.0, 0.0) }
    }
}

/// ReLU hidden layers, linear output; `seed` marks one parameter as the
/// differentiation variable.
pub fn dual_forward(net: &DenseNet, x: &[Dual], seed: Option<usize>) -> Vec<Dual> {
    let mut idx = 0usize;
    let mut h = x.to_vec();
    let last = net.layers.len() - 1;
    let param = |v: f64, idx: &mut usize| {
        let d = if Some(*idx) == seed { Dual(v, 1.0) } else { Dual::c(v) };
        *idx += 1;
        d
    };
    for (li, l) in net.layers.iter().enumerate() {
        // Flat layout: weights column-major, then bias.
        let mut w = vec![vec![Dual::c(0.0); l.inputs()]; l.outputs()];
        for c in 0..l.inputs() {
            for r in 0..l.outputs() {
                w[r][c] = param(l.weights[(r, c)], &mut idx);
            }
        }
        let b: Vec<Dual> = (0..l.outputs()).map(|r| param(l.bias[r], &mut idx)).collect();
        h = (0..l.outputs())
            .map(|r| {
                let s = (0..l.inputs()).fold(b[r], |acc, c| acc.add(w[r][c].mul(h[c])));
                if li == last { s } else { s.relu() }
            })
            .collect();
    }
    h
}

/// `(L_x, L_a)` with one encoder, decoder or head parameter as the variable.
pub fn dual_losses(m: &BalancingEncoder, x: &DMatrix<f64>, a: &DVector<f64>, which: usize, seed: usize) -> (Dual, Dual) {
    let n = x.nrows();
    let p = x.ncols();
    let (mut lx, mut la) = (Dual::c(0.0), Dual::c(0.0));
    for i in 0..n {
        let xi: Vec<Dual> = (0..p).map(|j| Dual::c(x[(i, j)])).collect();
        let z = dual_forward(&m.encoder, &xi, (which == 0).then_some(seed));
        let xh = dual_forward(&m.decoder, &z, (which == 1).then_some(seed));
        let ah = dual_forward(&m.head, &z, (which == 2).then_some(seed));
        for j in 0..p {
            let d = xi[j].sub(xh[j]);
            lx = lx.add(d.mul(d).mul(Dual::c(1.0 / (n * p) as f64)));
        }
        let d = Dual::c(a[i]).sub(ah[0]);
        la = la.add(d.mul(d).mul(Dual::c(1.0 / n as f64)));
    }
    (lx, la)
}
