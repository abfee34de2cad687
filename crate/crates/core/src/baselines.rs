//! Reference estimators: polynomial linear models, a feed-forward regressor
//! on `[a, x]`, and a DRNet-style network with one head per dosage stratum.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CgctError, Result};
use crate::linalg::{ols, ridge};
use crate::nn::{gather_rows, minibatches, Activation, AdamState, DenseGrads, DenseNet, ForwardCache, Mode};
use crate::sample::Sample;

pub const LASSO_TOL: f64 = 1e-8;
const LASSO_MAX_SWEEPS: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regularizer {
    None,
    Ridge,
    Lasso,
}

/// Linear model on a fixed feature recipe:
/// order 0 `[1]`, order 1 `[1, a, x]`, order 2 `[1, a, a², x, x², a·x]`.
///
/// Ridge minimizes `||y - Fβ||² + λ||β_{1..}||²`; lasso minimizes
/// `(1/2n)||y - Fβ||² + λ||β_{1..}||₁`. The intercept is never penalized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearBaseline {
    pub order: u8,
    pub regularizer: Regularizer,
    pub lambda: f64,
    pub coef: Vec<f64>,
    pub recipe: String,
    #[serde(default)]
    pub jittered: bool,
}

pub fn lm_recipe(order: u8) -> &'static str {
    match order {
        0 => "[1]",
        1 => "[1, a, x]",
        _ => "[1, a, a^2, x, x^2, a*x]",
    }
}

/// Feature row for treatment `a` and covariates `x`.
pub fn lm_features(order: u8, a: f64, x: &[f64]) -> Vec<f64> {
    let mut f = vec![1.0];
    if order >= 1 {
        f.push(a);
        if order >= 2 {
            f.push(a * a);
        }
        f.extend_from_slice(x);
        if order >= 2 {
            f.extend(x.iter().map(|v| v * v));
            f.extend(x.iter().map(|v| a * v));
        }
    }
    f
}

pub fn lm_design(order: u8, s: &Sample) -> DMatrix<f64> {
    let rows: Vec<Vec<f64>> = (0..s.n())
        .map(|i| {
            let x: Vec<f64> = s.features.row(i).iter().copied().collect();
            lm_features(order, s.a[i], &x)
        })
        .collect();
    let k = lm_features(order, 0.0, &vec![0.0; s.dims()]).len();
    DMatrix::from_fn(s.n(), k, |i, j| rows[i][j])
}

pub fn fit_lm(s: &Sample, order: u8, regularizer: Regularizer, lambda: f64) -> Result<LinearBaseline> {
    if order > 2 {
        return Err(CgctError::InvalidArgument(format!("LM order {order} not in {{0,1,2}}")));
    }
    if !(lambda >= 0.0) {
        return Err(CgctError::InvalidArgument(format!("lambda {lambda} must be >= 0")));
    }
    if s.n() == 0 {
        return Err(CgctError::InvalidArgument("LM needs at least one row".into()));
    }
    let f = lm_design(order, s);
    let (coef, jittered) = match regularizer {
        Regularizer::None => {
            let fit = ols(&f, &s.y)?;
            (fit.coef, fit.jittered)
        }
        Regularizer::Ridge => {
            let mut pen = DVector::from_element(f.ncols(), lambda);
            pen[0] = 0.0;
            (ridge(&f, &s.y, &pen)?, false)
        }
        Regularizer::Lasso => (lasso_cd(&f, &s.y, lambda)?, false),
    };
    if coef.iter().any(|c| !c.is_finite()) {
        return Err(CgctError::NonFinite("LM coefficients".into()));
    }
    Ok(LinearBaseline {
        order,
        regularizer,
        lambda,
        coef: coef.iter().copied().collect(),
        recipe: lm_recipe(order).to_string(),
        jittered,
    })
}

/// Cyclic coordinate descent; column 0 is the unpenalized intercept.
pub fn lasso_cd(f: &DMatrix<f64>, y: &DVector<f64>, lambda: f64) -> Result<DVector<f64>> {
    let (n, k) = f.shape();
    let nf = n as f64;
    let norms: Vec<f64> = (0..k).map(|j| f.column(j).norm_squared() / nf).collect();
    let mut beta: DVector<f64> = DVector::zeros(k);
    let mut resid = y.clone();
    for _ in 0..LASSO_MAX_SWEEPS {
        let mut max_delta: f64 = 0.0;
        for j in 0..k {
            if norms[j] == 0.0 {
                continue;
            }
            let col = f.column(j);
            let rho: f64 = col.dot(&resid) / nf + norms[j] * beta[j];
            let new = if j == 0 {
                rho / norms[j]
            } else {
                rho.signum() * (rho.abs() - lambda).max(0.0) / norms[j]
            };
            let delta = new - beta[j];
            if delta != 0.0 {
                resid.axpy(-delta, &col, 1.0);
                beta[j] = new;
                max_delta = max_delta.max(delta.abs());
            }
        }
        if max_delta < LASSO_TOL {
            return Ok(beta);
        }
    }
    Err(CgctError::NoConvergence {
        iterations: LASSO_MAX_SWEEPS,
        residual: f64::NAN,
    })
}

impl LinearBaseline {
    pub fn predict(&self, a: f64, x: &[f64]) -> f64 {
        lm_features(self.order, a, x)
            .iter()
            .zip(&self.coef)
            .map(|(f, c)| f * c)
            .sum()
    }

    pub fn derivative(&self, a: f64, x: &[f64]) -> f64 {
        match self.order {
            0 => 0.0,
            1 => self.coef[1],
            _ => {
                let p = x.len();
                let inter = &self.coef[3 + 2 * p..3 + 3 * p];
                self.coef[1] + 2.0 * self.coef[2] * a + inter.iter().zip(x).map(|(c, v)| c * v).sum::<f64>()
            }
        }
    }
}

/// Network training settings shared by the ANN and DRNet baselines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnConfig {
    /// Hidden layer widths; input `[a, x]` and the scalar output are implied.
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub dropout: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl AnnConfig {
    /// Two hidden layers of `layer_size`.
    pub fn with_layer(layer_size: usize, learning_rate: f64, dropout: f64, epochs: usize, batch_size: usize) -> Self {
        Self {
            hidden: vec![layer_size, layer_size],
            learning_rate,
            dropout,
            epochs,
            batch_size,
        }
    }
}

fn net_inputs(s: &Sample) -> DMatrix<f64> {
    let mut x = DMatrix::zeros(s.n(), s.dims() + 1);
    x.set_column(0, &s.a);
    x.view_mut((0, 1), (s.n(), s.dims())).copy_from(&s.features);
    x
}

fn input_row(a: f64, x: &[f64]) -> DMatrix<f64> {
    let mut v = Vec::with_capacity(x.len() + 1);
    v.push(a);
    v.extend_from_slice(x);
    DMatrix::from_row_slice(1, v.len(), &v)
}

fn mse_upstream(pred: &DMatrix<f64>, y: &DVector<f64>) -> (f64, DMatrix<f64>) {
    let b = y.len() as f64;
    let diff = DMatrix::from_fn(y.len(), 1, |i, _| pred[(i, 0)] - y[i]);
    (diff.norm_squared() / b, diff * (2.0 / b))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnModel {
    pub net: DenseNet,
}

impl AnnModel {
    pub fn init(inputs: usize, cfg: &AnnConfig, seed: u64) -> Result<(Self, ChaCha8Rng)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dims = vec![inputs + 1];
        dims.extend(&cfg.hidden);
        dims.push(1);
        let net = DenseNet::mlp_with_rng(&dims, cfg.dropout, seed, &mut rng)?;
        Ok((Self { net }, rng))
    }

    pub fn predict(&self, a: f64, x: &[f64]) -> Result<f64> {
        Ok(self.net.predict(&input_row(a, x))?[(0, 0)])
    }

    pub fn derivative(&self, a: f64, x: &[f64]) -> Result<f64> {
        let (_, cache) = self.net.forward(&input_row(a, x), Mode::Inference)?;
        let (_, dx) = self.net.backward(&cache, &DMatrix::from_element(1, 1, 1.0))?;
        Ok(dx[(0, 0)])
    }

    /// Mean squared error on `s` and its parameter gradient (inference mode).
    pub fn mse_gradients(&self, s: &Sample) -> Result<(f64, DenseGrads)> {
        let (pred, cache) = self.net.forward(&net_inputs(s), Mode::Inference)?;
        let (loss, up) = mse_upstream(&pred, &s.y);
        Ok((loss, self.net.backward(&cache, &up)?.0))
    }
}

/// MLP on `[a, x]` trained with Adam on the factual MSE.
pub fn fit_ann(s: &Sample, cfg: &AnnConfig, seed: u64) -> Result<AnnModel> {
    let (mut model, mut rng) = AnnModel::init(s.dims(), cfg, seed)?;
    let x = net_inputs(s);
    let mut adam = AdamState::new(&model.net, cfg.learning_rate);
    for _ in 0..cfg.epochs {
        for idx in minibatches(s.n(), cfg.batch_size, &mut rng) {
            let xb = gather_rows(&x, &idx);
            let yb = DVector::from_iterator(idx.len(), idx.iter().map(|&i| s.y[i]));
            let (pred, cache) = model.net.forward(&xb, Mode::Train(&mut rng))?;
            let (loss, up) = mse_upstream(&pred, &yb);
            if !loss.is_finite() {
                return Err(CgctError::NonFinite("ANN training loss".into()));
            }
            let (grads, _) = model.net.backward(&cache, &up)?;
            adam.step(&mut model.net, &grads)?;
        }
    }
    Ok(model)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrnetConfig {
    pub layer_size: usize,
    pub repr_size: usize,
    pub heads: usize,
    pub learning_rate: f64,
    pub dropout: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

/// Shared `[a, x] -> L -> R` trunk (ReLU throughout) feeding one
/// `R -> L -> 1` head per dosage stratum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrnetModel {
    pub shared: DenseNet,
    pub heads: Vec<DenseNet>,
    /// `heads + 1` edges spanning the training treatment range.
    pub edges: Vec<f64>,
}

/// Equal-width stratum edges over `[lo, hi]`.
pub fn stratum_edges(lo: f64, hi: f64, strata: usize) -> Vec<f64> {
    (0..=strata)
        .map(|k| {
            if k == strata {
                hi
            } else {
                lo + (hi - lo) * k as f64 / strata as f64
            }
        })
        .collect()
}

/// Half-open strata `[e_k, e_{k+1})`, the last closed; values outside the
/// range go to the nearest end stratum.
pub fn route(edges: &[f64], a: f64) -> usize {
    let e = edges.len() - 1;
    (1..e).take_while(|&k| a >= edges[k]).count()
}

struct DrnetPass {
    shared_cache: ForwardCache,
    mask: Option<DMatrix<f64>>,
    groups: Vec<(usize, Vec<usize>, ForwardCache)>,
    pred: DMatrix<f64>,
}

impl DrnetModel {
    pub fn init(inputs: usize, cfg: &DrnetConfig, lo: f64, hi: f64, seed: u64) -> Result<(Self, ChaCha8Rng)> {
        if cfg.heads == 0 {
            return Err(CgctError::InvalidArgument("DRNet needs at least one head".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut shared =
            DenseNet::mlp_with_rng(&[inputs + 1, cfg.layer_size, cfg.repr_size], cfg.dropout, seed, &mut rng)?;
        let last = shared.layers.len() - 1;
        shared.layers[last].activation = Activation::Relu;
        let heads = (0..cfg.heads)
            .map(|_| DenseNet::mlp_with_rng(&[cfg.repr_size, cfg.layer_size, 1], cfg.dropout, seed, &mut rng))
            .collect::<Result<_>>()?;
        Ok((
            Self {
                shared,
                heads,
                edges: stratum_edges(lo, hi, cfg.heads),
            },
            rng,
        ))
    }

    fn pass(&self, x: &DMatrix<f64>, a: &[f64], mut rng: Option<&mut ChaCha8Rng>) -> Result<DrnetPass> {
        let (mut h, shared_cache) = match rng.as_deref_mut() {
            Some(r) => self.shared.forward(x, Mode::Train(r))?,
            None => self.shared.forward(x, Mode::Inference)?,
        };
        // The trunk output is a hidden layer of the full network, so it gets
        // dropout like any other.
        let keep = 1.0 - self.shared.dropout_rate;
        let mask = match rng.as_deref_mut() {
            Some(r) if self.shared.dropout_rate > 0.0 => {
                let m = DMatrix::from_fn(h.nrows(), h.ncols(), |_, _| {
                    if r.random::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                });
                h.component_mul_assign(&m);
                Some(m)
            }
            _ => None,
        };
        let mut pred = DMatrix::zeros(x.nrows(), 1);
        let mut groups = Vec::new();
        for (k, head) in self.heads.iter().enumerate() {
            let idx: Vec<usize> = (0..a.len()).filter(|&i| route(&self.edges, a[i]) == k).collect();
            if idx.is_empty() {
                continue;
            }
            let hb = gather_rows(&h, &idx);
            let (out, cache) = match rng.as_deref_mut() {
                Some(r) => head.forward(&hb, Mode::Train(r))?,
                None => head.forward(&hb, Mode::Inference)?,
            };
            for (row, &i) in idx.iter().enumerate() {
                pred[(i, 0)] = out[(row, 0)];
            }
            groups.push((k, idx, cache));
        }
        Ok(DrnetPass {
            shared_cache,
            mask,
            groups,
            pred,
        })
    }

    fn backprop(&self, pass: &DrnetPass, up: &DMatrix<f64>) -> Result<(DenseGrads, Vec<DenseGrads>)> {
        let mut head_grads: Vec<DenseGrads> = self.heads.iter().map(DenseGrads::zeros_like).collect();
        let mut dh = DMatrix::zeros(up.nrows(), self.shared.output_dim());
        for (k, idx, cache) in &pass.groups {
            let (g, dx) = self.heads[*k].backward(cache, &gather_rows(up, idx))?;
            head_grads[*k] = g;
            for (row, &i) in idx.iter().enumerate() {
                dh.row_mut(i).copy_from(&dx.row(row));
            }
        }
        if let Some(m) = &pass.mask {
            dh.component_mul_assign(m);
        }
        let (shared_grads, _) = self.shared.backward(&pass.shared_cache, &dh)?;
        Ok((shared_grads, head_grads))
    }

    pub fn predict(&self, a: f64, x: &[f64]) -> Result<f64> {
        Ok(self.pass(&input_row(a, x), &[a], None)?.pred[(0, 0)])
    }

    pub fn derivative(&self, a: f64, x: &[f64]) -> Result<f64> {
        let row = input_row(a, x);
        let pass = self.pass(&row, &[a], None)?;
        let k = pass.groups[0].0;
        let (_, dh) = self.heads[k].backward(&pass.groups[0].2, &DMatrix::from_element(1, 1, 1.0))?;
        let (_, dx) = self.shared.backward(&pass.shared_cache, &dh)?;
        Ok(dx[(0, 0)])
    }

    /// Mean squared error on `s` and its gradients (inference mode).
    pub fn mse_gradients(&self, s: &Sample) -> Result<(f64, DenseGrads, Vec<DenseGrads>)> {
        let a: Vec<f64> = s.a.iter().copied().collect();
        let pass = self.pass(&net_inputs(s), &a, None)?;
        let (loss, up) = mse_upstream(&pass.pred, &s.y);
        let (gs, gh) = self.backprop(&pass, &up)?;
        Ok((loss, gs, gh))
    }
}

/// Joint training of trunk and heads on the factual MSE; each row updates
/// only the head of its stratum. Strata are fixed from the training range.
pub fn fit_drnet(s: &Sample, cfg: &DrnetConfig, seed: u64) -> Result<DrnetModel> {
    let (lo, hi) = s.treatment_range();
    let (mut model, mut rng) = DrnetModel::init(s.dims(), cfg, lo, hi, seed)?;
    for k in 0..cfg.heads {
        if !s.a.iter().any(|&a| route(&model.edges, a) == k) {
            log::warn!("dosage stratum {k} is empty; its head keeps the initial weights");
        }
    }
    let x = net_inputs(s);
    let mut adam_shared = AdamState::new(&model.shared, cfg.learning_rate);
    let mut adam_heads: Vec<AdamState> = model.heads.iter().map(|h| AdamState::new(h, cfg.learning_rate)).collect();
    for _ in 0..cfg.epochs {
        for idx in minibatches(s.n(), cfg.batch_size, &mut rng) {
            let xb = gather_rows(&x, &idx);
            let ab: Vec<f64> = idx.iter().map(|&i| s.a[i]).collect();
            let yb = DVector::from_iterator(idx.len(), idx.iter().map(|&i| s.y[i]));
            let pass = model.pass(&xb, &ab, Some(&mut rng))?;
            let (loss, up) = mse_upstream(&pass.pred, &yb);
            if !loss.is_finite() {
                return Err(CgctError::NonFinite("DRNet training loss".into()));
            }
            let (gs, gh) = model.backprop(&pass, &up)?;
            adam_shared.step(&mut model.shared, &gs)?;
            for (k, _, _) in &pass.groups {
                adam_heads[*k].step(&mut model.heads[*k], &gh[*k])?;
            }
        }
    }
    Ok(model)
}
