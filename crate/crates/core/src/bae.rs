//! Balancing autoencoder: a low-dimensional covariate representation that
//! reconstructs the covariates while being adversarially non-predictive of
//! the treatment.
//!
//! Loss: `L = L_x - theta * L_a` with `L_x` the per-dimension reconstruction
//! MSE and `L_a` the treatment-prediction MSE. The encoder descends
//! `g1 - theta * g2` (gradient reversal), the decoder descends `g3` and the
//! treatment head descends `theta * g4`.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CgctError, Result};
use crate::nn::{gather_rows, grl_scale, minibatches, DenseGrads, DenseNet, Mode, Optimizer, OptimizerKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalancingEncoder {
    /// phi: p -> hidden -> r
    pub encoder: DenseNet,
    /// g_x: r -> hidden -> p
    pub decoder: DenseNet,
    /// g_a: r -> hidden -> 1
    pub head: DenseNet,
    pub theta: f64,
    pub repr_size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaeConfig {
    pub layer_size: usize,
    pub repr_size: usize,
    pub learning_rate: f64,
    pub dropout: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub theta: f64,
    #[serde(default)]
    pub optimizer: OptimizerKind,
}

/// The three loss values of one batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaeLoss {
    pub total: f64,
    pub reconstruction: f64,
    pub treatment: f64,
}

/// Gradients of one batch, already combined into update directions.
#[derive(Debug, Clone)]
pub struct BaeGradients {
    pub loss: BaeLoss,
    /// `g1 - theta * g2`
    pub encoder: DenseGrads,
    /// `g3`
    pub decoder: DenseGrads,
    /// `g4` (unscaled; the update multiplies by theta)
    pub head: DenseGrads,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingTrace {
    /// Mean batch loss per epoch: (L, L_x, L_a).
    pub epochs: Vec<(f64, f64, f64)>,
}

impl BalancingEncoder {
    pub fn new(inputs: usize, cfg: &BaeConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::with_rng(inputs, cfg, seed, &mut rng)
    }

    fn with_rng(inputs: usize, cfg: &BaeConfig, seed: u64, rng: &mut ChaCha8Rng) -> Result<Self> {
        if cfg.repr_size == 0 || cfg.repr_size >= inputs {
            return Err(CgctError::InvalidArgument(format!(
                "representation size {} must satisfy 0 < r < p = {inputs}",
                cfg.repr_size
            )));
        }
        if !(cfg.theta > 0.0) {
            return Err(CgctError::InvalidArgument("theta must be positive".into()));
        }
        let (h, r) = (cfg.layer_size, cfg.repr_size);
        Ok(Self {
            encoder: DenseNet::mlp_with_rng(&[inputs, h, r], cfg.dropout, seed, rng)?,
            decoder: DenseNet::mlp_with_rng(&[r, h, inputs], cfg.dropout, seed, rng)?,
            head: DenseNet::mlp_with_rng(&[r, h, 1], cfg.dropout, seed, rng)?,
            theta: cfg.theta,
            repr_size: r,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    /// `Z = phi(X)` row-wise, inference mode.
    pub fn embed(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.input_dim() {
            return Err(CgctError::DimensionMismatch {
                expected: self.input_dim(),
                got: x.ncols(),
            });
        }
        if x.nrows() == 0 {
            return Ok(DMatrix::zeros(0, self.repr_size));
        }
        self.encoder.predict(x)
    }

    pub fn embed_row(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.encoder.predict_row(x)
    }

    pub fn decode(&self, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.decoder.predict(z)
    }

    pub fn predict_treatment(&self, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.head.predict(z)
    }

    /// Loss on a batch in inference mode.
    pub fn loss(&self, x: &DMatrix<f64>, a: &DVector<f64>) -> Result<BaeLoss> {
        let z = self.embed(x)?;
        let x_hat = self.decode(&z)?;
        let a_hat = self.predict_treatment(&z)?;
        Ok(bae_loss(x, &x_hat, a, &a_hat.column(0).into_owned(), self.theta))
    }

    /// Forward and backward pass over one batch.
    pub fn gradients(
        &self,
        x: &DMatrix<f64>,
        a: &DVector<f64>,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<BaeGradients> {
        let b = x.nrows();
        if b == 0 || a.len() != b {
            return Err(CgctError::InvalidArgument("empty or misaligned batch".into()));
        }
        let p = x.ncols() as f64;
        let (z, enc_cache, x_hat, dec_cache, a_hat, head_cache) = match rng {
            Some(rng) => {
                let (z, ec) = self.encoder.forward(x, Mode::Train(rng))?;
                let (xh, dc) = self.decoder.forward(&z, Mode::Train(rng))?;
                let (ah, hc) = self.head.forward(&z, Mode::Train(rng))?;
                (z, ec, xh, dc, ah, hc)
            }
            None => {
                let (z, ec) = self.encoder.forward(x, Mode::Inference)?;
                let (xh, dc) = self.decoder.forward(&z, Mode::Inference)?;
                let (ah, hc) = self.head.forward(&z, Mode::Inference)?;
                (z, ec, xh, dc, ah, hc)
            }
        };
        let _ = z;
        let a_hat_v = a_hat.column(0).into_owned();
        let loss = bae_loss(x, &x_hat, a, &a_hat_v, self.theta);
        if !loss.total.is_finite() {
            return Err(CgctError::NonFinite(format!(
                "autoencoder loss (L_x={}, L_a={})",
                loss.reconstruction, loss.treatment
            )));
        }
        let d_xhat = (&x_hat - x) * (2.0 / (b as f64 * p));
        let d_ahat = DMatrix::from_fn(b, 1, |i, _| 2.0 * (a_hat_v[i] - a[i]) / b as f64);
        let (g3, dz_x) = self.decoder.backward(&dec_cache, &d_xhat)?;
        let (g4, dz_a) = self.head.backward(&head_cache, &d_ahat)?;
        let upstream = dz_x + grl_scale(&dz_a, self.theta);
        let (g_enc, _) = self.encoder.backward(&enc_cache, &upstream)?;
        Ok(BaeGradients {
            loss,
            encoder: g_enc,
            decoder: g3,
            head: g4,
        })
    }
}

/// `L_x = mean_i (1/p)||x_i - x̂_i||²`, `L_a = mean_i (a_i - â_i)²`,
/// `L = L_x - theta * L_a`.
pub fn bae_loss(
    x: &DMatrix<f64>,
    x_hat: &DMatrix<f64>,
    a: &DVector<f64>,
    a_hat: &DVector<f64>,
    theta: f64,
) -> BaeLoss {
    let n = x.nrows() as f64;
    let p = x.ncols() as f64;
    let reconstruction = (x - x_hat).norm_squared() / (n * p);
    let treatment = (a - a_hat).norm_squared() / n;
    BaeLoss {
        total: reconstruction - theta * treatment,
        reconstruction,
        treatment,
    }
}

/// Trains the balancing autoencoder on scaled covariates `x` (n x p) and
/// scaled treatments `a`.
pub fn train_bae(
    x: &DMatrix<f64>,
    a: &DVector<f64>,
    cfg: &BaeConfig,
    seed: u64,
) -> Result<(BalancingEncoder, TrainingTrace)> {
    if x.nrows() == 0 || x.nrows() != a.len() {
        return Err(CgctError::InvalidArgument(
            "autoencoder training needs aligned, non-empty x and a".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = BalancingEncoder::with_rng(x.ncols(), cfg, seed, &mut rng)?;
    let mut opt_enc = Optimizer::new(cfg.optimizer, &model.encoder, cfg.learning_rate);
    let mut opt_dec = Optimizer::new(cfg.optimizer, &model.decoder, cfg.learning_rate);
    let mut opt_head = Optimizer::new(cfg.optimizer, &model.head, cfg.learning_rate);
    let mut trace = TrainingTrace::default();
    for _ in 0..cfg.epochs {
        let mut sums = (0.0, 0.0, 0.0);
        let batches = minibatches(x.nrows(), cfg.batch_size, &mut rng);
        for idx in &batches {
            let xb = gather_rows(x, idx);
            let ab = DVector::from_iterator(idx.len(), idx.iter().map(|&i| a[i]));
            let g = model.gradients(&xb, &ab, Some(&mut rng))?;
            opt_enc.step(&mut model.encoder, &g.encoder)?;
            opt_dec.step(&mut model.decoder, &g.decoder)?;
            opt_head.step(&mut model.head, &g.head.scaled(model.theta))?;
            sums.0 += g.loss.total;
            sums.1 += g.loss.reconstruction;
            sums.2 += g.loss.treatment;
        }
        let k = batches.len() as f64;
        trace.epochs.push((sums.0 / k, sums.1 / k, sums.2 / k));
    }
    Ok((model, trace))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> BaeConfig {
        BaeConfig {
            layer_size: 6,
            repr_size: 2,
            learning_rate: 1e-3,
            dropout: 0.0,
            epochs: 5,
            batch_size: 4,
            theta: 0.5,
            optimizer: OptimizerKind::Adam,
        }
    }

    #[test]
    fn loss_examples() {
        let x = DMatrix::from_row_slice(1, 2, &[0.2, 0.4]);
        let a = DVector::from_vec(vec![0.3]);
        let l = bae_loss(&x, &x, &a, &a, 1.0);
        assert_eq!((l.total, l.reconstruction, l.treatment), (0.0, 0.0, 0.0));
        let x_hat = x.add_scalar(1.0);
        let l = bae_loss(&x, &x_hat, &a, &a, 0.7);
        assert!((l.reconstruction - 1.0).abs() < 1e-15);
        assert_eq!(l.treatment, 0.0);
        assert!((l.total - 1.0).abs() < 1e-15);
    }

    #[test]
    fn repr_must_be_smaller_than_inputs() {
        let mut c = cfg();
        c.repr_size = 3;
        assert!(BalancingEncoder::new(3, &c, 0).is_err());
        assert!(BalancingEncoder::new(4, &c, 0).is_ok());
    }

    #[test]
    fn embed_empty_and_identical_rows() {
        let m = BalancingEncoder::new(4, &cfg(), 1).unwrap();
        assert_eq!(m.embed(&DMatrix::zeros(0, 4)).unwrap().shape(), (0, 2));
        let x = DMatrix::from_row_slice(2, 4, &[0.1, 0.2, 0.3, 0.4, 0.1, 0.2, 0.3, 0.4]);
        let z = m.embed(&x).unwrap();
        assert_eq!(z.row(0), z.row(1));
        assert!(m.embed(&DMatrix::zeros(1, 3)).is_err());
    }

    #[test]
    fn training_is_deterministic() {
        let x = DMatrix::from_fn(12, 4, |i, j| ((i * 7 + j * 3) % 11) as f64 / 10.0);
        let a = DVector::from_fn(12, |i, _| (i % 5) as f64 / 4.0);
        let (m1, _) = train_bae(&x, &a, &cfg(), 42).unwrap();
        let (m2, _) = train_bae(&x, &a, &cfg(), 42).unwrap();
        assert_eq!(
            serde_json::to_string(&m1).unwrap(),
            serde_json::to_string(&m2).unwrap()
        );
    }
}
