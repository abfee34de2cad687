//! Training pipeline: scale → (balancing autoencoder) → (counterfactual
//! augmentation) → outcome model, plus model persistence and curve prediction.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::bae::{train_bae, BaeConfig, BalancingEncoder};
use crate::baselines::{lm_recipe, AnnConfig, DrnetConfig, Regularizer};
use crate::cfgen::augment;
use crate::data::{Dataset, Scalers};
use crate::error::{CgctError, Result, Stage, StageExt};
use crate::inference::{InferenceKind, InferenceModel, InferenceSpec};
use crate::nn::OptimizerKind;
use crate::sample::Sample;

pub const MODEL_FORMAT: &str = "cgct-model";
pub const MODEL_VERSION: u32 = 1;

/// One point of the CG-CT search grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub layer_size: usize,
    pub repr_size: usize,
    pub learning_rate: f64,
    pub dropout: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub theta: f64,
    pub alpha: f64,
    pub m: usize,
}

pub const GRID_LAYER: [usize; 3] = [14, 10, 7];
pub const GRID_REPR: [usize; 3] = [10, 7, 4];
pub const GRID_LR: [f64; 3] = [1e-3, 5e-4, 1e-4];
pub const GRID_DROPOUT: [f64; 3] = [0.0, 0.1, 0.2];
pub const GRID_EPOCHS: [usize; 3] = [100, 200, 300];
pub const GRID_BATCH: [usize; 3] = [22, 11, 6];
pub const GRID_THETA: [f64; 5] = [0.05, 0.1, 0.5, 1.0, 5.0];
pub const GRID_ALPHA: [f64; 5] = [0.05, 0.1, 0.5, 1.0, 5.0];
pub const GRID_M: [usize; 3] = [3, 5, 7];
pub const GRID_ANN_LAYER: [usize; 3] = [53, 27, 14];
pub const GRID_DRNET_REPR: [usize; 3] = [22, 11, 6];
pub const GRID_LM_ORDER: [u8; 3] = [0, 1, 2];
pub const GRID_LM_LAMBDA: [f64; 5] = [0.05, 0.1, 0.5, 1.0, 5.0];
pub const DRNET_HEADS: usize = 5;

/// Chosen by validation factual MSE on a seeded sample of the grid
/// (`examples/tune_defaults.rs`).
impl Default for HyperParams {
    fn default() -> Self {
        Self {
            layer_size: 10,
            repr_size: 4,
            learning_rate: 1e-3,
            dropout: 0.2,
            epochs: 100,
            batch_size: 6,
            theta: 5.0,
            alpha: 0.05,
            m: 5,
        }
    }
}

impl HyperParams {
    /// The full CG-CT grid in a fixed order.
    pub fn grid() -> Vec<HyperParams> {
        let mut out = Vec::new();
        for &layer_size in &GRID_LAYER {
            for &repr_size in &GRID_REPR {
                for &learning_rate in &GRID_LR {
                    for &dropout in &GRID_DROPOUT {
                        for &epochs in &GRID_EPOCHS {
                            for &batch_size in &GRID_BATCH {
                                for &theta in &GRID_THETA {
                                    for &alpha in &GRID_ALPHA {
                                        for &m in &GRID_M {
                                            out.push(HyperParams {
                                                layer_size,
                                                repr_size,
                                                learning_rate,
                                                dropout,
                                                epochs,
                                                batch_size,
                                                theta,
                                                alpha,
                                                m,
                                            });
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    pub fn bae_config(&self) -> BaeConfig {
        BaeConfig {
            layer_size: self.layer_size,
            repr_size: self.repr_size,
            learning_rate: self.learning_rate,
            dropout: self.dropout,
            epochs: self.epochs,
            batch_size: self.batch_size,
            theta: self.theta,
            optimizer: OptimizerKind::Adam,
        }
    }
}

/// Stage toggles of the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AblationFlags {
    pub bae: bool,
    pub cfgen: bool,
}

impl AblationFlags {
    pub const OFF: AblationFlags = AblationFlags { bae: false, cfgen: false };
    pub const ON: AblationFlags = AblationFlags { bae: true, cfgen: true };
    pub const ALL: [AblationFlags; 4] = [
        AblationFlags::OFF,
        AblationFlags { bae: true, cfgen: false },
        AblationFlags { bae: false, cfgen: true },
        AblationFlags::ON,
    ];

    /// Row label of the ablation table.
    pub fn label(self) -> &'static str {
        match (self.bae, self.cfgen) {
            (false, false) => "Base",
            (true, false) => "BAE",
            (false, true) => "CF-GEN",
            (true, true) => "CG-CT",
        }
    }
}

/// Everything that determines a trained model apart from data and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodConfig {
    pub flags: AblationFlags,
    pub hp: HyperParams,
    pub inference: InferenceSpec,
}

/// Named methods of the benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Cgct,
    Gps,
    Lm,
    Ann,
    Drnet,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Cgct, Method::Gps, Method::Lm, Method::Ann, Method::Drnet];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Cgct => "cgct",
            Method::Gps => "gps",
            Method::Lm => "lm",
            Method::Ann => "ann",
            Method::Drnet => "drnet",
        }
    }

    /// Default configuration: CG-CT with both stages on, baselines on raw
    /// covariates.
    pub fn default_config(self) -> MethodConfig {
        match self {
            Method::Cgct => MethodConfig {
                flags: AblationFlags::ON,
                hp: HyperParams::default(),
                inference: InferenceSpec::Gps,
            },
            other => MethodConfig {
                flags: AblationFlags::OFF,
                hp: HyperParams::default(),
                inference: default_inference(other.inference_kind()),
            },
        }
    }

    pub fn inference_kind(self) -> InferenceKind {
        match self {
            Method::Cgct | Method::Gps => InferenceKind::Gps,
            Method::Lm => InferenceKind::Lm,
            Method::Ann => InferenceKind::Ann,
            Method::Drnet => InferenceKind::Drnet,
        }
    }
}

impl std::str::FromStr for Method {
    type Err = CgctError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| CgctError::InvalidArgument(format!("unknown method '{s}' (expected cgct, gps, lm, ann or drnet)")))
    }
}

/// Default settings of each outcome model.
pub fn default_inference(kind: InferenceKind) -> InferenceSpec {
    match kind {
        InferenceKind::Gps => InferenceSpec::Gps,
        InferenceKind::Lm => InferenceSpec::Lm {
            order: 1,
            regularizer: Regularizer::Ridge,
            lambda: 0.05,
        },
        InferenceKind::Ann => InferenceSpec::Ann(AnnConfig::with_layer(27, 1e-3, 0.0, 200, 11)),
        InferenceKind::Drnet => InferenceSpec::Drnet(DrnetConfig {
            layer_size: 27,
            repr_size: 11,
            heads: DRNET_HEADS,
            learning_rate: 1e-3,
            dropout: 0.0,
            epochs: 200,
            batch_size: 11,
        }),
    }
}

/// Search grid of one outcome model (GPS has no settings).
pub fn inference_grid(kind: InferenceKind) -> Vec<InferenceSpec> {
    let mut out = Vec::new();
    match kind {
        InferenceKind::Gps => out.push(InferenceSpec::Gps),
        InferenceKind::Lm => {
            out.push(InferenceSpec::Lm { order: 0, regularizer: Regularizer::None, lambda: 0.0 });
            for order in [1u8, 2] {
                for regularizer in [Regularizer::Ridge, Regularizer::Lasso] {
                    for &lambda in &GRID_LM_LAMBDA {
                        out.push(InferenceSpec::Lm { order, regularizer, lambda });
                    }
                }
            }
        }
        InferenceKind::Ann | InferenceKind::Drnet => {
            for &layer in &GRID_ANN_LAYER {
                for &lr in &GRID_LR {
                    for &dropout in &GRID_DROPOUT {
                        for &epochs in &GRID_EPOCHS {
                            for &batch in &GRID_BATCH {
                                if kind == InferenceKind::Ann {
                                    out.push(InferenceSpec::Ann(AnnConfig::with_layer(layer, lr, dropout, epochs, batch)));
                                } else {
                                    for &repr in &GRID_DRNET_REPR {
                                        out.push(InferenceSpec::Drnet(DrnetConfig {
                                            layer_size: layer,
                                            repr_size: repr,
                                            heads: DRNET_HEADS,
                                            learning_rate: lr,
                                            dropout,
                                            epochs,
                                            batch_size: batch,
                                        }));
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMetadata {
    pub seed: u64,
    pub years: Vec<i32>,
    pub data_hash: String,
    pub observed_rows: usize,
    /// Rows the outcome model was fitted on (observed plus generated).
    pub fitted_rows: usize,
    pub treatment_max_usd: f64,
    pub treatment_sd_usd: f64,
    /// Upper disbursement bound `A_max + σ̂_A` in USD millions.
    pub treatment_bound_usd: f64,
    /// The outcome model sees min-max scaled treatment; curves report USD millions.
    pub treatment_units: String,
    pub lm_recipe: Option<String>,
    pub jittered: bool,
    /// Final epoch `(L, L_x, L_a)` of the autoencoder.
    pub bae_final_loss: Option<(f64, f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CgCtModel {
    pub config: MethodConfig,
    pub scalers: Scalers,
    pub encoder: Option<BalancingEncoder>,
    pub inference: InferenceModel,
    pub metadata: ModelMetadata,
}

fn sub_seed(seed: u64, stream: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(stream.wrapping_mul(0xD1B5_4A32_D192_ED03)) ^ stream
}

/// Sample standard deviation.
pub fn sample_std(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

/// Trains the pipeline on an imputed dataset. With both flags off this is
/// the outcome model fitted directly on scaled covariates.
pub fn train_cgct(d: &Dataset, cfg: &MethodConfig, seed: u64) -> Result<CgCtModel> {
    if d.has_missing() {
        return Err(CgctError::InvalidData("dataset has missing covariates; impute first".into()).at(Stage::Data));
    }
    let scalers = Scalers::fit(d).stage(Stage::Data)?;
    let x = scalers.scale_covariates(d).stage(Stage::Data)?;
    let a = scalers.scale_treatments(d).stage(Stage::Data)?;
    let y = d.outcomes();

    let (encoder, features, bae_final_loss) = if cfg.flags.bae {
        let (enc, trace) = train_bae(&x, &a, &cfg.hp.bae_config(), seed).stage(Stage::Autoencoder)?;
        let z = enc.embed(&x).stage(Stage::Autoencoder)?;
        (Some(enc), z, trace.epochs.last().copied())
    } else {
        (None, x, None)
    };
    let sample = Sample::new(y, a, features).stage(Stage::Data)?;
    let fitted = if cfg.flags.cfgen {
        augment(&sample, cfg.hp.m, cfg.hp.alpha, sub_seed(seed, 1))
            .stage(Stage::Counterfactual)?
            .sample
    } else {
        sample
    };
    let stage = match cfg.inference.kind() {
        InferenceKind::Gps => Stage::Gps,
        _ => Stage::Baseline,
    };
    let inference = InferenceModel::fit(&cfg.inference, &fitted, sub_seed(seed, 2)).map_err(|e| e.at(stage))?;

    let usd: Vec<f64> = d.records.iter().map(|r| r.treatment_a).collect();
    let treatment_max_usd = usd.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let treatment_sd_usd = sample_std(&usd);
    let lm = match &cfg.inference {
        InferenceSpec::Lm { order, .. } => Some(lm_recipe(*order).to_string()),
        _ => None,
    };
    let metadata = ModelMetadata {
        seed,
        years: d.years(),
        data_hash: d.content_hash(),
        observed_rows: d.n(),
        fitted_rows: fitted.n(),
        treatment_max_usd,
        treatment_sd_usd,
        treatment_bound_usd: treatment_max_usd + treatment_sd_usd,
        treatment_units: "min-max scaled (training data)".into(),
        lm_recipe: lm,
        jittered: inference.jittered(),
        bae_final_loss,
    };
    Ok(CgCtModel {
        config: cfg.clone(),
        scalers,
        encoder,
        inference,
        metadata,
    })
}

/// One point of a response curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    /// USD millions.
    pub treatment: f64,
    /// Predicted outcome (fraction).
    pub prediction: f64,
    /// Dispersion across runs; 0 for a single model.
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseCurve {
    pub country_id: String,
    pub points: Vec<CurvePoint>,
}

impl ResponseCurve {
    pub fn write_csv<W: Write>(curves: &[ResponseCurve], writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["country", "treatment", "prediction", "std"])?;
        for c in curves {
            for p in &c.points {
                w.write_record([
                    c.country_id.clone(),
                    p.treatment.to_string(),
                    p.prediction.to_string(),
                    p.std.to_string(),
                ])?;
            }
        }
        w.flush().map_err(|source| CgctError::Io { path: "<writer>".into(), source })?;
        Ok(())
    }
}

impl CgCtModel {
    pub fn treatment_bound(&self) -> f64 {
        self.metadata.treatment_bound_usd
    }

    /// Representation of scaled covariates (identity when the autoencoder is off).
    pub fn features_scaled(&self, x_scaled: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        match &self.encoder {
            Some(enc) => enc.embed(x_scaled),
            None => Ok(x_scaled.clone()),
        }
    }

    /// Representation of one raw covariate row.
    pub fn features(&self, x_raw: &[f64]) -> Result<Vec<f64>> {
        let xs = self.scalers.covariates.transform(x_raw)?;
        match &self.encoder {
            Some(enc) => enc.embed_row(&xs),
            None => Ok(xs),
        }
    }

    pub fn scale_treatment(&self, a_usd: f64) -> Result<f64> {
        self.scalers.treatment.transform_scalar(a_usd)
    }

    /// Prediction for a representation row at scaled treatment.
    pub fn predict_scaled(&self, a_scaled: f64, z: &[f64]) -> Result<f64> {
        self.inference.predict(a_scaled, z)
    }

    pub fn predict_usd(&self, a_usd: f64, x_raw: &[f64]) -> Result<f64> {
        let z = self.features(x_raw)?;
        self.predict_scaled(self.scale_treatment(a_usd)?, &z)
    }

    /// `dŷ/da` per USD million.
    pub fn derivative_usd(&self, a_usd: f64, z: &[f64]) -> Result<f64> {
        let slope = self.scalers.treatment.slope_scalar()?;
        Ok(self.inference.derivative(self.scale_treatment(a_usd)?, z)? * slope)
    }

    /// Curves (rows) of scaled covariate rows on a scaled treatment grid.
    pub fn predict_lattice(&self, x_scaled: &DMatrix<f64>, grid_scaled: &[f64]) -> Result<DMatrix<f64>> {
        let z = self.features_scaled(x_scaled)?;
        let mut out = DMatrix::zeros(z.nrows(), grid_scaled.len());
        for i in 0..z.nrows() {
            let zi: Vec<f64> = z.row(i).iter().copied().collect();
            for (j, &a) in grid_scaled.iter().enumerate() {
                out[(i, j)] = self.predict_scaled(a, &zi)?;
            }
        }
        Ok(out)
    }

    /// Factual predictions for every row of a dataset.
    pub fn predict_factual(&self, d: &Dataset) -> Result<DVector<f64>> {
        let x = self.scalers.scale_covariates(d)?;
        let z = self.features_scaled(&x)?;
        let mut out = DVector::zeros(d.n());
        for (i, r) in d.records.iter().enumerate() {
            let zi: Vec<f64> = z.row(i).iter().copied().collect();
            out[i] = self.predict_scaled(self.scale_treatment(r.treatment_a)?, &zi)?;
        }
        Ok(out)
    }

    /// Curve of one unit on a USD grid inside `[0, A_max + σ̂_A]`.
    pub fn predict_curve(&self, country_id: &str, x_raw: &[f64], grid_usd: &[f64]) -> Result<ResponseCurve> {
        check_grid(grid_usd, self.treatment_bound())?;
        let z = self.features(x_raw)?;
        let points = grid_usd
            .iter()
            .map(|&a| {
                Ok(CurvePoint {
                    treatment: a,
                    prediction: self.predict_scaled(self.scale_treatment(a)?, &z)?,
                    std: 0.0,
                })
            })
            .collect::<Result<_>>()?;
        Ok(ResponseCurve {
            country_id: country_id.to_string(),
            points,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = ModelDocRef {
            format: MODEL_FORMAT,
            version: MODEL_VERSION,
            model: self,
        };
        serde_json::to_string_pretty(&doc).map_err(|e| CgctError::Corrupt(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| CgctError::Corrupt(format!("model document: {e}")))?;
        if value.get("format").and_then(|v| v.as_str()) != Some(MODEL_FORMAT) {
            return Err(CgctError::Corrupt(format!("not a {MODEL_FORMAT} document")));
        }
        let version = value.get("version").and_then(|v| v.as_u64());
        if version != Some(MODEL_VERSION as u64) {
            return Err(CgctError::Version {
                found: version.map_or(0, |v| v.min(u32::MAX as u64) as u32),
                expected: MODEL_VERSION,
            });
        }
        let model = value
            .get("model")
            .cloned()
            .ok_or_else(|| CgctError::Corrupt("model document has no 'model' field".into()))?;
        serde_json::from_value(model).map_err(|e| CgctError::Corrupt(format!("model document: {e}")))
    }
}

#[derive(Serialize)]
struct ModelDocRef<'a> {
    format: &'static str,
    version: u32,
    model: &'a CgCtModel,
}

/// Grid must be strictly increasing and inside `[0, bound]`.
pub fn check_grid(grid: &[f64], bound: f64) -> Result<()> {
    if grid.is_empty() {
        return Err(CgctError::InvalidArgument("empty treatment grid".into()));
    }
    if let Some(&bad) = grid.iter().find(|&&a| !(0.0..=bound).contains(&a)) {
        return Err(CgctError::OutOfRange(format!(
            "treatment {bad} outside [0, {bound}] USD millions"
        )));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(CgctError::InvalidArgument("treatment grid must be strictly increasing".into()));
    }
    Ok(())
}

pub fn save_model(m: &CgCtModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, m.to_json()?).map_err(|source| CgctError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_model(path: impl AsRef<Path>) -> Result<CgCtModel> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| CgctError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    CgCtModel::from_json(&text).stage(Stage::Persistence)
}

/// Mean and sample std of several models' curves for one unit.
pub fn ensemble_curve(models: &[CgCtModel], country_id: &str, x_raw: &[f64], grid_usd: &[f64]) -> Result<ResponseCurve> {
    if models.is_empty() {
        return Err(CgctError::InvalidArgument("no models".into()));
    }
    let curves = models
        .iter()
        .map(|m| m.predict_curve(country_id, x_raw, grid_usd))
        .collect::<Result<Vec<_>>>()?;
    let points = (0..grid_usd.len())
        .map(|j| {
            let v: Vec<f64> = curves.iter().map(|c| c.points[j].prediction).collect();
            CurvePoint {
                treatment: grid_usd[j],
                prediction: v.iter().sum::<f64>() / v.len() as f64,
                std: sample_std(&v),
            }
        })
        .collect();
    Ok(ResponseCurve {
        country_id: country_id.to_string(),
        points,
    })
}
