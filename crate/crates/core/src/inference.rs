//! Common interface over the outcome models that can sit at the end of the
//! pipeline: GPS, linear models, ANN and DRNet.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::baselines::{fit_ann, fit_drnet, fit_lm, AnnConfig, AnnModel, DrnetConfig, DrnetModel, LinearBaseline, Regularizer};
use crate::error::{CgctError, Result};
use crate::gps::GpsModel;
use crate::sample::Sample;

/// Which outcome model to fit, with its settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum InferenceSpec {
    Gps,
    Lm {
        order: u8,
        regularizer: Regularizer,
        lambda: f64,
    },
    Ann(AnnConfig),
    Drnet(DrnetConfig),
}

/// Estimator names accepted on the command line and in configs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InferenceKind {
    Gps,
    Lm,
    Ann,
    Drnet,
}

impl InferenceKind {
    pub const ALL: [InferenceKind; 4] = [InferenceKind::Drnet, InferenceKind::Ann, InferenceKind::Lm, InferenceKind::Gps];

    pub fn as_str(self) -> &'static str {
        match self {
            InferenceKind::Gps => "gps",
            InferenceKind::Lm => "lm",
            InferenceKind::Ann => "ann",
            InferenceKind::Drnet => "drnet",
        }
    }
}

impl fmt::Display for InferenceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for InferenceKind {
    type Err = CgctError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gps" => Ok(InferenceKind::Gps),
            "lm" => Ok(InferenceKind::Lm),
            "ann" => Ok(InferenceKind::Ann),
            "drnet" => Ok(InferenceKind::Drnet),
            other => Err(CgctError::InvalidArgument(format!("unknown inference model '{other}'"))),
        }
    }
}

impl InferenceSpec {
    pub fn kind(&self) -> InferenceKind {
        match self {
            InferenceSpec::Gps => InferenceKind::Gps,
            InferenceSpec::Lm { .. } => InferenceKind::Lm,
            InferenceSpec::Ann(_) => InferenceKind::Ann,
            InferenceSpec::Drnet(_) => InferenceKind::Drnet,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum InferenceModel {
    Gps(GpsModel),
    Lm(LinearBaseline),
    Ann(AnnModel),
    Drnet(DrnetModel),
}

impl InferenceModel {
    pub fn fit(spec: &InferenceSpec, s: &Sample, seed: u64) -> Result<Self> {
        Ok(match spec {
            InferenceSpec::Gps => InferenceModel::Gps(GpsModel::fit(s)?),
            InferenceSpec::Lm {
                order,
                regularizer,
                lambda,
            } => InferenceModel::Lm(fit_lm(s, *order, *regularizer, *lambda)?),
            InferenceSpec::Ann(cfg) => InferenceModel::Ann(fit_ann(s, cfg, seed)?),
            InferenceSpec::Drnet(cfg) => InferenceModel::Drnet(fit_drnet(s, cfg, seed)?),
        })
    }

    pub fn kind(&self) -> InferenceKind {
        match self {
            InferenceModel::Gps(_) => InferenceKind::Gps,
            InferenceModel::Lm(_) => InferenceKind::Lm,
            InferenceModel::Ann(_) => InferenceKind::Ann,
            InferenceModel::Drnet(_) => InferenceKind::Drnet,
        }
    }

    /// Predicted outcome at scaled treatment `a` for feature row `z`.
    pub fn predict(&self, a: f64, z: &[f64]) -> Result<f64> {
        match self {
            InferenceModel::Gps(m) => Ok(m.predict(a, z)),
            InferenceModel::Lm(m) => Ok(m.predict(a, z)),
            InferenceModel::Ann(m) => m.predict(a, z),
            InferenceModel::Drnet(m) => m.predict(a, z),
        }
    }

    /// `dŷ/da` in scaled treatment units.
    pub fn derivative(&self, a: f64, z: &[f64]) -> Result<f64> {
        match self {
            InferenceModel::Gps(m) => Ok(m.derivative(a, z)),
            InferenceModel::Lm(m) => Ok(m.derivative(a, z)),
            InferenceModel::Ann(m) => m.derivative(a, z),
            InferenceModel::Drnet(m) => m.derivative(a, z),
        }
    }

    pub fn jittered(&self) -> bool {
        match self {
            InferenceModel::Gps(m) => m.treatment.jittered || m.outcome.jittered,
            InferenceModel::Lm(m) => m.jittered,
            _ => false,
        }
    }
}
