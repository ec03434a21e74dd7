//! Fitting and persisting the up-sampling operator `A⁺`.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::io::{self, BlobDtype};
use crate::linops::{fit_pseudoinverse, pseudoinverse_loss, FitConfig, OperatorSpec};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitPinvConfig {
    pub operator: OperatorSpec,
    #[serde(default)]
    pub fit: FitConfig,
    pub output_dir: PathBuf,
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default = "default_dtype")]
    pub dtype: BlobDtype,
}

fn default_name() -> String {
    "pinv".into()
}

fn default_dtype() -> BlobDtype {
    BlobDtype::F32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitPinvReport {
    pub manifest: PathBuf,
    /// `ℓ1 + ℓ2` of the operator as stored on disk.
    pub loss: f64,
    /// `ℓ1 + ℓ2` before rounding to the stored precision.
    pub loss_full_precision: f64,
    pub weights: Vec<f64>,
}

pub fn run(cfg: &FitPinvConfig) -> Result<FitPinvReport> {
    cfg.fit.validate()?;
    if cfg.name.is_empty() || cfg.name.contains(['/', '\\']) {
        return Err(Error::Config(format!("invalid operator name {:?}", cfg.name)));
    }
    let down = cfg.operator.build()?;
    let up = fit_pseudoinverse(&down, &cfg.fit)?;
    let (a, b) = pseudoinverse_loss(&down, &up)?;
    let manifest = io::save_operator(&cfg.output_dir, &cfg.name, &cfg.operator, &up, cfg.dtype)?;
    let (down2, stored) = io::load_operator(&manifest)?;
    let (l1, l2) = pseudoinverse_loss(&down2, &stored)?;
    Ok(FitPinvReport { manifest, loss: l1 + l2, loss_full_precision: a + b, weights: stored.weights().to_vec() })
}
