//! Run configuration shared by the library runners and the CLI.
//!
//! Files are JSON objects mirroring [`RunConfig`]. Loading deep-merges the
//! file over the defaults, so a file only needs the keys it changes and each
//! section keeps its own defaults.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::experiments::{BlindnessConfig, KefExperimentConfig, LocationConfig};
use crate::kernels::BaseKernel;
use crate::models::{
    gaussian_location_model, kef_model, two_component_mixture, KefSpec, ScoreModel,
    TwoComponentMixture,
};
use crate::stein::WeightSpec;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    /// `N(θ, 1)`, θ scalar.
    GaussianLocation,
    Kef {
        p: usize,
        reference_sd: f64,
        prior_scale: f64,
        prior_decay: f64,
    },
    /// `w₁ N(μ, σ²) + (1 − w₁) N(−μ, σ²)`; without `w1` the weight is the
    /// parameter.
    Mixture {
        mu: f64,
        sigma: f64,
        #[serde(default)]
        w1: Option<f64>,
    },
}

impl ModelSpec {
    pub fn kef(spec: KefSpec) -> Self {
        ModelSpec::Kef {
            p: spec.p,
            reference_sd: spec.reference_sd,
            prior_scale: spec.prior_scale,
            prior_decay: spec.prior_decay,
        }
    }

    pub fn kef_spec(&self) -> Option<KefSpec> {
        match *self {
            ModelSpec::Kef {
                p,
                reference_sd,
                prior_scale,
                prior_decay,
            } => Some(KefSpec {
                p,
                reference_sd,
                prior_scale,
                prior_decay,
            }),
            _ => None,
        }
    }

    pub fn build(&self) -> Result<Arc<dyn ScoreModel>> {
        Ok(match self {
            ModelSpec::GaussianLocation => Arc::new(gaussian_location_model()),
            ModelSpec::Kef { .. } => Arc::new(kef_model(self.kef_spec().expect("kef variant"))?),
            ModelSpec::Mixture {
                mu,
                sigma,
                w1: Some(w1),
            } => Arc::new(two_component_mixture(*w1, *mu, *sigma)?),
            ModelSpec::Mixture {
                mu,
                sigma,
                w1: None,
            } => Arc::new(TwoComponentMixture::weight_parameterised(*mu, *sigma)?),
        })
    }

    /// Default prior as `(mean, variances)`: the decaying KEF prior,
    /// `N(0.5, 0.25²)` for a free mixture weight, `N(0, 1)` otherwise.
    pub fn default_prior(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        let model = self.build()?;
        let p = model.param_dim();
        Ok(match self {
            ModelSpec::Kef { .. } => (
                vec![0.0; p],
                self.kef_spec().expect("kef variant").prior_variances(),
            ),
            ModelSpec::Mixture { w1: None, .. } => (vec![0.5], vec![0.0625]),
            _ => (vec![0.0; p], vec![1.0; p]),
        })
    }
}

/// Source of the log-density inside the weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum WeightSource {
    /// Gaussian KDE of the data (Silverman bandwidth unless overridden).
    Kde {
        #[serde(default)]
        bandwidth: Option<f64>,
    },
    /// The model frozen at the evaluated θ (`ksd`) or tracking θ (`fit`,
    /// MCMC only).
    Model,
    /// `N(0, sd²)`.
    Reference { sd: f64 },
}

impl Default for WeightSource {
    fn default() -> Self {
        WeightSource::Kde { bandwidth: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KsdCommandConfig {
    pub data: Option<PathBuf>,
    pub model: ModelSpec,
    pub theta: Vec<f64>,
    pub kernel: BaseKernel,
    pub weight: WeightSpec,
    pub weight_source: WeightSource,
    /// Also report the unweighted discrepancy.
    pub compare: bool,
    /// Mini-batch size; `None` evaluates all pairs.
    pub batch: Option<usize>,
}

impl Default for KsdCommandConfig {
    fn default() -> Self {
        Self {
            data: None,
            model: ModelSpec::GaussianLocation,
            theta: vec![0.0],
            kernel: BaseKernel::default(),
            weight: WeightSpec::default(),
            weight_source: WeightSource::default(),
            compare: false,
            batch: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McmcConfig {
    pub steps: usize,
    /// Defaults to 20% of `steps`.
    pub burn_in: Option<usize>,
    /// Isotropic pilot run used to tune the proposal covariance.
    pub pilot_steps: usize,
    pub pilot_scale: f64,
}

impl Default for McmcConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            burn_in: None,
            pilot_steps: 5_000,
            pilot_scale: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitCommandConfig {
    pub data: Option<PathBuf>,
    pub model: ModelSpec,
    pub kernel: BaseKernel,
    pub weight: WeightSpec,
    pub weight_source: WeightSource,
    /// `None` couples α to `1/γ` (or 1 for the identity weight).
    pub alpha: Option<f64>,
    pub center: bool,
    pub mcmc: Option<McmcConfig>,
}

impl Default for FitCommandConfig {
    fn default() -> Self {
        Self {
            data: None,
            model: ModelSpec::GaussianLocation,
            kernel: BaseKernel::default(),
            weight: WeightSpec::default(),
            weight_source: WeightSource::default(),
            alpha: None,
            center: false,
            mcmc: None,
        }
    }
}

impl FitCommandConfig {
    pub fn effective_alpha(&self) -> f64 {
        self.alpha.unwrap_or(1.0 / self.weight.gamma())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneConfig {
    /// Expression CSV; the bundled surrogate is used when absent.
    pub data: Option<PathBuf>,
    pub fit: KefExperimentConfig,
}

impl Default for GeneConfig {
    fn default() -> Self {
        Self {
            data: None,
            fit: KefExperimentConfig::gene(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; generated and recorded when absent.
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub ksd: KsdCommandConfig,
    pub fit: FitCommandConfig,
    pub location: LocationConfig,
    pub galaxy: KefExperimentConfig,
    pub gene: GeneConfig,
    pub blindness: BlindnessConfig,
}

/// Recursively overlays `patch` onto `base`; non-object values replace.
pub fn merge_json(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge_json(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl RunConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let patch: Value = serde_json::from_str(text)
            .map_err(|e| Error::input(format!("config is not valid JSON: {e}")))?;
        if !patch.is_object() {
            return Err(Error::input("config must be a JSON object"));
        }
        let mut base = serde_json::to_value(RunConfig::default())?;
        merge_json(&mut base, patch);
        serde_json::from_value(base).map_err(|e| Error::input(format!("invalid config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::input(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json_str(&text)
    }
}

/// Warning text when `α·γ` departs from 1.
pub fn alpha_gamma_warning(alpha: f64, weight: &WeightSpec) -> Option<String> {
    if weight.is_identity() {
        return None;
    }
    let g = weight.gamma();
    let prod = alpha * g;
    ((prod - 1.0).abs() > 1e-9).then(|| {
        format!("alpha * gamma = {prod} (alpha = {alpha}, gamma = {g}); the experiments couple them so that the product is 1")
    })
}
