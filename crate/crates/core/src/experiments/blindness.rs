use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::kernels::BaseKernel;
use crate::models::{kde_plugin, TwoComponentMixture};
use crate::stein::{PointWeights, SteinGram, WeightDensity, WeightSpec};
use crate::{Error, Result, SampleSet};

/// Mixture-weight recovery for `w₁ N(μ, σ²) + (1 − w₁) N(−μ, σ²)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlindnessConfig {
    pub w1_true: f64,
    pub mu: f64,
    pub sigma: f64,
    pub n: usize,
    /// Spacing of the `w₁` grid, which runs from `step` to `1 − step`.
    pub grid_step: f64,
    pub kernel: BaseKernel,
    pub weight: WeightSpec,
    pub ksd_alpha: f64,
    /// α for the weighted losses; `None` couples it as `1/γ`.
    pub alpha: Option<f64>,
    pub bandwidth: Option<f64>,
}

impl Default for BlindnessConfig {
    fn default() -> Self {
        Self {
            w1_true: 0.7,
            mu: 4.0,
            sigma: 1.0,
            n: 1000,
            grid_step: 0.02,
            kernel: BaseKernel::default(),
            weight: WeightSpec::default(),
            ksd_alpha: 1.0,
            alpha: None,
            bandwidth: None,
        }
    }
}

impl BlindnessConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.w1_true > 0.0 && self.w1_true < 1.0) {
            return Err(Error::input(format!(
                "w1 must lie in (0, 1), got {}",
                self.w1_true
            )));
        }
        if !(self.sigma > 0.0) || !(self.mu > 0.0) {
            return Err(Error::input(format!(
                "mu and sigma must be positive, got mu={}, sigma={}",
                self.mu, self.sigma
            )));
        }
        if self.mu / self.sigma < 3.0 {
            log::warn!(
                "modes at ±{} with sigma {} overlap (mu/sigma < 3); weight recovery is not a blindness test here",
                self.mu,
                self.sigma
            );
        }
        if self.n < 2 {
            return Err(Error::input("blindness demo needs n >= 2"));
        }
        self.kernel.validate()?;
        self.weight.validate()?;
        Ok(())
    }

    pub fn grid(&self) -> Result<Vec<f64>> {
        let m = (1.0 / self.grid_step).round();
        if !(self.grid_step > 0.0) || m < 3.0 || (m * self.grid_step - 1.0).abs() > 1e-9 {
            return Err(Error::input(format!(
                "grid step must divide 1 into at least three parts, got {}",
                self.grid_step
            )));
        }
        let m = m as usize;
        Ok((1..m).map(|k| k as f64 / m as f64).collect())
    }

    pub fn ms_alpha(&self) -> f64 {
        self.alpha.unwrap_or(1.0 / self.weight.gamma())
    }
}

/// Grid losses and their summaries. The weighted loss uses a KDE plug-in
/// for the weight; the `_model` variant lets the weight track the mixture
/// at each grid value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlindnessResult {
    pub grid: Vec<f64>,
    pub ksd_losses: Vec<f64>,
    pub msksd_losses: Vec<f64>,
    pub msksd_model_losses: Vec<f64>,
    pub w_hat_ksd: f64,
    pub w_hat_msksd: f64,
    pub w_hat_msksd_model: f64,
    /// Generalized-posterior means under a uniform prior on the grid.
    pub posterior_mean_ksd: f64,
    pub posterior_mean_msksd: f64,
    pub posterior_mean_msksd_model: f64,
}

fn argmin(grid: &[f64], losses: &[f64]) -> f64 {
    let mut best = 0;
    for (i, l) in losses.iter().enumerate() {
        if *l < losses[best] {
            best = i;
        }
    }
    grid[best]
}

fn grid_posterior_mean(grid: &[f64], losses: &[f64], alpha: f64, n: usize) -> f64 {
    let lp: Vec<f64> = losses.iter().map(|l| -alpha * n as f64 * l).collect();
    let m = lp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = lp.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = w.iter().sum();
    grid.iter().zip(&w).map(|(g, w)| g * w).sum::<f64>() / z
}

pub fn sample_mixture(config: &BlindnessConfig, seed: u64) -> Result<SampleSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let right = Normal::new(config.mu, config.sigma).map_err(|e| Error::input(e.to_string()))?;
    let left = Normal::new(-config.mu, config.sigma).map_err(|e| Error::input(e.to_string()))?;
    let xs: Vec<f64> = (0..config.n)
        .map(|_| {
            if rng.random::<f64>() < config.w1_true {
                right.sample(&mut rng)
            } else {
                left.sample(&mut rng)
            }
        })
        .collect();
    Ok(SampleSet::from_scalars(&xs))
}

pub fn blindness_demo(config: &BlindnessConfig, seed: u64) -> Result<BlindnessResult> {
    config.validate()?;
    let grid = config.grid()?;
    let data = sample_mixture(config, seed)?;
    let model = TwoComponentMixture::weight_parameterised(config.mu, config.sigma)?;
    let gram = SteinGram::new(&data, &config.kernel)?;
    let kde = kde_plugin(&data, config.bandwidth)?;
    let unit = PointWeights::Unit;
    let fixed = PointWeights::resolve(&config.weight, WeightDensity::Plugin(&kde), &data)?;
    let tracking = PointWeights::resolve(&config.weight, WeightDensity::Model, &data)?;
    let losses = |w: &PointWeights| -> Result<Vec<f64>> {
        grid.iter()
            .map(|&g| gram.ksd_squared(&model, &[g], w).map(|d| d.value))
            .collect()
    };
    let ksd_losses = losses(&unit)?;
    let msksd_losses = losses(&fixed)?;
    let msksd_model_losses = losses(&tracking)?;
    let n = config.n;
    let a = config.ms_alpha();
    Ok(BlindnessResult {
        w_hat_ksd: argmin(&grid, &ksd_losses),
        w_hat_msksd: argmin(&grid, &msksd_losses),
        w_hat_msksd_model: argmin(&grid, &msksd_model_losses),
        posterior_mean_ksd: grid_posterior_mean(&grid, &ksd_losses, config.ksd_alpha, n),
        posterior_mean_msksd: grid_posterior_mean(&grid, &msksd_losses, a, n),
        posterior_mean_msksd_model: grid_posterior_mean(&grid, &msksd_model_losses, a, n),
        grid,
        ksd_losses,
        msksd_losses,
        msksd_model_losses,
    })
}
