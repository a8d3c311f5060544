//! Score models, the Hermite kernel exponential family and plug-in densities.
//!
//! A [`ScoreModel`] exposes `∇ₓ log p(x; θ)` and an unnormalized log-density.
//! Natural exponential families `log p = θᵀt(x) + b(x) − a(θ)` additionally
//! expose [`ExponentialFamily`], whose score is affine in θ:
//! `s(x; θ) = ∇b(x) + ∇t(x)ᵀθ`.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::{Error, Result, SampleSet};

pub trait ScoreModel: Send + Sync {
    /// Data dimension `d`.
    fn dim(&self) -> usize;

    /// Parameter dimension `p`.
    fn param_dim(&self) -> usize;

    /// Writes `∇ₓ log p(x; θ)` into `out` (length `d`).
    fn score_into(&self, x: &[f64], theta: &[f64], out: &mut [f64]);

    fn score(&self, x: &[f64], theta: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.score_into(x, theta, &mut out);
        out
    }

    /// `log p(x; θ)` up to a θ-dependent constant.
    fn unnorm_logpdf(&self, x: &[f64], theta: &[f64]) -> f64;

    fn exponential_family(&self) -> Option<&dyn ExponentialFamily> {
        None
    }

    /// Whether `theta` is a valid parameter value.
    fn in_support(&self, _theta: &[f64]) -> bool {
        true
    }
}

/// Affine decomposition of a natural exponential family's score.
pub trait ExponentialFamily: Send + Sync {
    /// `t(x)`, length `p`.
    fn suff_stat(&self, x: &[f64]) -> Vec<f64>;

    /// `∇t(x)` as a `p × d` row-major matrix (row `i` is `∇tᵢ(x)`).
    fn suff_stat_jacobian(&self, x: &[f64]) -> Vec<f64>;

    /// `∇b(x)`, length `d`.
    fn base_grad(&self, x: &[f64]) -> Vec<f64>;

    /// `b(x)`.
    fn base_logpdf(&self, x: &[f64]) -> f64;
}

/// Anything that can serve as the log-density inside the weight.
pub trait LogDensity: Send + Sync {
    fn log_density(&self, x: &[f64]) -> f64;
}

/// `N(θ, 1)` on the real line: `t(x) = x`, `b(x) = −x²/2`, score `θ − x`.
#[derive(Debug, Clone, Copy, Default)]
pub struct GaussianLocation;

pub fn gaussian_location_model() -> GaussianLocation {
    GaussianLocation
}

impl ScoreModel for GaussianLocation {
    fn dim(&self) -> usize {
        1
    }

    fn param_dim(&self) -> usize {
        1
    }

    fn score_into(&self, x: &[f64], theta: &[f64], out: &mut [f64]) {
        out[0] = theta[0] - x[0];
    }

    fn unnorm_logpdf(&self, x: &[f64], theta: &[f64]) -> f64 {
        theta[0] * x[0] - 0.5 * x[0] * x[0]
    }

    fn exponential_family(&self) -> Option<&dyn ExponentialFamily> {
        Some(self)
    }
}

impl ExponentialFamily for GaussianLocation {
    fn suff_stat(&self, x: &[f64]) -> Vec<f64> {
        vec![x[0]]
    }

    fn suff_stat_jacobian(&self, _x: &[f64]) -> Vec<f64> {
        vec![1.0]
    }

    fn base_grad(&self, x: &[f64]) -> Vec<f64> {
        vec![-x[0]]
    }

    fn base_logpdf(&self, x: &[f64]) -> f64 {
        -0.5 * x[0] * x[0]
    }
}

/// `w₁ N(μ, σ²) + (1 − w₁) N(−μ, σ²)`.
///
/// With a fixed `w₁` the model has no parameters; otherwise `θ = (w₁)`.
/// Parameters outside `(0, 1)` produce NaN, which the estimators reject.
#[derive(Debug, Clone, Copy)]
pub struct TwoComponentMixture {
    w1: Option<f64>,
    mu: f64,
    sigma: f64,
}

/// Mixture with fixed weight `w1`.
pub fn two_component_mixture(w1: f64, mu: f64, sigma: f64) -> Result<TwoComponentMixture> {
    if !(w1 > 0.0 && w1 < 1.0) {
        return Err(Error::input(format!(
            "mixture weight must lie in (0, 1), got {w1}"
        )));
    }
    TwoComponentMixture::check(mu, sigma)?;
    Ok(TwoComponentMixture {
        w1: Some(w1),
        mu,
        sigma,
    })
}

impl TwoComponentMixture {
    /// Mixture parameterised by `θ = (w₁)`.
    pub fn weight_parameterised(mu: f64, sigma: f64) -> Result<Self> {
        Self::check(mu, sigma)?;
        Ok(Self {
            w1: None,
            mu,
            sigma,
        })
    }

    fn check(mu: f64, sigma: f64) -> Result<()> {
        if !mu.is_finite() || !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::input(format!(
                "mixture needs finite mu and positive sigma, got mu={mu}, sigma={sigma}"
            )));
        }
        Ok(())
    }

    fn weight(&self, theta: &[f64]) -> f64 {
        self.w1.unwrap_or_else(|| theta[0])
    }

    /// Component log-densities (with log weights) and their log-sum-exp.
    fn log_terms(&self, x: f64, w1: f64) -> (f64, f64, f64) {
        let s2 = self.sigma * self.sigma;
        let a = w1.ln() - (x - self.mu).powi(2) / (2.0 * s2);
        let b = (1.0 - w1).ln() - (x + self.mu).powi(2) / (2.0 * s2);
        let m = a.max(b);
        (a, b, m + ((a - m).exp() + (b - m).exp()).ln())
    }
}

impl ScoreModel for TwoComponentMixture {
    fn dim(&self) -> usize {
        1
    }

    fn param_dim(&self) -> usize {
        usize::from(self.w1.is_none())
    }

    fn score_into(&self, x: &[f64], theta: &[f64], out: &mut [f64]) {
        let w1 = self.weight(theta);
        if !(w1 > 0.0 && w1 < 1.0) {
            out[0] = f64::NAN;
            return;
        }
        let x = x[0];
        let (a, b, lse) = self.log_terms(x, w1);
        let s2 = self.sigma * self.sigma;
        let ra = (a - lse).exp();
        let rb = (b - lse).exp();
        out[0] = (ra * (self.mu - x) - rb * (self.mu + x)) / s2;
    }

    fn unnorm_logpdf(&self, x: &[f64], theta: &[f64]) -> f64 {
        let w1 = self.weight(theta);
        if !(w1 > 0.0 && w1 < 1.0) {
            return f64::NAN;
        }
        self.log_terms(x[0], w1).2 - (self.sigma * (2.0 * PI).sqrt()).ln()
    }

    fn in_support(&self, theta: &[f64]) -> bool {
        let w1 = self.weight(theta);
        w1 > 0.0 && w1 < 1.0
    }
}

/// Hermite basis `φⱼ₊₁(x) = xʲ/√(j!) · exp(−x²/2)`, `j = 0..p−1`, and its
/// derivative. Powers are built by the recurrence `rⱼ₊₁ = rⱼ · x/√(j+1)`.
pub fn hermite_basis(p: usize, x: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if p == 0 {
        return Err(Error::input("Hermite basis needs p >= 1"));
    }
    let mut values = vec![0.0; p];
    let mut derivs = vec![0.0; p];
    hermite_into(x, &mut values, &mut derivs);
    Ok((values, derivs))
}

fn hermite_into(x: f64, values: &mut [f64], derivs: &mut [f64]) {
    let p = values.len();
    let envelope = (-0.5 * x * x).exp();
    // r[j] = x^j / sqrt(j!) for j = 0..=p
    let mut prev = 0.0;
    let mut cur = 1.0;
    for j in 0..p {
        let next = cur * x / ((j + 1) as f64).sqrt();
        values[j] = cur * envelope;
        derivs[j] = ((j as f64).sqrt() * prev - ((j + 1) as f64).sqrt() * next) * envelope;
        prev = cur;
        cur = next;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KefSpec {
    /// Number of basis functions.
    pub p: usize,
    /// Standard deviation `S` of the `N(0, S²)` reference measure.
    pub reference_sd: f64,
    /// Global prior scale `L`.
    pub prior_scale: f64,
    /// Prior decay exponent; coefficient `i` has variance `L² i^(−β)`.
    pub prior_decay: f64,
}

impl KefSpec {
    pub fn validate(&self) -> Result<()> {
        if self.p == 0 {
            return Err(Error::input("KEF needs p >= 1"));
        }
        if !(self.reference_sd > 0.0) || !(self.prior_scale > 0.0) || !(self.prior_decay > 0.0) {
            return Err(Error::input(format!(
                "KEF S, L and beta must be positive, got S={}, L={}, beta={}",
                self.reference_sd, self.prior_scale, self.prior_decay
            )));
        }
        Ok(())
    }

    /// Diagonal of the prior covariance, `L² i^(−β)` for `i = 1..p`.
    pub fn prior_variances(&self) -> Vec<f64> {
        (1..=self.p)
            .map(|i| self.prior_scale.powi(2) * (i as f64).powf(-self.prior_decay))
            .collect()
    }
}

/// Kernel exponential family `p(x; θ) ∝ N(x; 0, S²) exp(Σ θᵢ φᵢ(x))` on ℝ.
#[derive(Debug, Clone, Copy)]
pub struct Kef {
    spec: KefSpec,
}

pub fn kef_model(spec: KefSpec) -> Result<Kef> {
    spec.validate()?;
    Ok(Kef { spec })
}

impl Kef {
    pub fn spec(&self) -> &KefSpec {
        &self.spec
    }

    fn basis(&self, x: f64) -> (Vec<f64>, Vec<f64>) {
        let mut v = vec![0.0; self.spec.p];
        let mut d = vec![0.0; self.spec.p];
        hermite_into(x, &mut v, &mut d);
        (v, d)
    }
}

impl ScoreModel for Kef {
    fn dim(&self) -> usize {
        1
    }

    fn param_dim(&self) -> usize {
        self.spec.p
    }

    fn score_into(&self, x: &[f64], theta: &[f64], out: &mut [f64]) {
        let (_, d) = self.basis(x[0]);
        let s2 = self.spec.reference_sd.powi(2);
        out[0] = -x[0] / s2 + d.iter().zip(theta).map(|(a, b)| a * b).sum::<f64>();
    }

    fn unnorm_logpdf(&self, x: &[f64], theta: &[f64]) -> f64 {
        let (v, _) = self.basis(x[0]);
        self.base_logpdf(x) + v.iter().zip(theta).map(|(a, b)| a * b).sum::<f64>()
    }

    fn exponential_family(&self) -> Option<&dyn ExponentialFamily> {
        Some(self)
    }
}

impl ExponentialFamily for Kef {
    fn suff_stat(&self, x: &[f64]) -> Vec<f64> {
        self.basis(x[0]).0
    }

    fn suff_stat_jacobian(&self, x: &[f64]) -> Vec<f64> {
        self.basis(x[0]).1
    }

    fn base_grad(&self, x: &[f64]) -> Vec<f64> {
        vec![-x[0] / self.spec.reference_sd.powi(2)]
    }

    fn base_logpdf(&self, x: &[f64]) -> f64 {
        -x[0] * x[0] / (2.0 * self.spec.reference_sd.powi(2))
    }
}

/// Gaussian kernel density estimate with isotropic bandwidth.
#[derive(Debug, Clone)]
pub struct Kde {
    points: SampleSet,
    bandwidth: f64,
}

impl Kde {
    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }
}

impl LogDensity for Kde {
    fn log_density(&self, x: &[f64]) -> f64 {
        let h2 = self.bandwidth * self.bandwidth;
        let n = self.points.len() as f64;
        let d = self.points.dim() as f64;
        let exps: Vec<f64> = self
            .points
            .iter()
            .map(|p| -0.5 * p.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / h2)
            .collect();
        let m = exps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = exps.iter().map(|e| (e - m).exp()).sum();
        m + s.ln() - n.ln() - 0.5 * d * (2.0 * PI * h2).ln()
    }
}

/// θ-independent density feeding the mode-sensitivity weight.
#[derive(Clone)]
pub enum PluginDensity {
    Kde(Kde),
    /// A score model frozen at `theta` (unnormalized log-density).
    ModelAt {
        model: Arc<dyn ScoreModel>,
        theta: Vec<f64>,
    },
    /// Isotropic `N(0, sd² I)`, normalized.
    Reference {
        sd: f64,
    },
}

impl fmt::Debug for PluginDensity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PluginDensity::Kde(k) => f.debug_tuple("Kde").field(&k.bandwidth).finish(),
            PluginDensity::ModelAt { theta, .. } => {
                f.debug_struct("ModelAt").field("theta", theta).finish()
            }
            PluginDensity::Reference { sd } => f.debug_struct("Reference").field("sd", sd).finish(),
        }
    }
}

impl LogDensity for PluginDensity {
    fn log_density(&self, x: &[f64]) -> f64 {
        match self {
            PluginDensity::Kde(k) => k.log_density(x),
            PluginDensity::ModelAt { model, theta } => model.unnorm_logpdf(x, theta),
            PluginDensity::Reference { sd } => {
                let d = x.len() as f64;
                let sq: f64 = x.iter().map(|v| v * v).sum();
                -0.5 * sq / (sd * sd) - 0.5 * d * (2.0 * PI * sd * sd).ln()
            }
        }
    }
}

/// Silverman's rule `1.06 · sd · n^(−1/5)`, with the sample standard
/// deviation averaged over coordinates.
pub fn silverman_bandwidth(samples: &SampleSet) -> f64 {
    let n = samples.len();
    let d = samples.dim();
    let mean = samples.mean();
    let mut sd = 0.0;
    for (c, m) in mean.iter().enumerate() {
        let ss: f64 = samples.iter().map(|p| (p[c] - m).powi(2)).sum();
        sd += (ss / (n as f64 - 1.0)).sqrt();
    }
    sd /= d as f64;
    1.06 * sd * (n as f64).powf(-0.2)
}

/// Fallback bandwidth for samples with zero spread.
pub const DEGENERATE_BANDWIDTH: f64 = 1e-3;

pub fn kde_plugin(samples: &SampleSet, bandwidth: Option<f64>) -> Result<PluginDensity> {
    if samples.len() < 2 {
        return Err(Error::input("KDE plug-in needs at least two samples"));
    }
    let h = match bandwidth {
        Some(h) if h > 0.0 && h.is_finite() => h,
        Some(h) => return Err(Error::input(format!("bandwidth must be positive, got {h}"))),
        None => {
            let h = silverman_bandwidth(samples);
            if h > 0.0 && h.is_finite() {
                h
            } else {
                log::warn!(
                    "sample spread is zero or not finite; using fixed KDE bandwidth {DEGENERATE_BANDWIDTH}"
                );
                DEGENERATE_BANDWIDTH
            }
        }
    };
    Ok(PluginDensity::Kde(Kde {
        points: samples.clone(),
        bandwidth: h,
    }))
}
