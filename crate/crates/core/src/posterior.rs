//! Generalized posteriors `π(θ) ∝ π₀(θ) exp(−α n D²(θ))`.
//!
//! For a natural exponential family the score is affine in θ,
//! `s(x; θ) = g(x) + J(x)ᵀθ` with `J = ∇t` (p×d) and `g = ∇b`, so the
//! weighted V-statistic is an exact quadratic
//! `D²(θ) = θᵀΓθ + τᵀθ + c` and a Gaussian prior is conjugate.
//! Writing `aᵢ = wᵢJᵢ`, `hᵢ = wᵢgᵢ` and `kᵢⱼ`, `∇ₓkᵢⱼ`, `∇ᵧkᵢⱼ`, `trᵢⱼ` for the
//! pair quantities,
//!
//! ```text
//! Γ = n⁻² Σᵢⱼ kᵢⱼ aᵢ aⱼᵀ
//! τ = n⁻² Σᵢⱼ [ aᵢ wⱼ∇ᵧkᵢⱼ + aⱼ wᵢ∇ₓkᵢⱼ + kᵢⱼ (aᵢhⱼ + aⱼhᵢ) ]
//! c = n⁻² Σᵢⱼ wᵢwⱼ trᵢⱼ + hᵢ·wⱼ∇ᵧkᵢⱼ + hⱼ·wᵢ∇ₓkᵢⱼ + kᵢⱼ hᵢ·hⱼ
//! ```
//!
//! Completing the square gives precision `Σ₀⁻¹ + 2αnΓ` and mean
//! `Σₙ (Σ₀⁻¹μ₀ − αnτ)`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::kernels::BaseKernel;
use crate::models::{ExponentialFamily, ScoreModel};
use crate::stein::{PointWeights, SteinGram, WeightDensity, WeightSpec};
use crate::{Error, Result, SampleSet};

const JITTERS: [f64; 5] = [1e-10, 1e-9, 1e-8, 1e-7, 1e-6];
const PAR_THRESHOLD: usize = 256;

fn cholesky_with_jitter(m: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    if let Some(c) = Cholesky::new(m.clone()) {
        return Ok(c);
    }
    let n = m.nrows();
    for j in JITTERS {
        if let Some(c) = Cholesky::new(m + DMatrix::identity(n, n) * j) {
            log::warn!("{what} is not positive definite; added jitter {j:e} to the diagonal");
            return Ok(c);
        }
    }
    Err(Error::numerical(format!(
        "{what} is not positive definite even with jitter {:e}; \
         increase the prior precision or reduce alpha",
        JITTERS[JITTERS.len() - 1]
    )))
}

#[derive(Debug, Clone)]
pub struct GaussianPrior {
    mean: DVector<f64>,
    covariance: DMatrix<f64>,
    precision: DMatrix<f64>,
    log_norm: f64,
}

impl GaussianPrior {
    pub fn new(mean: Vec<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        let p = mean.len();
        if p == 0 || covariance.nrows() != p || covariance.ncols() != p {
            return Err(Error::input(format!(
                "prior covariance must be {p}x{p}, got {}x{}",
                covariance.nrows(),
                covariance.ncols()
            )));
        }
        if mean.iter().chain(covariance.iter()).any(|v| !v.is_finite()) {
            return Err(Error::input("prior has non-finite entries"));
        }
        let asym = (&covariance - covariance.transpose()).amax();
        if asym > 1e-12 * covariance.amax().max(1.0) {
            return Err(Error::input(format!(
                "prior covariance is not symmetric ({asym:e})"
            )));
        }
        let chol = Cholesky::new(covariance.clone())
            .ok_or_else(|| Error::input("prior covariance is not positive definite"))?;
        let log_det: f64 = chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
        let precision = chol.inverse();
        Ok(Self {
            mean: DVector::from_vec(mean),
            covariance,
            precision,
            log_norm: -0.5 * (log_det + p as f64 * (2.0 * std::f64::consts::PI).ln()),
        })
    }

    pub fn diagonal(mean: Vec<f64>, variances: &[f64]) -> Result<Self> {
        Self::new(
            mean,
            DMatrix::from_diagonal(&DVector::from_column_slice(variances)),
        )
    }

    /// `N(0, I)`.
    pub fn standard(p: usize) -> Result<Self> {
        Self::diagonal(vec![0.0; p], &vec![1.0; p])
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn precision(&self) -> &DMatrix<f64> {
        &self.precision
    }

    pub fn log_density(&self, theta: &[f64]) -> f64 {
        let r = DVector::from_column_slice(theta) - &self.mean;
        self.log_norm - 0.5 * (r.transpose() * &self.precision * &r)[(0, 0)]
    }
}

/// Quadratic form `θᵀΓθ + τᵀθ + c` equal to the squared discrepancy.
#[derive(Debug, Clone, PartialEq)]
pub struct ConjugateCoefficients {
    pub gamma: DMatrix<f64>,
    pub tau: DVector<f64>,
    pub constant: f64,
}

impl ConjugateCoefficients {
    pub fn dim(&self) -> usize {
        self.tau.len()
    }

    pub fn evaluate(&self, theta: &[f64]) -> f64 {
        let t = DVector::from_column_slice(theta);
        (t.transpose() * &self.gamma * &t)[(0, 0)] + self.tau.dot(&t) + self.constant
    }
}

fn require_family(model: &dyn ScoreModel) -> Result<&dyn ExponentialFamily> {
    model.exponential_family().ok_or_else(|| {
        Error::UnsupportedModel(
            "closed-form posterior needs a natural exponential family; use MCMC instead".into(),
        )
    })
}

fn conjugacy_guard(weights: &PointWeights) -> Result<()> {
    if weights.depends_on_theta() {
        return Err(Error::Conjugacy(
            "the weight tracks the model density at θ, so the loss is not quadratic; \
             use a plug-in weight density or MCMC"
                .into(),
        ));
    }
    Ok(())
}

struct PairAccumulator {
    gamma: Vec<f64>,
    tau: Vec<f64>,
    constant: f64,
}

/// Per-point quantities `aᵢ = wᵢJᵢ` (p×d row-major), `hᵢ = wᵢgᵢ` and `wᵢ`.
struct PointTerms {
    a: Vec<f64>,
    h: Vec<f64>,
    w: Vec<f64>,
}

fn point_terms(
    samples: &SampleSet,
    family: &dyn ExponentialFamily,
    p: usize,
    weights: &PointWeights,
) -> Result<PointTerms> {
    let n = samples.len();
    let d = samples.dim();
    let w: Vec<f64> = match weights {
        PointWeights::Unit => vec![1.0; n],
        PointWeights::Fixed(w) if w.len() == n => w.clone(),
        PointWeights::Fixed(_) => {
            return Err(Error::input(
                "weight vector length differs from sample count",
            ))
        }
        PointWeights::ModelTracking(_) => unreachable!("guarded by conjugacy_guard"),
    };
    let mut a = Vec::with_capacity(n * p * d);
    let mut h = Vec::with_capacity(n * d);
    for (i, x) in samples.iter().enumerate() {
        let jac = family.suff_stat_jacobian(x);
        let g = family.base_grad(x);
        if jac.len() != p * d || g.len() != d {
            return Err(Error::input(
                "exponential-family decomposition has wrong shape",
            ));
        }
        if jac.iter().chain(&g).any(|v| !v.is_finite()) {
            return Err(Error::numerical(format!(
                "non-finite sufficient-statistic gradient at sample {i} (x = {x:?})"
            )));
        }
        a.extend(jac.iter().map(|v| v * w[i]));
        h.extend(g.iter().map(|v| v * w[i]));
    }
    Ok(PointTerms { a, h, w })
}

/// Row `i` of the pair sums; `pair(i, j, gx, gy)` fills the gradients and
/// returns `(k, tr)`.
fn coefficient_row<F>(
    i: usize,
    n: usize,
    p: usize,
    d: usize,
    t: &PointTerms,
    pair: &F,
) -> PairAccumulator
where
    F: Fn(usize, usize, &mut [f64], &mut [f64]) -> (f64, f64),
{
    let mut gx = vec![0.0; d];
    let mut gy = vec![0.0; d];
    let ai = &t.a[i * p * d..(i + 1) * p * d];
    let hi = &t.h[i * d..(i + 1) * d];
    let wi = t.w[i];
    // Σⱼ kᵢⱼ aⱼ, p×d
    let mut ka = vec![0.0; p * d];
    let mut tau = vec![0.0; p];
    let mut constant = 0.0;
    for j in 0..n {
        let (k, tr) = pair(i, j, &mut gx, &mut gy);
        let aj = &t.a[j * p * d..(j + 1) * p * d];
        let hj = &t.h[j * d..(j + 1) * d];
        let wj = t.w[j];
        for (acc, v) in ka.iter_mut().zip(aj) {
            *acc += k * v;
        }
        for r in 0..p {
            let air = &ai[r * d..(r + 1) * d];
            let ajr = &aj[r * d..(r + 1) * d];
            let mut s = 0.0;
            for c in 0..d {
                s += air[c] * (wj * gy[c] + k * hj[c]) + ajr[c] * (wi * gx[c] + k * hi[c]);
            }
            tau[r] += s;
        }
        let mut s = wi * wj * tr;
        for c in 0..d {
            s += hi[c] * wj * gy[c] + hj[c] * wi * gx[c] + k * hi[c] * hj[c];
        }
        constant += s;
    }
    let mut gamma = vec![0.0; p * p];
    for r in 0..p {
        for s in 0..p {
            let mut v = 0.0;
            for c in 0..d {
                v += ai[r * d + c] * ka[s * d + c];
            }
            gamma[r * p + s] = v;
        }
    }
    PairAccumulator {
        gamma,
        tau,
        constant,
    }
}

fn assemble<F>(n: usize, p: usize, d: usize, t: &PointTerms, pair: F) -> ConjugateCoefficients
where
    F: Fn(usize, usize, &mut [f64], &mut [f64]) -> (f64, f64) + Sync,
{
    let row = |i| coefficient_row(i, n, p, d, t, &pair);
    let rows: Vec<PairAccumulator> = if n >= PAR_THRESHOLD {
        (0..n).into_par_iter().map(row).collect()
    } else {
        (0..n).map(row).collect()
    };
    let mut gamma = DMatrix::zeros(p, p);
    let mut tau = DVector::zeros(p);
    let mut constant = 0.0;
    for r in rows {
        for a in 0..p {
            for b in 0..p {
                gamma[(a, b)] += r.gamma[a * p + b];
            }
            tau[a] += r.tau[a];
        }
        constant += r.constant;
    }
    let scale = 1.0 / (n as f64 * n as f64);
    let gamma = (&gamma + gamma.transpose()) * (0.5 * scale);
    ConjugateCoefficients {
        gamma,
        tau: tau * scale,
        constant: constant * scale,
    }
}

/// Quadratic-loss coefficients evaluated pair by pair.
pub fn conjugate_coefficients(
    samples: &SampleSet,
    model: &dyn ScoreModel,
    kernel: &BaseKernel,
    weight: &WeightSpec,
    density: WeightDensity<'_>,
) -> Result<ConjugateCoefficients> {
    let family = require_family(model)?;
    if samples.is_empty() {
        return Err(Error::input("sample set is empty"));
    }
    if model.dim() != samples.dim() {
        return Err(Error::input("model and sample dimensions differ"));
    }
    kernel.validate()?;
    let weights = PointWeights::resolve(weight, density, samples)?;
    conjugacy_guard(&weights)?;
    let (n, p, d) = (samples.len(), model.param_dim(), samples.dim());
    let terms = point_terms(samples, family, p, &weights)?;
    Ok(assemble(n, p, d, &terms, |i, j, gx, gy| {
        kernel.derivatives_into(samples.point(i), samples.point(j), gx, gy)
    }))
}

/// Same coefficients read from a precomputed pair cache.
pub fn conjugate_coefficients_cached(
    gram: &SteinGram,
    model: &dyn ScoreModel,
    weights: &PointWeights,
) -> Result<ConjugateCoefficients> {
    let family = require_family(model)?;
    if model.dim() != gram.dim() {
        return Err(Error::input("model and sample dimensions differ"));
    }
    conjugacy_guard(weights)?;
    let (n, p, d) = (gram.len(), model.param_dim(), gram.dim());
    let terms = point_terms(gram.points(), family, p, weights)?;
    Ok(assemble(n, p, d, &terms, |i, j, gx, gy| {
        gx.copy_from_slice(gram.grad_x(i, j));
        gy.copy_from_slice(gram.grad_y(i, j));
        (gram.value(i, j), gram.cross_trace(i, j))
    }))
}

#[derive(Debug, Clone)]
pub struct ConjugatePosterior {
    mean: DVector<f64>,
    covariance: DMatrix<f64>,
    precision: DMatrix<f64>,
    chol_cov: DMatrix<f64>,
}

pub fn conjugate_posterior(
    prior: &GaussianPrior,
    coeffs: &ConjugateCoefficients,
    alpha: f64,
    n: usize,
) -> Result<ConjugatePosterior> {
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(Error::input(format!(
            "alpha must be non-negative, got {alpha}"
        )));
    }
    if n == 0 {
        return Err(Error::input("sample count must be positive"));
    }
    if coeffs.dim() != prior.dim() {
        return Err(Error::input(format!(
            "prior has dimension {}, coefficients {}",
            prior.dim(),
            coeffs.dim()
        )));
    }
    let an = alpha * n as f64;
    let precision = prior.precision() + &coeffs.gamma * (2.0 * an);
    let chol = cholesky_with_jitter(&precision, "posterior precision")?;
    let covariance = chol.inverse();
    let covariance = (&covariance + covariance.transpose()) * 0.5;
    let rhs = prior.precision() * prior.mean() - &coeffs.tau * an;
    let mean = chol.solve(&rhs);
    let chol_cov = cholesky_with_jitter(&covariance, "posterior covariance")?.l();
    Ok(ConjugatePosterior {
        mean,
        covariance,
        precision,
        chol_cov,
    })
}

impl ConjugatePosterior {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn precision(&self) -> &DMatrix<f64> {
        &self.precision
    }

    pub fn sd(&self) -> Vec<f64> {
        self.covariance
            .diagonal()
            .iter()
            .map(|v| v.sqrt())
            .collect()
    }

    /// Unnormalized log-density.
    pub fn log_density(&self, theta: &[f64]) -> f64 {
        let r = DVector::from_column_slice(theta) - &self.mean;
        -0.5 * (r.transpose() * &self.precision * &r)[(0, 0)]
    }

    /// Lower Cholesky factor of the covariance.
    pub fn covariance_factor(&self) -> &DMatrix<f64> {
        &self.chol_cov
    }

    pub fn draws(&self, count: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = self.dim();
        (0..count)
            .map(|_| {
                let z = DVector::from_fn(p, |_, _| StandardNormal.sample(&mut rng));
                (&self.mean + &self.chol_cov * z).as_slice().to_vec()
            })
            .collect()
    }
}

/// Ways to evaluate `D²(θ)` inside the generalized posterior.
pub enum KsdLoss<'a> {
    /// O(n²) per θ from the samples.
    Direct {
        samples: &'a SampleSet,
        model: &'a dyn ScoreModel,
        kernel: &'a BaseKernel,
        weights: &'a PointWeights,
    },
    /// O(n²) per θ through the pair cache.
    Cached {
        gram: &'a SteinGram,
        model: &'a dyn ScoreModel,
        weights: &'a PointWeights,
    },
    /// O(p²) per θ; exponential families only.
    Quadratic(&'a ConjugateCoefficients),
}

impl KsdLoss<'_> {
    pub fn value(&self, theta: &[f64]) -> Result<f64> {
        match self {
            KsdLoss::Direct {
                samples,
                model,
                kernel,
                weights,
            } => crate::stein::ksd_squared_with_weights(samples, *model, theta, kernel, weights),
            KsdLoss::Cached {
                gram,
                model,
                weights,
            } => gram.ksd_squared(*model, theta, weights).map(|d| d.value),
            KsdLoss::Quadratic(c) => {
                if theta.len() != c.dim() {
                    return Err(Error::input(
                        "theta length differs from coefficient dimension",
                    ));
                }
                Ok(c.evaluate(theta))
            }
        }
    }
}

/// `log π₀(θ) − α n D²(θ)`, up to an additive constant; `-inf` outside the
/// model's parameter support.
pub fn generalized_log_posterior(
    theta: &[f64],
    prior: &GaussianPrior,
    loss: &KsdLoss<'_>,
    alpha: f64,
    n: usize,
) -> Result<f64> {
    if theta.len() != prior.dim() {
        return Err(Error::input("theta length differs from prior dimension"));
    }
    if let KsdLoss::Direct { model, .. } | KsdLoss::Cached { model, .. } = loss {
        if !model.in_support(theta) {
            return Ok(f64::NEG_INFINITY);
        }
    }
    let lp = prior.log_density(theta);
    if alpha == 0.0 {
        return Ok(lp);
    }
    Ok(lp - alpha * n as f64 * loss.value(theta)?)
}

/// Gaussian random-walk proposal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Proposal {
    Isotropic(f64),
    Diagonal(Vec<f64>),
    /// Full covariance (row-major p×p).
    Covariance(Vec<f64>),
}

impl Proposal {
    /// `(2.4²/p) Σ`, the usual scaling for a Gaussian-shaped target.
    pub fn scaled_covariance(cov: &DMatrix<f64>) -> Self {
        let p = cov.nrows();
        let c = 2.4 * 2.4 / p as f64;
        Proposal::Covariance(cov.transpose().iter().map(|v| v * c).collect())
    }

    fn factor(&self, p: usize) -> Result<DMatrix<f64>> {
        match self {
            Proposal::Isotropic(s) if *s > 0.0 && s.is_finite() => Ok(DMatrix::identity(p, p) * *s),
            Proposal::Diagonal(v)
                if v.len() == p && v.iter().all(|s| *s > 0.0 && s.is_finite()) =>
            {
                Ok(DMatrix::from_diagonal(&DVector::from_column_slice(v)))
            }
            Proposal::Covariance(v) if v.len() == p * p => {
                let m = DMatrix::from_row_slice(p, p, v);
                Cholesky::new(m)
                    .map(|c| c.l())
                    .ok_or_else(|| Error::input("proposal covariance is not positive definite"))
            }
            other => Err(Error::input(format!(
                "invalid proposal for dimension {p}: {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainConfig {
    pub steps: usize,
    pub burn_in: usize,
    pub proposal: Proposal,
    pub seed: u64,
    pub initial: Vec<f64>,
}

impl ChainConfig {
    /// Burn-in defaults to 20% of `steps`.
    pub fn new(steps: usize, proposal: Proposal, seed: u64, initial: Vec<f64>) -> Self {
        Self {
            steps,
            burn_in: steps / 5,
            proposal,
            seed,
            initial,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ChainResult {
    samples: Vec<f64>,
    dim: usize,
    accepted: Vec<bool>,
}

impl ChainResult {
    pub fn len(&self) -> usize {
        self.samples.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        &self.samples[i * self.dim..(i + 1) * self.dim]
    }

    /// Kept draws, row-major.
    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    /// Accept flag of every step, burn-in included.
    pub fn accept_flags(&self) -> &[bool] {
        &self.accepted
    }

    pub fn acceptance_rate(&self) -> f64 {
        self.accepted.iter().filter(|a| **a).count() as f64 / self.accepted.len() as f64
    }

    pub fn mean(&self) -> Vec<f64> {
        let n = self.len() as f64;
        (0..self.dim)
            .map(|c| (0..self.len()).map(|i| self.sample(i)[c]).sum::<f64>() / n)
            .collect()
    }

    pub fn variance(&self) -> Vec<f64> {
        let m = self.mean();
        let n = self.len() as f64;
        (0..self.dim)
            .map(|c| {
                (0..self.len())
                    .map(|i| (self.sample(i)[c] - m[c]).powi(2))
                    .sum::<f64>()
                    / (n - 1.0)
            })
            .collect()
    }

    /// Batch-means Monte-Carlo standard error of each coordinate mean,
    /// with `⌊√kept⌋` batches.
    pub fn mc_standard_error(&self) -> Vec<f64> {
        let n = self.len();
        let b = ((n as f64).sqrt().floor() as usize).max(2).min(n);
        let size = n / b;
        let m = self.mean();
        (0..self.dim)
            .map(|c| {
                let var = (0..b)
                    .map(|k| {
                        let bm = (k * size..(k + 1) * size)
                            .map(|i| self.sample(i)[c])
                            .sum::<f64>()
                            / size as f64;
                        (bm - m[c]).powi(2)
                    })
                    .sum::<f64>()
                    / (b as f64 - 1.0);
                (var / b as f64).sqrt()
            })
            .collect()
    }
}

/// Gaussian random-walk Metropolis. A NaN target value is an error; `-inf`
/// is a rejection.
pub fn rwm_sample<F>(mut log_target: F, config: &ChainConfig) -> Result<ChainResult>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if config.steps <= config.burn_in {
        return Err(Error::input(format!(
            "steps ({}) must exceed burn-in ({})",
            config.steps, config.burn_in
        )));
    }
    let p = config.initial.len();
    if p == 0 {
        return Err(Error::input("initial state is empty"));
    }
    let factor = config.proposal.factor(p)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let unif = Uniform::new(0.0f64, 1.0).expect("valid range");
    let eval = |f: &mut F, t: &[f64]| -> Result<f64> {
        let v = f(t)?;
        if v.is_nan() {
            return Err(Error::numerical(format!(
                "log-target is NaN at theta = {t:?}"
            )));
        }
        Ok(v)
    };
    let mut current = DVector::from_column_slice(&config.initial);
    let mut current_lp = eval(&mut log_target, current.as_slice())?;
    if current_lp == f64::NEG_INFINITY {
        return Err(Error::input("initial state has zero target density"));
    }
    let kept = config.steps - config.burn_in;
    let mut samples = Vec::with_capacity(kept * p);
    let mut accepted = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let z = DVector::from_fn(p, |_, _| StandardNormal.sample(&mut rng));
        let proposal = &current + &factor * z;
        let lp = eval(&mut log_target, proposal.as_slice())?;
        let u: f64 = unif.sample(&mut rng);
        let accept = lp > f64::NEG_INFINITY && u.ln() < lp - current_lp;
        if accept {
            current = proposal;
            current_lp = lp;
        }
        accepted.push(accept);
        if step >= config.burn_in {
            samples.extend_from_slice(current.as_slice());
        }
    }
    Ok(ChainResult {
        samples,
        dim: p,
        accepted,
    })
}

/// Pilot run with an isotropic proposal; returns `(2.4²/p)` times the pilot
/// sample covariance for use as the main-run proposal.
pub fn pilot_proposal<F>(
    log_target: F,
    initial: Vec<f64>,
    scale: f64,
    steps: usize,
    seed: u64,
) -> Result<(Proposal, Vec<f64>)>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let p = initial.len();
    let cfg = ChainConfig::new(
        steps,
        Proposal::Isotropic(scale / (p as f64).sqrt()),
        seed,
        initial,
    );
    let chain = rwm_sample(log_target, &cfg)?;
    let m = chain.mean();
    let n = chain.len();
    let mut cov = DMatrix::zeros(p, p);
    for i in 0..n {
        let s = chain.sample(i);
        for a in 0..p {
            for b in 0..p {
                cov[(a, b)] += (s[a] - m[a]) * (s[b] - m[b]);
            }
        }
    }
    cov /= (n as f64 - 1.0).max(1.0);
    cov += DMatrix::identity(p, p) * 1e-12;
    if Cholesky::new(cov.clone()).is_none() {
        let sd = scale / (p as f64).sqrt();
        return Ok((Proposal::Isotropic(sd), m));
    }
    Ok((Proposal::scaled_covariance(&cov), m))
}

/// Density values on an ascending grid, normalized by the trapezoid rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityCurve {
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
}

pub fn trapezoid(x: &[f64], y: &[f64]) -> f64 {
    x.windows(2)
        .zip(y.windows(2))
        .map(|(x, y)| 0.5 * (x[1] - x[0]) * (y[0] + y[1]))
        .sum()
}

pub fn validate_grid(grid: &[f64]) -> Result<()> {
    if grid.len() < 3 {
        return Err(Error::input("grid needs at least three points"));
    }
    if grid.iter().any(|v| !v.is_finite()) || grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::input("grid must be finite and strictly ascending"));
    }
    Ok(())
}

/// `n` equally spaced points from `lo` to `hi`.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let step = (hi - lo) / (n as f64 - 1.0);
    (0..n).map(|i| lo + step * i as f64).collect()
}

impl DensityCurve {
    pub fn new(grid: Vec<f64>, density: Vec<f64>) -> Result<Self> {
        validate_grid(&grid)?;
        if density.len() != grid.len() {
            return Err(Error::input("density and grid lengths differ"));
        }
        Ok(Self { grid, density })
    }

    pub fn integral(&self) -> f64 {
        trapezoid(&self.grid, &self.density)
    }

    /// Curve translated by `shift` along the grid.
    pub fn shifted(&self, shift: f64) -> Self {
        Self {
            grid: self.grid.iter().map(|g| g + shift).collect(),
            density: self.density.clone(),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("grid,density\n");
        for (g, d) in self.grid.iter().zip(&self.density) {
            s.push_str(&format!("{g},{d}\n"));
        }
        s
    }
}

fn normalized_curve(grid: &[f64], model: &dyn ScoreModel, theta: &[f64]) -> Result<Vec<f64>> {
    let lp: Vec<f64> = grid
        .iter()
        .map(|g| model.unnorm_logpdf(&[*g], theta))
        .collect();
    let m = lp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() || lp.iter().any(|v| v.is_nan()) {
        return Err(Error::numerical(format!(
            "log-density is not finite on the grid at theta = {theta:?}"
        )));
    }
    let mut d: Vec<f64> = lp.iter().map(|v| (v - m).exp()).collect();
    let z = trapezoid(grid, &d);
    d.iter_mut().for_each(|v| *v /= z);
    Ok(d)
}

/// Posterior-predictive curve of a one-dimensional model: each draw's
/// density is normalized on the grid, then the curves are averaged.
pub fn predictive_density(
    grid: &[f64],
    model: &dyn ScoreModel,
    draws: &[Vec<f64>],
) -> Result<DensityCurve> {
    validate_grid(grid)?;
    if model.dim() != 1 {
        return Err(Error::input(
            "predictive curves need a one-dimensional model",
        ));
    }
    if draws.is_empty() {
        return Err(Error::input("at least one parameter draw is required"));
    }
    let mut acc = vec![0.0; grid.len()];
    for theta in draws {
        if theta.len() != model.param_dim() {
            return Err(Error::input(
                "draw length differs from model parameter dimension",
            ));
        }
        for (a, v) in acc.iter_mut().zip(normalized_curve(grid, model, theta)?) {
            *a += v;
        }
    }
    let k = draws.len() as f64;
    acc.iter_mut().for_each(|v| *v /= k);
    DensityCurve::new(grid.to_vec(), acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::gaussian_location_model;

    #[test]
    fn scalar_example() {
        let prior = GaussianPrior::standard(1).unwrap();
        // n = 1, α = 1: 2αnΓ = 1 and αnτ = −0.5.
        let c = ConjugateCoefficients {
            gamma: DMatrix::from_element(1, 1, 0.5),
            tau: DVector::from_element(1, -0.5),
            constant: 0.0,
        };
        let post = conjugate_posterior(&prior, &c, 1.0, 1).unwrap();
        assert!((post.covariance()[(0, 0)] - 0.5).abs() < 1e-15);
        assert!((post.mean()[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn no_signal_returns_prior() {
        let prior = GaussianPrior::diagonal(vec![0.3, -1.0], &[2.0, 0.5]).unwrap();
        let c = ConjugateCoefficients {
            gamma: DMatrix::zeros(2, 2),
            tau: DVector::zeros(2),
            constant: 0.0,
        };
        let post = conjugate_posterior(&prior, &c, 1.0, 10).unwrap();
        assert!((post.mean() - prior.mean()).amax() < 1e-14);
        assert!((post.covariance() - prior.covariance()).amax() < 1e-14);
    }

    #[test]
    fn negative_definite_precision_fails() {
        let prior = GaussianPrior::standard(1).unwrap();
        let c = ConjugateCoefficients {
            gamma: DMatrix::from_element(1, 1, -1.0),
            tau: DVector::zeros(1),
            constant: 0.0,
        };
        let err = conjugate_posterior(&prior, &c, 1.0, 10).unwrap_err();
        assert!(err.is_numerical());
    }

    #[test]
    fn non_family_model_is_unsupported() {
        let m = crate::models::two_component_mixture(0.5, 2.0, 1.0).unwrap();
        let s = SampleSet::from_scalars(&[0.0, 1.0]);
        let err = conjugate_coefficients(
            &s,
            &m,
            &BaseKernel::default(),
            &WeightSpec::Identity,
            WeightDensity::None,
        )
        .unwrap_err();
        assert!(matches!(err, Error::UnsupportedModel(_)));
    }

    #[test]
    fn model_weight_breaks_conjugacy() {
        let s = SampleSet::from_scalars(&[0.0, 1.0, -0.5]);
        let err = conjugate_coefficients(
            &s,
            &gaussian_location_model(),
            &BaseKernel::default(),
            &WeightSpec::default(),
            WeightDensity::Model,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Conjugacy(_)));
    }

    #[test]
    fn curve_normalizes_and_is_shift_safe() {
        let grid = linspace(-8.0, 8.0, 801);
        let m = gaussian_location_model();
        let c = predictive_density(&grid, &m, &[vec![0.5]]).unwrap();
        assert!((c.integral() - 1.0).abs() < 1e-12);
        let twice = predictive_density(&grid, &m, &[vec![0.5], vec![0.5]]).unwrap();
        assert_eq!(c, twice);
        assert!(predictive_density(&[0.0, 1.0], &m, &[vec![0.0]]).is_err());
        assert!(predictive_density(&[0.0, 2.0, 1.0], &m, &[vec![0.0]]).is_err());
    }

    #[test]
    fn chain_rejects_nan_target() {
        let cfg = ChainConfig::new(1000, Proposal::Isotropic(1.0), 0, vec![0.0]);
        let err = rwm_sample(|t| Ok(if t[0] > 0.5 { f64::NAN } else { 0.0 }), &cfg).unwrap_err();
        assert!(err.is_numerical());
        assert!(err.to_string().contains("theta"));
    }

    #[test]
    fn chain_bookkeeping() {
        let cfg = ChainConfig::new(500, Proposal::Diagonal(vec![0.5, 0.2]), 3, vec![0.0, 0.0]);
        let r = rwm_sample(|t| Ok(-0.5 * (t[0] * t[0] + t[1] * t[1])), &cfg).unwrap();
        assert_eq!(r.len(), 400);
        assert_eq!(r.accept_flags().len(), 500);
        let again = rwm_sample(|t| Ok(-0.5 * (t[0] * t[0] + t[1] * t[1])), &cfg).unwrap();
        assert_eq!(r.samples(), again.samples());
        let bad = ChainConfig {
            burn_in: 500,
            ..cfg
        };
        assert!(rwm_sample(|_| Ok(0.0), &bad).is_err());
    }
}
