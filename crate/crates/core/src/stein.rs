//! Density weights, Stein kernels and V-statistic discrepancy estimators.
//!
//! The weighted Stein kernel is
//!
//! ```text
//! kᵧ(x, y) = ω(x) ω(y) [ tr ∇ₓ∇ᵧᵀk + ⟨s(x), ∇ᵧk⟩ + ⟨s(y), ∇ₓk⟩ + ⟨s(x), s(y)⟩ k ]
//! ```
//!
//! and the squared discrepancy is its average over all `n²` ordered pairs,
//! diagonal included. Row sums are accumulated left to right and the rows
//! are then added in index order, so results do not depend on the number of
//! worker threads.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::kernels::{parse_spec, reject_unknown, take_param, BaseKernel, KernelDerivatives};
use crate::models::{LogDensity, ScoreModel};
use crate::{Error, Result, SampleSet};

/// Rows per parallel work item; below this everything runs on one thread.
const PAR_THRESHOLD: usize = 256;

/// Mode-sensitivity weight `ω`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum WeightSpec {
    Identity,
    /// `γ / (|log p| + ε)`.
    LogReciprocal {
        gamma: f64,
        epsilon: f64,
    },
    /// `γ / (max(|log p|, τ) + ε)`.
    Truncated {
        gamma: f64,
        epsilon: f64,
        tau: f64,
    },
}

impl Default for WeightSpec {
    fn default() -> Self {
        WeightSpec::LogReciprocal {
            gamma: 1.0,
            epsilon: 0.1,
        }
    }
}

impl WeightSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |name: &str, v: f64| {
            Err(Error::input(format!(
                "weight {name} must be positive, got {v}"
            )))
        };
        match *self {
            WeightSpec::Identity => Ok(()),
            WeightSpec::LogReciprocal { gamma, epsilon } => {
                if !(gamma > 0.0) {
                    return bad("gamma", gamma);
                }
                if !(epsilon > 0.0) {
                    return bad("epsilon", epsilon);
                }
                Ok(())
            }
            WeightSpec::Truncated {
                gamma,
                epsilon,
                tau,
            } => {
                if !(gamma > 0.0) {
                    return bad("gamma", gamma);
                }
                if !(epsilon > 0.0) {
                    return bad("epsilon", epsilon);
                }
                if !(tau > 0.0) {
                    return bad("tau", tau);
                }
                Ok(())
            }
        }
    }

    pub fn is_identity(&self) -> bool {
        matches!(self, WeightSpec::Identity)
    }

    /// `γ`, or 1 for the identity weight.
    pub fn gamma(&self) -> f64 {
        match *self {
            WeightSpec::Identity => 1.0,
            WeightSpec::LogReciprocal { gamma, .. } | WeightSpec::Truncated { gamma, .. } => gamma,
        }
    }

    /// Same weight with `γ` replaced; the identity weight is unchanged.
    pub fn with_gamma(self, g: f64) -> Self {
        match self {
            WeightSpec::Identity => WeightSpec::Identity,
            WeightSpec::LogReciprocal { epsilon, .. } => {
                WeightSpec::LogReciprocal { gamma: g, epsilon }
            }
            WeightSpec::Truncated { epsilon, tau, .. } => WeightSpec::Truncated {
                gamma: g,
                epsilon,
                tau,
            },
        }
    }

    /// Upper bound on `ω` (the `M` of the boundedness condition).
    pub fn upper_bound(&self) -> f64 {
        match *self {
            WeightSpec::Identity => 1.0,
            WeightSpec::LogReciprocal { gamma, epsilon } => gamma / epsilon,
            WeightSpec::Truncated {
                gamma,
                epsilon,
                tau,
            } => gamma / (tau + epsilon),
        }
    }
}

pub fn weight_value(spec: &WeightSpec, log_density: f64) -> Result<f64> {
    if !log_density.is_finite() {
        return Err(Error::input(format!(
            "weight needs a finite log-density, got {log_density}"
        )));
    }
    let w = match *spec {
        WeightSpec::Identity => 1.0,
        WeightSpec::LogReciprocal { gamma, epsilon } => gamma / (log_density.abs() + epsilon),
        WeightSpec::Truncated {
            gamma,
            epsilon,
            tau,
        } => gamma / (log_density.abs().max(tau) + epsilon),
    };
    Ok(w)
}

/// Which density supplies `log p` inside the weight.
#[derive(Clone, Copy)]
pub enum WeightDensity<'a> {
    /// No density; only valid with [`WeightSpec::Identity`].
    None,
    /// A θ-independent plug-in density (keeps exponential families conjugate).
    Plugin(&'a dyn LogDensity),
    /// The model's own unnormalized log-density at the current θ. The weight
    /// then depends on θ, so only sampling-based posteriors are available.
    Model,
}

impl fmt::Debug for WeightDensity<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WeightDensity::None => "None",
            WeightDensity::Plugin(_) => "Plugin",
            WeightDensity::Model => "Model",
        })
    }
}

/// Per-sample weights, resolved once when they do not depend on θ.
#[derive(Debug, Clone, PartialEq)]
pub enum PointWeights {
    Unit,
    Fixed(Vec<f64>),
    /// Recomputed from the model at every θ.
    ModelTracking(WeightSpec),
}

impl PointWeights {
    pub fn resolve(
        spec: &WeightSpec,
        density: WeightDensity<'_>,
        samples: &SampleSet,
    ) -> Result<Self> {
        spec.validate()?;
        if spec.is_identity() {
            return Ok(PointWeights::Unit);
        }
        match density {
            WeightDensity::None => Err(Error::input(
                "a non-identity weight needs a density (plug-in or model)",
            )),
            WeightDensity::Model => Ok(PointWeights::ModelTracking(*spec)),
            WeightDensity::Plugin(d) => samples
                .iter()
                .enumerate()
                .map(|(i, x)| {
                    weight_value(spec, d.log_density(x))
                        .map_err(|e| Error::input(format!("sample {i}: {e}")))
                })
                .collect::<Result<Vec<_>>>()
                .map(PointWeights::Fixed),
        }
    }

    pub fn depends_on_theta(&self) -> bool {
        matches!(self, PointWeights::ModelTracking(_))
    }

    /// Concrete weight vector for `samples` at `theta`; `None` means all ones.
    pub(crate) fn at(
        &self,
        samples: &SampleSet,
        model: &dyn ScoreModel,
        theta: &[f64],
    ) -> Result<Option<Vec<f64>>> {
        match self {
            PointWeights::Unit => Ok(None),
            PointWeights::Fixed(w) => {
                if w.len() != samples.len() {
                    return Err(Error::input("weight vector length differs from sample count"));
                }
                Ok(Some(w.clone()))
            }
            PointWeights::ModelTracking(spec) => samples
                .iter()
                .enumerate()
                .map(|(i, x)| {
                    let lp = model.unnorm_logpdf(x, theta);
                    if !lp.is_finite() {
                        return Err(Error::numerical(format!(
                            "non-finite model log-density at sample {i} (x = {x:?}, theta = {theta:?})"
                        )));
                    }
                    weight_value(spec, lp)
                })
                .collect::<Result<Vec<_>>>()
                .map(Some),
        }
    }

    fn select(&self, indices: &[usize]) -> Self {
        match self {
            PointWeights::Fixed(w) => PointWeights::Fixed(indices.iter().map(|&i| w[i]).collect()),
            other => other.clone(),
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Four-term Stein kernel from precomputed kernel quantities.
#[inline]
fn stein_pair(sx: &[f64], sy: &[f64], k: f64, gx: &[f64], gy: &[f64], trace: f64) -> f64 {
    trace + dot(sx, gy) + dot(sy, gx) + dot(sx, sy) * k
}

pub fn stein_kernel(
    x: &[f64],
    y: &[f64],
    score_x: &[f64],
    score_y: &[f64],
    bundle: &KernelDerivatives,
) -> Result<f64> {
    let d = x.len();
    if y.len() != d
        || score_x.len() != d
        || score_y.len() != d
        || bundle.grad_x.len() != d
        || bundle.grad_y.len() != d
    {
        return Err(Error::input("stein_kernel: inconsistent dimensions"));
    }
    Ok(stein_pair(
        score_x,
        score_y,
        bundle.value,
        &bundle.grad_x,
        &bundle.grad_y,
        bundle.cross_trace,
    ))
}

pub fn weighted_stein_kernel(
    x: &[f64],
    y: &[f64],
    score_x: &[f64],
    score_y: &[f64],
    bundle: &KernelDerivatives,
    w_x: f64,
    w_y: f64,
) -> Result<f64> {
    if !(w_x > 0.0) || !(w_y > 0.0) {
        return Err(Error::input(format!(
            "weights must be positive, got {w_x} and {w_y}"
        )));
    }
    Ok(w_x * w_y * stein_kernel(x, y, score_x, score_y, bundle)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Full,
    MiniBatch { batch: usize },
}

/// Squared (MS-)KSD and the estimator that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Discrepancy {
    pub value: f64,
    pub estimator: Estimator,
}

fn scores(samples: &SampleSet, model: &dyn ScoreModel, theta: &[f64]) -> Result<Vec<f64>> {
    let d = samples.dim();
    if model.dim() != d {
        return Err(Error::input(format!(
            "model dimension {} differs from sample dimension {d}",
            model.dim()
        )));
    }
    if theta.len() != model.param_dim() {
        return Err(Error::input(format!(
            "theta has length {}, model expects {}",
            theta.len(),
            model.param_dim()
        )));
    }
    let mut out = vec![0.0; samples.len() * d];
    for (i, (x, s)) in samples.iter().zip(out.chunks_exact_mut(d)).enumerate() {
        model.score_into(x, theta, s);
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical(format!(
                "non-finite score at sample {i} (x = {x:?}, theta = {theta:?})"
            )));
        }
    }
    Ok(out)
}

/// Sums `row(i)` over rows in index order, parallelising the row work.
fn ordered_row_sum<F>(n: usize, row: F) -> f64
where
    F: Fn(usize) -> f64 + Sync,
{
    if n >= PAR_THRESHOLD {
        let rows: Vec<f64> = (0..n).into_par_iter().map(&row).collect();
        rows.iter().sum()
    } else {
        (0..n).map(row).sum()
    }
}

fn finite_mean(total: f64, n: usize, theta: &[f64]) -> Result<f64> {
    let v = total / (n as f64 * n as f64);
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::numerical(format!(
            "discrepancy is not finite at theta = {theta:?}"
        )))
    }
}

fn check_nonempty(samples: &SampleSet) -> Result<()> {
    if samples.is_empty() {
        Err(Error::input("sample set is empty"))
    } else {
        Ok(())
    }
}

fn direct_vstat(
    samples: &SampleSet,
    model: &dyn ScoreModel,
    theta: &[f64],
    kernel: &BaseKernel,
    weights: &PointWeights,
) -> Result<f64> {
    check_nonempty(samples)?;
    kernel.validate()?;
    let n = samples.len();
    let d = samples.dim();
    let s = scores(samples, model, theta)?;
    let w = weights.at(samples, model, theta)?;
    let total = ordered_row_sum(n, |i| {
        let xi = samples.point(i);
        let si = &s[i * d..(i + 1) * d];
        let mut gx = vec![0.0; d];
        let mut gy = vec![0.0; d];
        let mut acc = 0.0;
        for j in 0..n {
            let (k, tr) = kernel.derivatives_into(xi, samples.point(j), &mut gx, &mut gy);
            let v = stein_pair(si, &s[j * d..(j + 1) * d], k, &gx, &gy, tr);
            acc += match &w {
                Some(w) => w[i] * w[j] * v,
                None => v,
            };
        }
        acc
    });
    finite_mean(total, n, theta)
}

/// V-statistic with already resolved per-point weights.
pub fn ksd_squared_with_weights(
    samples: &SampleSet,
    model: &dyn ScoreModel,
    theta: &[f64],
    kernel: &BaseKernel,
    weights: &PointWeights,
) -> Result<f64> {
    direct_vstat(samples, model, theta, kernel, weights)
}

/// Full V-statistic `(1/n²) Σᵢⱼ kᵧ(xᵢ, xⱼ)` evaluated pair by pair.
pub fn ksd_squared(
    samples: &SampleSet,
    model: &dyn ScoreModel,
    theta: &[f64],
    kernel: &BaseKernel,
    weight: &WeightSpec,
    density: WeightDensity<'_>,
) -> Result<Discrepancy> {
    check_nonempty(samples)?;
    let weights = PointWeights::resolve(weight, density, samples)?;
    Ok(Discrepancy {
        value: direct_vstat(samples, model, theta, kernel, &weights)?,
        estimator: Estimator::Full,
    })
}

/// V-statistic on a uniform subsample of `batch` points drawn without
/// replacement. Indices are visited in ascending order, so `batch = n`
/// reproduces [`ksd_squared`] bit for bit.
#[allow(clippy::too_many_arguments)]
pub fn ksd_squared_minibatch(
    samples: &SampleSet,
    model: &dyn ScoreModel,
    theta: &[f64],
    kernel: &BaseKernel,
    weight: &WeightSpec,
    density: WeightDensity<'_>,
    batch: usize,
    seed: u64,
) -> Result<Discrepancy> {
    check_nonempty(samples)?;
    let n = samples.len();
    if batch == 0 || batch > n {
        return Err(Error::input(format!(
            "batch size must lie in [1, {n}], got {batch}"
        )));
    }
    let weights = PointWeights::resolve(weight, density, samples)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = index::sample(&mut rng, n, batch).into_vec();
    idx.sort_unstable();
    let sub = samples.select(&idx);
    let value = direct_vstat(&sub, model, theta, kernel, &weights.select(&idx))?;
    Ok(Discrepancy {
        value,
        estimator: Estimator::MiniBatch { batch },
    })
}

/// θ-independent pair quantities: kernel values, both gradients and the
/// cross-derivative trace for all `n²` ordered pairs (row-major).
#[derive(Debug, Clone)]
pub struct SteinGram {
    points: SampleSet,
    kernel: BaseKernel,
    value: Vec<f64>,
    grad_x: Vec<f64>,
    grad_y: Vec<f64>,
    cross_trace: Vec<f64>,
}

pub fn precompute_gram(samples: &SampleSet, kernel: &BaseKernel) -> Result<SteinGram> {
    SteinGram::new(samples, kernel)
}

impl SteinGram {
    pub fn new(samples: &SampleSet, kernel: &BaseKernel) -> Result<Self> {
        check_nonempty(samples)?;
        kernel.validate()?;
        let n = samples.len();
        let d = samples.dim();
        let build_row = |i: usize| {
            let mut value = vec![0.0; n];
            let mut gx = vec![0.0; n * d];
            let mut gy = vec![0.0; n * d];
            let mut tr = vec![0.0; n];
            let xi = samples.point(i);
            for j in 0..n {
                let (k, t) = kernel.derivatives_into(
                    xi,
                    samples.point(j),
                    &mut gx[j * d..(j + 1) * d],
                    &mut gy[j * d..(j + 1) * d],
                );
                value[j] = k;
                tr[j] = t;
            }
            (value, gx, gy, tr)
        };
        let rows: Vec<_> = if n >= PAR_THRESHOLD {
            (0..n).into_par_iter().map(build_row).collect()
        } else {
            (0..n).map(build_row).collect()
        };
        let mut gram = SteinGram {
            points: samples.clone(),
            kernel: *kernel,
            value: Vec::with_capacity(n * n),
            grad_x: Vec::with_capacity(n * n * d),
            grad_y: Vec::with_capacity(n * n * d),
            cross_trace: Vec::with_capacity(n * n),
        };
        for (v, gx, gy, t) in rows {
            gram.value.extend(v);
            gram.grad_x.extend(gx);
            gram.grad_y.extend(gy);
            gram.cross_trace.extend(t);
        }
        Ok(gram)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points.dim()
    }

    pub fn points(&self) -> &SampleSet {
        &self.points
    }

    pub fn kernel(&self) -> &BaseKernel {
        &self.kernel
    }

    /// Entries stored per scalar tensor (`n²`).
    pub fn pair_count(&self) -> usize {
        self.value.len()
    }

    pub fn value(&self, i: usize, j: usize) -> f64 {
        self.value[i * self.len() + j]
    }

    pub fn cross_trace(&self, i: usize, j: usize) -> f64 {
        self.cross_trace[i * self.len() + j]
    }

    pub fn grad_x(&self, i: usize, j: usize) -> &[f64] {
        let d = self.dim();
        let o = (i * self.len() + j) * d;
        &self.grad_x[o..o + d]
    }

    pub fn grad_y(&self, i: usize, j: usize) -> &[f64] {
        let d = self.dim();
        let o = (i * self.len() + j) * d;
        &self.grad_y[o..o + d]
    }

    /// [`ksd_squared`] through the cache; identical summation order.
    pub fn ksd_squared(
        &self,
        model: &dyn ScoreModel,
        theta: &[f64],
        weights: &PointWeights,
    ) -> Result<Discrepancy> {
        let n = self.len();
        let d = self.dim();
        let s = scores(&self.points, model, theta)?;
        let w = weights.at(&self.points, model, theta)?;
        let total = ordered_row_sum(n, |i| {
            let si = &s[i * d..(i + 1) * d];
            let mut acc = 0.0;
            for j in 0..n {
                let o = i * n + j;
                let v = stein_pair(
                    si,
                    &s[j * d..(j + 1) * d],
                    self.value[o],
                    &self.grad_x[o * d..(o + 1) * d],
                    &self.grad_y[o * d..(o + 1) * d],
                    self.cross_trace[o],
                );
                acc += match &w {
                    Some(w) => w[i] * w[j] * v,
                    None => v,
                };
            }
            acc
        });
        Ok(Discrepancy {
            value: finite_mean(total, n, theta)?,
            estimator: Estimator::Full,
        })
    }
}

impl fmt::Display for WeightSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WeightSpec::Identity => f.write_str("identity"),
            WeightSpec::LogReciprocal { gamma, epsilon } => {
                write!(f, "logrecip:gamma={gamma},eps={epsilon}")
            }
            WeightSpec::Truncated {
                gamma,
                epsilon,
                tau,
            } => write!(f, "trunc:gamma={gamma},eps={epsilon},tau={tau}"),
        }
    }
}

impl FromStr for WeightSpec {
    type Err = Error;

    /// `identity` (alias `none`), `logrecip:gamma=1,eps=0.1` or
    /// `trunc:gamma=1,eps=0.1,tau=2`.
    fn from_str(s: &str) -> Result<Self> {
        let (name, params) = parse_spec(s)?;
        let spec = match name.as_str() {
            "identity" | "none" => {
                reject_unknown(&params, &[])?;
                WeightSpec::Identity
            }
            "logrecip" => {
                reject_unknown(&params, &["gamma", "eps", "epsilon"])?;
                WeightSpec::LogReciprocal {
                    gamma: take_param(&params, &["gamma"], Some(1.0))?,
                    epsilon: take_param(&params, &["eps", "epsilon"], Some(0.1))?,
                }
            }
            "trunc" | "truncated" => {
                reject_unknown(&params, &["gamma", "eps", "epsilon", "tau"])?;
                WeightSpec::Truncated {
                    gamma: take_param(&params, &["gamma"], Some(1.0))?,
                    epsilon: take_param(&params, &["eps", "epsilon"], Some(0.1))?,
                    tau: take_param(&params, &["tau"], None)?,
                }
            }
            other => return Err(Error::input(format!("unknown weight '{other}'"))),
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl TryFrom<String> for WeightSpec {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<WeightSpec> for String {
    fn from(w: WeightSpec) -> String {
        w.to_string()
    }
}
