use serde::{Deserialize, Serialize};

use super::{
    cell_label, contaminate_dataset, detect_modes, timed, ContaminationMode, ContaminationSpec,
    ExperimentReport, Method, MethodResult, DEFAULT_PROMINENCE,
};
use crate::kernels::BaseKernel;
use crate::models::{kde_plugin, kef_model, KefSpec};
use crate::posterior::{
    conjugate_coefficients, conjugate_posterior, linspace, predictive_density, DensityCurve,
    GaussianPrior,
};
use crate::stein::{WeightDensity, WeightSpec};
use crate::{derive_seed, Error, Result, SampleSet};

/// Evaluation grid in data units. Missing ends default to the data range
/// widened by `margin`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub lo: Option<f64>,
    pub hi: Option<f64>,
    pub points: usize,
    pub margin: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            lo: None,
            hi: None,
            points: 512,
            margin: 2.0,
        }
    }
}

impl GridSpec {
    pub fn resolve(&self, data: &SampleSet) -> Result<Vec<f64>> {
        let xs = data.as_slice();
        let min = xs.iter().copied().fold(f64::INFINITY, f64::min);
        let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = self.lo.unwrap_or(min - self.margin);
        let hi = self.hi.unwrap_or(max + self.margin);
        if self.points < 3 || !(hi > lo) {
            return Err(Error::input(format!(
                "invalid grid [{lo}, {hi}] with {} points",
                self.points
            )));
        }
        Ok(linspace(lo, hi, self.points))
    }
}

/// Which parameter values the predictive curve integrates over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Predictive {
    PosteriorMean,
    /// Average of per-draw curves over this many posterior draws.
    Averaged {
        draws: usize,
    },
}

/// Kernel-exponential-family density estimation with KSD-Bayes and
/// MS-KSD-Bayes under replace-mode contamination.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KefExperimentConfig {
    pub kef: KefSpec,
    pub kernel: BaseKernel,
    pub weight: WeightSpec,
    pub ksd_alpha: f64,
    /// α for MS-KSD-Bayes; `None` couples it as `1/γ`.
    pub alpha: Option<f64>,
    pub bandwidth: Option<f64>,
    pub epsilons: Vec<f64>,
    pub contamination_y: f64,
    pub noise_sd: f64,
    /// Subtract the (contaminated) sample mean before fitting.
    pub center: bool,
    /// Also divide by the sample standard deviation.
    pub standardize: bool,
    /// Apply `log₂(1 + x)` to the raw values first.
    pub log_transform: bool,
    pub grid: GridSpec,
    pub prominence: f64,
    pub predictive: Predictive,
    pub timing: bool,
}

impl KefExperimentConfig {
    pub fn galaxy() -> Self {
        Self {
            kef: KefSpec {
                p: 25,
                reference_sd: 3.0,
                prior_scale: 10.0,
                prior_decay: 1.1,
            },
            kernel: BaseKernel::default(),
            weight: WeightSpec::LogReciprocal {
                gamma: 20.0,
                epsilon: 0.5,
            },
            ksd_alpha: 1.0,
            alpha: None,
            bandwidth: None,
            epsilons: vec![0.0, 0.1, 0.2],
            contamination_y: 5.0,
            noise_sd: 0.1,
            center: true,
            standardize: false,
            log_transform: false,
            grid: GridSpec {
                lo: Some(-1.0),
                hi: Some(7.0),
                ..GridSpec::default()
            },
            prominence: DEFAULT_PROMINENCE,
            predictive: Predictive::PosteriorMean,
            timing: false,
        }
    }

    pub fn gene() -> Self {
        Self {
            kef: KefSpec {
                p: 10,
                reference_sd: 4.0,
                prior_scale: 9.0,
                prior_decay: 1.2,
            },
            epsilons: vec![0.0],
            grid: GridSpec::default(),
            ..Self::galaxy()
        }
    }

    pub fn ms_alpha(&self) -> f64 {
        self.alpha.unwrap_or(1.0 / self.weight.gamma())
    }
}

impl Default for KefExperimentConfig {
    fn default() -> Self {
        Self::galaxy()
    }
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, v.sqrt())
}

/// Fits one method on `data` (data units) and evaluates its predictive
/// curve on `grid`. `seed` only matters for averaged curves.
pub fn fit_kef(
    data: &SampleSet,
    config: &KefExperimentConfig,
    method: Method,
    grid: &[f64],
    seed: u64,
) -> Result<MethodResult> {
    if data.dim() != 1 || data.len() < 2 {
        return Err(Error::input(
            "KEF fitting needs at least two scalar observations",
        ));
    }
    let (m, sd) = mean_sd(data.as_slice());
    let shift = if config.center { m } else { 0.0 };
    let scale = if config.standardize { sd } else { 1.0 };
    if !(scale > 0.0) {
        return Err(Error::input("cannot standardize data with zero spread"));
    }
    let z = data.affine(shift, scale);
    let model = kef_model(config.kef)?;
    let prior = GaussianPrior::diagonal(vec![0.0; config.kef.p], &config.kef.prior_variances())?;

    let (coeffs, alpha) = match method {
        Method::KsdBayes => (
            conjugate_coefficients(
                &z,
                &model,
                &config.kernel,
                &WeightSpec::Identity,
                WeightDensity::None,
            )?,
            config.ksd_alpha,
        ),
        Method::MsksdBayes => {
            let kde = kde_plugin(&z, config.bandwidth)?;
            (
                conjugate_coefficients(
                    &z,
                    &model,
                    &config.kernel,
                    &config.weight,
                    WeightDensity::Plugin(&kde),
                )?,
                config.ms_alpha(),
            )
        }
        Method::StandardBayes => {
            return Err(Error::input("standard Bayes needs a tractable likelihood"))
        }
    };
    let post = conjugate_posterior(&prior, &coeffs, alpha, z.len())?;

    let draws = match config.predictive {
        Predictive::PosteriorMean => vec![post.mean().as_slice().to_vec()],
        Predictive::Averaged { draws } if draws > 0 => post.draws(draws, seed),
        Predictive::Averaged { .. } => return Err(Error::input("need at least one draw")),
    };
    let zgrid: Vec<f64> = grid.iter().map(|g| (g - shift) / scale).collect();
    let zc = predictive_density(&zgrid, &model, &draws)?;
    let curve = DensityCurve::new(
        grid.to_vec(),
        zc.density.iter().map(|d| d / scale).collect(),
    )?;
    let modes = detect_modes(&curve, config.prominence)?;
    Ok(MethodResult {
        method,
        cell: String::new(),
        posterior_mean: post.mean().as_slice().to_vec(),
        posterior_sd: post.sd(),
        curve,
        modes,
        wall_time_ms: None,
    })
}

fn run_kef(
    name: &str,
    data: &SampleSet,
    config: &KefExperimentConfig,
    seed: u64,
) -> Result<ExperimentReport> {
    config.kernel.validate()?;
    config.weight.validate()?;
    config.kef.validate()?;
    let data = if config.log_transform {
        if data.as_slice().iter().any(|x| *x <= -1.0) {
            return Err(Error::input("log2(1 + x) needs values above -1"));
        }
        SampleSet::from_scalars(
            &data
                .as_slice()
                .iter()
                .map(|x| x.ln_1p() / std::f64::consts::LN_2)
                .collect::<Vec<_>>(),
        )
    } else {
        data.clone()
    };
    let mut results = Vec::new();
    for (idx, &epsilon) in config.epsilons.iter().enumerate() {
        let cell_seed = derive_seed(seed, idx as u64);
        let spec = ContaminationSpec {
            epsilon,
            y: config.contamination_y,
            noise_sd: config.noise_sd,
            mode: ContaminationMode::Replace,
        };
        let contaminated = contaminate_dataset(&data, &spec, cell_seed)?;
        let grid = config.grid.resolve(&contaminated)?;
        let cell = cell_label(&[("eps", epsilon)]);
        for (k, method) in [Method::KsdBayes, Method::MsksdBayes]
            .into_iter()
            .enumerate()
        {
            let (mut r, ms) = timed(config.timing, || {
                fit_kef(
                    &contaminated,
                    config,
                    method,
                    &grid,
                    derive_seed(cell_seed, k as u64 + 1),
                )
            })?;
            r.cell = cell.clone();
            r.wall_time_ms = ms;
            results.push(r);
        }
    }
    Ok(ExperimentReport {
        experiment: name.into(),
        seed,
        config: serde_json::to_value(config)?,
        results,
        extra: None,
    })
}

/// Galaxy velocities (10⁴ km/s) contaminated at each configured `ε`.
pub fn run_galaxy(
    data: &SampleSet,
    config: &KefExperimentConfig,
    seed: u64,
) -> Result<ExperimentReport> {
    run_kef("galaxy", data, config, seed)
}

/// A single expression profile, one value per sample.
pub fn run_gene_expression(
    data: &SampleSet,
    config: &KefExperimentConfig,
    seed: u64,
) -> Result<ExperimentReport> {
    run_kef("gene", data, config, seed)
}
