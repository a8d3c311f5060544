use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    cell_label, detect_modes, generate_location_data, timed, ContaminationMode, ContaminationSpec,
    ExperimentReport, Method, MethodResult, DEFAULT_PROMINENCE,
};
use crate::kernels::BaseKernel;
use crate::models::{gaussian_location_model, kde_plugin};
use crate::posterior::{
    conjugate_coefficients, conjugate_posterior, linspace, trapezoid, DensityCurve, GaussianPrior,
};
use crate::stein::{WeightDensity, WeightSpec};
use crate::{derive_seed, Error, Result, SampleSet};

/// Gaussian location study: `N(θ⋆, 1)` data with mixture-draw outliers at
/// `N(y, noise_sd²)`, a `N(prior_mean, prior_sd²)` prior and three methods.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocationConfig {
    pub n: usize,
    pub theta_star: f64,
    pub epsilons: Vec<f64>,
    pub ys: Vec<f64>,
    pub noise_sd: f64,
    pub prior_mean: f64,
    pub prior_sd: f64,
    pub kernel: BaseKernel,
    pub weight: WeightSpec,
    /// α for KSD-Bayes.
    pub ksd_alpha: f64,
    /// α for MS-KSD-Bayes; `None` couples it as `1/γ`.
    pub alpha: Option<f64>,
    /// KDE bandwidth of the weight plug-in; `None` uses Silverman's rule.
    pub bandwidth: Option<f64>,
    /// θ grid for the posterior curves.
    pub theta_grid: (f64, f64, usize),
    pub prominence: f64,
    pub timing: bool,
}

impl Default for LocationConfig {
    fn default() -> Self {
        Self {
            n: 100,
            theta_star: 1.0,
            epsilons: vec![0.0, 0.05, 0.1, 0.2],
            ys: vec![3.0, 5.0, 10.0, 20.0],
            noise_sd: 1.0,
            prior_mean: 0.0,
            prior_sd: 1.0,
            kernel: BaseKernel::default(),
            weight: WeightSpec::default(),
            ksd_alpha: 1.0,
            alpha: None,
            bandwidth: None,
            theta_grid: (-2.0, 8.0, 1001),
            prominence: DEFAULT_PROMINENCE,
            timing: false,
        }
    }
}

impl LocationConfig {
    pub fn ms_alpha(&self) -> f64 {
        self.alpha.unwrap_or(1.0 / self.weight.gamma())
    }
}

/// Posterior mean and standard deviation of each method on one dataset.
pub fn fit_location(data: &SampleSet, config: &LocationConfig) -> Result<Vec<(Method, f64, f64)>> {
    let x = data.as_slice();
    let n = x.len();
    let prior = GaussianPrior::diagonal(vec![config.prior_mean], &[config.prior_sd.powi(2)])?;
    let prec0 = 1.0 / config.prior_sd.powi(2);
    let prec = prec0 + n as f64;
    let sb_mean = (prec0 * config.prior_mean + x.iter().sum::<f64>()) / prec;
    let mut out = vec![(Method::StandardBayes, sb_mean, prec.recip().sqrt())];

    let model = gaussian_location_model();
    let c = conjugate_coefficients(
        data,
        &model,
        &config.kernel,
        &WeightSpec::Identity,
        WeightDensity::None,
    )?;
    let post = conjugate_posterior(&prior, &c, config.ksd_alpha, n)?;
    out.push((Method::KsdBayes, post.mean()[0], post.sd()[0]));

    let kde = kde_plugin(data, config.bandwidth)?;
    let c = conjugate_coefficients(
        data,
        &model,
        &config.kernel,
        &config.weight,
        WeightDensity::Plugin(&kde),
    )?;
    let post = conjugate_posterior(&prior, &c, config.ms_alpha(), n)?;
    out.push((Method::MsksdBayes, post.mean()[0], post.sd()[0]));
    Ok(out)
}

fn gaussian_curve(grid: &[f64], mean: f64, sd: f64) -> Result<DensityCurve> {
    let mut d: Vec<f64> = grid
        .iter()
        .map(|t| (-0.5 * ((t - mean) / sd).powi(2)).exp())
        .collect();
    let z = trapezoid(grid, &d);
    if !(z > 0.0) {
        return Err(Error::numerical(format!(
            "posterior N({mean}, {sd}²) has no mass on the θ grid"
        )));
    }
    d.iter_mut().for_each(|v| *v /= z);
    DensityCurve::new(grid.to_vec(), d)
}

pub fn run_gaussian_location(config: &LocationConfig, seed: u64) -> Result<ExperimentReport> {
    config.kernel.validate()?;
    config.weight.validate()?;
    if config.n < 2 {
        return Err(Error::input("location experiment needs n >= 2"));
    }
    let (lo, hi, points) = config.theta_grid;
    let grid = linspace(lo, hi, points);
    crate::posterior::validate_grid(&grid)?;
    let cells: Vec<(f64, f64)> = config
        .epsilons
        .iter()
        .flat_map(|&e| config.ys.iter().map(move |&y| (e, y)))
        .collect();
    let per_cell: Vec<Result<Vec<MethodResult>>> = cells
        .par_iter()
        .enumerate()
        .map(|(idx, &(epsilon, y))| {
            let spec = ContaminationSpec {
                epsilon,
                y,
                noise_sd: config.noise_sd,
                mode: ContaminationMode::MixtureDraw,
            };
            let data = generate_location_data(
                config.n,
                config.theta_star,
                &spec,
                derive_seed(seed, idx as u64),
            )?;
            let (fits, ms) = timed(config.timing, || fit_location(&data, config))?;
            let cell = cell_label(&[("eps", epsilon), ("y", y)]);
            fits.into_iter()
                .map(|(method, mean, sd)| {
                    let curve = gaussian_curve(&grid, mean, sd)?;
                    let modes = detect_modes(&curve, config.prominence)?;
                    Ok(MethodResult {
                        method,
                        cell: cell.clone(),
                        posterior_mean: vec![mean],
                        posterior_sd: vec![sd],
                        curve,
                        modes,
                        wall_time_ms: ms,
                    })
                })
                .collect()
        })
        .collect();
    let mut results = Vec::new();
    for r in per_cell {
        results.extend(r?);
    }
    Ok(ExperimentReport {
        experiment: "location".into(),
        seed,
        config: serde_json::to_value(config)?,
        results,
        extra: None,
    })
}
