use std::collections::hash_map::RandomState;
use std::hash::BuildHasher;
use std::io::{ErrorKind, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use msksd::config::{alpha_gamma_warning, McmcConfig, ModelSpec, RunConfig, WeightSource};
use msksd::experiments::{
    blindness_demo, galaxy_data, gene_surrogate, read_values, run_galaxy, run_gaussian_location,
    run_gene_expression, ExperimentReport,
};
use msksd::models::{kde_plugin, PluginDensity, ScoreModel};
use msksd::posterior::{
    conjugate_coefficients, conjugate_posterior, generalized_log_posterior, pilot_proposal,
    rwm_sample, ChainConfig, GaussianPrior, KsdLoss, Proposal,
};
use msksd::stein::{
    ksd_squared, ksd_squared_minibatch, PointWeights, SteinGram, WeightDensity, WeightSpec,
};
use msksd::{derive_seed, Error, Result, SampleSet};
use serde_json::{json, Value};

use crate::{
    Cli, Command, Common, Experiment, ExperimentArgs, FitArgs, KsdArgs, ModelArgs, ModelKind,
    SourceKind,
};

pub fn run(cli: Cli) -> Result<()> {
    let mut config = load_config(cli.common.config.as_deref())?;
    let seed = match cli.common.seed.or(config.seed) {
        Some(s) => s,
        None => {
            // 53 bits so that the recorded value survives any JSON reader.
            let s = RandomState::new().hash_one(std::process::id()) >> 11;
            log::info!("no seed given; using {s}");
            s
        }
    };
    config.seed = Some(seed);
    let out = match cli.command {
        Command::Ksd(args) => ksd(&mut config, &cli.common, args, seed)?,
        Command::Fit(args) => fit(&mut config, &cli.common, args, seed)?,
        Command::Experiment(args) => experiment(&mut config, &cli.common, args, seed)?,
    };
    let text = serde_json::to_string_pretty(&out)?;
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() != ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

/// Reads a run configuration, converting the `{experiment, seed, config}`
/// echo written next to experiment results into the matching section.
fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Input(format!("cannot read config {}: {e}", path.display())))?;
    let value: Value = serde_json::from_str(&text)
        .map_err(|e| Error::Input(format!("config {} is not valid JSON: {e}", path.display())))?;
    let value = match (
        value.get("experiment").and_then(Value::as_str),
        value.get("config"),
    ) {
        (Some(name), Some(section)) => json!({ "seed": value["seed"], name: section }),
        _ => value,
    };
    RunConfig::from_json_str(&value.to_string())
}

fn apply_weight(weight: &mut WeightSpec, alpha: &mut Option<f64>, common: &Common) -> Result<()> {
    if let Some(w) = common.weight {
        *weight = w;
    }
    if let Some(g) = common.gamma {
        if weight.is_identity() {
            return Err(Error::Input("--gamma needs a non-identity weight".into()));
        }
        *weight = weight.with_gamma(g);
        weight.validate()?;
    }
    if common.alpha.is_some() {
        *alpha = common.alpha;
    }
    Ok(())
}

fn warn_coupling(alpha: f64, weight: &WeightSpec) {
    if let Some(msg) = alpha_gamma_warning(alpha, weight) {
        log::warn!("{msg}");
    }
}

fn load_samples(path: Option<&Path>) -> Result<SampleSet> {
    let path = path.ok_or_else(|| Error::Input("no data file; pass --data".into()))?;
    Ok(SampleSet::from_scalars(&read_values(path)?))
}

fn apply_model(
    spec: &mut ModelSpec,
    source: &mut WeightSource,
    data: &mut Option<PathBuf>,
    args: &ModelArgs,
) -> Result<()> {
    if let Some(kind) = args.model {
        *spec = match kind {
            ModelKind::Gaussian => ModelSpec::GaussianLocation,
            ModelKind::Kef => match spec {
                ModelSpec::Kef { .. } => spec.clone(),
                _ => ModelSpec::kef(msksd::experiments::KefExperimentConfig::galaxy().kef),
            },
            ModelKind::Mixture => ModelSpec::Mixture {
                mu: 4.0,
                sigma: 1.0,
                w1: None,
            },
        };
    }
    match spec {
        ModelSpec::Kef { p, .. } => {
            if let Some(v) = args.p {
                *p = v;
            }
        }
        ModelSpec::Mixture { mu, sigma, w1 } => {
            *mu = args.mu.unwrap_or(*mu);
            *sigma = args.sigma.unwrap_or(*sigma);
            if args.w1.is_some() {
                *w1 = args.w1;
            }
        }
        ModelSpec::GaussianLocation => {}
    }
    if args.p.is_some() && !matches!(spec, ModelSpec::Kef { .. }) {
        return Err(Error::Input("--p applies to the kef model only".into()));
    }
    if (args.mu.is_some() || args.sigma.is_some() || args.w1.is_some())
        && !matches!(spec, ModelSpec::Mixture { .. })
    {
        return Err(Error::Input(
            "--mu, --sigma and --w1 apply to the mixture model only".into(),
        ));
    }
    match args.weight_source {
        Some(SourceKind::Kde) => {
            *source = WeightSource::Kde {
                bandwidth: args.bandwidth,
            }
        }
        Some(SourceKind::Model) => *source = WeightSource::Model,
        Some(SourceKind::Reference) => *source = WeightSource::Reference { sd: 1.0 },
        None => {
            if let (WeightSource::Kde { .. }, Some(h)) = (*source, args.bandwidth) {
                *source = WeightSource::Kde { bandwidth: Some(h) };
            }
        }
    }
    if args.data.is_some() {
        data.clone_from(&args.data);
    }
    Ok(())
}

fn ksd(config: &mut RunConfig, common: &Common, args: KsdArgs, seed: u64) -> Result<Value> {
    let cfg = &mut config.ksd;
    if let Some(k) = common.kernel {
        cfg.kernel = k;
    }
    let mut unused = None;
    apply_weight(&mut cfg.weight, &mut unused, common)?;
    if common.alpha.is_some() {
        log::warn!("--alpha has no effect on the ksd command");
    }
    apply_model(
        &mut cfg.model,
        &mut cfg.weight_source,
        &mut cfg.data,
        &args.model,
    )?;
    if let Some(t) = args.theta {
        cfg.theta = t;
    }
    cfg.compare |= args.compare;
    if args.batch.is_some() {
        cfg.batch = args.batch;
    }
    let cfg = cfg.clone();

    let data = load_samples(cfg.data.as_deref())?;
    let model = cfg.model.build()?;
    if cfg.theta.len() != model.param_dim() {
        return Err(Error::Input(format!(
            "theta has {} values; the model has {} parameters",
            cfg.theta.len(),
            model.param_dim()
        )));
    }
    let plugin = match cfg.weight_source {
        _ if cfg.weight.is_identity() => None,
        WeightSource::Kde { bandwidth } => Some(kde_plugin(&data, bandwidth)?),
        WeightSource::Model => Some(PluginDensity::ModelAt {
            model: Arc::clone(&model),
            theta: cfg.theta.clone(),
        }),
        WeightSource::Reference { sd } => Some(PluginDensity::Reference { sd }),
    };
    let density = plugin
        .as_ref()
        .map_or(WeightDensity::None, |p| WeightDensity::Plugin(p));
    let eval = |w: &WeightSpec, d: WeightDensity<'_>| match cfg.batch {
        Some(b) => ksd_squared_minibatch(
            &data,
            model.as_ref(),
            &cfg.theta,
            &cfg.kernel,
            w,
            d,
            b,
            derive_seed(seed, 0),
        ),
        None => ksd_squared(&data, model.as_ref(), &cfg.theta, &cfg.kernel, w, d),
    };
    let value = eval(&cfg.weight, density)?;
    let mut out = json!({
        "command": "ksd",
        "seed": seed,
        "n": data.len(),
        "config": cfg,
        "ksd_squared": value.value,
        "estimator": value.estimator,
    });
    if cfg.compare {
        out["unweighted_ksd_squared"] =
            json!(eval(&WeightSpec::Identity, WeightDensity::None)?.value);
    }
    Ok(out)
}

fn fit(config: &mut RunConfig, common: &Common, args: FitArgs, seed: u64) -> Result<Value> {
    let cfg = &mut config.fit;
    if let Some(k) = common.kernel {
        cfg.kernel = k;
    }
    apply_weight(&mut cfg.weight, &mut cfg.alpha, common)?;
    apply_model(
        &mut cfg.model,
        &mut cfg.weight_source,
        &mut cfg.data,
        &args.model,
    )?;
    cfg.center |= args.center;
    if args.mcmc || args.steps.is_some() {
        let mcmc = cfg.mcmc.get_or_insert_with(McmcConfig::default);
        if let Some(s) = args.steps {
            mcmc.steps = s;
        }
    }
    let cfg = cfg.clone();
    let alpha = cfg.effective_alpha();
    if cfg.alpha.is_some() {
        warn_coupling(alpha, &cfg.weight);
    }

    let mut data = load_samples(cfg.data.as_deref())?;
    let mut shift = 0.0;
    if cfg.center {
        shift = data.mean()[0];
        let xs: Vec<f64> = data.as_slice().iter().map(|x| x - shift).collect();
        data = SampleSet::from_scalars(&xs);
    }
    let n = data.len();
    let model = cfg.model.build()?;
    let (mean, var) = cfg.model.default_prior()?;
    let prior = GaussianPrior::diagonal(mean, &var)?;
    let plugin = match cfg.weight_source {
        _ if cfg.weight.is_identity() => None,
        WeightSource::Kde { bandwidth } => Some(kde_plugin(&data, bandwidth)?),
        WeightSource::Reference { sd } => Some(PluginDensity::Reference { sd }),
        WeightSource::Model => None,
    };
    let density = match (&plugin, cfg.weight.is_identity()) {
        (_, true) => WeightDensity::None,
        (Some(p), false) => WeightDensity::Plugin(p),
        (None, false) => WeightDensity::Model,
    };
    let mut out = json!({
        "command": "fit",
        "seed": seed,
        "n": n,
        "config": cfg,
        "alpha": alpha,
        "center_shift": shift,
    });

    let Some(mcmc) = &cfg.mcmc else {
        let coeffs =
            conjugate_coefficients(&data, model.as_ref(), &cfg.kernel, &cfg.weight, density)?;
        let post = conjugate_posterior(&prior, &coeffs, alpha, n)?;
        let cov = post.covariance();
        out["method"] = json!("conjugate");
        out["posterior_mean"] = json!(post.mean().as_slice());
        out["posterior_sd"] = json!(post.sd());
        out["posterior_covariance"] = json!((0..cov.nrows())
            .map(|i| (0..cov.ncols()).map(|j| cov[(i, j)]).collect::<Vec<_>>())
            .collect::<Vec<_>>());
        return Ok(out);
    };

    let weights = PointWeights::resolve(&cfg.weight, density, &data)?;
    let exponential = model.exponential_family().is_some() && !weights.depends_on_theta();
    let coeffs;
    let gram;
    let loss = if exponential {
        coeffs = conjugate_coefficients(&data, model.as_ref(), &cfg.kernel, &cfg.weight, density)?;
        KsdLoss::Quadratic(&coeffs)
    } else {
        gram = SteinGram::new(&data, &cfg.kernel)?;
        KsdLoss::Cached {
            gram: &gram,
            model: model.as_ref(),
            weights: &weights,
        }
    };
    let target = |t: &[f64]| generalized_log_posterior(t, &prior, &loss, alpha, n);
    let chain = sample_chain(
        target,
        prior.mean().as_slice().to_vec(),
        model.as_ref(),
        mcmc,
        seed,
    )?;
    out["method"] = json!("mcmc");
    out["posterior_mean"] = json!(chain.mean());
    out["posterior_sd"] = json!(chain
        .variance()
        .iter()
        .map(|v| v.sqrt())
        .collect::<Vec<_>>());
    out["mc_standard_error"] = json!(chain.mc_standard_error());
    out["acceptance_rate"] = json!(chain.acceptance_rate());
    out["kept_samples"] = json!(chain.len());
    Ok(out)
}

fn sample_chain<F>(
    mut target: F,
    initial: Vec<f64>,
    model: &dyn ScoreModel,
    mcmc: &McmcConfig,
    seed: u64,
) -> Result<msksd::posterior::ChainResult>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !model.in_support(&initial) {
        return Err(Error::Input(
            "prior mean lies outside the parameter support".into(),
        ));
    }
    let p = initial.len();
    let (proposal, start) = if mcmc.pilot_steps > 0 {
        pilot_proposal(
            &mut target,
            initial,
            mcmc.pilot_scale,
            mcmc.pilot_steps,
            derive_seed(seed, 1),
        )?
    } else {
        (
            Proposal::Isotropic(mcmc.pilot_scale / (p as f64).sqrt()),
            initial,
        )
    };
    let mut chain = ChainConfig::new(mcmc.steps, proposal, derive_seed(seed, 2), start);
    chain.burn_in = mcmc.burn_in.unwrap_or(mcmc.steps / 5);
    rwm_sample(target, &chain)
}

fn output_dir(config: &RunConfig, common: &Common, name: &str, seed: u64) -> PathBuf {
    if let Some(dir) = &common.out {
        return dir.clone();
    }
    let root = config
        .output_dir
        .clone()
        .or_else(|| std::env::var_os("MSKSD_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("results"));
    root.join(format!("{name}_seed{seed}"))
}

/// Writes through `write`, removing `dir` again if this run created it and
/// writing failed.
fn write_outputs(dir: &Path, write: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let created = !dir.exists();
    let res = write(dir);
    if res.is_err() && created {
        let _ = std::fs::remove_dir_all(dir);
    }
    res
}

fn summary(report: &ExperimentReport) -> Value {
    json!(report
        .results
        .iter()
        .map(|r| json!({
            "method": r.method,
            "cell": r.cell,
            "posterior_mean": r.posterior_mean,
            "posterior_sd": r.posterior_sd,
            "mode_count": r.modes.mode_count,
            "mode_locations": r.modes.locations,
            "mode_masses": r.modes.masses,
        }))
        .collect::<Vec<_>>())
}

fn experiment(
    config: &mut RunConfig,
    common: &Common,
    args: ExperimentArgs,
    seed: u64,
) -> Result<Value> {
    let name = args.name.name();
    let only = |flag: &str, given: bool, allowed: &[Experiment]| {
        if given && !allowed.contains(&args.name) {
            return Err(Error::Input(format!(
                "--{flag} does not apply to the {name} experiment"
            )));
        }
        Ok(())
    };
    only(
        "epsilon",
        args.epsilon.is_some(),
        &[Experiment::Location, Experiment::Galaxy, Experiment::Gene],
    )?;
    only("y", args.y.is_some(), &[Experiment::Location])?;
    only(
        "n",
        args.n.is_some(),
        &[Experiment::Location, Experiment::Blindness],
    )?;
    only("w1", args.w1.is_some(), &[Experiment::Blindness])?;
    only("mu", args.mu.is_some(), &[Experiment::Blindness])?;
    only("data", args.data.is_some(), &[Experiment::Gene])?;
    only(
        "timing",
        args.timing,
        &[Experiment::Location, Experiment::Galaxy, Experiment::Gene],
    )?;

    let dir = output_dir(config, common, name, seed);
    let report = match args.name {
        Experiment::Location => {
            let cfg = &mut config.location;
            if let Some(k) = common.kernel {
                cfg.kernel = k;
            }
            apply_weight(&mut cfg.weight, &mut cfg.alpha, common)?;
            if let Some(e) = args.epsilon {
                cfg.epsilons = e;
            }
            if let Some(y) = args.y {
                cfg.ys = y;
            }
            if let Some(n) = args.n {
                cfg.n = n;
            }
            cfg.timing |= args.timing;
            warn_coupling(cfg.ms_alpha(), &cfg.weight);
            run_gaussian_location(cfg, seed)?
        }
        Experiment::Galaxy | Experiment::Gene => {
            let gene = args.name == Experiment::Gene;
            let cfg = if gene {
                &mut config.gene.fit
            } else {
                &mut config.galaxy
            };
            if let Some(k) = common.kernel {
                cfg.kernel = k;
            }
            apply_weight(&mut cfg.weight, &mut cfg.alpha, common)?;
            if let Some(e) = args.epsilon {
                cfg.epsilons = e;
            }
            cfg.timing |= args.timing;
            warn_coupling(cfg.ms_alpha(), &cfg.weight);
            if gene {
                if args.data.is_some() {
                    config.gene.data = args.data;
                }
                let data = match &config.gene.data {
                    Some(p) => SampleSet::from_scalars(&read_values(p)?),
                    None => gene_surrogate(),
                };
                let mut report = run_gene_expression(&data, &config.gene.fit, seed)?;
                report.config = serde_json::to_value(&config.gene)?;
                report
            } else {
                run_galaxy(&galaxy_data(), cfg, seed)?
            }
        }
        Experiment::Blindness => return blindness(config, common, args, seed, dir),
    };
    write_outputs(&dir, |d| report.write(d))?;
    Ok(json!({
        "experiment": report.experiment,
        "seed": seed,
        "output_dir": dir,
        "results": summary(&report),
        "extra": report.extra,
    }))
}

fn blindness(
    config: &mut RunConfig,
    common: &Common,
    args: ExperimentArgs,
    seed: u64,
    dir: PathBuf,
) -> Result<Value> {
    let cfg = &mut config.blindness;
    if let Some(k) = common.kernel {
        cfg.kernel = k;
    }
    apply_weight(&mut cfg.weight, &mut cfg.alpha, common)?;
    if let Some(n) = args.n {
        cfg.n = n;
    }
    if let Some(w) = args.w1 {
        cfg.w1_true = w;
    }
    if let Some(m) = args.mu {
        cfg.mu = m;
    }
    warn_coupling(cfg.ms_alpha(), &cfg.weight);
    let result = blindness_demo(cfg, seed)?;
    write_outputs(&dir, |d| {
        std::fs::create_dir_all(d)?;
        let echo = json!({ "experiment": "blindness", "seed": seed, "config": cfg });
        std::fs::write(
            d.join("config.json"),
            serde_json::to_string_pretty(&echo)? + "\n",
        )?;
        std::fs::write(
            d.join("result.json"),
            serde_json::to_string_pretty(&result)? + "\n",
        )?;
        let mut csv = String::from("w1,ksd,msksd,msksd_model\n");
        for i in 0..result.grid.len() {
            csv.push_str(&format!(
                "{},{},{},{}\n",
                result.grid[i],
                result.ksd_losses[i],
                result.msksd_losses[i],
                result.msksd_model_losses[i]
            ));
        }
        std::fs::write(d.join("losses.csv"), csv)?;
        Ok(())
    })?;
    Ok(json!({
        "experiment": "blindness",
        "seed": seed,
        "output_dir": dir,
        "w_hat_ksd": result.w_hat_ksd,
        "w_hat_msksd": result.w_hat_msksd,
        "w_hat_msksd_model": result.w_hat_msksd_model,
        "posterior_mean_ksd": result.posterior_mean_ksd,
        "posterior_mean_msksd": result.posterior_mean_msksd,
        "posterior_mean_msksd_model": result.posterior_mean_msksd_model,
    }))
}
