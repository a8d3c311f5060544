//! Data generation, mode analysis and the experiment runners.

mod blindness;
mod data;
mod kef;
mod location;
mod modes;

use std::fmt;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::posterior::DensityCurve;
use crate::Result;

pub use blindness::{blindness_demo, sample_mixture, BlindnessConfig, BlindnessResult};
pub use data::{
    contaminate_dataset, contamination_count, galaxy_data, galaxy_velocities, gene_surrogate,
    generate_location_data, parse_values, read_values, round_half_even, ContaminationMode,
    ContaminationSpec,
};
pub use kef::{
    fit_kef, run_galaxy, run_gene_expression, GridSpec, KefExperimentConfig, Predictive,
};
pub use location::{fit_location, run_gaussian_location, LocationConfig};
pub use modes::{
    bimodality_index, detect_modes, fit_bimodal, BimodalFit, ModeReport, DEFAULT_PROMINENCE,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "standard-bayes")]
    StandardBayes,
    #[serde(rename = "ksd-bayes")]
    KsdBayes,
    #[serde(rename = "msksd-bayes")]
    MsksdBayes,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::StandardBayes => "standard-bayes",
            Method::KsdBayes => "ksd-bayes",
            Method::MsksdBayes => "msksd-bayes",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One method fitted on one cell of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub method: Method,
    pub cell: String,
    pub posterior_mean: Vec<f64>,
    pub posterior_sd: Vec<f64>,
    pub curve: DensityCurve,
    pub modes: ModeReport,
    /// Filled only when timing is requested, so that reports stay
    /// byte-reproducible by default.
    pub wall_time_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub experiment: String,
    pub seed: u64,
    /// Effective configuration, echoed into `config.json`.
    pub config: serde_json::Value,
    pub results: Vec<MethodResult>,
    /// Experiment-specific extras (e.g. blindness argmins).
    pub extra: Option<serde_json::Value>,
}

impl ExperimentReport {
    pub fn result(&self, method: Method, cell: &str) -> Option<&MethodResult> {
        self.results
            .iter()
            .find(|r| r.method == method && r.cell == cell)
    }

    pub fn summary_csv(&self) -> String {
        let join = |v: &[f64]| v.iter().map(f64::to_string).collect::<Vec<_>>().join(";");
        let mut s = String::from(
            "method,cell,posterior_mean,posterior_sd,mode_count,mode_locations,mode_masses,wall_time_ms\n",
        );
        for r in &self.results {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.method,
                r.cell,
                join(&r.posterior_mean),
                join(&r.posterior_sd),
                r.modes.mode_count,
                join(&r.modes.locations),
                join(&r.modes.masses),
                r.wall_time_ms.map(|t| t.to_string()).unwrap_or_default(),
            ));
        }
        s
    }

    /// Writes `config.json`, `summary.csv` and one `curve_<method>_<cell>.csv`
    /// per result into `dir` (created if missing).
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let config = serde_json::json!({
            "experiment": self.experiment,
            "seed": self.seed,
            "config": self.config,
        });
        std::fs::write(
            dir.join("config.json"),
            serde_json::to_string_pretty(&config)? + "\n",
        )?;
        std::fs::write(dir.join("summary.csv"), self.summary_csv())?;
        for r in &self.results {
            let name = format!("curve_{}_{}.csv", r.method, r.cell);
            std::fs::write(dir.join(name), r.curve.to_csv())?;
        }
        if let Some(extra) = &self.extra {
            std::fs::write(
                dir.join("extra.json"),
                serde_json::to_string_pretty(extra)? + "\n",
            )?;
        }
        Ok(())
    }
}

/// Runs `f`, returning its value and the elapsed milliseconds when `timing`.
pub(crate) fn timed<T>(timing: bool, f: impl FnOnce() -> Result<T>) -> Result<(T, Option<f64>)> {
    let start = Instant::now();
    let v = f()?;
    Ok((v, timing.then(|| start.elapsed().as_secs_f64() * 1e3)))
}

/// Cell label such as `eps0.1_y10`.
pub(crate) fn cell_label(parts: &[(&str, f64)]) -> String {
    parts
        .iter()
        .map(|(k, v)| format!("{k}{v}"))
        .collect::<Vec<_>>()
        .join("_")
}
