use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::{Error, Result, SampleSet};

const GALAXY_CSV: &str = include_str!("../../assets/galaxy.csv");
const GENE_SURROGATE_CSV: &str = include_str!("../../assets/gene_surrogate.csv");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContaminationMode {
    /// Overwrite exactly `round(εn)` uniformly chosen points.
    Replace,
    /// Each point is an outlier independently with probability `ε`.
    MixtureDraw,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContaminationSpec {
    pub epsilon: f64,
    /// Outlier location.
    pub y: f64,
    pub noise_sd: f64,
    pub mode: ContaminationMode,
}

impl ContaminationSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::input(format!(
                "contamination fraction must lie in [0, 1], got {}",
                self.epsilon
            )));
        }
        if !(self.noise_sd > 0.0) || !self.noise_sd.is_finite() {
            return Err(Error::input(format!(
                "contamination noise sd must be positive, got {}",
                self.noise_sd
            )));
        }
        if !self.y.is_finite() {
            return Err(Error::input("contamination location must be finite"));
        }
        Ok(())
    }
}

/// Round half to even.
pub fn round_half_even(x: f64) -> f64 {
    let r = x.round();
    if (x - x.trunc()).abs() == 0.5 && r % 2.0 != 0.0 {
        r - x.signum()
    } else {
        r
    }
}

/// Number of points replaced by [`contaminate_dataset`].
pub fn contamination_count(epsilon: f64, n: usize) -> usize {
    round_half_even(epsilon * n as f64) as usize
}

/// Draws `n` points from `N(θ⋆, 1)`, each independently replaced by a draw
/// from `N(y, noise_sd²)` with probability `ε`.
pub fn generate_location_data(
    n: usize,
    theta_star: f64,
    spec: &ContaminationSpec,
    seed: u64,
) -> Result<SampleSet> {
    spec.validate()?;
    if spec.mode != ContaminationMode::MixtureDraw {
        return Err(Error::input(
            "location data uses mixture-draw contamination",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clean = Normal::new(theta_star, 1.0).map_err(|e| Error::input(e.to_string()))?;
    let outlier = Normal::new(spec.y, spec.noise_sd).map_err(|e| Error::input(e.to_string()))?;
    let xs: Vec<f64> = (0..n)
        .map(|_| {
            if rng.random::<f64>() < spec.epsilon {
                outlier.sample(&mut rng)
            } else {
                clean.sample(&mut rng)
            }
        })
        .collect();
    Ok(SampleSet::from_scalars(&xs))
}

/// Replaces a uniformly chosen subset of `round(εn)` points (one-dimensional
/// data) with `N(y, noise_sd²)` draws; the rest keep their values and order.
pub fn contaminate_dataset(
    data: &SampleSet,
    spec: &ContaminationSpec,
    seed: u64,
) -> Result<SampleSet> {
    spec.validate()?;
    if spec.mode != ContaminationMode::Replace {
        return Err(Error::input("dataset contamination uses replace mode"));
    }
    if data.dim() != 1 {
        return Err(Error::input(
            "contamination is defined for one-dimensional data",
        ));
    }
    let n = data.len();
    let m = contamination_count(spec.epsilon, n);
    let mut xs = data.as_slice().to_vec();
    if m == 0 {
        return Ok(data.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = index::sample(&mut rng, n, m).into_vec();
    idx.sort_unstable();
    let noise = Normal::new(spec.y, spec.noise_sd).map_err(|e| Error::input(e.to_string()))?;
    for i in idx {
        xs[i] = noise.sample(&mut rng);
    }
    Ok(SampleSet::from_scalars(&xs))
}

/// Parses one numeric value per line. A non-numeric first line is taken
/// as a header; blank lines are skipped; LF and CRLF are accepted.
pub fn parse_values(text: &str) -> Result<Vec<f64>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut values = Vec::new();
    let mut first = true;
    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse {
            line: e.position().map(|p| p.line() as usize).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        let fields: Vec<&str> = record.iter().map(str::trim).collect();
        if fields.iter().all(|f| f.is_empty()) {
            continue;
        }
        let was_first = std::mem::replace(&mut first, false);
        if fields.len() != 1 {
            return Err(Error::Parse {
                line,
                message: format!("expected one value per line, found {}", fields.len()),
            });
        }
        match fields[0].parse::<f64>() {
            Ok(v) if v.is_finite() => values.push(v),
            Ok(v) => {
                return Err(Error::Parse {
                    line,
                    message: format!("value {v} is not finite"),
                })
            }
            Err(_) if was_first => continue,
            Err(_) => {
                return Err(Error::Parse {
                    line,
                    message: format!("'{}' is not a number", fields[0]),
                })
            }
        }
    }
    if values.is_empty() {
        return Err(Error::Parse {
            line: 1,
            message: "no numeric values found".into(),
        });
    }
    Ok(values)
}

pub fn read_values(path: &Path) -> Result<Vec<f64>> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::input(format!("cannot read {}: {e}", path.display())))?;
    let text = String::from_utf8(bytes)
        .map_err(|e| Error::input(format!("{} is not UTF-8: {e}", path.display())))?;
    parse_values(&text)
}

/// The 82 Galaxy velocities in km/s.
pub fn galaxy_velocities() -> Vec<f64> {
    parse_values(GALAXY_CSV).expect("bundled asset parses")
}

/// Galaxy velocities in units of 10⁴ km/s.
pub fn galaxy_data() -> SampleSet {
    SampleSet::from_scalars(&galaxy_velocities()).affine(0.0, 1e4)
}

/// Synthetic expression profile: 444 values, 60% from `N(6, 0.5²)` and 40%
/// from `N(8.5, 0.5²)`.
pub fn gene_surrogate() -> SampleSet {
    SampleSet::from_scalars(&parse_values(GENE_SURROGATE_CSV).expect("bundled asset parses"))
}
