use serde::{Deserialize, Serialize};

use crate::posterior::{trapezoid, DensityCurve};
use crate::{Error, Result, SampleSet};

pub const DEFAULT_PROMINENCE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeReport {
    pub mode_count: usize,
    pub locations: Vec<f64>,
    /// Height above the higher flanking minimum, as a fraction of the
    /// global maximum.
    pub prominences: Vec<f64>,
    pub masses: Vec<f64>,
}

impl ModeReport {
    /// Index of the mode located in `[lo, hi]`, if any.
    pub fn mode_in(&self, lo: f64, hi: f64) -> Option<usize> {
        self.locations.iter().position(|&x| x >= lo && x <= hi)
    }
}

/// Maximal runs `[a, b]` of equal values strictly above both neighbours
/// (a missing neighbour at the boundary counts as lower).
fn peak_runs(y: &[f64]) -> Vec<(usize, usize)> {
    let n = y.len();
    let mut runs = Vec::new();
    let mut a = 0;
    while a < n {
        let mut b = a;
        while b + 1 < n && y[b + 1] == y[a] {
            b += 1;
        }
        let left_lower = a == 0 || y[a - 1] < y[a];
        let right_lower = b == n - 1 || y[b + 1] < y[a];
        if left_lower && right_lower {
            runs.push((a, b));
        }
        a = b + 1;
    }
    runs
}

/// Local maxima of a normalized curve whose prominence reaches
/// `threshold`; the global maximum always counts. Plateaus are located at
/// their midpoint. Mode masses integrate the curve over basins split at the
/// lowest point between neighbouring modes.
pub fn detect_modes(curve: &DensityCurve, threshold: f64) -> Result<ModeReport> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::input(format!(
            "prominence threshold must lie in (0, 1), got {threshold}"
        )));
    }
    let (x, y) = (&curve.grid, &curve.density);
    if x.len() != y.len() || x.len() < 3 {
        return Err(Error::input(
            "curve needs matching grid and density of length >= 3",
        ));
    }
    if y.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::input(
            "curve has negative or non-finite density values",
        ));
    }
    let total = trapezoid(x, y);
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::input(format!(
            "curve is not normalized (integral {total})"
        )));
    }
    let global = y.iter().copied().fold(0.0, f64::max);
    let n = y.len();
    let mut kept: Vec<((usize, usize), f64)> = Vec::new();
    for (a, b) in peak_runs(y) {
        let h = y[a];
        let mut left = None;
        let mut i = a;
        while i > 0 && y[i - 1] <= h {
            i -= 1;
            left = Some(left.map_or(y[i], |m: f64| m.min(y[i])));
        }
        let mut right = None;
        let mut j = b;
        while j + 1 < n && y[j + 1] <= h {
            j += 1;
            right = Some(right.map_or(y[j], |m: f64| m.min(y[j])));
        }
        let base = left.unwrap_or(0.0).max(right.unwrap_or(0.0));
        let prominence = (h - base) / global;
        if h == global || prominence >= threshold {
            kept.push(((a, b), prominence));
        }
    }

    // Basin boundaries at the first minimum between consecutive modes.
    let mut bounds = vec![0];
    for w in kept.windows(2) {
        let (from, to) = ((w[0].0).1, (w[1].0).0);
        let mut arg = from;
        for k in from..=to {
            if y[k] < y[arg] {
                arg = k;
            }
        }
        bounds.push(arg);
    }
    bounds.push(n - 1);
    let mut masses: Vec<f64> = bounds
        .windows(2)
        .map(|w| trapezoid(&x[w[0]..=w[1]], &y[w[0]..=w[1]]))
        .collect();
    let s: f64 = masses.iter().sum();
    masses.iter_mut().for_each(|m| *m /= s);

    Ok(ModeReport {
        mode_count: kept.len(),
        locations: kept
            .iter()
            .map(|((a, b), _)| 0.5 * (x[*a] + x[*b]))
            .collect(),
        prominences: kept.iter().map(|(_, p)| *p).collect(),
        masses,
    })
}

/// Two-component equal-variance Gaussian mixture fitted by EM.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BimodalFit {
    pub pi: f64,
    pub mu1: f64,
    pub mu2: f64,
    pub sigma: f64,
    pub log_likelihood: f64,
    pub iterations: usize,
}

impl BimodalFit {
    pub fn index(&self) -> f64 {
        (self.pi * (1.0 - self.pi)).sqrt() * (self.mu1 - self.mu2).abs() / self.sigma
    }
}

const EM_RESTARTS: usize = 10;
const EM_TOL: f64 = 1e-8;
const EM_MAX_ITER: usize = 500;

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

fn em_from(x: &[f64], mut pi: f64, mut m1: f64, mut m2: f64, mut var: f64) -> Option<BimodalFit> {
    let n = x.len() as f64;
    let mut r = vec![0.0; x.len()];
    let mut prev = f64::NEG_INFINITY;
    let floor = 1e-12;
    for it in 1..=EM_MAX_ITER {
        let c = -0.5 * (2.0 * std::f64::consts::PI * var).ln();
        let mut ll = 0.0;
        for (ri, &xi) in r.iter_mut().zip(x) {
            let a = pi.ln() + c - 0.5 * (xi - m1).powi(2) / var;
            let b = (1.0 - pi).ln() + c - 0.5 * (xi - m2).powi(2) / var;
            let m = a.max(b);
            let lse = m + ((a - m).exp() + (b - m).exp()).ln();
            *ri = (a - lse).exp();
            ll += lse;
        }
        let ll = ll / n;
        let n1: f64 = r.iter().sum();
        let n2 = n - n1;
        if n1 < 1e-9 || n2 < 1e-9 {
            return None;
        }
        m1 = r.iter().zip(x).map(|(ri, xi)| ri * xi).sum::<f64>() / n1;
        m2 = r.iter().zip(x).map(|(ri, xi)| (1.0 - ri) * xi).sum::<f64>() / n2;
        var = r
            .iter()
            .zip(x)
            .map(|(ri, xi)| ri * (xi - m1).powi(2) + (1.0 - ri) * (xi - m2).powi(2))
            .sum::<f64>()
            / n;
        pi = n1 / n;
        if !(var > floor) || !ll.is_finite() {
            return None;
        }
        if (ll - prev).abs() < EM_TOL {
            return Some(BimodalFit {
                pi,
                mu1: m1,
                mu2: m2,
                sigma: var.sqrt(),
                log_likelihood: ll,
                iterations: it,
            });
        }
        prev = ll;
    }
    None
}

/// Best of ten deterministic EM restarts (initial means at symmetric
/// quantile pairs); the log-likelihood tolerance is per observation.
pub fn fit_bimodal(data: &SampleSet) -> Result<Option<BimodalFit>> {
    if data.dim() != 1 {
        return Err(Error::input("bimodality index needs one-dimensional data"));
    }
    let n = data.len();
    if n < 10 {
        return Err(Error::input(format!(
            "bimodality index needs n >= 10, got {n}"
        )));
    }
    let x = data.as_slice();
    let mean = x.iter().sum::<f64>() / n as f64;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    if !(var > 0.0) {
        return Ok(None);
    }
    let mut sorted = x.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut best: Option<BimodalFit> = None;
    for k in 0..EM_RESTARTS {
        let q = 0.05 + 0.4 * k as f64 / EM_RESTARTS as f64;
        let (m1, m2) = (quantile(&sorted, q), quantile(&sorted, 1.0 - q));
        let pi = 0.3 + 0.4 * ((k % 3) as f64 / 2.0);
        if let Some(fit) = em_from(x, pi, m1, m2, var) {
            if best.is_none_or(|b| fit.log_likelihood > b.log_likelihood) {
                best = Some(fit);
            }
        }
    }
    match best {
        Some(b) => Ok(Some(b)),
        None => Err(Error::numerical(format!(
            "EM did not converge to tolerance {EM_TOL:e} within {EM_MAX_ITER} iterations \
             in any of {EM_RESTARTS} restarts (n = {n}, mean = {mean}, variance = {var})"
        ))),
    }
}

/// `√(π(1−π)) |μ₁ − μ₂| / σ`; zero for data without spread.
pub fn bimodality_index(data: &SampleSet) -> Result<f64> {
    Ok(fit_bimodal(data)?.map_or(0.0, |f| f.index()))
}
