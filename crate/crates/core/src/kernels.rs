//! Base reproducing kernels and their derivatives.
//!
//! Both kernels are radial, `k(x, y) = f(‖x − y‖²)`, so with `r = x − y`
//! and `u = ‖r‖²`:
//!
//! ```text
//! ∇ₓk = 2 f'(u) r,   ∇ᵧk = −2 f'(u) r,
//! tr(∇ₓ∇ᵧᵀk) = −2d f'(u) − 4u f''(u).
//! ```

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Base kernel entering the Stein kernel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum BaseKernel {
    /// Inverse multi-quadric `(c + ‖x − y‖²)^(−β)`, `c > 0`, `0 < β < 1`.
    Imq { c: f64, beta: f64 },
    /// Gaussian `exp(−‖x − y‖² / 2ℓ²)`.
    Rbf { lengthscale: f64 },
}

impl Default for BaseKernel {
    fn default() -> Self {
        BaseKernel::Imq { c: 1.0, beta: 0.5 }
    }
}

/// Value, gradients and cross-derivative trace of a kernel at one pair.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelDerivatives {
    pub value: f64,
    pub grad_x: Vec<f64>,
    pub grad_y: Vec<f64>,
    pub cross_trace: f64,
}

impl BaseKernel {
    pub fn imq(c: f64, beta: f64) -> Result<Self> {
        let k = BaseKernel::Imq { c, beta };
        k.validate()?;
        Ok(k)
    }

    pub fn rbf(lengthscale: f64) -> Result<Self> {
        let k = BaseKernel::Rbf { lengthscale };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            BaseKernel::Imq { c, beta } => {
                if !(c > 0.0 && c.is_finite()) {
                    return Err(Error::input(format!("IMQ c must be positive, got {c}")));
                }
                if !(beta > 0.0 && beta < 1.0) {
                    return Err(Error::input(format!(
                        "IMQ beta must lie in (0, 1), got {beta}"
                    )));
                }
            }
            BaseKernel::Rbf { lengthscale } => {
                if !(lengthscale > 0.0 && lengthscale.is_finite()) {
                    return Err(Error::input(format!(
                        "RBF lengthscale must be positive, got {lengthscale}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Radial profile `f(u)` with its first two derivatives in `u = ‖r‖²`.
    #[inline]
    fn profile(&self, u: f64) -> (f64, f64, f64) {
        match *self {
            BaseKernel::Imq { c, beta } => {
                let b = c + u;
                let f = b.powf(-beta);
                let f1 = -beta * f / b;
                let f2 = beta * (beta + 1.0) * f / (b * b);
                (f, f1, f2)
            }
            BaseKernel::Rbf { lengthscale } => {
                let inv = 1.0 / (lengthscale * lengthscale);
                let f = (-0.5 * u * inv).exp();
                (f, -0.5 * inv * f, 0.25 * inv * inv * f)
            }
        }
    }

    fn check_dims(x: &[f64], y: &[f64]) -> Result<()> {
        if x.len() != y.len() {
            return Err(Error::input(format!(
                "dimension mismatch: {} vs {}",
                x.len(),
                y.len()
            )));
        }
        if x.is_empty() {
            return Err(Error::input("points must have positive dimension"));
        }
        Ok(())
    }

    pub fn value(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        Self::check_dims(x, y)?;
        let u = sq_dist(x, y);
        Ok(self.profile(u).0)
    }

    pub fn derivatives(&self, x: &[f64], y: &[f64]) -> Result<KernelDerivatives> {
        Self::check_dims(x, y)?;
        let mut grad_x = vec![0.0; x.len()];
        let mut grad_y = vec![0.0; x.len()];
        let (value, cross_trace) = self.derivatives_into(x, y, &mut grad_x, &mut grad_y);
        Ok(KernelDerivatives {
            value,
            grad_x,
            grad_y,
            cross_trace,
        })
    }

    /// Unchecked inner-loop form of [`BaseKernel::derivatives`]; writes the
    /// gradients into the provided buffers and returns `(value, cross_trace)`.
    #[inline]
    pub(crate) fn derivatives_into(
        &self,
        x: &[f64],
        y: &[f64],
        grad_x: &mut [f64],
        grad_y: &mut [f64],
    ) -> (f64, f64) {
        let u = sq_dist(x, y);
        let (f, f1, f2) = self.profile(u);
        for ((gx, gy), (a, b)) in grad_x
            .iter_mut()
            .zip(grad_y.iter_mut())
            .zip(x.iter().zip(y))
        {
            let r = a - b;
            *gx = 2.0 * f1 * r;
            *gy = -2.0 * f1 * r;
        }
        let d = x.len() as f64;
        (f, -2.0 * d * f1 - 4.0 * u * f2)
    }

    /// Largest value the kernel attains (at zero distance).
    pub fn max_value(&self) -> f64 {
        self.profile(0.0).0
    }
}

#[inline]
fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Central finite differences of [`BaseKernel::value`] for every field of
/// [`KernelDerivatives`]. Test oracle; costs `O(d)` kernel evaluations.
pub fn finite_difference_oracle(
    kernel: &BaseKernel,
    x: &[f64],
    y: &[f64],
    step: f64,
) -> Result<KernelDerivatives> {
    if !(step > 0.0) {
        return Err(Error::input(format!("step must be positive, got {step}")));
    }
    let value = kernel.value(x, y)?;
    let d = x.len();
    let h = step;
    let mut xp = x.to_vec();
    let mut yp = y.to_vec();
    let mut grad_x = vec![0.0; d];
    let mut grad_y = vec![0.0; d];
    for i in 0..d {
        xp[i] = x[i] + h;
        let plus = kernel.value(&xp, y)?;
        xp[i] = x[i] - h;
        let minus = kernel.value(&xp, y)?;
        xp[i] = x[i];
        grad_x[i] = (plus - minus) / (2.0 * h);

        yp[i] = y[i] + h;
        let plus = kernel.value(x, &yp)?;
        yp[i] = y[i] - h;
        let minus = kernel.value(x, &yp)?;
        yp[i] = y[i];
        grad_y[i] = (plus - minus) / (2.0 * h);
    }
    // A mixed second difference at `step` loses ~ε/step² to rounding, so
    // it runs at `100 · step` with one Richardson extrapolation instead.
    let h2 = 100.0 * h;
    let mut cross_trace = 0.0;
    for i in 0..d {
        let mut mixed = |h: f64| -> Result<f64> {
            let mut eval = |sx: f64, sy: f64| {
                xp[i] = x[i] + sx;
                yp[i] = y[i] + sy;
                let v = kernel.value(&xp, &yp);
                xp[i] = x[i];
                yp[i] = y[i];
                v
            };
            let pp = eval(h, h)?;
            let pm = eval(h, -h)?;
            let mp = eval(-h, h)?;
            let mm = eval(-h, -h)?;
            Ok((pp - pm - mp + mm) / (4.0 * h * h))
        };
        let fine = mixed(h2)?;
        let coarse = mixed(2.0 * h2)?;
        cross_trace += (4.0 * fine - coarse) / 3.0;
    }
    Ok(KernelDerivatives {
        value,
        grad_x,
        grad_y,
        cross_trace,
    })
}

impl fmt::Display for BaseKernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BaseKernel::Imq { c, beta } => write!(f, "imq:c={c},beta={beta}"),
            BaseKernel::Rbf { lengthscale } => write!(f, "rbf:ell={lengthscale}"),
        }
    }
}

/// Parses `name[:key=value,...]` into a name and key/value list.
pub(crate) fn parse_spec(s: &str) -> Result<(String, Vec<(String, f64)>)> {
    let s = s.trim();
    let (name, rest) = match s.split_once(':') {
        Some((n, r)) => (n, r),
        None => (s, ""),
    };
    let mut params = Vec::new();
    for part in rest.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| Error::input(format!("expected key=value, got '{part}'")))?;
        let v: f64 = v
            .trim()
            .parse()
            .map_err(|_| Error::input(format!("'{v}' is not a number in '{part}'")))?;
        params.push((k.trim().to_ascii_lowercase(), v));
    }
    Ok((name.trim().to_ascii_lowercase(), params))
}

pub(crate) fn take_param(
    params: &[(String, f64)],
    keys: &[&str],
    default: Option<f64>,
) -> Result<f64> {
    params
        .iter()
        .find(|(k, _)| keys.contains(&k.as_str()))
        .map(|(_, v)| *v)
        .or(default)
        .ok_or_else(|| Error::input(format!("missing parameter '{}'", keys[0])))
}

pub(crate) fn reject_unknown(params: &[(String, f64)], allowed: &[&str]) -> Result<()> {
    match params.iter().find(|(k, _)| !allowed.contains(&k.as_str())) {
        Some((k, _)) => Err(Error::input(format!("unknown parameter '{k}'"))),
        None => Ok(()),
    }
}

impl FromStr for BaseKernel {
    type Err = Error;

    /// `imq:c=1,beta=0.5` or `rbf:ell=1`; omitted parameters take defaults.
    fn from_str(s: &str) -> Result<Self> {
        let (name, params) = parse_spec(s)?;
        match name.as_str() {
            "imq" => {
                reject_unknown(&params, &["c", "beta"])?;
                BaseKernel::imq(
                    take_param(&params, &["c"], Some(1.0))?,
                    take_param(&params, &["beta"], Some(0.5))?,
                )
            }
            "rbf" | "gaussian" => {
                reject_unknown(&params, &["ell", "lengthscale"])?;
                BaseKernel::rbf(take_param(&params, &["ell", "lengthscale"], Some(1.0))?)
            }
            other => Err(Error::input(format!("unknown kernel '{other}'"))),
        }
    }
}

impl TryFrom<String> for BaseKernel {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<BaseKernel> for String {
    fn from(k: BaseKernel) -> String {
        k.to_string()
    }
}
