//! Rectified-flow paths, stochastic perturbation schedules, analytic score
//! targets, and closed-form Gaussian oracles used to validate samplers and
//! estimators.
//!
//! The path between a source point `x0` and a target point `x1` is the
//! straight line `(1-t) x0 + t x1` perturbed by `gamma(t) z` with
//! `gamma(t) = a sin^2(pi t)`, which vanishes at both endpoints. For fixed
//! endpoints the log-density of the perturbed point is Gaussian with standard
//! deviation `gamma(t)`, so the score target is the exact closed form
//! `-z / gamma(t)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::Tensor;

/// Schedule parameters for the perturbed interpolation path.
///
/// `a = 0` disables the perturbation entirely (pure rectified path); score
/// regression requires `a > 0` and clamps its time draws to
/// `[t_min, 1 - t_min]` where the target stays bounded.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterpolantConfig {
    /// Amplitude of the path perturbation schedule.
    pub a: f64,
    /// Amplitude of the inference-time diffusion schedule.
    pub sigma_max: f64,
    /// Endpoint clamp for score-target time sampling.
    pub t_min: f64,
}

impl Default for InterpolantConfig {
    fn default() -> Self {
        Self {
            a: 0.1,
            sigma_max: 0.5,
            t_min: 0.05,
        }
    }
}

impl InterpolantConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.a >= 0.0 && self.a.is_finite()) {
            return Err(Error::Config(format!("interpolant a must be >= 0, got {}", self.a)));
        }
        if !(self.sigma_max >= 0.0 && self.sigma_max.is_finite()) {
            return Err(Error::Config(format!(
                "sigma_max must be >= 0, got {}",
                self.sigma_max
            )));
        }
        if !(self.t_min > 0.0 && self.t_min < 0.5) {
            return Err(Error::Config(format!(
                "t_min must lie in (0, 0.5), got {}",
                self.t_min
            )));
        }
        Ok(())
    }
}

fn check_unit_time(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("time {t} outside [0, 1]")));
    }
    Ok(())
}

/// Perturbation amplitude `a sin^2(pi t)`; exactly zero at both endpoints.
pub fn gamma(t: f64, cfg: &InterpolantConfig) -> Result<f64> {
    check_unit_time(t)?;
    if t == 0.0 || t == 1.0 {
        return Ok(0.0);
    }
    let s = (std::f64::consts::PI * t).sin();
    Ok(cfg.a * s * s)
}

/// Time derivative of `gamma`: `a pi sin(2 pi t)`.
pub fn gamma_dot(t: f64, cfg: &InterpolantConfig) -> Result<f64> {
    check_unit_time(t)?;
    Ok(cfg.a * std::f64::consts::PI * (2.0 * std::f64::consts::PI * t).sin())
}

/// Perturbed path point `(1-t) x0 + t x1 + gamma(t) z`.
///
/// At `t = 0` this returns `x0` exactly and at `t = 1` it returns `x1`
/// exactly, for every noise vector.
pub fn interpolate(
    x0: &Tensor,
    x1: &Tensor,
    t: f64,
    z: &Tensor,
    cfg: &InterpolantConfig,
) -> Result<Tensor> {
    if x0.shape() != x1.shape() || x0.shape() != z.shape() {
        return Err(Error::Dim(format!(
            "interpolate shapes {:?} / {:?} / {:?}",
            x0.shape(),
            x1.shape(),
            z.shape()
        )));
    }
    let g = gamma(t, cfg)?;
    let data: Vec<f64> = x0
        .data()
        .iter()
        .zip(x1.data().iter())
        .zip(z.data().iter())
        .map(|((a, b), n)| (1.0 - t) * a + t * b + g * n)
        .collect();
    Ok(Tensor::from_parts(x0.shape().to_vec(), data))
}

/// Analytic regression target for the score network: `-z / gamma(t)`.
///
/// Only defined on the clamped window `[t_min, 1 - t_min]`; outside it the
/// target magnitude diverges as `gamma -> 0`.
pub fn score_target(z: &Tensor, t: f64, cfg: &InterpolantConfig) -> Result<Tensor> {
    if t < cfg.t_min || t > 1.0 - cfg.t_min {
        return Err(Error::Domain(format!(
            "score target time {t} outside clamp [{}, {}]",
            cfg.t_min,
            1.0 - cfg.t_min
        )));
    }
    let g = gamma(t, cfg)?;
    if g <= 0.0 {
        return Err(Error::Domain("score target needs gamma > 0".into()));
    }
    let data: Vec<f64> = z.data().iter().map(|n| -n / g).collect();
    Ok(Tensor::from_parts(z.shape().to_vec(), data))
}

/// Independent Gaussian endpoint pair with isotropic variances. All path
/// quantities (marginal law, conditional-mean velocity, score) are closed
/// form, which makes this the reference oracle for sampler and estimator
/// tests.
#[derive(Clone, Debug)]
pub struct GaussianPairOracle {
    pub mu0: Vec<f64>,
    pub mu1: Vec<f64>,
    pub var0: f64,
    pub var1: f64,
}

impl GaussianPairOracle {
    pub fn new(mu0: Vec<f64>, mu1: Vec<f64>, var0: f64, var1: f64) -> Result<Self> {
        if mu0.len() != mu1.len() {
            return Err(Error::Dim("oracle mean dimensions differ".into()));
        }
        if var0 <= 0.0 || var1 <= 0.0 {
            return Err(Error::Config("oracle variances must be positive".into()));
        }
        Ok(Self {
            mu0,
            mu1,
            var0,
            var1,
        })
    }

    pub fn dim(&self) -> usize {
        self.mu0.len()
    }

    /// Mean of the path marginal at time t.
    pub fn marginal_mean(&self, t: f64) -> Vec<f64> {
        self.mu0
            .iter()
            .zip(self.mu1.iter())
            .map(|(a, b)| (1.0 - t) * a + t * b)
            .collect()
    }

    /// Per-coordinate variance of the path marginal at time t,
    /// `(1-t)^2 var0 + t^2 var1 + gamma(t)^2`.
    pub fn marginal_var(&self, t: f64, cfg: &InterpolantConfig) -> Result<f64> {
        let g = gamma(t, cfg)?;
        Ok((1.0 - t) * (1.0 - t) * self.var0 + t * t * self.var1 + g * g)
    }
}

/// Conditional mean of the endpoint difference given the path point:
/// `E[x1 - x0 | x_t = x]`, the regression optimum of the velocity loss.
pub fn oracle_velocity(
    x: &[f64],
    t: f64,
    oracle: &GaussianPairOracle,
    cfg: &InterpolantConfig,
) -> Result<Vec<f64>> {
    let s2 = oracle.marginal_var(t, cfg)?;
    let coef = (t * oracle.var1 - (1.0 - t) * oracle.var0) / s2;
    let mean = oracle.marginal_mean(t);
    Ok(x.iter()
        .enumerate()
        .map(|(i, xi)| (oracle.mu1[i] - oracle.mu0[i]) + coef * (xi - mean[i]))
        .collect())
}

/// Conditional mean of the full path derivative,
/// `E[x1 - x0 | x_t = x] + gamma_dot(t) E[z | x_t = x]`.
///
/// This is the field whose ODE flow reproduces the perturbed-path marginals
/// exactly; it coincides with [`oracle_velocity`] whenever `gamma = 0`.
pub fn oracle_path_velocity(
    x: &[f64],
    t: f64,
    oracle: &GaussianPairOracle,
    cfg: &InterpolantConfig,
) -> Result<Vec<f64>> {
    let s2 = oracle.marginal_var(t, cfg)?;
    let g = gamma(t, cfg)?;
    let gdot = gamma_dot(t, cfg)?;
    let coef = (t * oracle.var1 - (1.0 - t) * oracle.var0 + g * gdot) / s2;
    let mean = oracle.marginal_mean(t);
    Ok(x.iter()
        .enumerate()
        .map(|(i, xi)| (oracle.mu1[i] - oracle.mu0[i]) + coef * (xi - mean[i]))
        .collect())
}

/// Analytic score of the Gaussian path marginal, `-(x - m_t) / s_t^2`.
pub fn oracle_score(
    x: &[f64],
    t: f64,
    oracle: &GaussianPairOracle,
    cfg: &InterpolantConfig,
) -> Result<Vec<f64>> {
    let s2 = oracle.marginal_var(t, cfg)?;
    let mean = oracle.marginal_mean(t);
    Ok(x.iter()
        .enumerate()
        .map(|(i, xi)| -(xi - mean[i]) / s2)
        .collect())
}
