//! Deterministic ODE integration, marginal-preserving SDE integration, the
//! diffusion schedule, and antithetic driving-noise construction.
//!
//! The SDE step is Euler-Maruyama on
//! `dx = (v + sigma^2/2 * s) dt + sigma dW`, where `s` approximates the score
//! (gradient of the log marginal density). With that sign the Fokker-Planck
//! correction exactly cancels the diffusion-induced dilation, so the SDE
//! shares the time-marginals of the plain ODE `dx = v dt`; dropping the
//! correction inflates the marginal variance.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interpolant::{
    oracle_path_velocity, oracle_score, GaussianPairOracle, InterpolantConfig,
};
use crate::nets::{guided_velocity, ConditionId, DropoutMask, FieldNet};
use crate::numkit::RngStream;

/// Shape tag for the diffusion schedule.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaShape {
    /// `sigma_max * sin(pi t)`, vanishing at both endpoints.
    #[default]
    Sinusoidal,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SdeConfig {
    /// Number of uniform integrator steps.
    pub steps: usize,
    pub sigma_max: f64,
    pub sigma_shape: SigmaShape,
    /// Classifier-free-guidance strength (1 = conditional field).
    pub guidance_alpha: f64,
    /// Apply the score-based drift correction. Disabling it reproduces the
    /// naive noisy sampler whose marginals drift.
    pub drift_correction: bool,
}

impl Default for SdeConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            sigma_max: 0.5,
            sigma_shape: SigmaShape::Sinusoidal,
            guidance_alpha: 1.0,
            drift_correction: true,
        }
    }
}

impl SdeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be >= 1".into()));
        }
        if !(self.sigma_max >= 0.0 && self.sigma_max.is_finite()) {
            return Err(Error::Config(format!(
                "sigma_max must be >= 0, got {}",
                self.sigma_max
            )));
        }
        if self.guidance_alpha < 1.0 {
            return Err(Error::Config(format!(
                "guidance_alpha must be >= 1, got {}",
                self.guidance_alpha
            )));
        }
        Ok(())
    }
}

/// Diffusion amplitude at time t; exactly zero at both endpoints.
pub fn sigma(t: f64, cfg: &SdeConfig) -> Result<f64> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("time {t} outside [0, 1]")));
    }
    match cfg.sigma_shape {
        SigmaShape::Sinusoidal => {
            if t == 0.0 || t == 1.0 {
                Ok(0.0)
            } else {
                Ok(cfg.sigma_max * (std::f64::consts::PI * t).sin())
            }
        }
    }
}

/// A drift/score field the integrators can evaluate.
pub trait FlowField {
    fn dim(&self) -> usize;
    fn velocity(&self, x: &[f64], t: f64, c: ConditionId) -> Result<Vec<f64>>;
    fn score(&self, x: &[f64], t: f64, c: ConditionId) -> Result<Vec<f64>>;
}

/// Closed-form Gaussian oracle fields. The velocity is the full
/// path-derivative conditional mean, so the ODE flow reproduces the
/// interpolation-path marginals exactly and the score matches them.
pub struct OracleField {
    pub oracle: GaussianPairOracle,
    pub interpolant: InterpolantConfig,
}

impl FlowField for OracleField {
    fn dim(&self) -> usize {
        self.oracle.dim()
    }

    fn velocity(&self, x: &[f64], t: f64, _c: ConditionId) -> Result<Vec<f64>> {
        oracle_path_velocity(x, t, &self.oracle, &self.interpolant)
    }

    fn score(&self, x: &[f64], t: f64, _c: ConditionId) -> Result<Vec<f64>> {
        oracle_score(x, t, &self.oracle, &self.interpolant)
    }
}

/// Learned fields under one fixed parameter realization (dropout masks held
/// constant for the whole trajectory). Guidance applies to the velocity only.
pub struct NetField<'a> {
    pub velocity: &'a FieldNet,
    pub score: &'a FieldNet,
    pub velocity_mask: Option<&'a DropoutMask>,
    pub score_mask: Option<&'a DropoutMask>,
    pub guidance_alpha: f64,
}

impl<'a> NetField<'a> {
    pub fn deterministic(pair: &'a crate::nets::ModelPair, guidance_alpha: f64) -> Self {
        Self {
            velocity: &pair.velocity,
            score: &pair.score,
            velocity_mask: None,
            score_mask: None,
            guidance_alpha,
        }
    }
}

impl FlowField for NetField<'_> {
    fn dim(&self) -> usize {
        self.velocity.config.input_dim
    }

    fn velocity(&self, x: &[f64], t: f64, c: ConditionId) -> Result<Vec<f64>> {
        if self.guidance_alpha == 1.0 || c.is_null() {
            self.velocity.forward(x, t, c, self.velocity_mask)
        } else {
            guided_velocity(self.velocity, x, t, c, self.guidance_alpha, self.velocity_mask)
        }
    }

    fn score(&self, x: &[f64], t: f64, c: ConditionId) -> Result<Vec<f64>> {
        self.score.forward(x, t, c, self.score_mask)
    }
}

/// Pre-drawn standard-normal increments with an antithetic sign.
#[derive(Clone, Debug)]
pub struct NoisePath {
    /// steps x d increments, row-major by step.
    pub eps: Vec<f64>,
    /// +1 or -1; the antithetic partner shares `eps` with the opposite sign.
    pub sign: f64,
    pub steps: usize,
    pub dim: usize,
}

impl NoisePath {
    pub fn draw(rng: &mut RngStream, steps: usize, dim: usize) -> Self {
        Self {
            eps: rng.gauss_vec(steps * dim),
            sign: 1.0,
            steps,
            dim,
        }
    }

    /// The mirrored path: identical increments, opposite sign.
    pub fn negated(&self) -> Self {
        Self {
            eps: self.eps.clone(),
            sign: -self.sign,
            steps: self.steps,
            dim: self.dim,
        }
    }
}

/// J independent increment draws, each emitted with sign +1 and sign -1
/// (2J paths total, pairs adjacent).
pub fn antithetic_paths(rng: &mut RngStream, pairs: usize, steps: usize, dim: usize) -> Vec<NoisePath> {
    assert!(pairs >= 1, "need at least one antithetic pair");
    let mut out = Vec::with_capacity(2 * pairs);
    for _ in 0..pairs {
        let p = NoisePath::draw(rng, steps, dim);
        let n = p.negated();
        out.push(p);
        out.push(n);
    }
    out
}

/// States at every grid time plus the terminal point.
#[derive(Clone, Debug)]
pub struct Trajectory {
    /// (steps + 1) states of dimension d; `states[0]` is the input.
    pub states: Vec<Vec<f64>>,
    pub terminal: Vec<f64>,
}

impl Trajectory {
    fn from_states(states: Vec<Vec<f64>>) -> Self {
        let terminal = states.last().expect("nonempty trajectory").clone();
        Self { states, terminal }
    }
}

fn check_finite(x: &[f64], step: usize, t: f64) -> Result<()> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Integration { step, t });
    }
    Ok(())
}

/// Explicit Euler integration of `dx = v dt` on a uniform grid.
pub fn ode_solve(
    field: &dyn FlowField,
    x0: &[f64],
    c: ConditionId,
    cfg: &SdeConfig,
) -> Result<Trajectory> {
    cfg.validate()?;
    let n = cfg.steps;
    let dt = 1.0 / n as f64;
    let mut x = x0.to_vec();
    let mut states = Vec::with_capacity(n + 1);
    states.push(x.clone());
    for k in 0..n {
        let t = k as f64 * dt;
        let v = field.velocity(&x, t, c)?;
        for (xi, vi) in x.iter_mut().zip(v.iter()) {
            *xi += vi * dt;
        }
        check_finite(&x, k, t)?;
        states.push(x.clone());
    }
    Ok(Trajectory::from_states(states))
}

/// Euler-Maruyama integration of the score-corrected SDE along a fixed noise
/// path; bit-deterministic given the path.
pub fn sde_solve(
    field: &dyn FlowField,
    x0: &[f64],
    c: ConditionId,
    path: &NoisePath,
    cfg: &SdeConfig,
) -> Result<Trajectory> {
    cfg.validate()?;
    let n = cfg.steps;
    if path.steps != n || path.dim != x0.len() {
        return Err(Error::Dim(format!(
            "noise path is {}x{}, integrator wants {}x{}",
            path.steps,
            path.dim,
            n,
            x0.len()
        )));
    }
    let d = x0.len();
    let dt = 1.0 / n as f64;
    let sqrt_dt = dt.sqrt();
    let mut x = x0.to_vec();
    let mut states = Vec::with_capacity(n + 1);
    states.push(x.clone());
    for k in 0..n {
        let t = k as f64 * dt;
        let sig = sigma(t, cfg)?;
        let v = field.velocity(&x, t, c)?;
        let drift: Vec<f64> = if cfg.drift_correction && sig > 0.0 {
            let s = field.score(&x, t, c)?;
            v.iter()
                .zip(s.iter())
                .map(|(vi, si)| vi + 0.5 * sig * sig * si)
                .collect()
        } else {
            v
        };
        for i in 0..d {
            x[i] += drift[i] * dt + sig * sqrt_dt * path.sign * path.eps[k * d + i];
        }
        check_finite(&x, k, t)?;
        states.push(x.clone());
    }
    Ok(Trajectory::from_states(states))
}
