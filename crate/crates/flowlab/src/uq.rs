//! Nested Monte-Carlo uncertainty estimation.
//!
//! For M posterior draws with K stochastic solves each, the law of total
//! variance splits the predictive variance into an aleatoric part (mean of
//! within-draw variance traces) and an epistemic part (trace of the
//! across-draw covariance of within-draw means). The naive epistemic
//! estimator carries residual Monte-Carlo noise of size aleatoric/K; the
//! corrected value subtracts it and is reported alongside, never silently
//! clipped. Antithetic pairing of the driving noise reduces the variance of
//! the within-draw mean estimate without bias.
//!
//! Everything accumulates per-coordinate first and second moments, so memory
//! stays O(d) and no d x d covariance is ever formed.

use serde::{Deserialize, Serialize};

use std::cell::Cell;

use crate::error::{Error, Result};
use crate::nets::{ConditionId, ModelPair};
use crate::numkit::RngStream;
use crate::posterior::{DrawDetail, PosteriorDraw, PosteriorSampler};
use crate::sample::{ode_solve, sde_solve, NetField, NoisePath, SdeConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UqBudget {
    /// M: posterior draws.
    pub draws: usize,
    /// K: stochastic solves per draw (2J in antithetic mode).
    pub samples_per_draw: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UqMode {
    Iid,
    Antithetic,
}

impl std::fmt::Display for UqMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            UqMode::Iid => write!(f, "iid"),
            UqMode::Antithetic => write!(f, "antithetic"),
        }
    }
}

/// Anomaly-score orientation. The default negates traces: collapsed,
/// unusually low uncertainty is treated as the anomaly signal.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreSign {
    #[default]
    NegatedTrace,
    RawTrace,
}

impl ScoreSign {
    pub fn apply(self, trace: f64) -> f64 {
        match self {
            ScoreSign::NegatedTrace => -trace,
            ScoreSign::RawTrace => trace,
        }
    }
}

/// Within-draw sample statistics: mean vector and variance trace with the
/// unbiased (K-1) denominator, accumulated coordinate-wise.
#[derive(Clone, Debug)]
pub struct PerDrawStats {
    pub mean: Vec<f64>,
    pub var_trace: f64,
    pub samples: usize,
}

pub fn per_draw_stats(samples: &[Vec<f64>]) -> Result<PerDrawStats> {
    let k = samples.len();
    if k < 2 {
        return Err(Error::Metric(format!(
            "within-draw variance needs K >= 2, got {k}"
        )));
    }
    let d = samples[0].len();
    let mut mean = vec![0.0; d];
    for s in samples {
        if s.len() != d {
            return Err(Error::Dim("terminal sample dimension mismatch".into()));
        }
        for (m, v) in mean.iter_mut().zip(s.iter()) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= k as f64;
    }
    let mut var_trace = 0.0;
    for j in 0..d {
        let mut acc = 0.0;
        for s in samples {
            let r = s[j] - mean[j];
            acc += r * r;
        }
        var_trace += acc / (k as f64 - 1.0);
    }
    Ok(PerDrawStats {
        mean,
        var_trace,
        samples: k,
    })
}

/// Aleatoric/epistemic decomposition of one input's nested samples.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct UqReport {
    pub aleatoric_trace: f64,
    /// Trace of the across-draw covariance of within-draw means; None when
    /// M < 2 leaves the epistemic term undefined.
    pub epistemic_trace_raw: Option<f64>,
    /// Raw epistemic minus aleatoric/K; may be negative and is flagged, not
    /// clipped.
    pub epistemic_trace_corrected: Option<f64>,
    pub corrected_negative: bool,
    pub budget: UqBudget,
    pub mode: UqMode,
    pub score_aleatoric: f64,
    pub score_epistemic: Option<f64>,
    /// Solver calls actually performed (0 for purely synthetic stats).
    pub solves: u64,
}

/// Trace of the (M-1)-denominator sample covariance of the draw means,
/// accumulated per coordinate.
pub fn across_draw_trace(means: &[Vec<f64>]) -> Result<f64> {
    let m = means.len();
    if m < 2 {
        return Err(Error::Metric(format!(
            "across-draw covariance needs M >= 2, got {m}"
        )));
    }
    let d = means[0].len();
    let mut grand = vec![0.0; d];
    for mu in means {
        for (g, v) in grand.iter_mut().zip(mu.iter()) {
            *g += v;
        }
    }
    for g in grand.iter_mut() {
        *g /= m as f64;
    }
    let mut trace = 0.0;
    for j in 0..d {
        let mut acc = 0.0;
        for mu in means {
            let r = mu[j] - grand[j];
            acc += r * r;
        }
        trace += acc / (m as f64 - 1.0);
    }
    Ok(trace)
}

/// Combine per-draw statistics into the decomposition report.
///
/// `k` is the within-draw sample count used for the residual-noise
/// correction. With a single draw only the aleatoric term is defined.
pub fn decompose(
    stats: &[PerDrawStats],
    k: usize,
    mode: UqMode,
    sign: ScoreSign,
    solves: u64,
) -> Result<UqReport> {
    if stats.is_empty() {
        return Err(Error::Metric("deccompose needs at least one draw".into()));
    }
    let m = stats.len();
    let aleatoric_trace = stats.iter().map(|s| s.var_trace).sum::<f64>() / m as f64;
    let (raw, corrected) = if m >= 2 {
        let means: Vec<Vec<f64>> = stats.iter().map(|s| s.mean.clone()).collect();
        let raw = across_draw_trace(&means)?;
        (Some(raw), Some(raw - aleatoric_trace / k as f64))
    } else {
        (None, None)
    };
    Ok(UqReport {
        aleatoric_trace,
        epistemic_trace_raw: raw,
        epistemic_trace_corrected: corrected,
        corrected_negative: corrected.is_some_and(|c| c < 0.0),
        budget: UqBudget {
            draws: m,
            samples_per_draw: k,
        },
        mode,
        score_aleatoric: sign.apply(aleatoric_trace),
        score_epistemic: raw.map(|r| sign.apply(r)),
        solves,
    })
}

// ---------------------------------------------------------------------------
// Terminal-sample generation
// ---------------------------------------------------------------------------

/// Produces terminal samples of the generative process under a fixed
/// posterior draw. Implementations count their own solver calls.
pub trait TerminalSampler {
    fn dim(&self) -> usize;
    /// One terminal sample with fresh driving noise.
    fn sample(&self, draw: &PosteriorDraw, rng: &mut RngStream) -> Result<Vec<f64>>;
    /// An antithetic pair sharing one noise realization with opposite signs.
    fn sample_pair(
        &self,
        draw: &PosteriorDraw,
        rng: &mut RngStream,
    ) -> Result<(Vec<f64>, Vec<f64>)>;
    /// Cumulative solver-call count.
    fn solves(&self) -> u64;
}

/// SDE-based terminal sampler for learned fields.
pub struct SdeTerminalSampler<'a> {
    pair: &'a ModelPair,
    ensemble: Option<&'a [ModelPair]>,
    x0: Vec<f64>,
    condition: ConditionId,
    cfg: SdeConfig,
    solve_count: Cell<u64>,
}

impl<'a> SdeTerminalSampler<'a> {
    pub fn new(pair: &'a ModelPair, x0: Vec<f64>, condition: ConditionId, cfg: SdeConfig) -> Self {
        Self {
            pair,
            ensemble: None,
            x0,
            condition,
            cfg,
            solve_count: Cell::new(0),
        }
    }

    /// Resolve ensemble-member draws against explicit weight realizations.
    pub fn with_ensemble(mut self, members: &'a [ModelPair]) -> Self {
        self.ensemble = Some(members);
        self
    }

    fn field_for(&self, draw: &'a PosteriorDraw) -> Result<NetField<'a>> {
        let alpha = self.cfg.guidance_alpha;
        match &draw.detail {
            DrawDetail::MapPoint => Ok(NetField::deterministic(self.pair, alpha)),
            DrawDetail::DropoutMasks { velocity, score } => Ok(NetField {
                velocity: &self.pair.velocity,
                score: &self.pair.score,
                velocity_mask: Some(velocity),
                score_mask: Some(score),
                guidance_alpha: alpha,
            }),
            DrawDetail::EnsembleMember(i) => {
                let members = self.ensemble.ok_or_else(|| {
                    Error::Config("ensemble draw without ensemble members".into())
                })?;
                let member = members.get(*i).ok_or_else(|| {
                    Error::Config(format!("ensemble member {i} out of range"))
                })?;
                Ok(NetField::deterministic(member, alpha))
            }
        }
    }
}

impl TerminalSampler for SdeTerminalSampler<'_> {
    fn dim(&self) -> usize {
        self.x0.len()
    }

    fn sample(&self, draw: &PosteriorDraw, rng: &mut RngStream) -> Result<Vec<f64>> {
        let field = self.field_for(draw)?;
        let path = NoisePath::draw(rng, self.cfg.steps, self.x0.len());
        let tr = sde_solve(&field, &self.x0, self.condition, &path, &self.cfg)?;
        self.solve_count.set(self.solve_count.get() + 1);
        Ok(tr.terminal)
    }

    fn sample_pair(
        &self,
        draw: &PosteriorDraw,
        rng: &mut RngStream,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let field = self.field_for(draw)?;
        let plus = NoisePath::draw(rng, self.cfg.steps, self.x0.len());
        let minus = plus.negated();
        let a = sde_solve(&field, &self.x0, self.condition, &plus, &self.cfg)?;
        let b = sde_solve(&field, &self.x0, self.condition, &minus, &self.cfg)?;
        self.solve_count.set(self.solve_count.get() + 2);
        Ok((a.terminal, b.terminal))
    }

    fn solves(&self) -> u64 {
        self.solve_count.get()
    }
}

// ---------------------------------------------------------------------------
// Nested estimators
// ---------------------------------------------------------------------------

/// Run the full nested estimator: M posterior draws, K solves per draw.
///
/// In antithetic mode the within-draw mean is the average of the J = K/2
/// pair means, while the aleatoric trace still comes from the 2J raw
/// terminals (a ranking score; pair correlation makes it biased as a pure
/// variance estimate).
pub fn nested_uq(
    sampler: &PosteriorSampler,
    gen: &dyn TerminalSampler,
    budget: UqBudget,
    mode: UqMode,
    sign: ScoreSign,
    rng: &mut RngStream,
) -> Result<UqReport> {
    if budget.draws == 0 {
        return Err(Error::Config("budget needs M >= 1".into()));
    }
    if budget.samples_per_draw < 2 {
        return Err(Error::Config("budget needs K >= 2".into()));
    }
    if mode == UqMode::Antithetic && budget.samples_per_draw % 2 != 0 {
        return Err(Error::Config(format!(
            "antithetic mode needs an even K, got {}",
            budget.samples_per_draw
        )));
    }
    let solves_before = gen.solves();
    let mut stats = Vec::with_capacity(budget.draws);
    for m in 0..budget.draws {
        let draw = sampler.draw(rng, m as u64);
        match mode {
            UqMode::Iid => {
                let samples: Result<Vec<Vec<f64>>> = (0..budget.samples_per_draw)
                    .map(|_| gen.sample(&draw, rng))
                    .collect();
                stats.push(per_draw_stats(&samples?)?);
            }
            UqMode::Antithetic => {
                let pairs = budget.samples_per_draw / 2;
                let mut raw = Vec::with_capacity(budget.samples_per_draw);
                let mut pair_means: Vec<Vec<f64>> = Vec::with_capacity(pairs);
                for _ in 0..pairs {
                    let (a, b) = gen.sample_pair(&draw, rng)?;
                    pair_means.push(
                        a.iter()
                            .zip(b.iter())
                            .map(|(x, y)| 0.5 * (x + y))
                            .collect(),
                    );
                    raw.push(a);
                    raw.push(b);
                }
                let raw_stats = per_draw_stats(&raw)?;
                // within-draw mean from the pair means
                let d = gen.dim();
                let mut mean = vec![0.0; d];
                for pm in &pair_means {
                    for (m, v) in mean.iter_mut().zip(pm.iter()) {
                        *m += v;
                    }
                }
                for m in mean.iter_mut() {
                    *m /= pairs as f64;
                }
                stats.push(PerDrawStats {
                    mean,
                    var_trace: raw_stats.var_trace,
                    samples: budget.samples_per_draw,
                });
            }
        }
    }
    decompose(
        &stats,
        budget.samples_per_draw,
        mode,
        sign,
        gen.solves() - solves_before,
    )
}

/// Score outcome of a non-nested baseline.
#[derive(Clone, Copy, Debug)]
pub struct ScoreOutcome {
    pub score: f64,
    pub solves: u64,
}

/// Aleatoric baseline at the MAP point: K stochastic solves, score is the
/// (sign-adjusted) mean per-coordinate variance, -tr(Sigma)/d by default.
pub fn map_aleatoric(
    gen: &dyn TerminalSampler,
    k: usize,
    sign: ScoreSign,
    rng: &mut RngStream,
) -> Result<ScoreOutcome> {
    if k < 2 {
        return Err(Error::Config("MAP aleatoric baseline needs K >= 2".into()));
    }
    let before = gen.solves();
    let draw = PosteriorDraw {
        draw_id: 0,
        detail: DrawDetail::MapPoint,
    };
    let samples: Result<Vec<Vec<f64>>> = (0..k).map(|_| gen.sample(&draw, rng)).collect();
    let stats = per_draw_stats(&samples?)?;
    Ok(ScoreOutcome {
        score: sign.apply(stats.var_trace / gen.dim() as f64),
        solves: gen.solves() - before,
    })
}

/// Epistemic baseline from deterministic solves: the across-draw covariance
/// trace of M ODE terminals, one solve per posterior draw.
pub fn ode_epistemic(
    sampler: &PosteriorSampler,
    terminal_of: &mut dyn FnMut(&PosteriorDraw) -> Result<Vec<f64>>,
    m_draws: usize,
    sign: ScoreSign,
    rng: &mut RngStream,
) -> Result<ScoreOutcome> {
    if m_draws < 2 {
        return Err(Error::Config("epistemic baseline needs M >= 2".into()));
    }
    let mut terminals = Vec::with_capacity(m_draws);
    for m in 0..m_draws {
        let draw = sampler.draw(rng, m as u64);
        terminals.push(terminal_of(&draw)?);
    }
    Ok(ScoreOutcome {
        score: sign.apply(across_draw_trace(&terminals)?),
        solves: m_draws as u64,
    })
}

/// ODE-terminal closure over learned fields for [`ode_epistemic`]; uses the
/// velocity network only.
pub fn net_ode_terminal<'a>(
    pair: &'a ModelPair,
    x0: &'a [f64],
    condition: ConditionId,
    cfg: &'a SdeConfig,
) -> impl FnMut(&PosteriorDraw) -> Result<Vec<f64>> + 'a {
    move |draw: &PosteriorDraw| {
        let field = match &draw.detail {
            DrawDetail::MapPoint => NetField::deterministic(pair, cfg.guidance_alpha),
            DrawDetail::DropoutMasks { velocity, .. } => NetField {
                velocity: &pair.velocity,
                score: &pair.score,
                velocity_mask: Some(velocity),
                score_mask: None,
                guidance_alpha: cfg.guidance_alpha,
            },
            DrawDetail::EnsembleMember(_) => {
                return Err(Error::Config(
                    "ensemble draws need explicit members; use a custom closure".into(),
                ))
            }
        };
        Ok(ode_solve(&field, x0, condition, cfg)?.terminal)
    }
}

// ---------------------------------------------------------------------------
// MAP surrogate bound
// ---------------------------------------------------------------------------

/// Outcome of the Lipschitz surrogate-expectation bound check.
#[derive(Clone, Copy, Debug)]
pub struct BoundCheck {
    /// |empirical mean of V under N(map, eps^2 I) - V(map)|
    pub lhs: f64,
    /// L * eps * sqrt(d)
    pub rhs: f64,
    /// Monte-Carlo standard error of the lhs mean estimate.
    pub mc_se: f64,
    pub holds: bool,
}

/// Check |E_q V - V(map)| <= L eps sqrt(d) for an isotropic Gaussian
/// surrogate q = N(map, eps^2 I), allowing 4 standard errors of MC slack.
pub fn map_bound_check(
    v: &dyn Fn(&[f64]) -> f64,
    map_point: &[f64],
    epsilon: f64,
    lipschitz: f64,
    n_draws: usize,
    rng: &mut RngStream,
) -> BoundCheck {
    assert!(n_draws >= 2);
    let d = map_point.len();
    let v_map = v(map_point);
    let mut sum = 0.0;
    let mut sumsq = 0.0;
    let mut w = vec![0.0; d];
    for _ in 0..n_draws {
        for (wi, mi) in w.iter_mut().zip(map_point.iter()) {
            *wi = mi + epsilon * rng.next_gauss();
        }
        let val = v(&w);
        sum += val;
        sumsq += val * val;
    }
    let n = n_draws as f64;
    let mean = sum / n;
    let var = (sumsq - sum * sum / n) / (n - 1.0);
    let mc_se = (var.max(0.0) / n).sqrt();
    let lhs = (mean - v_map).abs();
    let rhs = lipschitz * epsilon * (d as f64).sqrt();
    BoundCheck {
        lhs,
        rhs,
        mc_se,
        holds: lhs <= rhs + 4.0 * mc_se,
    }
}

/// Mean of the chi distribution with d degrees of freedom,
/// `sqrt(2) * Gamma((d+1)/2) / Gamma(d/2)`, i.e. E||z|| for z ~ N(0, I_d).
/// Computed by the half-integer Gamma ratio recurrence.
pub fn chi_mean(d: usize) -> f64 {
    assert!(d >= 1);
    // r(k) = Gamma((k+1)/2) / Gamma(k/2); r(1) = 1/sqrt(pi),
    // r(k) = (k-1) / (2 r(k-1))
    let mut r = 1.0 / std::f64::consts::PI.sqrt();
    for k in 2..=d {
        r = (k as f64 - 1.0) / (2.0 * r);
    }
    std::f64::consts::SQRT_2 * r
}
