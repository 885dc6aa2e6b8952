//! Joint training of the velocity and score networks with condition masking
//! for classifier-free guidance.
//!
//! Per batch element the velocity regression draws its time uniformly on
//! [0, 1] while the score regression clamps to `[t_min, 1 - t_min]`, where
//! the analytic target `-z / gamma(t)` stays bounded. The combined objective
//! is `L_v + lambda * L_s`; the two networks have disjoint parameters, so
//! `lambda = 0` never touches the score net.
//!
//! The null condition's embedding row is pinned at zero, so conditions the
//! optimizer never saw behave exactly like the null condition.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interpolant::{gamma, InterpolantConfig};
use crate::nets::{
    sample_mask, ConditionId, DropoutMask, FieldKind, FieldNet, MlpConfig, ModelPair, TapeNet,
};
use crate::numkit::tape::{NodeId, Tape};
use crate::numkit::{RngStream, Tensor};

/// One training example: source point, target point, condition.
pub type TrainPair = (Vec<f64>, Vec<f64>, ConditionId);

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Weight of the score loss in the combined objective.
    pub lambda: f64,
    /// Probability of replacing a condition with the null condition.
    pub p_c: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            p_c: 0.1,
            batch_size: 64,
            epochs: 120,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 {
            return Err(Error::Config("lambda must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.p_c) {
            return Err(Error::Config("p_c must lie in [0, 1]".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// Mean squared residuals per epoch.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub velocity_loss: f64,
    pub score_loss: f64,
}

/// Per-batch random draws, separated from evaluation so tests can pin them.
#[derive(Clone, Debug)]
pub struct BatchDraws {
    pub t_velocity: Vec<f64>,
    pub z_velocity: Vec<Vec<f64>>,
    pub t_score: Vec<f64>,
    pub z_score: Vec<Vec<f64>>,
    /// Conditions after null masking.
    pub conditions: Vec<ConditionId>,
    pub velocity_mask: Option<DropoutMask>,
    pub score_mask: Option<DropoutMask>,
}

/// Independently replace each condition with the null condition with
/// probability `p_c`.
pub fn mask_conditions(rng: &mut RngStream, cs: &[ConditionId], p_c: f64) -> Vec<ConditionId> {
    cs.iter()
        .map(|&c| {
            if p_c > 0.0 && rng.next_uniform() < p_c {
                ConditionId::NULL
            } else {
                c
            }
        })
        .collect()
}

/// Draw times, path noise, masked conditions, and dropout masks for a batch.
pub fn draw_batch(
    rng: &mut RngStream,
    batch: &[TrainPair],
    net_config: &MlpConfig,
    interp: &InterpolantConfig,
    cfg: &TrainConfig,
) -> BatchDraws {
    let d = net_config.input_dim;
    let b = batch.len();
    let t_velocity: Vec<f64> = (0..b).map(|_| rng.next_uniform()).collect();
    let z_velocity: Vec<Vec<f64>> = (0..b).map(|_| rng.gauss_vec(d)).collect();
    let span = 1.0 - 2.0 * interp.t_min;
    let t_score: Vec<f64> = (0..b)
        .map(|_| interp.t_min + span * rng.next_uniform())
        .collect();
    let z_score: Vec<Vec<f64>> = (0..b).map(|_| rng.gauss_vec(d)).collect();
    let cs: Vec<ConditionId> = batch.iter().map(|(_, _, c)| *c).collect();
    let conditions = mask_conditions(rng, &cs, cfg.p_c);
    let dropout = net_config.dropout_rate > 0.0;
    let velocity_mask = dropout.then(|| sample_mask(rng, net_config));
    let score_mask = dropout.then(|| sample_mask(rng, net_config));
    BatchDraws {
        t_velocity,
        z_velocity,
        t_score,
        z_score,
        conditions,
        velocity_mask,
        score_mask,
    }
}

/// Build the interpolated inputs and regression targets for one loss.
fn batch_points(
    batch: &[TrainPair],
    ts: &[f64],
    zs: &[Vec<f64>],
    interp: &InterpolantConfig,
    score_targets: bool,
) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let d = batch[0].0.len();
    let mut xs = Vec::with_capacity(batch.len());
    let mut targets = Vec::with_capacity(batch.len() * d);
    for (i, (x0, x1, _)) in batch.iter().enumerate() {
        let t = ts[i];
        let g = gamma(t, interp)?;
        let z = &zs[i];
        let xt: Vec<f64> = (0..d)
            .map(|j| (1.0 - t) * x0[j] + t * x1[j] + g * z[j])
            .collect();
        xs.push(xt);
        if score_targets {
            if g <= 0.0 {
                return Err(Error::Domain("score target needs gamma > 0".into()));
            }
            targets.extend(z.iter().map(|zj| -zj / g));
        } else {
            targets.extend((0..d).map(|j| x1[j] - x0[j]));
        }
    }
    Ok((xs, targets))
}

/// Mean squared residual of one net on one loss. When gradients are wanted,
/// the tape, its parameter leaves, and the loss root are returned for a
/// backward pass.
fn net_loss(
    net: &FieldNet,
    xs: &[Vec<f64>],
    targets: Vec<f64>,
    ts: &[f64],
    cs: &[ConditionId],
    mask: Option<&DropoutMask>,
    want_grads: bool,
) -> Result<(f64, Option<(Tape, TapeNet, NodeId)>)> {
    let b = xs.len();
    let d = net.config.input_dim;
    let mut tape = Tape::new();
    let reg = net.register(&mut tape);
    let out = net.forward_tape(&mut tape, &reg, xs, ts, cs, mask)?;
    let target = tape.leaf(Tensor::from_parts(vec![b, d], targets));
    let r = tape.sub(out, target)?;
    let sq = tape.mul(r, r)?;
    let total = tape.sum(sq);
    let loss = tape.scale(total, 1.0 / b as f64);
    let value = tape.value(loss).item();
    if want_grads {
        Ok((value, Some((tape, reg, loss))))
    } else {
        Ok((value, None))
    }
}

/// Evaluate both losses for pinned draws; deterministic.
pub fn loss_batch_at(
    pair: &ModelPair,
    batch: &[TrainPair],
    draws: &BatchDraws,
    lambda: f64,
) -> Result<(f64, f64)> {
    if batch.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let (xs_v, targets_v) = batch_points(
        batch,
        &draws.t_velocity,
        &draws.z_velocity,
        &pair.interpolant,
        false,
    )?;
    let (v_loss, _) = net_loss(
        &pair.velocity,
        &xs_v,
        targets_v,
        &draws.t_velocity,
        &draws.conditions,
        draws.velocity_mask.as_ref(),
        false,
    )?;
    let s_loss = if lambda > 0.0 {
        let (xs_s, targets_s) = batch_points(
            batch,
            &draws.t_score,
            &draws.z_score,
            &pair.interpolant,
            true,
        )?;
        let (s, _) = net_loss(
            &pair.score,
            &xs_s,
            targets_s,
            &draws.t_score,
            &draws.conditions,
            draws.score_mask.as_ref(),
            false,
        )?;
        s
    } else {
        0.0
    };
    Ok((v_loss, s_loss))
}

/// Draw batch randomness and evaluate both losses.
pub fn loss_batch(
    pair: &ModelPair,
    batch: &[TrainPair],
    rng: &mut RngStream,
    cfg: &TrainConfig,
) -> Result<(f64, f64)> {
    if batch.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let draws = draw_batch(rng, batch, &pair.velocity.config, &pair.interpolant, cfg);
    loss_batch_at(pair, batch, &draws, cfg.lambda)
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

struct Adam {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
    lr: f64,
    b1: f64,
    b2: f64,
    eps: f64,
}

impl Adam {
    fn new(params: &[Tensor], cfg: &TrainConfig) -> Self {
        Self {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            t: 0,
            lr: cfg.learning_rate,
            b1: cfg.adam_beta1,
            b2: cfg.adam_beta2,
            eps: cfg.adam_eps,
        }
    }

    fn step(&mut self, params: &mut [Tensor], grads: &[Option<Tensor>], scale: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.b1.powi(self.t as i32);
        let bc2 = 1.0 - self.b2.powi(self.t as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let Some(g) = grads[i].as_ref() else { continue };
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let pd = p.data_mut();
            for j in 0..pd.len() {
                let gj = scale * g.data()[j];
                m[j] = self.b1 * m[j] + (1.0 - self.b1) * gj;
                v[j] = self.b2 * v[j] + (1.0 - self.b2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                pd[j] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Fit
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct TrainOutcome {
    pub pair: ModelPair,
    pub losses: Vec<LossRecord>,
}

/// Backward pass for one net, with the null embedding row pinned.
fn grads_for(tape: &Tape, reg: &TapeNet, loss: NodeId) -> Result<Vec<Option<Tensor>>> {
    let grads = tape.backward(loss)?;
    let mut gvec: Vec<Option<Tensor>> = reg
        .params
        .iter()
        .map(|&id| grads.wrt(id).cloned())
        .collect();
    pin_null_embedding(&mut gvec);
    Ok(gvec)
}

/// Zero the null-condition row of the embedding gradient (params[0]) so the
/// null embedding stays at its initial zero vector.
fn pin_null_embedding(grads: &mut [Option<Tensor>]) {
    if let Some(g) = grads.first_mut().and_then(|g| g.as_mut()) {
        let cols = g.cols();
        for v in g.data_mut()[..cols].iter_mut() {
            *v = 0.0;
        }
    }
}

/// Train a fresh velocity/score pair on paired samples.
///
/// All randomness (init, shuffling, times, noise, masks) derives from
/// `cfg.seed`, so identical inputs give bit-identical checkpoints.
pub fn fit(
    dataset: &[TrainPair],
    net_config: &MlpConfig,
    interp: &InterpolantConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    net_config.validate()?;
    interp.validate()?;
    if dataset.is_empty() {
        return Err(Error::Data("training dataset is empty".into()));
    }
    if cfg.lambda > 0.0 && interp.a == 0.0 {
        return Err(Error::Config(
            "score loss (lambda > 0) needs a perturbation amplitude a > 0".into(),
        ));
    }

    let root = RngStream::new(cfg.seed, 0);
    let mut init_rng = root.named("train/init");
    let mut batch_rng = root.named("train/batch");
    let mut shuffle_rng = root.named("train/shuffle");

    let mut velocity = FieldNet::init(net_config.clone(), FieldKind::Velocity, &mut init_rng)?;
    let mut score = FieldNet::init(net_config.clone(), FieldKind::Score, &mut init_rng)?;
    let mut adam_v = Adam::new(velocity.params(), cfg);
    let mut adam_s = Adam::new(score.params(), cfg);

    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        shuffle_rng.shuffle(&mut order);
        let mut v_sum = 0.0;
        let mut s_sum = 0.0;
        let mut n_batches = 0usize;

        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<TrainPair> = chunk.iter().map(|&i| dataset[i].clone()).collect();
            let draws = draw_batch(&mut batch_rng, &batch, net_config, interp, cfg);

            let (xs_v, targets_v) =
                batch_points(&batch, &draws.t_velocity, &draws.z_velocity, interp, false)?;
            let (v_loss, v_tape) = net_loss(
                &velocity,
                &xs_v,
                targets_v,
                &draws.t_velocity,
                &draws.conditions,
                draws.velocity_mask.as_ref(),
                true,
            )?;
            if !v_loss.is_finite() {
                return Err(Error::Train(format!(
                    "non-finite velocity loss at epoch {epoch} batch {batch_idx} (learning rate {})",
                    cfg.learning_rate
                )));
            }
            let (tape, reg, loss_id) = v_tape.expect("gradients requested");
            let gvec = grads_for(&tape, &reg, loss_id)?;
            adam_v.step(velocity.params_mut(), &gvec, 1.0);

            let s_loss = if cfg.lambda > 0.0 {
                let (xs_s, targets_s) =
                    batch_points(&batch, &draws.t_score, &draws.z_score, interp, true)?;
                let (s_loss, s_tape) = net_loss(
                    &score,
                    &xs_s,
                    targets_s,
                    &draws.t_score,
                    &draws.conditions,
                    draws.score_mask.as_ref(),
                    true,
                )?;
                if !s_loss.is_finite() {
                    return Err(Error::Train(format!(
                        "non-finite score loss at epoch {epoch} batch {batch_idx} (learning rate {})",
                        cfg.learning_rate
                    )));
                }
                let (tape, reg, loss_id) = s_tape.expect("gradients requested");
                let gvec = grads_for(&tape, &reg, loss_id)?;
                adam_s.step(score.params_mut(), &gvec, cfg.lambda);
                s_loss
            } else {
                0.0
            };

            v_sum += v_loss;
            s_sum += s_loss;
            n_batches += 1;
        }

        losses.push(LossRecord {
            epoch,
            velocity_loss: v_sum / n_batches as f64,
            score_loss: s_sum / n_batches as f64,
        });
    }

    Ok(TrainOutcome {
        pair: ModelPair {
            velocity,
            score,
            interpolant: *interp,
        },
        losses,
    })
}
