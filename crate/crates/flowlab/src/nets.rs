//! Velocity and score networks: small MLPs over `[x, time features,
//! condition embedding]` with tanh hidden layers, inverted dropout on hidden
//! units, and a linear output head of the input dimension.
//!
//! Two forward paths exist and compute bit-identical values: a slice-based
//! inference path used by the integrators, and a tape path used by training.
//! Condition embeddings initialize to zero so an untrained condition behaves
//! exactly like the null condition.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::tape::{NodeId, Tape};
use crate::numkit::{RngStream, Tensor};

/// Discrete condition label; id 0 is reserved for the null condition used by
/// classifier-free guidance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConditionId(pub usize);

impl ConditionId {
    pub const NULL: ConditionId = ConditionId(0);

    pub fn is_null(self) -> bool {
        self.0 == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldKind {
    Velocity,
    Score,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpConfig {
    /// Dimension d of the transported points.
    pub input_dim: usize,
    pub hidden_widths: Vec<usize>,
    /// Width of the sinusoidal time embedding (even).
    pub time_embed_dim: usize,
    /// Number of discrete conditions including the null condition.
    pub condition_count: usize,
    /// Width of the learned condition embedding.
    pub condition_embed_dim: usize,
    /// Hidden-unit drop probability in [0, 1).
    pub dropout_rate: f64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            input_dim: 2,
            hidden_widths: vec![32, 32],
            time_embed_dim: 8,
            condition_count: 6,
            condition_embed_dim: 8,
            dropout_rate: 0.1,
        }
    }
}

impl MlpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Config("input_dim must be positive".into()));
        }
        if self.hidden_widths.is_empty() || self.hidden_widths.contains(&0) {
            return Err(Error::Config(
                "hidden_widths must be nonempty and positive".into(),
            ));
        }
        if self.time_embed_dim == 0 || self.time_embed_dim % 2 != 0 {
            return Err(Error::Config(
                "time_embed_dim must be a positive even number".into(),
            ));
        }
        if self.condition_count == 0 {
            return Err(Error::Config(
                "condition_count must include the null condition".into(),
            ));
        }
        if self.condition_embed_dim == 0 {
            return Err(Error::Config("condition_embed_dim must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate must lie in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    /// Width of the concatenated first-layer input.
    pub fn feature_dim(&self) -> usize {
        self.input_dim + self.time_embed_dim + self.condition_embed_dim
    }

    fn check_condition(&self, c: ConditionId) -> Result<()> {
        if c.0 >= self.condition_count {
            return Err(Error::Domain(format!(
                "condition id {} out of range (count {})",
                c.0, self.condition_count
            )));
        }
        Ok(())
    }
}

/// Sinusoidal features of t at geometrically spaced frequencies. The base
/// frequency covers half a period on [0, 1], so distinct times (the endpoints
/// in particular) never alias.
pub fn time_features(t: f64, dim: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(dim);
    for k in 0..dim / 2 {
        let ang = std::f64::consts::PI * (1u64 << k) as f64 * t;
        out.push(ang.sin());
        out.push(ang.cos());
    }
    out
}

/// Per-hidden-layer keep decisions with the inverted-dropout scale.
#[derive(Clone, Debug)]
pub struct DropoutMask {
    kept: Vec<Vec<bool>>,
    keep_scale: f64,
}

impl DropoutMask {
    pub fn all_ones(config: &MlpConfig) -> Self {
        Self {
            kept: config.hidden_widths.iter().map(|&w| vec![true; w]).collect(),
            keep_scale: 1.0,
        }
    }

    pub fn keep_scale(&self) -> f64 {
        self.keep_scale
    }

    pub fn kept(&self, layer: usize) -> &[bool] {
        &self.kept[layer]
    }

    /// Multiplicative factor per unit: keep_scale when kept, zero otherwise.
    pub fn factors(&self, layer: usize) -> Vec<f64> {
        self.kept[layer]
            .iter()
            .map(|&k| if k { self.keep_scale } else { 0.0 })
            .collect()
    }

    /// Fraction of kept units across all layers.
    pub fn kept_fraction(&self) -> f64 {
        let total: usize = self.kept.iter().map(|l| l.len()).sum();
        let kept: usize = self
            .kept
            .iter()
            .map(|l| l.iter().filter(|&&k| k).count())
            .sum();
        kept as f64 / total as f64
    }
}

/// Bernoulli(1 - dropout_rate) keep mask per hidden unit; the all-ones mask
/// when the rate is zero.
pub fn sample_mask(rng: &mut RngStream, config: &MlpConfig) -> DropoutMask {
    if config.dropout_rate == 0.0 {
        return DropoutMask::all_ones(config);
    }
    let kept = config
        .hidden_widths
        .iter()
        .map(|&w| {
            (0..w)
                .map(|_| rng.next_uniform() > config.dropout_rate)
                .collect()
        })
        .collect();
    DropoutMask {
        kept,
        keep_scale: 1.0 / (1.0 - config.dropout_rate),
    }
}

/// An MLP field with parameters `[embed, W0, b0, ..., Wout, bout]`.
#[derive(Clone, Debug)]
pub struct FieldNet {
    pub config: MlpConfig,
    pub kind: FieldKind,
    params: Vec<Tensor>,
}

/// Tape-registered parameter leaves for one [`FieldNet`].
pub struct TapeNet {
    pub params: Vec<NodeId>,
}

impl FieldNet {
    /// Layer shapes in parameter order, embedding table first.
    fn param_shapes(config: &MlpConfig) -> Vec<Vec<usize>> {
        let mut shapes = vec![vec![config.condition_count, config.condition_embed_dim]];
        let mut fan_in = config.feature_dim();
        for &w in &config.hidden_widths {
            shapes.push(vec![fan_in, w]);
            shapes.push(vec![w]);
            fan_in = w;
        }
        shapes.push(vec![fan_in, config.input_dim]);
        shapes.push(vec![config.input_dim]);
        shapes
    }

    /// Initialize with 1/sqrt(fan_in)-scaled Gaussian weights, zero biases,
    /// and a zero condition-embedding table.
    pub fn init(config: MlpConfig, kind: FieldKind, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let shapes = Self::param_shapes(&config);
        let mut params = Vec::with_capacity(shapes.len());
        for (i, shape) in shapes.iter().enumerate() {
            if i == 0 || shape.len() == 1 {
                params.push(Tensor::zeros(shape));
            } else {
                let scale = 1.0 / (shape[0] as f64).sqrt();
                let n: usize = shape.iter().product();
                let data: Vec<f64> = (0..n).map(|_| scale * rng.next_gauss()).collect();
                params.push(Tensor::from_parts(shape.clone(), data));
            }
        }
        Ok(Self {
            config,
            kind,
            params,
        })
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    /// Flatten all parameters into one vector (embedding table first).
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for p in &self.params {
            out.extend_from_slice(p.data());
        }
        out
    }

    /// Rebuild a net from a flat parameter vector.
    pub fn from_flat(config: MlpConfig, kind: FieldKind, flat: &[f64]) -> Result<Self> {
        config.validate()?;
        let shapes = Self::param_shapes(&config);
        let want: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
        if flat.len() != want {
            return Err(Error::Dim(format!(
                "flat parameter vector has {} entries, config wants {}",
                flat.len(),
                want
            )));
        }
        let mut params = Vec::with_capacity(shapes.len());
        let mut offset = 0;
        for shape in shapes {
            let n: usize = shape.iter().product();
            params.push(Tensor::new(&shape, flat[offset..offset + n].to_vec())?);
            offset += n;
        }
        Ok(Self {
            config,
            kind,
            params,
        })
    }

    fn embed(&self) -> &Tensor {
        &self.params[0]
    }

    /// Deterministic forward pass for a single point. Without a mask, dropout
    /// is disabled.
    pub fn forward(
        &self,
        x: &[f64],
        t: f64,
        c: ConditionId,
        mask: Option<&DropoutMask>,
    ) -> Result<Vec<f64>> {
        if x.len() != self.config.input_dim {
            return Err(Error::Dim(format!(
                "input has {} coordinates, net wants {}",
                x.len(),
                self.config.input_dim
            )));
        }
        self.config.check_condition(c)?;

        let mut h: Vec<f64> = Vec::with_capacity(self.config.feature_dim());
        h.extend_from_slice(x);
        h.extend_from_slice(&time_features(t, self.config.time_embed_dim));
        let e = self.embed();
        let w = e.cols();
        h.extend_from_slice(&e.data()[c.0 * w..(c.0 + 1) * w]);

        let n_hidden = self.config.hidden_widths.len();
        for layer in 0..=n_hidden {
            let wmat = &self.params[1 + 2 * layer];
            let bias = &self.params[2 + 2 * layer];
            let (rows, cols) = (wmat.rows(), wmat.cols());
            debug_assert_eq!(h.len(), rows);
            let mut next = vec![0.0; cols];
            for (j, nj) in next.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (k, hk) in h.iter().enumerate() {
                    acc += hk * wmat.data()[k * cols + j];
                }
                *nj = acc + bias.data()[j];
            }
            if layer < n_hidden {
                for v in next.iter_mut() {
                    *v = v.tanh();
                }
                if let Some(m) = mask {
                    for (v, f) in next.iter_mut().zip(m.factors(layer)) {
                        *v *= f;
                    }
                }
            }
            h = next;
        }
        Ok(h)
    }

    /// Register parameters as tape leaves (once per tape).
    pub fn register(&self, tape: &mut Tape) -> TapeNet {
        TapeNet {
            params: self.params.iter().map(|p| tape.leaf(p.clone())).collect(),
        }
    }

    /// Batched tape forward; computes the same values as [`Self::forward`]
    /// row by row. One mask applies to the whole batch.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        reg: &TapeNet,
        xs: &[Vec<f64>],
        ts: &[f64],
        cs: &[ConditionId],
        mask: Option<&DropoutMask>,
    ) -> Result<NodeId> {
        let b = xs.len();
        if b == 0 || ts.len() != b || cs.len() != b {
            return Err(Error::Dim("empty or inconsistent batch".into()));
        }
        for c in cs {
            self.config.check_condition(*c)?;
        }
        let d = self.config.input_dim;
        let e = self.config.time_embed_dim;

        let mut xdata = Vec::with_capacity(b * d);
        let mut tdata = Vec::with_capacity(b * e);
        for (x, t) in xs.iter().zip(ts.iter()) {
            if x.len() != d {
                return Err(Error::Dim("batch input dimension mismatch".into()));
            }
            xdata.extend_from_slice(x);
            tdata.extend_from_slice(&time_features(*t, e));
        }
        let xn = tape.leaf(Tensor::from_parts(vec![b, d], xdata));
        let tn = tape.leaf(Tensor::from_parts(vec![b, e], tdata));
        let rows: Vec<usize> = cs.iter().map(|c| c.0).collect();
        let en = tape.gather(reg.params[0], &rows)?;
        let mut h = tape.concat_cols(&[xn, tn, en])?;

        let n_hidden = self.config.hidden_widths.len();
        for layer in 0..=n_hidden {
            let wm = reg.params[1 + 2 * layer];
            let bv = reg.params[2 + 2 * layer];
            let lin = tape.matmul(h, wm)?;
            h = tape.add_row(lin, bv)?;
            if layer < n_hidden {
                h = tape.tanh(h);
                if let Some(m) = mask {
                    let f = tape.leaf(Tensor::from_parts(
                        vec![self.config.hidden_widths[layer]],
                        m.factors(layer),
                    ));
                    h = tape.mul_row(h, f)?;
                }
            }
        }
        Ok(h)
    }
}

/// Classifier-free-guidance combination of conditional and null outputs.
#[inline]
pub fn cfg_combine(alpha: f64, conditional: &[f64], unconditional: &[f64]) -> Vec<f64> {
    conditional
        .iter()
        .zip(unconditional.iter())
        .map(|(u, w)| alpha * u + (1.0 - alpha) * w)
        .collect()
}

/// Guided velocity `alpha * f(x, t, c) + (1 - alpha) * f(x, t, null)`.
///
/// `alpha = 1` short-circuits to the conditional forward.
pub fn guided_velocity(
    net: &FieldNet,
    x: &[f64],
    t: f64,
    c: ConditionId,
    alpha: f64,
    mask: Option<&DropoutMask>,
) -> Result<Vec<f64>> {
    if alpha < 1.0 {
        return Err(Error::Config(format!(
            "guidance strength must be >= 1, got {alpha}"
        )));
    }
    if c.is_null() {
        return Err(Error::Domain(
            "guided velocity needs a non-null condition".into(),
        ));
    }
    let cond = net.forward(x, t, c, mask)?;
    if alpha == 1.0 {
        return Ok(cond);
    }
    let uncond = net.forward(x, t, ConditionId::NULL, mask)?;
    Ok(cfg_combine(alpha, &cond, &uncond))
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const MAGIC: &[u8; 8] = b"FLOWLAB1";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    velocity: MlpConfig,
    score: MlpConfig,
    interpolant: crate::interpolant::InterpolantConfig,
}

/// Trained velocity/score pair plus the interpolant schedule they were
/// trained under.
#[derive(Clone, Debug)]
pub struct ModelPair {
    pub velocity: FieldNet,
    pub score: FieldNet,
    pub interpolant: crate::interpolant::InterpolantConfig,
}

impl ModelPair {
    /// Versioned binary layout: magic, version, JSON-encoded configs, then the
    /// two flat little-endian f64 parameter vectors.
    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&CheckpointMeta {
            velocity: self.velocity.config.clone(),
            score: self.score.config.clone(),
            interpolant: self.interpolant,
        })
        .expect("config serialization cannot fail");
        let vflat = self.velocity.flat();
        let sflat = self.score.flat();
        let mut out = Vec::with_capacity(24 + meta.len() + 8 * (vflat.len() + sflat.len()));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        for flat in [&vflat, &sflat] {
            out.extend_from_slice(&(flat.len() as u64).to_le_bytes());
            for v in flat.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = u32::from_le_bytes(cur.take(4)?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let meta_len = cur.take_u64()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(cur.take(meta_len)?)
            .map_err(|e| Error::Checkpoint(format!("bad metadata: {e}")))?;
        let mut read_flat = |cur: &mut Cursor| -> Result<Vec<f64>> {
            let n = cur.take_u64()? as usize;
            let raw = cur.take(8 * n)?;
            Ok(raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect())
        };
        let vflat = read_flat(&mut cur)?;
        let sflat = read_flat(&mut cur)?;
        Ok(Self {
            velocity: FieldNet::from_flat(meta.velocity, FieldKind::Velocity, &vflat)?,
            score: FieldNet::from_flat(meta.score, FieldKind::Score, &sflat)?,
            interpolant: meta.interpolant,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn take_u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interpolant::InterpolantConfig;

    fn small_config() -> MlpConfig {
        MlpConfig {
            input_dim: 2,
            hidden_widths: vec![8, 8],
            time_embed_dim: 4,
            condition_count: 3,
            condition_embed_dim: 3,
            dropout_rate: 0.2,
        }
    }

    fn random_net(seed: u64) -> FieldNet {
        let cfg = small_config();
        let mut rng = RngStream::new(seed, 0);
        let net = FieldNet::init(cfg.clone(), FieldKind::Velocity, &mut rng).unwrap();
        // randomize everything, including the embedding table
        let flat: Vec<f64> = (0..net.param_count())
            .map(|_| 0.3 * rng.next_gauss())
            .collect();
        FieldNet::from_flat(cfg, FieldKind::Velocity, &flat).unwrap()
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let cfg = small_config();
        let n: usize = FieldNet::param_shapes(&cfg)
            .iter()
            .map(|s| s.iter().product::<usize>())
            .sum();
        let net = FieldNet::from_flat(cfg, FieldKind::Velocity, &vec![0.0; n]).unwrap();
        let out = net.forward(&[0.7, -0.3], 0.4, ConditionId(1), None).unwrap();
        assert_eq!(out, vec![0.0, 0.0]);
    }

    #[test]
    fn forward_rejects_unknown_condition() {
        let net = random_net(1);
        assert!(net.forward(&[0.0, 0.0], 0.5, ConditionId(3), None).is_err());
    }

    #[test]
    fn forward_deterministic_given_mask() {
        let net = random_net(2);
        let mut rng = RngStream::new(5, 1);
        let mask = sample_mask(&mut rng, &net.config);
        let a = net
            .forward(&[0.1, 0.2], 0.3, ConditionId(1), Some(&mask))
            .unwrap();
        let b = net
            .forward(&[0.1, 0.2], 0.3, ConditionId(1), Some(&mask))
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mask_sampling_contracts() {
        let cfg = MlpConfig {
            hidden_widths: vec![5000, 5000],
            dropout_rate: 0.5,
            ..small_config()
        };
        let mut rng = RngStream::new(8, 0);
        let m = sample_mask(&mut rng, &cfg);
        assert!((m.kept_fraction() - 0.5).abs() < 0.02);
        assert_eq!(m.keep_scale(), 2.0);

        // rate = 0 gives the all-ones mask
        let cfg0 = MlpConfig {
            dropout_rate: 0.0,
            ..small_config()
        };
        let m0 = sample_mask(&mut rng, &cfg0);
        assert!(m0.kept.iter().all(|l| l.iter().all(|&k| k)));
        assert_eq!(m0.keep_scale(), 1.0);

        // same stream state twice gives the same mask
        let mut r1 = RngStream::new(17, 4);
        let mut r2 = RngStream::new(17, 4);
        let a = sample_mask(&mut r1, &cfg);
        let b = sample_mask(&mut r2, &cfg);
        assert_eq!(a.kept, b.kept);
    }

    #[test]
    fn condition_changes_output_on_random_net() {
        let net = random_net(3);
        let a = net.forward(&[0.4, 0.1], 0.6, ConditionId(1), None).unwrap();
        let b = net.forward(&[0.4, 0.1], 0.6, ConditionId(2), None).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn guided_velocity_contracts() {
        let net = random_net(4);
        let (x, t, c) = ([0.2, -0.5], 0.35, ConditionId(2));
        let cond = net.forward(&x, t, c, None).unwrap();
        let uncond = net.forward(&x, t, ConditionId::NULL, None).unwrap();

        // alpha = 1 is bit-identical to the conditional forward
        let g1 = guided_velocity(&net, &x, t, c, 1.0, None).unwrap();
        assert_eq!(g1, cond);

        // alpha = 2: 2 u - w, coordinate by coordinate
        let g2 = guided_velocity(&net, &x, t, c, 2.0, None).unwrap();
        for i in 0..2 {
            assert_eq!(g2[i], 2.0 * cond[i] + (1.0 - 2.0) * uncond[i]);
        }

        assert!(guided_velocity(&net, &x, t, c, 0.5, None).is_err());
        assert!(guided_velocity(&net, &x, t, ConditionId::NULL, 1.5, None).is_err());
    }

    #[test]
    fn cfg_combine_hand_case() {
        // branches u = 4, w = 2 at alpha = 1.5: 1.5 * 4 - 0.5 * 2 = 5
        assert_eq!(cfg_combine(1.5, &[4.0], &[2.0]), vec![5.0]);
    }

    #[test]
    fn tape_forward_matches_inference_forward() {
        let net = random_net(6);
        let mut rng = RngStream::new(31, 2);
        let mask = sample_mask(&mut rng, &net.config);
        let xs = vec![vec![0.3, -0.2], vec![-1.1, 0.8], vec![0.0, 0.0]];
        let ts = vec![0.1, 0.55, 0.9];
        let cs = vec![ConditionId(0), ConditionId(1), ConditionId(2)];

        let mut tape = Tape::new();
        let reg = net.register(&mut tape);
        let out = net
            .forward_tape(&mut tape, &reg, &xs, &ts, &cs, Some(&mask))
            .unwrap();
        let batched = tape.value(out);
        for (i, (x, (t, c))) in xs.iter().zip(ts.iter().zip(cs.iter())).enumerate() {
            let single = net.forward(x, *t, *c, Some(&mask)).unwrap();
            for j in 0..2 {
                assert_eq!(batched.at(i, j), single[j], "row {i} col {j}");
            }
        }
    }

    #[test]
    fn tape_gradient_matches_finite_differences() {
        let net = random_net(7);
        let xs = vec![vec![0.25, -0.4], vec![0.9, 0.05]];
        let ts = vec![0.3, 0.7];
        let cs = vec![ConditionId(1), ConditionId(2)];

        let loss_of = |n: &FieldNet| -> f64 {
            let mut tape = Tape::new();
            let reg = n.register(&mut tape);
            let out = n.forward_tape(&mut tape, &reg, &xs, &ts, &cs, None).unwrap();
            let sq = tape.mul(out, out).unwrap();
            let s = tape.sum(sq);
            tape.value(s).item()
        };

        let mut tape = Tape::new();
        let reg = net.register(&mut tape);
        let out = net.forward_tape(&mut tape, &reg, &xs, &ts, &cs, None).unwrap();
        let sq = tape.mul(out, out).unwrap();
        let s = tape.sum(sq);
        let grads = tape.backward(s).unwrap();

        let flat = net.flat();
        let h = 1e-5;
        // spot-check a spread of parameter coordinates across all tensors
        for idx in (0..flat.len()).step_by(flat.len() / 23 + 1) {
            let mut plus = flat.clone();
            plus[idx] += h;
            let mut minus = flat.clone();
            minus[idx] -= h;
            let np = FieldNet::from_flat(net.config.clone(), net.kind, &plus).unwrap();
            let nm = FieldNet::from_flat(net.config.clone(), net.kind, &minus).unwrap();
            let fd = (loss_of(&np) - loss_of(&nm)) / (2.0 * h);

            // locate the tensor and offset for this flat index
            let mut offset = idx;
            let mut which = 0;
            while offset >= net.params[which].len() {
                offset -= net.params[which].len();
                which += 1;
            }
            let g = grads
                .wrt(reg.params[which])
                .map_or(0.0, |t| t.data()[offset]);
            assert!(
                (g - fd).abs() <= 1e-5 * fd.abs().max(1.0),
                "param {idx}: autodiff {g} vs finite difference {fd}"
            );
        }
    }

    /// Averaging masked forwards over many masks approaches the deterministic
    /// forward. Exact only for linear nets, so the test net stays in the
    /// near-linear regime of tanh.
    #[test]
    fn inverted_dropout_mask_average_approaches_deterministic() {
        let cfg = MlpConfig {
            dropout_rate: 0.25,
            ..small_config()
        };
        let mut rng = RngStream::new(40, 0);
        let net0 = FieldNet::init(cfg.clone(), FieldKind::Velocity, &mut rng).unwrap();
        let flat: Vec<f64> = (0..net0.param_count())
            .map(|_| 0.05 * rng.next_gauss())
            .collect();
        let net = FieldNet::from_flat(cfg, FieldKind::Velocity, &flat).unwrap();

        let (x, t, c) = ([0.5, -0.1], 0.45, ConditionId(1));
        let det = net.forward(&x, t, c, None).unwrap();
        let n_masks = 2000;
        let mut sums = vec![0.0; 2];
        let mut sumsq = vec![0.0; 2];
        for _ in 0..n_masks {
            let m = sample_mask(&mut rng, &net.config);
            let y = net.forward(&x, t, c, Some(&m)).unwrap();
            for j in 0..2 {
                sums[j] += y[j];
                sumsq[j] += y[j] * y[j];
            }
        }
        for j in 0..2 {
            let mean = sums[j] / n_masks as f64;
            let var = (sumsq[j] - sums[j] * sums[j] / n_masks as f64) / (n_masks as f64 - 1.0);
            let se = (var / n_masks as f64).sqrt();
            assert!(
                (mean - det[j]).abs() <= 5.0 * se + 1e-6,
                "coord {j}: mask mean {mean} vs deterministic {}",
                det[j]
            );
        }
    }

    #[test]
    fn checkpoint_roundtrip_and_corruption() {
        let mut rng = RngStream::new(50, 0);
        let pair = ModelPair {
            velocity: random_net(8),
            score: FieldNet::init(small_config(), FieldKind::Score, &mut rng).unwrap(),
            interpolant: InterpolantConfig::default(),
        };
        let bytes = pair.to_bytes();
        let back = ModelPair::from_bytes(&bytes).unwrap();
        assert_eq!(back.velocity.flat(), pair.velocity.flat());
        assert_eq!(back.score.flat(), pair.score.flat());
        assert_eq!(back.velocity.config, pair.velocity.config);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(ModelPair::from_bytes(&bad).is_err());
        assert!(ModelPair::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }
}
