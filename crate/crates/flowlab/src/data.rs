//! Synthetic distribution-to-distribution datasets with discrete conditions
//! and parameterized distribution-shift scenarios.
//!
//! The source is a standard normal in d dimensions (already standardized).
//! Each condition's target is the base family rotated to a condition-specific
//! angle, so withheld conditions correspond to rotations the model never saw.
//! Training pairs use independent coupling: x0 and x1 are drawn separately.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::ConditionId;
use crate::numkit::RngStream;
use crate::train::TrainPair;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum TargetFamily {
    /// Equal-weight isotropic mixture with the given centers.
    GaussianMixture { centers: Vec<Vec<f64>>, sd: f64 },
    /// Circle of the given radius with radial noise (2-D).
    Ring { radius: f64, sd: f64 },
    /// Two interleaved half circles (2-D).
    Moons { sd: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub dimension: usize,
    pub n_train: usize,
    pub n_eval: usize,
    /// Held-out true target samples per condition, used as metric references.
    pub n_reference: usize,
    /// Conditions seen in training, ids 1..=train_conditions.
    pub train_conditions: usize,
    /// Conditions withheld from training, ids after the training ones.
    pub withheld_conditions: usize,
    pub target: TargetFamily,
    pub seed: u64,
}

impl Default for DatasetSpec {
    /// The default benchmark: 2-D, 4 training conditions plus 1 withheld,
    /// a three-center Gaussian mixture rotated per condition.
    fn default() -> Self {
        Self {
            dimension: 2,
            n_train: 2048,
            n_eval: 256,
            n_reference: 512,
            train_conditions: 4,
            withheld_conditions: 1,
            target: TargetFamily::GaussianMixture {
                centers: vec![vec![2.0, 0.0], vec![-1.0, 1.7], vec![-1.0, -1.7]],
                sd: 0.3,
            },
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dimension == 0 {
            return Err(Error::Config("dimension must be positive".into()));
        }
        if self.n_train == 0 {
            return Err(Error::Data("n_train must be positive".into()));
        }
        if self.train_conditions == 0 {
            return Err(Error::Config("need at least one training condition".into()));
        }
        match &self.target {
            TargetFamily::GaussianMixture { centers, sd } => {
                if centers.is_empty() || *sd <= 0.0 {
                    return Err(Error::Config("mixture needs centers and sd > 0".into()));
                }
                if centers.iter().any(|c| c.len() != self.dimension) {
                    return Err(Error::Config("mixture center dimension mismatch".into()));
                }
            }
            TargetFamily::Ring { sd, .. } | TargetFamily::Moons { sd } => {
                if *sd <= 0.0 {
                    return Err(Error::Config("target sd must be positive".into()));
                }
                if self.dimension != 2 {
                    return Err(Error::Config("ring/moons targets are 2-D".into()));
                }
            }
        }
        Ok(())
    }

    /// Total distinct condition ids including the reserved null id 0.
    pub fn condition_count(&self) -> usize {
        1 + self.train_conditions + self.withheld_conditions
    }

    pub fn training_condition_ids(&self) -> Vec<ConditionId> {
        (1..=self.train_conditions).map(ConditionId).collect()
    }

    pub fn withheld_condition_ids(&self) -> Vec<ConditionId> {
        (self.train_conditions + 1..self.train_conditions + 1 + self.withheld_conditions)
            .map(ConditionId)
            .collect()
    }

    /// Rotation angle assigned to a condition (2-D family rotation).
    fn condition_angle(&self, c: ConditionId) -> f64 {
        let total = (self.train_conditions + self.withheld_conditions) as f64;
        std::f64::consts::TAU * (c.0 as f64 - 1.0) / total
    }

    /// One target draw for a condition.
    pub fn sample_target(&self, c: ConditionId, rng: &mut RngStream) -> Vec<f64> {
        let angle = self.condition_angle(c);
        let base = match &self.target {
            TargetFamily::GaussianMixture { centers, sd } => {
                let which = rng.next_index(centers.len());
                centers[which]
                    .iter()
                    .map(|m| m + sd * rng.next_gauss())
                    .collect::<Vec<f64>>()
            }
            TargetFamily::Ring { radius, sd } => {
                let theta = std::f64::consts::TAU * rng.next_uniform();
                let r = radius + sd * rng.next_gauss();
                vec![r * theta.cos(), r * theta.sin()]
            }
            TargetFamily::Moons { sd } => {
                let theta = std::f64::consts::PI * rng.next_uniform();
                let (x, y) = if rng.next_uniform() < 0.5 {
                    (theta.cos(), theta.sin())
                } else {
                    (1.0 - theta.cos(), 0.5 - theta.sin())
                };
                vec![x + sd * rng.next_gauss(), y + sd * rng.next_gauss()]
            }
        };
        rotate_in_plane(&base, angle)
    }

    /// One source draw (standard normal).
    pub fn sample_source(&self, rng: &mut RngStream) -> Vec<f64> {
        rng.gauss_vec(self.dimension)
    }
}

/// Rotate coordinates (0, 1) by the angle, passing higher coordinates
/// through; identity in 1-D.
pub fn rotate_in_plane(x: &[f64], angle: f64) -> Vec<f64> {
    if x.len() < 2 || angle == 0.0 {
        return x.to_vec();
    }
    let (s, c) = angle.sin_cos();
    let mut out = x.to_vec();
    out[0] = c * x[0] - s * x[1];
    out[1] = s * x[0] + c * x[1];
    out
}

/// Distribution-shift scenario applied to the evaluation source.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftKind {
    /// Affine intensity change: x -> (1 + s) x + s * 1.
    Intensity,
    /// In-plane rotation of the source by s * pi.
    RotatedSource,
    /// Conditions drawn from the withheld set; the source additionally
    /// carries an intensity shift of the given severity (severity 0 is the
    /// pure unseen-condition case).
    UnseenCondition,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    pub kind: ShiftKind,
    pub severity: f64,
}

impl ShiftSpec {
    pub fn validate(&self) -> Result<()> {
        if self.severity < 0.0 {
            return Err(Error::Config("shift severity must be >= 0".into()));
        }
        Ok(())
    }
}

/// Apply a shift to one source point (severity 0 is the identity).
pub fn apply_shift(x: &[f64], shift: &ShiftSpec) -> Vec<f64> {
    match shift.kind {
        ShiftKind::Intensity | ShiftKind::UnseenCondition => x
            .iter()
            .map(|v| (1.0 + shift.severity) * v + shift.severity)
            .collect(),
        ShiftKind::RotatedSource => {
            rotate_in_plane(x, shift.severity * std::f64::consts::PI)
        }
    }
}

/// Materialized dataset: training pairs, evaluation sources, and held-out
/// target references per condition.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub train: Vec<TrainPair>,
    pub eval_sources: Vec<Vec<f64>>,
    pub references: BTreeMap<usize, Vec<Vec<f64>>>,
}

/// Draw the dataset deterministically from the spec seed. Training pairs use
/// independent coupling with conditions uniform over the training set;
/// references cover withheld conditions too.
pub fn make_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let root = RngStream::new(spec.seed, 0);
    let mut train_rng = root.named("data/train");
    let mut eval_rng = root.named("data/eval");
    let mut ref_rng = root.named("data/reference");

    let train_ids = spec.training_condition_ids();
    let train: Vec<TrainPair> = (0..spec.n_train)
        .map(|_| {
            let c = train_ids[train_rng.next_index(train_ids.len())];
            let x0 = spec.sample_source(&mut train_rng);
            let x1 = spec.sample_target(c, &mut train_rng);
            (x0, x1, c)
        })
        .collect();

    let eval_sources: Vec<Vec<f64>> = (0..spec.n_eval)
        .map(|_| spec.sample_source(&mut eval_rng))
        .collect();

    let mut references = BTreeMap::new();
    for c in train_ids.iter().chain(spec.withheld_condition_ids().iter()) {
        let set: Vec<Vec<f64>> = (0..spec.n_reference)
            .map(|_| spec.sample_target(*c, &mut ref_rng))
            .collect();
        references.insert(c.0, set);
    }

    Ok(Dataset {
        spec: spec.clone(),
        train,
        eval_sources,
        references,
    })
}

/// One evaluation input with its provenance.
#[derive(Clone, Debug)]
pub struct PoolItem {
    pub input_id: String,
    pub x0: Vec<f64>,
    pub condition: ConditionId,
    pub provenance: crate::detect::Label,
}

/// Build a mixed evaluation pool: `n_each` in-distribution inputs (original
/// sources, training conditions) plus `n_each` shifted inputs per the
/// scenario. Conditions cycle deterministically.
pub fn build_eval_pool(dataset: &Dataset, shift: &ShiftSpec, n_each: usize) -> Result<Vec<PoolItem>> {
    shift.validate()?;
    if n_each == 0 || dataset.eval_sources.len() < n_each {
        return Err(Error::Data(format!(
            "pool wants {n_each} inputs per class, eval set has {}",
            dataset.eval_sources.len()
        )));
    }
    let train_ids = dataset.spec.training_condition_ids();
    let ood_ids = match shift.kind {
        ShiftKind::UnseenCondition => {
            let w = dataset.spec.withheld_condition_ids();
            if w.is_empty() {
                return Err(Error::Config(
                    "unseen-condition scenario needs withheld conditions".into(),
                ));
            }
            w
        }
        _ => train_ids.clone(),
    };
    let mut pool = Vec::with_capacity(2 * n_each);
    for (i, x0) in dataset.eval_sources.iter().take(n_each).enumerate() {
        pool.push(PoolItem {
            input_id: format!("id-{i}"),
            x0: x0.clone(),
            condition: train_ids[i % train_ids.len()],
            provenance: crate::detect::Label::Id,
        });
    }
    for (i, x0) in dataset.eval_sources.iter().take(n_each).enumerate() {
        pool.push(PoolItem {
            input_id: format!("ood-{i}"),
            x0: apply_shift(x0, shift),
            condition: ood_ids[i % ood_ids.len()],
            provenance: crate::detect::Label::Ood,
        });
    }
    Ok(pool)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::energy_distance;

    #[test]
    fn empty_training_set_rejected() {
        let spec = DatasetSpec {
            n_train: 0,
            ..DatasetSpec::default()
        };
        assert!(make_dataset(&spec).is_err());
    }

    #[test]
    fn fixed_seed_reproduces_dataset() {
        let spec = DatasetSpec::default();
        let a = make_dataset(&spec).unwrap();
        let b = make_dataset(&spec).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.eval_sources, b.eval_sources);
        assert_eq!(a.references, b.references);
    }

    #[test]
    fn withheld_conditions_absent_from_training() {
        let spec = DatasetSpec::default();
        let data = make_dataset(&spec).unwrap();
        let withheld: Vec<usize> = spec.withheld_condition_ids().iter().map(|c| c.0).collect();
        assert!(!withheld.is_empty());
        for (_, _, c) in &data.train {
            assert!(!withheld.contains(&c.0));
            assert!(!c.is_null());
        }
        // references still cover the withheld conditions
        for w in withheld {
            assert!(data.references.contains_key(&w));
        }
    }

    #[test]
    fn shift_hand_cases() {
        // severity 0 is the identity
        let x = vec![0.7, -0.3];
        for kind in [ShiftKind::Intensity, ShiftKind::RotatedSource, ShiftKind::UnseenCondition] {
            let s = ShiftSpec { kind, severity: 0.0 };
            assert_eq!(apply_shift(&x, &s), x);
        }
        // intensity severity 1 in 1-D: x = 1 -> (1+1)*1 + 1 = 3
        let s = ShiftSpec {
            kind: ShiftKind::Intensity,
            severity: 1.0,
        };
        assert_eq!(apply_shift(&[1.0], &s), vec![3.0]);
        // rotation by pi in 2-D: (1, 0) -> (-1, 0)
        let s = ShiftSpec {
            kind: ShiftKind::RotatedSource,
            severity: 1.0,
        };
        let r = apply_shift(&[1.0, 0.0], &s);
        assert!((r[0] + 1.0).abs() < 1e-12 && r[1].abs() < 1e-12);
    }

    /// Severity-0 pools are equal in distribution to the source: a two-sample
    /// energy permutation test at alpha = 0.01 cannot reject.
    #[test]
    fn severity_zero_passes_permutation_test() {
        let spec = DatasetSpec {
            n_eval: 128,
            ..DatasetSpec::default()
        };
        let data = make_dataset(&spec).unwrap();
        let shift = ShiftSpec {
            kind: ShiftKind::Intensity,
            severity: 0.0,
        };
        let shifted: Vec<Vec<f64>> = data
            .eval_sources
            .iter()
            .map(|x| apply_shift(x, &shift))
            .collect();
        // fresh source draws as the comparison set
        let mut rng = RngStream::new(4321, 0);
        let fresh: Vec<Vec<f64>> = (0..128).map(|_| spec.sample_source(&mut rng)).collect();

        let observed = energy_distance(&shifted, &fresh).unwrap();
        let mut pooled: Vec<Vec<f64>> = shifted.iter().chain(fresh.iter()).cloned().collect();
        let mut exceed = 0usize;
        let permutations = 199;
        for _ in 0..permutations {
            rng.shuffle(&mut pooled);
            let stat = energy_distance(&pooled[..128], &pooled[128..]).unwrap();
            if stat >= observed {
                exceed += 1;
            }
        }
        let p = (1 + exceed) as f64 / (permutations + 1) as f64;
        assert!(p >= 0.01, "permutation test rejected: p = {p}");
    }

    /// Energy distance between the source and its shifted version grows
    /// monotonically with severity.
    #[test]
    fn shift_severity_is_monotone_in_energy_distance() {
        let spec = DatasetSpec {
            n_eval: 256,
            ..DatasetSpec::default()
        };
        let data = make_dataset(&spec).unwrap();
        for kind in [ShiftKind::Intensity, ShiftKind::RotatedSource] {
            let mut last = -1.0;
            for severity in [0.0, 0.25, 0.5, 1.0] {
                let shift = ShiftSpec { kind, severity };
                let shifted: Vec<Vec<f64>> = data
                    .eval_sources
                    .iter()
                    .map(|x| apply_shift(x, &shift))
                    .collect();
                let e = energy_distance(&shifted, &data.eval_sources).unwrap();
                assert!(
                    e > last,
                    "{kind:?} severity {severity}: energy {e} <= previous {last}"
                );
                last = e;
            }
        }
    }

    #[test]
    fn eval_pool_structure() {
        let data = make_dataset(&DatasetSpec::default()).unwrap();
        let shift = ShiftSpec {
            kind: ShiftKind::UnseenCondition,
            severity: 0.5,
        };
        let pool = build_eval_pool(&data, &shift, 64).unwrap();
        assert_eq!(pool.len(), 128);
        let withheld: Vec<usize> = data
            .spec
            .withheld_condition_ids()
            .iter()
            .map(|c| c.0)
            .collect();
        for item in &pool {
            match item.provenance {
                crate::detect::Label::Id => {
                    assert!(!withheld.contains(&item.condition.0));
                }
                crate::detect::Label::Ood => {
                    assert!(withheld.contains(&item.condition.0));
                }
            }
        }
        // ids are unique
        let mut ids: Vec<&String> = pool.iter().map(|p| &p.input_id).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 128);
    }

    #[test]
    fn target_families_sample_in_bounds() {
        let mut rng = RngStream::new(7, 0);
        for target in [
            TargetFamily::Ring {
                radius: 2.0,
                sd: 0.1,
            },
            TargetFamily::Moons { sd: 0.1 },
        ] {
            let spec = DatasetSpec {
                target,
                ..DatasetSpec::default()
            };
            spec.validate().unwrap();
            for _ in 0..100 {
                let x = spec.sample_target(ConditionId(1), &mut rng);
                assert_eq!(x.len(), 2);
                assert!(x.iter().all(|v| v.is_finite() && v.abs() < 10.0));
            }
        }
    }
}
