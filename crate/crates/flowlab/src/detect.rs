//! Unreliable-generation labeling (pool filtering), the threshold decision
//! rule, and ranking metrics (AUROC / AUPR) with the out-of-distribution
//! class as positive.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Id,
    Ood,
}

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Label::Id => write!(f, "id"),
            Label::Ood => write!(f, "ood"),
        }
    }
}

/// A scored evaluation input. Labels are assigned from provenance and
/// filtering before any anomaly score is inspected.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LabeledScore {
    pub input_id: String,
    pub anomaly_score: f64,
    pub label: Label,
    pub error_metric: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterMode {
    /// Keep provenance as the label, remove nothing.
    #[default]
    None,
    /// Remove ID items with error above the pool mean and OOD items below it.
    Mean,
    /// Remove ID items with error above mean - sigma/2 and OOD items with
    /// error below mean + sigma/2 (population sigma over the full pool).
    HalfSigma,
}

/// Pool statistics used by the filter cuts.
#[derive(Clone, Copy, Debug)]
pub struct FilterPolicy {
    pub mode: FilterMode,
    pub mean: f64,
    pub sigma: f64,
}

impl FilterPolicy {
    /// Compute population statistics of the error metric over the full pool.
    pub fn from_pool(mode: FilterMode, errors: &[f64]) -> Result<Self> {
        if errors.is_empty() {
            return Err(Error::Metric("empty evaluation pool".into()));
        }
        let n = errors.len() as f64;
        let mean = errors.iter().sum::<f64>() / n;
        let sigma = (errors.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / n).sqrt();
        Ok(Self { mode, mean, sigma })
    }
}

/// Apply the filter; returns the retained indices (labels stay provenance).
/// Cuts are strict, so a zero-spread pool removes nothing.
pub fn filter(pool: &[(f64, Label)], policy: &FilterPolicy) -> Vec<usize> {
    let (id_cut, ood_cut) = match policy.mode {
        FilterMode::None => return (0..pool.len()).collect(),
        FilterMode::Mean => (policy.mean, policy.mean),
        FilterMode::HalfSigma => (
            policy.mean - 0.5 * policy.sigma,
            policy.mean + 0.5 * policy.sigma,
        ),
    };
    pool.iter()
        .enumerate()
        .filter(|(_, (err, label))| match label {
            Label::Id => !(*err > id_cut),
            Label::Ood => !(*err < ood_cut),
        })
        .map(|(i, _)| i)
        .collect()
}

/// Threshold rule: OOD iff the score strictly exceeds tau.
pub fn decide(score: f64, tau: f64) -> Label {
    if score > tau {
        Label::Ood
    } else {
        Label::Id
    }
}

/// Area under the ROC curve in the Mann-Whitney form: the probability that a
/// random OOD item outscores a random ID item, ties counted one half.
/// Computed with average ranks over tie groups.
pub fn auroc(scores: &[(f64, Label)]) -> Result<f64> {
    let n_ood = scores.iter().filter(|(_, l)| *l == Label::Ood).count();
    let n_id = scores.len() - n_ood;
    if n_ood == 0 || n_id == 0 {
        return Err(Error::Metric(
            "AUROC needs at least one item of each class".into(),
        ));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].0.partial_cmp(&scores[b].0).expect("finite scores"));
    let mut rank_sum_ood = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && scores[idx[j]].0 == scores[idx[i]].0 {
            j += 1;
        }
        // 1-based average rank of the tie group [i, j)
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        for &k in &idx[i..j] {
            if scores[k].1 == Label::Ood {
                rank_sum_ood += avg_rank;
            }
        }
        i = j;
    }
    let u = rank_sum_ood - (n_ood * (n_ood + 1)) as f64 / 2.0;
    Ok(u / (n_ood as f64 * n_id as f64))
}

/// Area under the precision-recall curve (average precision with step
/// interpolation), OOD as the positive class, tie groups processed whole.
pub fn aupr(scores: &[(f64, Label)]) -> Result<f64> {
    let n_pos = scores.iter().filter(|(_, l)| *l == Label::Ood).count();
    if n_pos == 0 {
        return Err(Error::Metric("AUPR needs at least one positive".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].0.partial_cmp(&scores[a].0).expect("finite scores"));
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut prev_recall = 0.0;
    let mut area = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && scores[idx[j]].0 == scores[idx[i]].0 {
            j += 1;
        }
        for &k in &idx[i..j] {
            match scores[k].1 {
                Label::Ood => tp += 1,
                Label::Id => fp += 1,
            }
        }
        let recall = tp as f64 / n_pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j;
    }
    Ok(area)
}

/// Sample mean and standard error (sample std over sqrt n); the standard
/// error is undefined for a single value.
pub fn mean_stderr(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, None);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, Some((var / n).sqrt()))
}

/// Kendall rank correlation (tau-a: tied pairs contribute zero).
pub fn kendall_tau(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len();
    let mut num = 0i64;
    for i in 0..n {
        for j in (i + 1)..n {
            let da = (a[i] - a[j]).signum();
            let db = (b[i] - b[j]).signum();
            num += (da * db) as i64;
        }
    }
    num as f64 / (n * (n - 1) / 2) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::RngStream;

    #[test]
    fn filter_none_keeps_everything() {
        let pool = vec![(0.1, Label::Id), (0.9, Label::Ood)];
        let policy =
            FilterPolicy::from_pool(FilterMode::None, &[0.1, 0.9]).unwrap();
        assert_eq!(filter(&pool, &policy), vec![0, 1]);
    }

    /// Hand case: errors {0,1,2,3}, provenance {ID,ID,OOD,OOD}. Population
    /// sigma = sqrt(1.25); the half-sigma cuts remove the error-1 ID and the
    /// error-2 OOD, leaving {0: ID, 3: OOD}.
    #[test]
    fn filter_half_sigma_hand_case() {
        let pool = vec![
            (0.0, Label::Id),
            (1.0, Label::Id),
            (2.0, Label::Ood),
            (3.0, Label::Ood),
        ];
        let errors: Vec<f64> = pool.iter().map(|(e, _)| *e).collect();
        let policy = FilterPolicy::from_pool(FilterMode::HalfSigma, &errors).unwrap();
        assert!((policy.mean - 1.5).abs() < 1e-15);
        assert!((policy.sigma - 1.25f64.sqrt()).abs() < 1e-15);
        assert_eq!(filter(&pool, &policy), vec![0, 3]);
    }

    /// Zero spread: cuts sit at the mean and comparisons are strict, so
    /// nothing is removed.
    #[test]
    fn filter_degenerate_pool_removes_nothing() {
        let pool = vec![(1.0, Label::Id), (1.0, Label::Ood), (1.0, Label::Id)];
        let errors = vec![1.0, 1.0, 1.0];
        for mode in [FilterMode::Mean, FilterMode::HalfSigma] {
            let policy = FilterPolicy::from_pool(mode, &errors).unwrap();
            assert_eq!(filter(&pool, &policy).len(), 3);
        }
    }

    /// Removal is an upper set in the error metric: a removed ID never has a
    /// smaller error than a kept ID (and symmetrically for OOD).
    #[test]
    fn filter_removals_are_monotone_in_error() {
        let mut rng = RngStream::new(90, 0);
        for trial in 0..50 {
            let pool: Vec<(f64, Label)> = (0..40)
                .map(|i| {
                    let label = if i % 2 == 0 { Label::Id } else { Label::Ood };
                    let base = if label == Label::Id { 0.0 } else { 1.0 };
                    (base + rng.next_gauss(), label)
                })
                .collect();
            let errors: Vec<f64> = pool.iter().map(|(e, _)| *e).collect();
            let policy = FilterPolicy::from_pool(FilterMode::HalfSigma, &errors).unwrap();
            let kept = filter(&pool, &policy);
            let kept_set: std::collections::HashSet<usize> = kept.iter().cloned().collect();
            for label in [Label::Id, Label::Ood] {
                let kept_errs: Vec<f64> = kept
                    .iter()
                    .filter(|&&i| pool[i].1 == label)
                    .map(|&i| pool[i].0)
                    .collect();
                let removed_errs: Vec<f64> = (0..pool.len())
                    .filter(|i| !kept_set.contains(i) && pool[*i].1 == label)
                    .map(|i| pool[i].0)
                    .collect();
                for &r in &removed_errs {
                    for &k in &kept_errs {
                        match label {
                            Label::Id => assert!(r >= k, "trial {trial}: removed ID {r} < kept {k}"),
                            Label::Ood => assert!(r <= k, "trial {trial}: removed OOD {r} > kept {k}"),
                        }
                    }
                }
            }
            // realistic separated pools keep the best ID and the worst OOD
            let min_id = pool
                .iter()
                .enumerate()
                .filter(|(_, (_, l))| *l == Label::Id)
                .min_by(|a, b| a.1 .0.partial_cmp(&b.1 .0).unwrap())
                .unwrap()
                .0;
            let max_ood = pool
                .iter()
                .enumerate()
                .filter(|(_, (_, l))| *l == Label::Ood)
                .max_by(|a, b| a.1 .0.partial_cmp(&b.1 .0).unwrap())
                .unwrap()
                .0;
            assert!(kept_set.contains(&min_id), "trial {trial}: best ID removed");
            assert!(kept_set.contains(&max_ood), "trial {trial}: worst OOD removed");
        }
    }

    #[test]
    fn decide_boundary_cases() {
        assert_eq!(decide(1.0, 1.0), Label::Id); // boundary is non-strict ID
        assert_eq!(decide(2.0, 1.0), Label::Ood);
        assert_eq!(decide(f64::MIN, 1.0), Label::Id);
    }

    #[test]
    fn auroc_contracts() {
        // perfect separation
        let scores = vec![
            (0.1, Label::Id),
            (0.2, Label::Id),
            (0.3, Label::Ood),
            (0.4, Label::Ood),
        ];
        assert_eq!(auroc(&scores).unwrap(), 1.0);
        // all ties
        let ties = vec![(0.5, Label::Id), (0.5, Label::Ood), (0.5, Label::Id)];
        assert_eq!(auroc(&ties).unwrap(), 0.5);
        // single class
        assert!(auroc(&[(0.1, Label::Id)]).is_err());
    }

    fn brute_force_auroc(scores: &[(f64, Label)]) -> f64 {
        let mut num = 0.0;
        let mut pairs = 0.0;
        for (si, li) in scores {
            if *li != Label::Ood {
                continue;
            }
            for (sj, lj) in scores {
                if *lj != Label::Id {
                    continue;
                }
                pairs += 1.0;
                if si > sj {
                    num += 1.0;
                } else if si == sj {
                    num += 0.5;
                }
            }
        }
        num / pairs
    }

    fn brute_force_aupr(scores: &[(f64, Label)]) -> f64 {
        let n_pos = scores.iter().filter(|(_, l)| *l == Label::Ood).count() as f64;
        let mut thresholds: Vec<f64> = scores.iter().map(|(s, _)| *s).collect();
        thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
        thresholds.dedup();
        let mut area = 0.0;
        let mut prev_recall = 0.0;
        for &t in &thresholds {
            let tp = scores
                .iter()
                .filter(|(s, l)| *s >= t && *l == Label::Ood)
                .count() as f64;
            let fp = scores
                .iter()
                .filter(|(s, l)| *s >= t && *l == Label::Id)
                .count() as f64;
            let recall = tp / n_pos;
            let precision = tp / (tp + fp);
            area += (recall - prev_recall) * precision;
            prev_recall = recall;
        }
        area
    }

    /// 200 random inputs with deliberate ties: rank-based AUROC and grouped
    /// AUPR match the all-pairs / exhaustive-threshold oracles to 1e-12.
    #[test]
    fn metrics_match_brute_force_oracles() {
        let mut rng = RngStream::new(91, 0);
        for trial in 0..5 {
            let scores: Vec<(f64, Label)> = (0..200)
                .map(|_| {
                    // quantized scores force tie groups
                    let s = (rng.next_gauss() * 4.0).round() / 4.0;
                    let l = if rng.next_uniform() < 0.4 {
                        Label::Ood
                    } else {
                        Label::Id
                    };
                    (s, l)
                })
                .collect();
            if scores.iter().all(|(_, l)| *l == Label::Id)
                || scores.iter().all(|(_, l)| *l == Label::Ood)
            {
                continue;
            }
            let fast = auroc(&scores).unwrap();
            let slow = brute_force_auroc(&scores);
            assert!((fast - slow).abs() < 1e-12, "trial {trial}: {fast} vs {slow}");
            let fast = aupr(&scores).unwrap();
            let slow = brute_force_aupr(&scores);
            assert!((fast - slow).abs() < 1e-12, "trial {trial}: {fast} vs {slow}");
        }
    }

    #[test]
    fn aupr_contracts() {
        let perfect = vec![
            (0.9, Label::Ood),
            (0.8, Label::Ood),
            (0.2, Label::Id),
            (0.1, Label::Id),
        ];
        assert_eq!(aupr(&perfect).unwrap(), 1.0);
        // all ties: area equals the positive fraction
        let ties = vec![
            (0.5, Label::Ood),
            (0.5, Label::Id),
            (0.5, Label::Id),
            (0.5, Label::Ood),
        ];
        assert_eq!(aupr(&ties).unwrap(), 0.5);
        assert!(aupr(&[(0.3, Label::Id)]).is_err());
    }

    /// AUROC is invariant under strictly increasing transforms, and negating
    /// scores reflects it around one half on tie-free inputs.
    #[test]
    fn auroc_invariances() {
        let mut rng = RngStream::new(92, 0);
        let mut scores: Vec<(f64, Label)> = (0..100)
            .map(|i| {
                (
                    rng.next_gauss() + i as f64 * 1e-9,
                    if rng.next_uniform() < 0.5 {
                        Label::Ood
                    } else {
                        Label::Id
                    },
                )
            })
            .collect();
        scores[0].1 = Label::Id;
        scores[1].1 = Label::Ood;
        let base = auroc(&scores).unwrap();
        let transformed: Vec<(f64, Label)> = scores
            .iter()
            .map(|(s, l)| ((s * 3.0).exp() + 2.0 * s, *l))
            .collect();
        assert!((auroc(&transformed).unwrap() - base).abs() < 1e-12);
        let negated: Vec<(f64, Label)> = scores.iter().map(|(s, l)| (-s, *l)).collect();
        assert!((auroc(&negated).unwrap() + base - 1.0).abs() < 1e-12);
    }

    /// Three seeds report exactly (sample mean, sample std / sqrt(3)).
    #[test]
    fn three_seed_aggregation() {
        let vals = [0.7, 0.75, 0.65];
        let (mean, se) = mean_stderr(&vals);
        assert!((mean - 0.7).abs() < 1e-15);
        let sample_std = (vals.iter().map(|v| (v - 0.7) * (v - 0.7)).sum::<f64>() / 2.0).sqrt();
        assert!((se.unwrap() - sample_std / 3f64.sqrt()).abs() < 1e-15);
        assert!(mean_stderr(&[0.5]).1.is_none());
    }

    #[test]
    fn kendall_tau_basics() {
        assert_eq!(kendall_tau(&[1.0, 2.0, 3.0], &[0.1, 0.2, 0.3]), 1.0);
        assert_eq!(kendall_tau(&[1.0, 2.0, 3.0], &[0.3, 0.2, 0.1]), -1.0);
        let t = kendall_tau(&[1.0, 2.0, 3.0], &[0.2, 0.1, 0.3]);
        assert!((t - 1.0 / 3.0).abs() < 1e-15);
    }
}
