//! Distributional generation-quality metrics on raw coordinates: the
//! Gaussian Frechet distance and the energy distance.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::linalg::{mat_mul, sym_eigen, sym_sqrt};

/// Diagonal jitter added when a sample covariance is numerically singular.
const JITTER: f64 = 1e-8;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct MetricReport {
    pub frechet: f64,
    pub energy: f64,
    pub n_generated: usize,
    pub n_reference: usize,
    /// Whether a singular covariance needed diagonal jitter.
    pub jitter_applied: bool,
}

/// Sample mean and covariance (population denominator n, matching the
/// Gaussian plug-in convention).
fn moments(set: &[Vec<f64>], d: usize) -> (Vec<f64>, Vec<f64>) {
    let n = set.len() as f64;
    let mut mean = vec![0.0; d];
    for x in set {
        for (m, v) in mean.iter_mut().zip(x.iter()) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n;
    }
    let mut cov = vec![0.0; d * d];
    for x in set {
        for i in 0..d {
            let ri = x[i] - mean[i];
            for j in 0..d {
                cov[i * d + j] += ri * (x[j] - mean[j]);
            }
        }
    }
    for c in cov.iter_mut() {
        *c /= n;
    }
    (mean, cov)
}

fn min_eigenvalue(cov: &[f64], d: usize) -> f64 {
    let (vals, _) = sym_eigen(cov, d);
    vals.iter().cloned().fold(f64::INFINITY, f64::min)
}

/// Frechet distance between Gaussians fitted by moments:
/// `||mu_a - mu_b||^2 + tr(Sa + Sb - 2 (Sa Sb)^(1/2))`, with the cross term
/// evaluated through the symmetric product `sqrt(Sa) Sb sqrt(Sa)`.
pub fn frechet_from_moments(
    mean_a: &[f64],
    cov_a: &[f64],
    mean_b: &[f64],
    cov_b: &[f64],
) -> f64 {
    let d = mean_a.len();
    let mean_term: f64 = mean_a
        .iter()
        .zip(mean_b.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let tr_a: f64 = (0..d).map(|i| cov_a[i * d + i]).sum();
    let tr_b: f64 = (0..d).map(|i| cov_b[i * d + i]).sum();
    let ra = sym_sqrt(cov_a, d);
    let inner = mat_mul(&mat_mul(&ra, cov_b, d), &ra, d);
    // symmetrize against roundoff before the eigensolve
    let mut sym = inner.clone();
    for i in 0..d {
        for j in 0..d {
            sym[i * d + j] = 0.5 * (inner[i * d + j] + inner[j * d + i]);
        }
    }
    let (vals, _) = sym_eigen(&sym, d);
    let cross: f64 = vals.iter().map(|&l| l.max(0.0).sqrt()).sum();
    mean_term + tr_a + tr_b - 2.0 * cross
}

#[derive(Clone, Copy, Debug)]
pub struct FrechetResult {
    pub value: f64,
    pub jitter_applied: bool,
}

/// Frechet distance between two point sets. Each set needs at least d + 1
/// points for a nondegenerate covariance; singular covariances get diagonal
/// jitter, recorded in the result.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<FrechetResult> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Metric("empty sample set".into()));
    }
    let d = a[0].len();
    if a.len() <= d || b.len() <= d {
        return Err(Error::Metric(format!(
            "need more than d = {d} points per set, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (mean_a, mut cov_a) = moments(a, d);
    let (mean_b, mut cov_b) = moments(b, d);
    let mut jitter_applied = false;
    for cov in [&mut cov_a, &mut cov_b] {
        if min_eigenvalue(cov, d) < 1e-12 {
            for i in 0..d {
                cov[i * d + i] += JITTER;
            }
            jitter_applied = true;
        }
    }
    Ok(FrechetResult {
        value: frechet_from_moments(&mean_a, &cov_a, &mean_b, &cov_b),
        jitter_applied,
    })
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Energy distance `2 E||a-b|| - E||a-a'|| - E||b-b'||` with U-statistic
/// (i != j) within-sample estimators; within terms vanish for singletons.
pub fn energy_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Metric("empty sample set".into()));
    }
    let (n, m) = (a.len(), b.len());
    let mut cross = 0.0;
    for x in a {
        for y in b {
            cross += euclidean(x, y);
        }
    }
    cross /= (n * m) as f64;
    let within = |s: &[Vec<f64>]| -> f64 {
        let k = s.len();
        if k < 2 {
            return 0.0;
        }
        let mut acc = 0.0;
        for i in 0..k {
            for j in (i + 1)..k {
                acc += euclidean(&s[i], &s[j]);
            }
        }
        2.0 * acc / (k * (k - 1)) as f64
    };
    Ok(2.0 * cross - within(a) - within(b))
}

/// Both metrics plus set sizes.
pub fn metric_report(generated: &[Vec<f64>], reference: &[Vec<f64>]) -> Result<MetricReport> {
    let f = frechet_distance(generated, reference)?;
    let e = energy_distance(generated, reference)?;
    Ok(MetricReport {
        frechet: f.value,
        energy: e,
        n_generated: generated.len(),
        n_reference: reference.len(),
        jitter_applied: f.jitter_applied,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::RngStream;

    fn gaussian_set(rng: &mut RngStream, n: usize, mean: &[f64], sd: f64) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| mean.iter().map(|m| m + sd * rng.next_gauss()).collect())
            .collect()
    }

    #[test]
    fn frechet_moment_closed_forms() {
        // 1-D unit variances, means 0 and m: distance m^2
        let m = 1.7;
        let v = frechet_from_moments(&[0.0], &[1.0], &[m], &[1.0]);
        assert!((v - m * m).abs() < 1e-12);

        // 2-D commuting case: diag(1,1) vs diag(4,1), equal means:
        // (1 + 4 - 2*2) + (1 + 1 - 2*1) = 1
        let v = frechet_from_moments(
            &[0.0, 0.0],
            &[1.0, 0.0, 0.0, 1.0],
            &[0.0, 0.0],
            &[4.0, 0.0, 0.0, 1.0],
        );
        assert!((v - 1.0).abs() < 1e-10, "commuting case {v}");
    }

    /// Non-commuting covariances against a brute-force reference computed
    /// from the eigendecomposition of sqrt(Sa) Sb sqrt(Sa) with dense
    /// matrices (an independent recomputation path).
    #[test]
    fn frechet_general_case_reference() {
        // Sa = R diag(2, 0.5) R^T with a 30-degree rotation; Sb = diag(1, 3)
        let th = 30f64.to_radians();
        let (c, s) = (th.cos(), th.sin());
        let sa = [
            c * c * 2.0 + s * s * 0.5,
            c * s * (2.0 - 0.5),
            c * s * (2.0 - 0.5),
            s * s * 2.0 + c * c * 0.5,
        ];
        let sb = [1.0, 0.0, 0.0, 3.0];
        let got = frechet_from_moments(&[0.0, 0.0], &sa, &[0.0, 0.0], &sb);
        // reference: tr(Sa) + tr(Sb) - 2 sum sqrt(eig(Sa Sb)); eigenvalues of
        // the (nonsymmetric) product from its characteristic polynomial
        let p = mat_mul(&sa, &sb, 2);
        let tr = p[0] + p[3];
        let det = p[0] * p[3] - p[1] * p[2];
        let disc = (tr * tr / 4.0 - det).sqrt();
        let (l1, l2) = (tr / 2.0 + disc, tr / 2.0 - disc);
        let want = (sa[0] + sa[3]) + (sb[0] + sb[3]) - 2.0 * (l1.sqrt() + l2.sqrt());
        assert!((got - want).abs() < 1e-9, "got {got} want {want}");
    }

    #[test]
    fn identical_sets_have_zero_distance() {
        let mut rng = RngStream::new(80, 0);
        let a = gaussian_set(&mut rng, 64, &[0.3, -0.4], 1.2);
        let f = frechet_distance(&a, &a).unwrap();
        assert!(f.value.abs() < 1e-8, "frechet {}", f.value);
        assert!(!f.jitter_applied);
        let e = energy_distance(&a, &a).unwrap();
        assert!(e <= 1e-12, "energy {e}");
    }

    #[test]
    fn energy_point_masses() {
        let m = 2.5;
        let e = energy_distance(&[vec![0.0]], &[vec![m]]).unwrap();
        assert!((e - 2.0 * m).abs() < 1e-15);
    }

    /// Indexed double-loop oracle (reversed iteration order) agrees to 1e-12.
    #[test]
    fn energy_matches_brute_force() {
        let mut rng = RngStream::new(81, 0);
        let a = gaussian_set(&mut rng, 37, &[0.0, 0.0], 1.0);
        let b = gaussian_set(&mut rng, 23, &[0.5, -0.5], 1.5);
        let got = energy_distance(&a, &b).unwrap();

        let mut cross = 0.0;
        for i in (0..a.len()).rev() {
            for j in (0..b.len()).rev() {
                cross += euclidean(&a[i], &b[j]);
            }
        }
        let mut wa = 0.0;
        for i in 0..a.len() {
            for j in 0..a.len() {
                if i != j {
                    wa += euclidean(&a[i], &a[j]);
                }
            }
        }
        let mut wb = 0.0;
        for i in 0..b.len() {
            for j in 0..b.len() {
                if i != j {
                    wb += euclidean(&b[i], &b[j]);
                }
            }
        }
        let want = 2.0 * cross / (a.len() * b.len()) as f64
            - wa / (a.len() * (a.len() - 1)) as f64
            - wb / (b.len() * (b.len() - 1)) as f64;
        assert!((got - want).abs() < 1e-12, "got {got} want {want}");
    }

    #[test]
    fn metrics_are_symmetric() {
        let mut rng = RngStream::new(82, 0);
        let a = gaussian_set(&mut rng, 40, &[0.0, 0.0], 1.0);
        let b = gaussian_set(&mut rng, 50, &[1.0, 0.0], 0.7);
        let fab = frechet_distance(&a, &b).unwrap().value;
        let fba = frechet_distance(&b, &a).unwrap().value;
        assert!((fab - fba).abs() < 1e-9);
        let eab = energy_distance(&a, &b).unwrap();
        let eba = energy_distance(&b, &a).unwrap();
        assert!((eab - eba).abs() < 1e-12);
    }

    #[test]
    fn metrics_invariant_under_common_rotation() {
        let mut rng = RngStream::new(83, 0);
        let a = gaussian_set(&mut rng, 48, &[0.2, -0.1], 1.0);
        let b = gaussian_set(&mut rng, 48, &[1.0, 0.4], 0.8);
        let th = 1.1f64;
        let rot = |s: &[Vec<f64>]| -> Vec<Vec<f64>> {
            s.iter()
                .map(|x| {
                    vec![
                        th.cos() * x[0] - th.sin() * x[1],
                        th.sin() * x[0] + th.cos() * x[1],
                    ]
                })
                .collect()
        };
        let (ra, rb) = (rot(&a), rot(&b));
        let f0 = frechet_distance(&a, &b).unwrap().value;
        let f1 = frechet_distance(&ra, &rb).unwrap().value;
        assert!((f0 - f1).abs() < 1e-8, "frechet {f0} vs {f1}");
        let e0 = energy_distance(&a, &b).unwrap();
        let e1 = energy_distance(&ra, &rb).unwrap();
        assert!((e0 - e1).abs() < 1e-10, "energy {e0} vs {e1}");
    }

    #[test]
    fn degenerate_covariance_gets_jitter() {
        // all points on a line: singular 2-D covariance
        let a: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 0.0]).collect();
        let b: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 1.0]).collect();
        let f = frechet_distance(&a, &b).unwrap();
        assert!(f.jitter_applied);
        assert!(f.value.is_finite());
    }

    #[test]
    fn too_few_points_rejected() {
        let a: Vec<Vec<f64>> = (0..2).map(|i| vec![i as f64, 0.0]).collect();
        assert!(frechet_distance(&a, &a).is_err());
    }
}
