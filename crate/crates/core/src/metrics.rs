//! Evaluation analogues computed on frozen toy embeddings.
//!
//! * Fréchet distance between Gaussian fits of two feature sets.
//! * Inception-score analogue over per-attribute detector probabilities.
//! * CLIP-score analogue, `max(100 cos(I, T), 0)`.

use crate::error::{invalid, shape_err, Error, Result};
use crate::io::{fmt_f, Csv};
use crate::tensor::Tensor;

/// Mean and covariance of a feature set (rows are samples).
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    /// Row-major `d x d`, normalised by `n - 1`.
    pub cov: Vec<f64>,
    pub dim: usize,
    pub count: usize,
}

pub fn compute_stats(features: &Tensor) -> Result<FeatureStats> {
    let s = features.shape();
    if s.len() != 2 {
        return shape_err(format!("features must be [n, d], got {s:?}"));
    }
    let (n, d) = (s[0], s[1]);
    if n < 2 {
        return invalid(format!("need at least two samples for a covariance, got {n}"));
    }
    let x = features.data();
    let mut mean = vec![0.0f64; d];
    for row in x.chunks(d) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = vec![0.0f64; d * d];
    for row in x.chunks(d) {
        let c: Vec<f64> = row.iter().zip(&mean).map(|(&v, m)| v as f64 - m).collect();
        for i in 0..d {
            for j in i..d {
                cov[i * d + j] += c[i] * c[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov[i * d + j] / (n - 1) as f64;
            cov[i * d + j] = v;
            cov[j * d + i] = v;
        }
    }
    Ok(FeatureStats {
        mean,
        cov,
        dim: d,
        count: n,
    })
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues and the row-major eigenvector matrix (columns are
/// eigenvectors).
pub fn symmetric_eigen(m: &[f64], d: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if m.len() != d * d {
        return shape_err(format!("{} values for a {d}x{d} matrix", m.len()));
    }
    let mut a = m.to_vec();
    for i in 0..d {
        for j in 0..i {
            let v = 0.5 * (a[i * d + j] + a[j * d + i]);
            a[i * d + j] = v;
            a[j * d + i] = v;
        }
    }
    let mut v = vec![0.0f64; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let off: f64 = (0..d)
            .flat_map(|i| (0..d).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * d + j].powi(2))
            .sum::<f64>()
            .sqrt();
        if off <= 1e-14 * scale {
            let vals = (0..d).map(|i| a[i * d + i]).collect();
            return Ok((vals, v));
        }
        for p in 0..d {
            for q in p + 1..d {
                let apq = a[p * d + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * d + q] - a[p * d + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let (akp, akq) = (a[k * d + p], a[k * d + q]);
                    a[k * d + p] = c * akp - s * akq;
                    a[k * d + q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let (apk, aqk) = (a[p * d + k], a[q * d + k]);
                    a[p * d + k] = c * apk - s * aqk;
                    a[q * d + k] = s * apk + c * aqk;
                }
                for k in 0..d {
                    let (vkp, vkq) = (v[k * d + p], v[k * d + q]);
                    v[k * d + p] = c * vkp - s * vkq;
                    v[k * d + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    Err(Error::Numerical("Jacobi eigen-decomposition did not converge".into()))
}

/// Principal square root of a symmetric positive semi-definite matrix.
/// Slightly negative eigenvalues from round-off are clamped to zero.
pub fn psd_sqrt(m: &[f64], d: usize) -> Result<Vec<f64>> {
    let (vals, v) = symmetric_eigen(m, d)?;
    let tol = 1e-9 * vals.iter().fold(1.0f64, |acc, x| acc.max(x.abs()));
    if let Some(bad) = vals.iter().find(|&&x| x < -tol) {
        return Err(Error::Numerical(format!("matrix is not PSD (eigenvalue {bad:e})")));
    }
    let roots: Vec<f64> = vals.iter().map(|&x| x.max(0.0).sqrt()).collect();
    let mut out = vec![0.0f64; d * d];
    for i in 0..d {
        for j in 0..d {
            out[i * d + j] = (0..d).map(|k| v[i * d + k] * roots[k] * v[j * d + k]).sum();
        }
    }
    Ok(out)
}

fn matmul(a: &[f64], b: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; d * d];
    for i in 0..d {
        for k in 0..d {
            let aik = a[i * d + k];
            for j in 0..d {
                out[i * d + j] += aik * b[k * d + j];
            }
        }
    }
    out
}

/// `||μa - μb||² + tr(Σa + Σb - 2 (Σa^½ Σb Σa^½)^½)`.
///
/// The symmetric product keeps the inner square root on a PSD matrix.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.dim != b.dim {
        return shape_err(format!("feature dims {} and {}", a.dim, b.dim));
    }
    let d = a.dim;
    let mean_term: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y).powi(2)).sum();
    let ra = psd_sqrt(&a.cov, d)?;
    let inner = matmul(&matmul(&ra, &b.cov, d), &ra, d);
    let cross = psd_sqrt(&inner, d)?;
    let trace = |m: &[f64]| (0..d).map(|i| m[i * d + i]).sum::<f64>();
    Ok((mean_term + trace(&a.cov) + trace(&b.cov) - 2.0 * trace(&cross)).max(0.0))
}

/// Probabilities are clamped to this floor before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// `exp(mean_i KL(p(y|x_i) || p(y)))` over rows of class probabilities.
/// Rows are renormalised after clamping.
pub fn inception_score(probs: &Tensor) -> Result<f64> {
    let s = probs.shape();
    if s.len() != 2 || s[0] == 0 || s[1] == 0 {
        return shape_err(format!("probabilities must be non-empty [n, k], got {s:?}"));
    }
    let (n, k) = (s[0], s[1]);
    let rows: Vec<Vec<f64>> = probs
        .data()
        .chunks(k)
        .map(|r| {
            let c: Vec<f64> = r.iter().map(|&p| (p as f64).max(PROB_FLOOR)).collect();
            let z: f64 = c.iter().sum();
            c.into_iter().map(|p| p / z).collect()
        })
        .collect();
    let mut marginal = vec![0.0f64; k];
    for r in &rows {
        for (m, p) in marginal.iter_mut().zip(r) {
            *m += p / n as f64;
        }
    }
    let mean_kl = rows
        .iter()
        .map(|r| {
            r.iter()
                .zip(&marginal)
                .map(|(p, m)| p * (p.ln() - m.max(PROB_FLOOR).ln()))
                .sum::<f64>()
        })
        .sum::<f64>()
        / n as f64;
    Ok(mean_kl.exp())
}

/// Turns per-attribute presence probabilities into a distribution over
/// attribute classes by normalising each row.
pub fn attribute_class_probs(presence: &Tensor) -> Result<Tensor> {
    let s = presence.shape();
    if s.len() != 2 {
        return shape_err(format!("presence must be [n, k], got {s:?}"));
    }
    let k = s[1];
    let mut out = Vec::with_capacity(presence.len());
    for r in presence.data().chunks(k) {
        let z: f64 = r.iter().map(|&p| (p as f64).max(PROB_FLOOR)).sum();
        out.extend(r.iter().map(|&p| ((p as f64).max(PROB_FLOOR) / z) as f32));
    }
    Tensor::new(s.to_vec(), out)
}

/// `max(100 cos(image, text), 0)`; zero vectors score 0.
pub fn clip_score(image: &Tensor, text: &Tensor) -> Result<f64> {
    let (ni, nt) = (image.norm(), text.norm());
    if ni == 0.0 || nt == 0.0 {
        return Ok(0.0);
    }
    Ok((100.0 * image.dot(text)? / (ni * nt)).max(0.0))
}

/// One table row of the evaluation report.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub method: String,
    pub is: f64,
    pub fid: f64,
    pub clip: f64,
}

pub fn metrics_csv(rows: &[MetricRow]) -> Csv {
    let mut csv = Csv::new(&["method", "is", "fid", "clip_score"]);
    for r in rows {
        csv.row(&[r.method.clone(), fmt_f(r.is), fmt_f(r.fid), fmt_f(r.clip)]);
    }
    csv
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn stats_of_small_set() {
        let f = Tensor::new(vec![3, 2], vec![0.0, 0.0, 1.0, 2.0, 2.0, 4.0]).unwrap();
        let s = compute_stats(&f).unwrap();
        assert_eq!(s.mean, vec![1.0, 2.0]);
        assert_eq!(s.cov, vec![1.0, 2.0, 2.0, 4.0]);
    }

    #[test]
    fn sqrt_of_known_matrix() {
        // [[5, 4], [4, 5]] = R diag(9, 1) R^T, root [[2, 1], [1, 2]].
        let r = psd_sqrt(&[5.0, 4.0, 4.0, 5.0], 2).unwrap();
        for (got, want) in r.iter().zip([2.0, 1.0, 1.0, 2.0]) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-12);
        }
    }

    #[test]
    fn frechet_of_diagonal_gaussians() {
        // Diagonal case: |dμ|² + Σ (sqrt(a_i) - sqrt(b_i))².
        let a = FeatureStats {
            mean: vec![0.0, 1.0],
            cov: vec![4.0, 0.0, 0.0, 1.0],
            dim: 2,
            count: 10,
        };
        let b = FeatureStats {
            mean: vec![3.0, 1.0],
            cov: vec![1.0, 0.0, 0.0, 9.0],
            dim: 2,
            count: 10,
        };
        let want = 9.0 + 1.0 + 4.0;
        assert_abs_diff_eq!(frechet_distance(&a, &b).unwrap(), want, epsilon = 1e-10);
        assert_abs_diff_eq!(frechet_distance(&a, &a).unwrap(), 0.0, epsilon = 1e-10);
    }

    #[test]
    fn inception_score_extremes() {
        let uniform = Tensor::full(&[4, 3], 1.0 / 3.0);
        assert_abs_diff_eq!(inception_score(&uniform).unwrap(), 1.0, epsilon = 1e-9);
        let one_hot = Tensor::new(
            vec![3, 3],
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        )
        .unwrap();
        assert_abs_diff_eq!(inception_score(&one_hot).unwrap(), 3.0, epsilon = 1e-6);
    }

    #[test]
    fn clip_score_clamps_and_scales() {
        let a = Tensor::from_vec(vec![1.0, 0.0]);
        let b = Tensor::from_vec(vec![1.0, 1.0]);
        assert_abs_diff_eq!(clip_score(&a, &b).unwrap(), 100.0 / 2f64.sqrt(), epsilon = 1e-4);
        assert_eq!(clip_score(&a, &a.scale(-1.0)).unwrap(), 0.0);
        assert_eq!(clip_score(&a, &Tensor::zeros(&[2])).unwrap(), 0.0);
    }
}
