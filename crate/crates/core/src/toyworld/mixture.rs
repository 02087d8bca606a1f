use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand::distr::weighted::WeightedIndex;
use rand_distr::{Distribution, StandardNormal};

use crate::diffusion::{injection_is_noop, EpsilonModel};
use crate::error::{invalid, shape_err, Error, Result};
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

/// Isotropic Gaussian mixture in `R^dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMixture {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    stds: Vec<f64>,
    dim: usize,
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, stds: Vec<f64>) -> Result<Self> {
        let k = weights.len();
        if k == 0 || means.len() != k || stds.len() != k {
            return invalid("mixture needs matching, non-empty weights, means and stds");
        }
        if weights.iter().any(|&w| !(w > 0.0)) {
            return invalid("mixture weights must be positive");
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return invalid(format!("mixture weights sum to {total}, not 1"));
        }
        if stds.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Numerical("mixture component std must be positive".into()));
        }
        let dim = means[0].len();
        if dim == 0 || means.iter().any(|m| m.len() != dim) {
            return invalid("mixture means must share one positive dimension");
        }
        Ok(Self {
            weights,
            means,
            stds,
            dim,
        })
    }

    /// `N(0, I_dim)`.
    pub fn standard(dim: usize) -> Result<Self> {
        Self::new(vec![1.0], vec![vec![0.0; dim]], vec![1.0])
    }

    /// The default 2-D, 3-component substrate.
    pub fn default_substrate() -> Self {
        Self::new(
            vec![0.3, 0.3, 0.4],
            vec![vec![-3.0, 0.0], vec![3.0, 1.0], vec![0.0, -3.0]],
            vec![0.2, 0.2, 0.2],
        )
        .expect("valid constants")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn stds(&self) -> &[f64] {
        &self.stds
    }

    /// Mixture mean.
    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for (w, mu) in self.weights.iter().zip(&self.means) {
            for (a, b) in m.iter_mut().zip(mu) {
                *a += w * b;
            }
        }
        m
    }

    /// Mixture covariance, row-major `dim x dim`.
    pub fn covariance(&self) -> Vec<f64> {
        let d = self.dim;
        let m = self.mean();
        let mut c = vec![0.0; d * d];
        for ((w, mu), s) in self.weights.iter().zip(&self.means).zip(&self.stds) {
            for i in 0..d {
                c[i * d + i] += w * s * s;
                for j in 0..d {
                    c[i * d + j] += w * (mu[i] - m[i]) * (mu[j] - m[j]);
                }
            }
        }
        c
    }

    pub fn sample(&self, n: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.sample_with(n, &mut rng)
    }

    pub fn sample_with(&self, n: usize, rng: &mut impl Rng) -> Tensor {
        let pick = WeightedIndex::new(&self.weights).expect("validated weights");
        let mut out = Vec::with_capacity(n * self.dim);
        for _ in 0..n {
            let k = pick.sample(rng);
            for &mu in &self.means[k] {
                let z: f64 = StandardNormal.sample(rng);
                out.push((mu + self.stds[k] * z) as f32);
            }
        }
        Tensor::new(vec![n, self.dim], out).expect("consistent shape")
    }

    /// Per-component means and variances of the distribution of `x_t`.
    fn diffused(&self, a: f64) -> impl Iterator<Item = (f64, Vec<f64>, f64)> + '_ {
        let ra = a.sqrt();
        self.weights
            .iter()
            .zip(&self.means)
            .zip(&self.stds)
            .map(move |((&w, mu), &s)| (w, mu.iter().map(|m| ra * m).collect(), a * s * s + (1.0 - a)))
    }

    fn log_terms(&self, x: &[f64], a: f64) -> Result<Vec<(f64, Vec<f64>, f64)>> {
        let d = self.dim as f64;
        let mut out = Vec::with_capacity(self.weights.len());
        for (w, mu, var) in self.diffused(a) {
            if !(var > 1e-300) {
                return Err(Error::Numerical(format!("degenerate diffused variance {var:e}")));
            }
            let r2: f64 = x.iter().zip(&mu).map(|(xi, mi)| (xi - mi).powi(2)).sum();
            let lt = w.ln() - 0.5 * d * (2.0 * std::f64::consts::PI * var).ln() - 0.5 * r2 / var;
            out.push((lt, mu, var));
        }
        Ok(out)
    }

    fn log_sum_exp(v: impl Iterator<Item = f64> + Clone) -> f64 {
        let m = v.clone().fold(f64::NEG_INFINITY, f64::max);
        m + v.map(|x| (x - m).exp()).sum::<f64>().ln()
    }

    /// `log p_t(x)` of the diffused mixture at signal level `a`.
    pub fn log_density(&self, x: &[f64], a: f64) -> Result<f64> {
        if x.len() != self.dim {
            return shape_err(format!("point of dim {} for mixture of dim {}", x.len(), self.dim));
        }
        let terms = self.log_terms(x, a)?;
        Ok(Self::log_sum_exp(terms.iter().map(|t| t.0)))
    }

    /// `∇ log p_t(x)` through posterior component responsibilities.
    pub fn score(&self, x: &[f64], a: f64) -> Result<Vec<f64>> {
        if x.len() != self.dim {
            return shape_err(format!("point of dim {} for mixture of dim {}", x.len(), self.dim));
        }
        let terms = self.log_terms(x, a)?;
        let lse = Self::log_sum_exp(terms.iter().map(|t| t.0));
        let mut g = vec![0.0; self.dim];
        for (lt, mu, var) in &terms {
            let r = (lt - lse).exp();
            for ((gi, xi), mi) in g.iter_mut().zip(x).zip(mu) {
                *gi -= r * (xi - mi) / var;
            }
        }
        Ok(g)
    }

    /// Exact optimal noise prediction `-sqrt(1 - a_t) ∇ log p_t(x)` for a
    /// point `[dim]` or batch `[N, dim]`.
    pub fn analytic_epsilon(&self, x: &Tensor, t: usize, s: &NoiseSchedule) -> Result<Tensor> {
        match x.shape() {
            [d] | [_, d] if *d == self.dim => {}
            other => return shape_err(format!("expected [{0}] or [N, {0}], got {other:?}", self.dim)),
        }
        if t > s.t_max() {
            return invalid(format!("t = {t} beyond T = {}", s.t_max()));
        }
        let a = s.a(t);
        let c = (1.0 - a).sqrt();
        let mut out = Vec::with_capacity(x.len());
        for row in x.data().chunks(self.dim) {
            let xr: Vec<f64> = row.iter().map(|&v| v as f64).collect();
            out.extend(self.score(&xr, a)?.into_iter().map(|g| (-c * g) as f32));
        }
        Tensor::new(x.shape().to_vec(), out)
    }
}

/// The exact ε-predictor of a mixture, with ε itself as the bottleneck:
/// `predict_injected = ε + weight * Δh`.
#[derive(Clone, Debug, PartialEq)]
pub struct AnalyticModel {
    pub mixture: GaussianMixture,
    pub schedule: NoiseSchedule,
}

impl AnalyticModel {
    pub fn new(mixture: GaussianMixture, schedule: NoiseSchedule) -> Self {
        Self { mixture, schedule }
    }
}

impl EpsilonModel for AnalyticModel {
    fn bottleneck_dim(&self) -> usize {
        self.mixture.dim()
    }

    fn predict(&self, x: &Tensor, t: usize) -> Result<Tensor> {
        self.mixture.analytic_epsilon(x, t, &self.schedule)
    }

    fn predict_injected(&self, x: &Tensor, t: usize, delta_h: &Tensor, weight: f32) -> Result<Tensor> {
        let eps = self.predict(x, t)?;
        if injection_is_noop(delta_h, weight) {
            return Ok(eps);
        }
        let d = self.mixture.dim();
        let rows = eps.len() / d;
        let shift: Vec<f32> = match delta_h.len() {
            n if n == d => delta_h.data().iter().copied().cycle().take(rows * d).collect(),
            n if n == rows * d => delta_h.data().to_vec(),
            n => return shape_err(format!("shift of {n} values for {rows} points of dim {d}")),
        };
        let mut out = eps;
        for (o, s) in out.data_mut().iter_mut().zip(shift) {
            *o += weight * s;
        }
        Ok(out)
    }
}
