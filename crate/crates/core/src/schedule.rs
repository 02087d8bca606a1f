//! Noise-schedule arithmetic.
//!
//! Signal levels `a_t = prod_{s <= t} (1 - beta_s)` are indexed `0..=T` with
//! `a_0 = 1`. All coefficients are evaluated in `f64`.

use crate::error::{invalid, Error, Result};
use crate::io::{fmt_f, Csv};

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    a: Vec<f64>,
}

/// A move between two schedule indices, `t_prev < t`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StepPair {
    pub t: usize,
    pub t_prev: usize,
}

/// Linear coefficients multiplying a noise shift `Δε` in one reverse step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cancellation {
    /// Shift applied to both the predicted-x0 and the direction term.
    pub c_sym: f64,
    /// Shift applied to the predicted-x0 term only.
    pub c_asym: f64,
    /// `|c_sym| / |c_asym|`.
    pub ratio: f64,
}

pub const DEFAULT_T: usize = 1000;
pub const DEFAULT_BETA_1: f64 = 1e-4;
pub const DEFAULT_BETA_T: f64 = 0.02;

impl NoiseSchedule {
    /// `beta` interpolated linearly from `beta_1` (step 1) to `beta_t` (step T).
    pub fn linear(t_max: usize, beta_1: f64, beta_t: f64) -> Result<Self> {
        if t_max < 2 {
            return invalid(format!("schedule needs T >= 2, got {t_max}"));
        }
        if !(beta_1 > 0.0 && beta_1 <= beta_t && beta_t < 1.0) {
            return invalid(format!(
                "need 0 < beta_1 <= beta_T < 1, got ({beta_1}, {beta_t})"
            ));
        }
        let beta = (0..t_max)
            .map(|i| beta_1 + (beta_t - beta_1) * i as f64 / (t_max - 1) as f64)
            .collect();
        Self::from_betas(beta)
    }

    /// Linear schedule with `T = 1000`, `beta` from `1e-4` to `0.02`.
    pub fn default_linear() -> Self {
        Self::linear(DEFAULT_T, DEFAULT_BETA_1, DEFAULT_BETA_T).expect("valid defaults")
    }

    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return invalid("schedule needs at least one step");
        }
        if let Some(b) = beta.iter().find(|&&b| !(b > 0.0 && b < 1.0)) {
            return invalid(format!("beta must lie in (0, 1), got {b}"));
        }
        let mut a = Vec::with_capacity(beta.len() + 1);
        a.push(1.0);
        for b in &beta {
            a.push(a.last().unwrap() * (1.0 - b));
        }
        Ok(Self { beta, a })
    }

    /// Builds the schedule whose signal levels are `levels` (`levels[0] = 1`,
    /// strictly decreasing, positive).
    pub fn from_signal_levels(levels: &[f64]) -> Result<Self> {
        if levels.first() != Some(&1.0) {
            return invalid("signal levels must start at 1");
        }
        let beta = levels.windows(2).map(|w| 1.0 - w[1] / w[0]).collect();
        let mut s = Self::from_betas(beta)?;
        s.a = levels.to_vec();
        Ok(s)
    }

    /// Number of diffusion steps `T`.
    pub fn t_max(&self) -> usize {
        self.beta.len()
    }

    /// `beta_t` for `1 <= t <= T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    /// Signal level `a_t`, `0 <= t <= T`.
    pub fn a(&self, t: usize) -> f64 {
        self.a[t]
    }

    pub fn signal_levels(&self) -> &[f64] {
        &self.a
    }

    pub fn pair(&self, t: usize, t_prev: usize) -> Result<StepPair> {
        if t_prev >= t || t > self.t_max() {
            return invalid(format!(
                "step pair ({t} -> {t_prev}) must satisfy t_prev < t <= {}",
                self.t_max()
            ));
        }
        Ok(StepPair { t, t_prev })
    }

    /// `k + 1` evenly spaced indices from 0 to T inclusive, increasing.
    pub fn subsequence(&self, k: usize) -> Result<Vec<usize>> {
        let t = self.t_max();
        if k == 0 || k > t {
            return invalid(format!("step count must be in 1..={t}, got {k}"));
        }
        Ok((0..=k)
            .map(|i| ((t * i) as f64 / k as f64).round() as usize)
            .collect())
    }

    /// Reverse-order version of [`subsequence`](Self::subsequence): T down to 0.
    pub fn reverse_subsequence(&self, k: usize) -> Result<Vec<usize>> {
        let mut s = self.subsequence(k)?;
        s.reverse();
        Ok(s)
    }

    fn check_pair(&self, pair: StepPair) -> Result<()> {
        self.pair(pair.t, pair.t_prev).map(|_| ())
    }

    /// `σ = η sqrt((1 - a_prev)/(1 - a_t)) sqrt(1 - a_t/a_prev)`.
    pub fn sigma(&self, pair: StepPair, eta: f64) -> Result<f64> {
        self.check_pair(pair)?;
        if pair.t == 0 {
            return invalid("sigma is undefined at t = 0");
        }
        if !(eta >= 0.0) {
            return invalid(format!("eta must be >= 0, got {eta}"));
        }
        if eta == 0.0 {
            return Ok(0.0);
        }
        let (at, ap) = (self.a(pair.t), self.a(pair.t_prev));
        Ok(eta * ((1.0 - ap) / (1.0 - at)).sqrt() * (1.0 - at / ap).sqrt())
    }

    /// Standard deviation of the DDPM posterior `q(x_prev | x_t, x_0)`.
    pub fn ddpm_posterior_std(&self, pair: StepPair) -> Result<f64> {
        self.check_pair(pair)?;
        let (at, ap) = (self.a(pair.t), self.a(pair.t_prev));
        let step_beta = 1.0 - at / ap;
        Ok(((1.0 - ap) / (1.0 - at) * step_beta).sqrt())
    }

    /// Radicand of the direction-term coefficient, `1 - a_prev - σ²`.
    pub fn direction_radicand(&self, pair: StepPair, eta: f64) -> Result<f64> {
        let sigma = self.sigma(pair, eta)?;
        let r = 1.0 - self.a(pair.t_prev) - sigma * sigma;
        if r < 0.0 {
            // rounding at eta = 1 can leave a tiny negative remainder
            if r > -1e-12 {
                return Ok(0.0);
            }
            return Err(Error::Numerical(format!(
                "1 - a_prev - sigma^2 = {r} < 0 at {pair:?}, eta = {eta}"
            )));
        }
        Ok(r)
    }

    /// Coefficients of a noise shift under symmetric vs predicted-x0-only
    /// application in one reverse step.
    pub fn shift_cancellation(&self, pair: StepPair, eta: f64) -> Result<Cancellation> {
        self.check_pair(pair)?;
        let (at, ap) = (self.a(pair.t), self.a(pair.t_prev));
        if at <= 0.0 {
            return invalid(format!("a_t = {at} leaves the predicted x0 undefined"));
        }
        let c_asym = -(ap * (1.0 - at) / at).sqrt();
        let c_dir = self.direction_radicand(pair, eta)?.sqrt();
        let c_sym = c_dir + c_asym;
        Ok(Cancellation {
            c_sym,
            c_asym,
            ratio: c_sym.abs() / c_asym.abs(),
        })
    }

    /// Cancellation coefficients of every adjacent pair `(t, t-1)`, `2 <= t <= T`.
    pub fn adjacent_sweep(&self, eta: f64) -> Result<Vec<(usize, Cancellation)>> {
        (2..=self.t_max())
            .map(|t| Ok((t, self.shift_cancellation(StepPair { t, t_prev: t - 1 }, eta)?)))
            .collect()
    }

    /// Largest adjacent-pair ratio over `2 <= t <= T` and where it occurs.
    pub fn max_adjacent_ratio(&self, eta: f64) -> Result<(usize, f64)> {
        let sweep = self.adjacent_sweep(eta)?;
        Ok(sweep
            .iter()
            .map(|(t, c)| (*t, c.ratio))
            .fold((0, f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best }))
    }

    /// Per-step dump for the adjacent pair `(t, t-1)`, `1 <= t <= T`:
    /// `t, beta, a, sigma_eta0, sigma_eta1`, then `c_sym, c_asym, ratio` at
    /// `η = 0` and the same three at `η = 1`.
    pub fn dump_csv(&self) -> Result<Csv> {
        let mut csv = Csv::new(&[
            "t", "beta", "a", "sigma_eta0", "sigma_eta1", "c_sym", "c_asym", "ratio",
            "c_sym_eta1", "c_asym_eta1", "ratio_eta1",
        ]);
        for t in 1..=self.t_max() {
            let pair = StepPair { t, t_prev: t - 1 };
            let c = self.shift_cancellation(pair, 0.0)?;
            let c1 = self.shift_cancellation(pair, 1.0)?;
            csv.row(&[
                t.to_string(),
                fmt_f(self.beta(t)),
                fmt_f(self.a(t)),
                fmt_f(self.sigma(pair, 0.0)?),
                fmt_f(self.sigma(pair, 1.0)?),
                fmt_f(c.c_sym),
                fmt_f(c.c_asym),
                fmt_f(c.ratio),
                fmt_f(c1.c_sym),
                fmt_f(c1.c_asym),
                fmt_f(c1.ratio),
            ]);
        }
        Ok(csv)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn quarter_half() -> NoiseSchedule {
        NoiseSchedule::from_signal_levels(&[1.0, 0.5, 0.25]).unwrap()
    }

    #[test]
    fn two_step_product() {
        let s = NoiseSchedule::linear(2, 0.1, 0.1).unwrap();
        assert_abs_diff_eq!(s.a(0), 1.0);
        assert_abs_diff_eq!(s.a(1), 0.9, epsilon = 1e-15);
        assert_abs_diff_eq!(s.a(2), 0.81, epsilon = 1e-15);
    }

    #[test]
    fn default_schedule_ends_near_zero() {
        let s = NoiseSchedule::default_linear();
        assert_eq!(s.t_max(), 1000);
        assert!(s.a(1000) < 5e-5, "a_T = {}", s.a(1000));
        assert!(s.signal_levels().windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn invalid_bounds_rejected() {
        assert!(NoiseSchedule::linear(1, 0.1, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.3, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn sigma_examples() {
        let s = quarter_half();
        let p = s.pair(2, 1).unwrap();
        assert_eq!(s.sigma(p, 0.0).unwrap(), 0.0);
        // sqrt(0.5/0.75) * sqrt(0.5)
        assert_abs_diff_eq!(s.sigma(p, 1.0).unwrap(), 0.577_350_269, epsilon = 1e-8);
        assert!(s.sigma(p, -1.0).is_err());
    }

    #[test]
    fn eta_one_matches_ddpm_posterior() {
        let s = NoiseSchedule::default_linear();
        for (t, tp) in [(2, 1), (500, 499), (1000, 975), (600, 300)] {
            let p = s.pair(t, tp).unwrap();
            let a = s.sigma(p, 1.0).unwrap();
            let b = s.ddpm_posterior_std(p).unwrap();
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn cancellation_hand_values() {
        let s = quarter_half();
        let c = s.shift_cancellation(s.pair(2, 1).unwrap(), 0.0).unwrap();
        assert_abs_diff_eq!(c.c_asym, -1.224_744_871, epsilon = 1e-8);
        assert_abs_diff_eq!(c.c_sym, -0.517_638_090, epsilon = 1e-8);
        assert_abs_diff_eq!(c.ratio, 0.422_649_731, epsilon = 1e-8);
    }

    #[test]
    fn zero_width_step_cancels() {
        let mut last = f64::INFINITY;
        for d in [1e-2, 1e-4, 1e-6, 1e-8] {
            let s = NoiseSchedule::from_signal_levels(&[1.0, 0.5 * (1.0 + d), 0.5]).unwrap();
            let c = s.shift_cancellation(s.pair(2, 1).unwrap(), 0.0).unwrap();
            assert!(c.c_sym.abs() < last);
            last = c.c_sym.abs();
        }
        assert!(last < 1e-7);
    }

    #[test]
    fn subsequence_is_even_and_inclusive() {
        let s = NoiseSchedule::default_linear();
        let q = s.subsequence(40).unwrap();
        assert_eq!(q.len(), 41);
        assert_eq!((q[0], q[1], q[40]), (0, 25, 1000));
        assert!(q.contains(&300) && q.contains(&600));
        assert!(s.subsequence(0).is_err());
        assert_eq!(s.reverse_subsequence(2).unwrap(), vec![1000, 500, 0]);
    }

    #[test]
    fn sigma_zero_for_all_adjacent_pairs_at_eta_zero() {
        let s = NoiseSchedule::default_linear();
        for t in 1..=s.t_max() {
            assert_eq!(s.sigma(StepPair { t, t_prev: t - 1 }, 0.0).unwrap(), 0.0);
        }
    }

    #[test]
    fn dump_has_one_row_per_step() {
        let s = NoiseSchedule::linear(5, 0.1, 0.2).unwrap();
        let csv = s.dump_csv().unwrap();
        let lines: Vec<&str> = csv.as_str().lines().collect();
        assert!(lines[0].starts_with("t,beta,a,sigma_eta0,sigma_eta1,c_sym,c_asym,ratio,"));
        assert!(lines[0].ends_with(",ratio_eta1"));
        assert_eq!(lines.len(), 6);
    }
}
