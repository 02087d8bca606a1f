//! Forward diffusion, reverse steps, inversion and trajectory sampling.
//!
//! The reverse update is split into the predicted clean sample
//! `P_t(ε) = (x_t - sqrt(1 - a_t) ε) / sqrt(a_t)` and the direction term
//! `D_t(ε) = sqrt(1 - a_prev - σ²) ε`:
//!
//! ```text
//! x_prev = sqrt(a_prev) P_t(ε_x0) + D_t(ε_dir) + σ z
//! ```
//!
//! A plain DDIM/DDPM step uses the same ε in both slots. The asymmetric
//! edit step feeds the injected prediction to `P_t` only and keeps the
//! clean prediction in `D_t`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::nn::{Adam, Gradients, ParamSet};
use crate::rng::normal_tensor;
use crate::schedule::{NoiseSchedule, StepPair};
use crate::tensor::Tensor;

/// Below this signal level the predicted clean sample is rejected.
pub const MIN_SIGNAL_LEVEL: f64 = 1e-8;

/// Noise predictor with an additive tap on its bottleneck features.
///
/// Inputs are batched along the leading axis. `delta_h` is either one
/// bottleneck vector of length [`bottleneck_dim`](Self::bottleneck_dim),
/// shared by the whole batch, or one row per batch item.
pub trait EpsilonModel {
    fn bottleneck_dim(&self) -> usize;

    fn predict(&self, x: &Tensor, t: usize) -> Result<Tensor>;

    /// Prediction with `h <- h + weight * delta_h` at the bottleneck.
    /// Must equal [`predict`](Self::predict) when `weight == 0` or `delta_h == 0`.
    fn predict_injected(&self, x: &Tensor, t: usize, delta_h: &Tensor, weight: f32)
        -> Result<Tensor>;

    /// Clean and injected predictions together; models override this to
    /// share the encoder pass.
    fn predict_both(
        &self,
        x: &Tensor,
        t: usize,
        delta_h: &Tensor,
        weight: f32,
    ) -> Result<(Tensor, Tensor)> {
        Ok((self.predict(x, t)?, self.predict_injected(x, t, delta_h, weight)?))
    }
}

/// True when an injection would leave the bottleneck untouched.
pub fn injection_is_noop(delta_h: &Tensor, weight: f32) -> bool {
    weight == 0.0 || delta_h.data().iter().all(|&v| v == 0.0)
}

/// `x_t = sqrt(a_t) x0 + sqrt(1 - a_t) noise`.
pub fn forward_diffuse(x0: &Tensor, t: usize, noise: &Tensor, s: &NoiseSchedule) -> Result<Tensor> {
    if t > s.t_max() {
        return invalid(format!("t = {t} beyond T = {}", s.t_max()));
    }
    x0.same_shape(noise)?;
    let a = s.a(t);
    let (ca, cn) = (a.sqrt(), (1.0 - a).sqrt());
    x0.zip_map(noise, |x, n| (ca * x as f64 + cn * n as f64) as f32)
}

/// Predicted clean sample `P_t`.
pub fn predicted_x0(x_t: &Tensor, t: usize, eps: &Tensor, s: &NoiseSchedule) -> Result<Tensor> {
    let a = s.a(t);
    if a < MIN_SIGNAL_LEVEL {
        return Err(Error::Numerical(format!(
            "a_{t} = {a:e} is below the {MIN_SIGNAL_LEVEL:e} floor"
        )));
    }
    let (ra, rn) = (a.sqrt(), (1.0 - a).sqrt());
    x_t.zip_map(eps, |x, e| ((x as f64 - rn * e as f64) / ra) as f32)
}

/// Direction term `D_t = sqrt(1 - a_prev - σ²) ε`.
pub fn direction_term(eps: &Tensor, pair: StepPair, eta: f64, s: &NoiseSchedule) -> Result<Tensor> {
    let c = s.direction_radicand(pair, eta)?.sqrt();
    Ok(eps.map(|e| (c * e as f64) as f32))
}

fn reverse_update(
    x_t: &Tensor,
    pair: StepPair,
    eps_x0: &Tensor,
    eps_dir: &Tensor,
    eta: f64,
    noise: Option<&Tensor>,
    s: &NoiseSchedule,
) -> Result<Tensor> {
    let p = predicted_x0(x_t, pair.t, eps_x0, s)?;
    let d = direction_term(eps_dir, pair, eta, s)?;
    let sigma = s.sigma(pair, eta)?;
    let c = s.a(pair.t_prev).sqrt();
    let mut out = p.zip_map(&d, |pv, dv| (c * pv as f64 + dv as f64) as f32)?;
    if sigma > 0.0 {
        let z = noise.ok_or_else(|| {
            Error::InvalidArgument("a stochastic step (eta > 0) needs a noise sample".into())
        })?;
        out = out.zip_map(z, |o, zv| (o as f64 + sigma * zv as f64) as f32)?;
    }
    Ok(out)
}

/// One DDIM (η = 0) or DDPM-like (η > 0) reverse step.
pub fn ddim_step(
    x_t: &Tensor,
    pair: StepPair,
    eps: &Tensor,
    eta: f64,
    noise: Option<&Tensor>,
    s: &NoiseSchedule,
) -> Result<Tensor> {
    reverse_update(x_t, pair, eps, eps, eta, noise, s)
}

/// Asymmetric step: the injected prediction drives `P_t`, the clean one `D_t`.
pub fn zip_step(
    x_t: &Tensor,
    pair: StepPair,
    eps: &Tensor,
    eps_tilde: &Tensor,
    eta: f64,
    noise: Option<&Tensor>,
    s: &NoiseSchedule,
) -> Result<Tensor> {
    reverse_update(x_t, pair, eps_tilde, eps, eta, noise, s)
}

/// Step with the injected prediction in both terms, the form whose shift
/// largely cancels.
pub fn symmetric_injected_step(
    x_t: &Tensor,
    pair: StepPair,
    eps_tilde: &Tensor,
    eta: f64,
    noise: Option<&Tensor>,
    s: &NoiseSchedule,
) -> Result<Tensor> {
    reverse_update(x_t, pair, eps_tilde, eps_tilde, eta, noise, s)
}

/// Deterministic DDIM inversion along an increasing index sequence.
pub fn invert(
    x0: &Tensor,
    model: &dyn EpsilonModel,
    steps: &[usize],
    s: &NoiseSchedule,
) -> Result<Tensor> {
    if steps.windows(2).any(|w| w[1] <= w[0]) {
        return invalid("inversion steps must be strictly increasing");
    }
    if let Some(&last) = steps.last() {
        if last > s.t_max() {
            return invalid(format!("inversion step {last} beyond T = {}", s.t_max()));
        }
    }
    let mut x = x0.clone();
    for w in steps.windows(2) {
        let (t, t_next) = (w[0], w[1]);
        let eps = model.predict(&x, t)?;
        let p = predicted_x0(&x, t, &eps, s)?;
        let a_next = s.a(t_next);
        let (cp, ce) = (a_next.sqrt(), (1.0 - a_next).sqrt());
        x = p.zip_map(&eps, |pv, e| (cp * pv as f64 + ce * e as f64) as f32)?;
    }
    Ok(x)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    pub eta: f64,
    /// Strictly decreasing schedule indices ending at 0.
    pub steps: Vec<usize>,
    pub seed: u64,
}

impl SamplerConfig {
    /// Deterministic sampler over `k` evenly spaced steps.
    pub fn ddim(s: &NoiseSchedule, k: usize) -> Result<Self> {
        Ok(Self {
            eta: 0.0,
            steps: s.reverse_subsequence(k)?,
            seed: 0,
        })
    }

    pub fn validate(&self, s: &NoiseSchedule) -> Result<()> {
        if !(self.eta >= 0.0) {
            return invalid(format!("eta must be >= 0, got {}", self.eta));
        }
        if self.steps.len() < 2 {
            return invalid("a sampler needs at least two step indices");
        }
        if self.steps.windows(2).any(|w| w[1] >= w[0]) {
            return invalid("sampler steps must be strictly decreasing");
        }
        if self.steps.last() != Some(&0) {
            return invalid("sampler steps must end at 0");
        }
        if self.steps[0] > s.t_max() {
            return invalid(format!("step {} beyond T = {}", self.steps[0], s.t_max()));
        }
        Ok(())
    }

    /// Consecutive `(t, t_prev)` pairs.
    pub fn pairs(&self) -> impl Iterator<Item = StepPair> + '_ {
        self.steps.windows(2).map(|w| StepPair {
            t: w[0],
            t_prev: w[1],
        })
    }

    /// The same indices in increasing order, for inversion.
    pub fn inversion_steps(&self) -> Vec<usize> {
        self.steps.iter().rev().copied().collect()
    }
}

/// Steps `t` with `t_lo < t <= t_hi` receive the bottleneck shift.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EditWindow {
    pub t_hi: usize,
    pub t_lo: usize,
    pub weight: f32,
}

impl EditWindow {
    pub fn new(t_hi: usize, t_lo: usize, weight: f32) -> Result<Self> {
        if t_hi <= t_lo {
            return invalid(format!("window needs t_hi > t_lo, got ({t_hi}, {t_lo})"));
        }
        if !(weight >= 0.0) {
            return invalid(format!("injection weight must be >= 0, got {weight}"));
        }
        Ok(Self { t_hi, t_lo, weight })
    }

    pub fn contains(&self, t: usize) -> bool {
        self.t_lo < t && t <= self.t_hi
    }
}

/// A bottleneck shift and where to apply it.
#[derive(Clone, Debug, PartialEq)]
pub struct Edit {
    pub delta_h: Tensor,
    pub window: EditWindow,
}

/// Predicted clean samples recorded at one step.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub t: usize,
    /// `P_t` from the clean prediction.
    pub pred_x0: Tensor,
    /// `P_t` from the injected prediction (window steps only).
    pub pred_x0_injected: Option<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    /// `(t, x_t)` in sampling order, starting with the initial state.
    pub states: Vec<(usize, Tensor)>,
    /// One snapshot per reverse step, in sampling order.
    pub snapshots: Vec<Snapshot>,
}

impl Trajectory {
    pub fn endpoint(&self) -> &Tensor {
        &self.states.last().expect("trajectory has an initial state").1
    }

    pub fn state_at(&self, t: usize) -> Option<&Tensor> {
        self.states.iter().find(|(s, _)| *s == t).map(|(_, x)| x)
    }
}

/// Which terms of the reverse update receive the injected prediction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Injection {
    /// Predicted-x0 term only.
    Asymmetric,
    /// Both terms.
    Symmetric,
}

/// Runs the reverse process from `x_start` (at `config.steps[0]`).
///
/// Inside the edit window the asymmetric step is used; elsewhere the plain
/// step. A zero weight or zero shift reproduces plain sampling bit for bit.
pub fn sample(
    model: &dyn EpsilonModel,
    x_start: &Tensor,
    config: &SamplerConfig,
    edit: Option<&Edit>,
    s: &NoiseSchedule,
) -> Result<Trajectory> {
    sample_with(model, x_start, config, edit, Injection::Asymmetric, s)
}

pub fn sample_with(
    model: &dyn EpsilonModel,
    x_start: &Tensor,
    config: &SamplerConfig,
    edit: Option<&Edit>,
    mode: Injection,
    s: &NoiseSchedule,
) -> Result<Trajectory> {
    config.validate(s)?;
    if let Some(e) = edit {
        for t in [e.window.t_hi, e.window.t_lo] {
            if !config.steps.contains(&t) {
                return invalid(format!(
                    "window bound {t} is not one of the sampler's step indices"
                ));
            }
        }
    }
    let active = edit.filter(|e| !injection_is_noop(&e.delta_h, e.window.weight));
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut x = x_start.clone();
    let mut states = vec![(config.steps[0], x.clone())];
    let mut snapshots = Vec::with_capacity(config.steps.len() - 1);
    for pair in config.pairs() {
        let noise = if config.eta > 0.0 {
            Some(normal_tensor(x.shape(), &mut rng))
        } else {
            None
        };
        let injected = active.filter(|e| e.window.contains(pair.t));
        let next = match injected {
            Some(e) => {
                let (eps, eps_t) = model.predict_both(&x, pair.t, &e.delta_h, e.window.weight)?;
                snapshots.push(Snapshot {
                    t: pair.t,
                    pred_x0: predicted_x0(&x, pair.t, &eps, s)?,
                    pred_x0_injected: Some(predicted_x0(&x, pair.t, &eps_t, s)?),
                });
                match mode {
                    Injection::Asymmetric => {
                        zip_step(&x, pair, &eps, &eps_t, config.eta, noise.as_ref(), s)?
                    }
                    Injection::Symmetric => {
                        symmetric_injected_step(&x, pair, &eps_t, config.eta, noise.as_ref(), s)?
                    }
                }
            }
            None => {
                let eps = model.predict(&x, pair.t)?;
                snapshots.push(Snapshot {
                    t: pair.t,
                    pred_x0: predicted_x0(&x, pair.t, &eps, s)?,
                    pred_x0_injected: None,
                });
                ddim_step(&x, pair, &eps, config.eta, noise.as_ref(), s)?
            }
        };
        x = next;
        states.push((pair.t_prev, x.clone()));
    }
    Ok(Trajectory { states, snapshots })
}

/// Single-step deviations of the symmetric and asymmetric injected updates
/// from the clean update, at η = 0: `(d_sym, d_asym)`.
pub fn cancellation_check(
    model: &dyn EpsilonModel,
    x_t: &Tensor,
    pair: StepPair,
    delta_h: &Tensor,
    weight: f32,
    s: &NoiseSchedule,
) -> Result<(f64, f64)> {
    let (eps, eps_t) = model.predict_both(x_t, pair.t, delta_h, weight)?;
    let clean = ddim_step(x_t, pair, &eps, 0.0, None, s)?;
    let sym = symmetric_injected_step(x_t, pair, &eps_t, 0.0, None, s)?;
    let asym = zip_step(x_t, pair, &eps, &eps_t, 0.0, None, s)?;
    Ok((sym.sub(&clean)?.norm(), asym.sub(&clean)?.norm()))
}

/// Endpoint deviations of symmetric and asymmetric injection from the clean
/// endpoint over a whole trajectory: `(d_sym, d_asym)`.
pub fn trajectory_cancellation(
    model: &dyn EpsilonModel,
    x_start: &Tensor,
    config: &SamplerConfig,
    edit: &Edit,
    s: &NoiseSchedule,
) -> Result<(f64, f64)> {
    let clean = sample(model, x_start, config, None, s)?;
    let sym = sample_with(model, x_start, config, Some(edit), Injection::Symmetric, s)?;
    let asym = sample_with(model, x_start, config, Some(edit), Injection::Asymmetric, s)?;
    Ok((
        sym.endpoint().sub(clean.endpoint())?.norm(),
        asym.endpoint().sub(clean.endpoint())?.norm(),
    ))
}

/// A noise predictor whose parameters can be fitted by ε-matching.
pub trait TrainableEpsilonModel: EpsilonModel {
    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;
    /// Mean squared ε error over the batch and its parameter gradients.
    fn epsilon_loss(&self, x_t: &Tensor, ts: &[usize], noise: &Tensor) -> Result<(f32, Gradients)>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorTraining {
    pub epochs: usize,
    pub batch_size: usize,
    /// Peak Adam learning rate; decays on a half cosine to zero.
    pub lr: f32,
    pub seed: u64,
}

impl Default for GeneratorTraining {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 32,
            lr: 2e-3,
            seed: 0,
        }
    }
}

/// Per-epoch mean training loss.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GeneratorReport {
    pub epoch_loss: Vec<f64>,
}

fn draw_timesteps(n: usize, s: &NoiseSchedule, rng: &mut ChaCha8Rng) -> Vec<usize> {
    use rand::Rng;
    (0..n).map(|_| rng.random_range(1..=s.t_max())).collect()
}

fn diffuse_batch(x0: &Tensor, ts: &[usize], noise: &Tensor, s: &NoiseSchedule) -> Result<Tensor> {
    let per = x0.item_len();
    let mut out = Vec::with_capacity(x0.len());
    for (i, &t) in ts.iter().enumerate() {
        let a = s.a(t);
        let (ca, cn) = (a.sqrt(), (1.0 - a).sqrt());
        let xs = &x0.data()[i * per..(i + 1) * per];
        let ns = &noise.data()[i * per..(i + 1) * per];
        out.extend(
            xs.iter()
                .zip(ns)
                .map(|(&x, &n)| (ca * x as f64 + cn * n as f64) as f32),
        );
    }
    Tensor::new(x0.shape().to_vec(), out)
}

/// Fits the noise predictor on `data` (`[N, ...]`) by ε-matching with
/// uniformly drawn steps `1..=T`.
pub fn train_generator<M: TrainableEpsilonModel>(
    data: &Tensor,
    model: &mut M,
    s: &NoiseSchedule,
    cfg: &GeneratorTraining,
) -> Result<GeneratorReport> {
    use rand::seq::SliceRandom;
    let n = data.batch_len();
    let mut report = GeneratorReport::default();
    if cfg.epochs == 0 || n == 0 {
        return Ok(report);
    }
    let bs = cfg.batch_size.clamp(1, n);
    let batches_per_epoch = n.div_ceil(bs);
    let total = (cfg.epochs * batches_per_epoch) as f32;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(cfg.lr);
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0f64;
        for chunk in order.chunks(bs) {
            let x0 = data.gather(chunk);
            let ts = draw_timesteps(chunk.len(), s, &mut rng);
            let noise = normal_tensor(x0.shape(), &mut rng);
            let x_t = diffuse_batch(&x0, &ts, &noise, s)?;
            let (loss, grads) = model
                .epsilon_loss(&x_t, &ts, &noise)
                .map_err(|e| Error::Diverged {
                    epoch,
                    reason: e.to_string(),
                })?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    reason: format!("loss {loss}"),
                });
            }
            opt.lr = cfg.lr * 0.5 * (1.0 + (std::f32::consts::PI * step as f32 / total).cos());
            opt.step(model.params_mut(), &grads)?;
            sum += loss as f64 * chunk.len() as f64;
            step += 1;
        }
        report.epoch_loss.push(sum / n as f64);
    }
    Ok(report)
}

/// Mean squared ε error of `model` on `data` at seeded random steps.
pub fn epsilon_mse(
    model: &dyn EpsilonModel,
    data: &Tensor,
    s: &NoiseSchedule,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = data.batch_len();
    let mut total = 0.0;
    let mut count = 0usize;
    for start in (0..n).step_by(64) {
        let idx: Vec<usize> = (start..(start + 64).min(n)).collect();
        let x0 = data.gather(&idx);
        let ts = draw_timesteps(idx.len(), s, &mut rng);
        let noise = normal_tensor(x0.shape(), &mut rng);
        let x_t = diffuse_batch(&x0, &ts, &noise, s)?;
        for (i, &t) in ts.iter().enumerate() {
            let pred = model.predict(&x_t.item(i), t)?;
            let d = pred.sub(&noise.item(i))?;
            total += d.dot(&d)?;
            count += d.len();
        }
    }
    Ok(total / count.max(1) as f64)
}
