//! Zero-shot attribute editing: prompts, the directional loss, the
//! attribute encoder and its training against a frozen generator, and the
//! end-to-end edit.
//!
//! An edit inverts the input image to noise, then samples it back while a
//! bottleneck shift `Δh`, encoded from a reference image that carries the
//! attribute, is injected into the predicted-x0 term only inside the edit
//! window.

use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffusion::{
    injection_is_noop, invert, predicted_x0, sample, ddim_step, Edit, EditWindow, EpsilonModel,
    SamplerConfig, Trajectory,
};
use crate::error::{invalid, Error, Result};
use crate::io::{fmt_f, Csv};
use crate::nn::layers::{add_dense, uniform_init};
use crate::nn::{sgd_step, Graph, ParamSet, Var};
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;
use crate::toyworld::{
    detect_batch, embed_image_batch, embed_image_graph, embed_text, visual_generator,
    visual_generator_batch, AttributeId, IMAGE_SIZE,
};
use crate::unet::ToyUNet;

/// Produces `(t_source, t_target)` from an attribute token.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptPattern {
    pub source: String,
    /// Target template; `{attr}` is replaced by the attribute token.
    pub target: String,
}

impl Default for PromptPattern {
    fn default() -> Self {
        Self {
            source: "a person".into(),
            target: "a person with {attr}".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptPair {
    pub source: String,
    pub target: String,
}

pub fn build_prompt(pattern: &PromptPattern, attr: &str) -> Result<PromptPair> {
    let a: AttributeId = attr.parse()?;
    let pair = PromptPair {
        source: pattern.source.clone(),
        target: pattern.target.replace("{attr}", a.token()),
    };
    embed_text(&pair.source)?;
    embed_text(&pair.target)?;
    Ok(pair)
}

/// `ΔT = E_T(target) - E_T(source)`.
pub fn text_direction(prompts: &PromptPair) -> Result<Tensor> {
    embed_text(&prompts.target)?.sub(&embed_text(&prompts.source)?)
}

/// `1 - cos(ΔI, ΔT)` on precomputed embedding differences.
pub fn directional_loss_from(delta_i: &Tensor, delta_t: &Tensor) -> Result<f64> {
    let (ni, nt) = (delta_i.norm(), delta_t.norm());
    if ni == 0.0 {
        return Err(Error::DegenerateDirection("image embedding did not move".into()));
    }
    if nt == 0.0 {
        return Err(Error::DegenerateDirection("source and target prompts coincide".into()));
    }
    Ok((1.0 - delta_i.dot(delta_t)? / (ni * nt)).clamp(0.0, 2.0))
}

/// `1 - cos(E_I(i_out) - E_I(i_edit), E_T(target) - E_T(source))`.
pub fn directional_loss(i_out: &Tensor, i_edit: &Tensor, prompts: &PromptPair) -> Result<f64> {
    let e_out = embed_image_batch(i_out)?;
    let e_in = embed_image_batch(i_edit)?;
    directional_loss_from(&e_out.sub(&e_in)?, &text_direction(prompts)?)
}

/// Added under the square root of `|ΔI|²` in the training loss. An
/// unmoved image then scores the baseline 1 instead of failing, and the
/// gradient at the zero-shift start stays bounded (a tiny value makes it
/// scale like `1 / |ΔI|` and the first update overshoots).
pub const DIRECTION_EPS: f32 = 1e-2;

/// Mean over the batch of `1 - ΔI·ΔT / (sqrt(|ΔI|² + eps) |ΔT|)`.
pub fn directional_loss_graph(g: &mut Graph, delta_i: Var, delta_t: &Tensor) -> Result<Var> {
    let nt = delta_t.norm() as f32;
    if nt == 0.0 {
        return Err(Error::DegenerateDirection("source and target prompts coincide".into()));
    }
    let unit = delta_t.scale(1.0 / nt).reshape(&[delta_t.len(), 1])?;
    let n = g.value(delta_i).shape()[0];
    let u = g.input(unit);
    let dot = g.matmul(delta_i, u)?;
    let dot = g.reshape(dot, &[n])?;
    let sq = g.square(delta_i)?;
    let norm2 = g.sum_last(sq)?;
    let norm2 = g.add_scalar(norm2, DIRECTION_EPS)?;
    let norm = g.sqrt(norm2)?;
    let cos = g.div(dot, norm)?;
    let m = g.mean(cos)?;
    let neg = g.scale(m, -1.0)?;
    g.add_scalar(neg, 1.0)
}

/// Trainable head mapping reference-image bottleneck features (taken from
/// the frozen generator encoder at `t = 0`) to a shift `Δh`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributeEncoder {
    params: ParamSet,
}

impl AttributeEncoder {
    pub const HIDDEN: usize = 64;

    /// Two dense layers; the output layer starts at zero so the initial
    /// edit is exactly the identity.
    pub fn new(bottleneck_dim: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        add_dense(&mut params, "head.0", bottleneck_dim, Self::HIDDEN, &mut rng)?;
        params.insert("head.1.w", Tensor::zeros(&[Self::HIDDEN, bottleneck_dim]), true)?;
        params.insert("head.1.b", Tensor::zeros(&[bottleneck_dim]), true)?;
        Ok(Self { params })
    }

    /// Like [`new`](Self::new) but with a random output layer too.
    pub fn new_random(bottleneck_dim: usize, seed: u64) -> Result<Self> {
        let mut enc = Self::new(bottleneck_dim, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        *enc.params.get_mut("head.1.w").expect("exists") =
            uniform_init(&[Self::HIDDEN, bottleneck_dim], Self::HIDDEN, &mut rng);
        Ok(enc)
    }

    pub fn from_params(params: ParamSet, bottleneck_dim: usize) -> Result<Self> {
        let want = Self::new(bottleneck_dim, 0)?;
        for e in want.params.iter() {
            match params.get(&e.name) {
                Some(t) if t.shape() == e.tensor.shape() => {}
                _ => return invalid(format!("encoder file lacks a `{}` of shape {:?}", e.name, e.tensor.shape())),
            }
        }
        if params.len() != want.params.len() {
            return invalid("encoder file has unexpected tensors");
        }
        Ok(Self { params })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn bottleneck_dim(&self) -> usize {
        self.params.get("head.1.b").map_or(0, |b| b.len())
    }

    /// `Δh [N, D]` for references `[N, 16, 16]` (or one `[16, 16]` image,
    /// giving `[1, D]`).
    pub fn encode_graph(&self, g: &mut Graph, generator: &ToyUNet, refs: &Tensor) -> Result<Var> {
        let s = IMAGE_SIZE;
        let n = if refs.shape().len() == 2 { 1 } else { refs.shape()[0] };
        let x = g.input(refs.clone().reshape(&[n, s, s, 1])?);
        let feats = generator.down_graph(g, x, &vec![0; n])?;
        let flat = g.reshape(feats.h, &[n, generator.config().bottleneck_dim()])?;
        let hid = g.dense(flat, &self.params, "head.0")?;
        let hid = g.silu(hid)?;
        g.dense(hid, &self.params, "head.1")
    }

    pub fn encode_batch(&self, generator: &ToyUNet, refs: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let frozen = frozen_copy(generator);
        let v = self.encode_graph(&mut g, &frozen, refs)?;
        Ok(g.value(v).clone())
    }

    /// `Δh [D]` for one reference image.
    pub fn encode(&self, generator: &ToyUNet, i_ref: &Tensor) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.encode_batch(generator, i_ref)?.into_data()))
    }
}

fn frozen_copy(generator: &ToyUNet) -> ToyUNet {
    let mut g = generator.clone();
    crate::diffusion::TrainableEpsilonModel::params_mut(&mut g).freeze_all();
    g
}

#[derive(Clone, Debug, PartialEq)]
pub struct EditConfig {
    pub weight: f32,
    pub t_hi: usize,
    pub t_lo: usize,
    pub lambda_clip: f32,
    pub lambda_recon: f32,
    pub inversion_steps: usize,
    pub lr: f32,
    pub epochs: usize,
    /// References drawn per training step.
    pub batch_size: usize,
    /// Number of training images inverted once and cached.
    pub pool_size: usize,
    pub seed: u64,
}

impl Default for EditConfig {
    fn default() -> Self {
        Self {
            weight: 0.3,
            t_hi: 600,
            t_lo: 300,
            lambda_clip: 0.8,
            lambda_recon: 3.0,
            inversion_steps: 40,
            lr: 0.05,
            epochs: 200,
            batch_size: 8,
            pool_size: 128,
            seed: 0,
        }
    }
}

impl EditConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.weight >= 0.0) {
            return invalid(format!("weight must be >= 0, got {}", self.weight));
        }
        if self.t_hi <= self.t_lo {
            return invalid(format!("window needs t_hi > t_lo, got ({}, {})", self.t_hi, self.t_lo));
        }
        if !(self.lambda_clip >= 0.0) || !(self.lambda_recon >= 0.0) {
            return invalid("loss weights must be >= 0");
        }
        if self.inversion_steps == 0 {
            return invalid("inversion needs at least one step");
        }
        if self.batch_size == 0 || self.pool_size == 0 {
            return invalid("batch and pool sizes must be positive");
        }
        Ok(())
    }

    pub fn window(&self) -> Result<EditWindow> {
        EditWindow::new(self.t_hi, self.t_lo, self.weight)
    }

    pub fn sampler(&self, s: &NoiseSchedule) -> Result<SamplerConfig> {
        SamplerConfig::ddim(s, self.inversion_steps)
    }
}

/// Loss components of one evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub clip: f64,
    pub recon: f64,
}

/// Window-step loss evaluated on finished trajectories: the directional
/// term on `(P̃_t, P_t)` snapshots and the L1 term on the states after each
/// window step, both averaged over the window.
pub fn total_loss(
    edited: &Trajectory,
    clean: &Trajectory,
    prompts: &PromptPair,
    cfg: &EditConfig,
) -> Result<LossParts> {
    let window = cfg.window()?;
    let delta_t = text_direction(prompts)?;
    let mut clip = 0.0;
    let mut recon = 0.0;
    let mut n = 0usize;
    for (i, snap) in edited.snapshots.iter().enumerate() {
        if !window.contains(snap.t) {
            continue;
        }
        let clean_snap = clean
            .snapshots
            .get(i)
            .filter(|c| c.t == snap.t)
            .ok_or_else(|| Error::InvalidArgument("trajectories use different steps".into()))?;
        let p_tilde = snap.pred_x0_injected.as_ref().unwrap_or(&snap.pred_x0);
        let di = embed_image_batch(p_tilde)?.sub(&embed_image_batch(&clean_snap.pred_x0)?)?;
        clip += match directional_loss_from(&di, &delta_t) {
            Ok(v) => v,
            Err(Error::DegenerateDirection(_)) if di.norm() == 0.0 => 1.0,
            Err(e) => return Err(e),
        };
        let (x_out, x_edit) = (&edited.states[i + 1].1, &clean.states[i + 1].1);
        recon += x_out.mean_abs_diff(x_edit)?;
        n += 1;
    }
    if n == 0 {
        return invalid("the edit window contains no sampler step");
    }
    let (clip, recon) = (clip / n as f64, recon / n as f64);
    Ok(LossParts {
        total: cfg.lambda_clip as f64 * clip + cfg.lambda_recon as f64 * recon,
        clip,
        recon,
    })
}

/// Clean trajectory data at one window step, used as training targets.
#[derive(Clone, Debug)]
struct WindowStep {
    t: usize,
    t_prev: usize,
    /// Clean `P_t` along the unedited trajectory.
    pred_x0: Tensor,
    /// Clean state after the step.
    x_prev: Tensor,
}

/// Inverted training images with their cached clean window trajectory.
#[derive(Clone, Debug)]
pub struct WindowCache {
    /// States entering the window, `[P, 16, 16]`.
    start: Tensor,
    steps: Vec<WindowStep>,
}

impl WindowCache {
    pub fn build(
        images: &Tensor,
        generator: &dyn EpsilonModel,
        cfg: &EditConfig,
        s: &NoiseSchedule,
    ) -> Result<Self> {
        let sampler = cfg.sampler(s)?;
        let window = cfg.window()?;
        for t in [window.t_hi, window.t_lo] {
            if !sampler.steps.contains(&t) {
                return invalid(format!("window bound {t} is not a sampler step"));
            }
        }
        let mut x = invert(images, generator, &sampler.inversion_steps(), s)?;
        let mut start = None;
        let mut steps = Vec::new();
        for pair in sampler.pairs() {
            if pair.t <= window.t_lo {
                break;
            }
            let eps = generator.predict(&x, pair.t)?;
            let next = ddim_step(&x, pair, &eps, 0.0, None, s)?;
            if window.contains(pair.t) {
                if start.is_none() {
                    start = Some(x.clone());
                }
                steps.push(WindowStep {
                    t: pair.t,
                    t_prev: pair.t_prev,
                    pred_x0: predicted_x0(&x, pair.t, &eps, s)?,
                    x_prev: next.clone(),
                });
            }
            x = next;
        }
        let start = start.ok_or_else(|| Error::InvalidArgument("empty edit window".into()))?;
        Ok(Self { start, steps })
    }

    pub fn len(&self) -> usize {
        self.start.batch_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn window_len(&self) -> usize {
        self.steps.len()
    }
}

/// Builds the window loss for pool items `idx` given `Δh [B, D]`.
///
/// Each window step runs the asymmetric update on the edited state, and
/// the edited state is carried through the graph, so gradients reach `Δh`
/// through every earlier step as well as the current `P̃_t`.
#[allow(clippy::too_many_arguments)]
pub fn window_loss_graph(
    g: &mut Graph,
    generator: &ToyUNet,
    cache: &WindowCache,
    idx: &[usize],
    delta_h: Var,
    delta_t: &Tensor,
    cfg: &EditConfig,
    s: &NoiseSchedule,
) -> Result<(Var, Var, Var, Tensor)> {
    let side = IMAGE_SIZE;
    let b = idx.len();
    let img_shape = [b, side, side, 1];
    let mut xv = g.input(cache.start.gather(idx).reshape(&img_shape)?);
    let mut clip_terms = Vec::new();
    let mut recon_terms = Vec::new();
    let mut last_p = None;
    for step in &cache.steps {
        let (a, ap) = (s.a(step.t), s.a(step.t_prev));
        let ts = vec![step.t; b];
        let feats = generator.down_graph(g, xv, &ts)?;
        let eps = generator.up_graph(g, &feats, feats.h, xv, &ts)?;
        let shifted = generator.inject(g, feats.h, delta_h, cfg.weight)?;
        let eps_t = generator.up_graph(g, &feats, shifted, xv, &ts)?;

        // P̃ = (x - sqrt(1-a) ε̃) / sqrt(a)
        let scaled = g.scale(eps_t, -(1.0 - a).sqrt() as f32)?;
        let num = g.add(xv, scaled)?;
        let p_tilde = g.scale(num, (1.0 / a.sqrt()) as f32)?;
        // x_prev = sqrt(a_p) P̃ + sqrt(1 - a_p) ε   (η = 0)
        let dir_coef = s.direction_radicand(s.pair(step.t, step.t_prev)?, 0.0)?.sqrt() as f32;
        let dir = g.scale(eps, dir_coef)?;
        let lead = g.scale(p_tilde, ap.sqrt() as f32)?;
        let x_next = g.add(lead, dir)?;

        let p_clean = g.input(step.pred_x0.gather(idx).reshape(&img_shape)?);
        let e_tilde = embed_image_graph(g, p_tilde)?;
        let e_clean = embed_image_graph(g, p_clean)?;
        let di = g.sub(e_tilde, e_clean)?;
        clip_terms.push(directional_loss_graph(g, di, delta_t)?);

        let target = g.input(step.x_prev.gather(idx).reshape(&img_shape)?);
        let diff = g.sub(x_next, target)?;
        let ad = g.abs(diff)?;
        recon_terms.push(g.mean(ad)?);

        xv = x_next;
        last_p = Some(g.value(p_tilde).clone());
    }
    let n = clip_terms.len();
    if n == 0 {
        return invalid("the edit window contains no sampler step");
    }
    let mut clip = clip_terms[0];
    for &c in &clip_terms[1..] {
        clip = g.add(clip, c)?;
    }
    let clip = g.scale(clip, 1.0 / n as f32)?;
    let mut recon = recon_terms[0];
    for &r in &recon_terms[1..] {
        recon = g.add(recon, r)?;
    }
    let recon = g.scale(recon, 1.0 / n as f32)?;
    let wc = g.scale(clip, cfg.lambda_clip)?;
    let wr = g.scale(recon, cfg.lambda_recon)?;
    let total = g.add(wc, wr)?;
    let last_p = last_p.expect("non-empty window").reshape(&[b, side, side])?;
    Ok((total, clip, recon, last_p))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpochStats {
    pub clip_loss: f64,
    pub recon_loss: f64,
    /// Fraction of the batch whose last window `P̃_t` scores ≥ 0.9 on the
    /// target detector.
    pub success_rate: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    /// Set when training stopped on a non-finite loss: `(epoch, reason)`.
    pub diverged: Option<(usize, String)>,
    pub generator_fingerprint: u64,
}

impl TrainReport {
    pub fn to_csv(&self) -> Csv {
        let mut csv = Csv::new(&["epoch", "clip_loss", "recon_loss", "success_rate"]);
        for (i, e) in self.epochs.iter().enumerate() {
            csv.row(&[
                i.to_string(),
                fmt_f(e.clip_loss),
                fmt_f(e.recon_loss),
                fmt_f(e.success_rate),
            ]);
        }
        csv
    }
}

/// Trains the encoder head so that injecting its `Δh` moves the images of
/// `dataset` towards `attr`.
///
/// The generator is borrowed immutably and only ever evaluated through a
/// frozen copy; its fingerprint is recorded in the report. A fresh batch of
/// reference images is drawn every epoch.
pub fn train_attribute_encoder(
    dataset: &Tensor,
    attr: AttributeId,
    generator: &ToyUNet,
    encoder: &mut AttributeEncoder,
    cfg: &EditConfig,
    s: &NoiseSchedule,
) -> Result<TrainReport> {
    cfg.validate()?;
    let fingerprint = crate::diffusion::TrainableEpsilonModel::params(generator).fingerprint();
    let mut report = TrainReport {
        generator_fingerprint: fingerprint,
        ..TrainReport::default()
    };
    if cfg.epochs == 0 {
        return Ok(report);
    }
    let n = dataset.batch_len();
    if n == 0 {
        return invalid("training needs at least one image");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let pool_idx: Vec<usize> = if n <= cfg.pool_size {
        (0..n).collect()
    } else {
        let mut v = sample_indices(&mut rng, n, cfg.pool_size).into_vec();
        v.sort_unstable();
        v
    };
    let frozen = frozen_copy(generator);
    let cache = WindowCache::build(&dataset.gather(&pool_idx), &frozen, cfg, s)?;
    let prompts = build_prompt(&PromptPattern::default(), attr.token())?;
    let delta_t = text_direction(&prompts)?;
    let bs = cfg.batch_size.min(cache.len());

    for epoch in 0..cfg.epochs {
        let idx = sample_indices(&mut rng, cache.len(), bs).into_vec();
        let refs = visual_generator_batch(attr, bs, &mut rng)?;
        let mut g = Graph::new();
        let outcome = encoder
            .encode_graph(&mut g, &frozen, &refs)
            .and_then(|dh| window_loss_graph(&mut g, &frozen, &cache, &idx, dh, &delta_t, cfg, s));
        let (total, clip, recon, last_p) = match outcome {
            Ok(v) => v,
            Err(Error::Numerical(reason)) => {
                report.diverged = Some((epoch, reason));
                return Ok(report);
            }
            Err(e) => return Err(e),
        };
        let loss = g.value(total).data()[0];
        if !loss.is_finite() {
            report.diverged = Some((epoch, format!("loss {loss}")));
            return Ok(report);
        }
        let grads = g.backward(total)?;
        sgd_step(encoder.params_mut(), &grads, cfg.lr)?;
        let scores = detect_batch(&last_p)?;
        let hits = scores
            .data()
            .chunks(3)
            .filter(|r| r[attr.index()] >= 0.9)
            .count();
        report.epochs.push(EpochStats {
            clip_loss: g.value(clip).data()[0] as f64,
            recon_loss: g.value(recon).data()[0] as f64,
            success_rate: hits as f64 / bs as f64,
        });
    }
    let after = crate::diffusion::TrainableEpsilonModel::params(generator).fingerprint();
    if after != fingerprint {
        return Err(Error::Numerical("generator parameters changed during encoder training".into()));
    }
    Ok(report)
}

/// Result of one edit.
#[derive(Clone, Debug, PartialEq)]
pub struct EditOutput {
    pub image: Tensor,
    pub trajectory: Trajectory,
    pub delta_h: Tensor,
}

/// Full edit of one image: prompt, reference image, `Δh`, inversion,
/// windowed asymmetric sampling.
///
/// Fails with [`Error::DegenerateDirection`] if the injection is active but
/// left every predicted-x0 snapshot unchanged.
pub fn zip_edit(
    i_edit: &Tensor,
    attr: &str,
    generator: &ToyUNet,
    encoder: &AttributeEncoder,
    cfg: &EditConfig,
    ref_seed: u64,
) -> Result<EditOutput> {
    let prompts = build_prompt(&PromptPattern::default(), attr)?;
    let a: AttributeId = attr.parse()?;
    debug_assert!(prompts.target.contains(a.token()));
    let i_ref = visual_generator(a, ref_seed)?;
    let delta_h = encoder.encode(generator, &i_ref)?;
    edit_with_shift(i_edit, &delta_h, generator, cfg)
}

/// Edits `images` (`[16, 16]` or `[N, 16, 16]`) with a given shift
/// (`[D]` shared or `[N, D]`).
pub fn edit_with_shift(
    images: &Tensor,
    delta_h: &Tensor,
    generator: &ToyUNet,
    cfg: &EditConfig,
) -> Result<EditOutput> {
    cfg.validate()?;
    let s = generator.schedule();
    let sampler = cfg.sampler(s)?;
    let x_t = invert(images, generator, &sampler.inversion_steps(), s)?;
    let edit = Edit {
        delta_h: delta_h.clone(),
        window: cfg.window()?,
    };
    let trajectory = sample(generator, &x_t, &sampler, Some(&edit), s)?;
    if !injection_is_noop(delta_h, cfg.weight)
        && trajectory
            .snapshots
            .iter()
            .all(|sn| sn.pred_x0_injected.as_ref().is_none_or(|p| *p == sn.pred_x0))
    {
        return Err(Error::DegenerateDirection("the injected shift did not change the image".into()));
    }
    Ok(EditOutput {
        image: trajectory.endpoint().clone(),
        trajectory,
        delta_h: delta_h.clone(),
    })
}

/// Edits a batch, one fresh reference image per input drawn from `rng`.
pub fn zip_edit_batch(
    images: &Tensor,
    attr: AttributeId,
    generator: &ToyUNet,
    encoder: &AttributeEncoder,
    cfg: &EditConfig,
    rng: &mut impl rand::Rng,
) -> Result<EditOutput> {
    let n = images.batch_len();
    let refs = visual_generator_batch(attr, n, rng)?;
    let delta_h = encoder.encode_batch(generator, &refs)?;
    edit_with_shift(images, &delta_h, generator, cfg)
}

/// Plain inversion followed by unedited regeneration.
pub fn reconstruct(images: &Tensor, generator: &dyn EpsilonModel, cfg: &EditConfig, s: &NoiseSchedule) -> Result<Tensor> {
    let sampler = cfg.sampler(s)?;
    let x_t = invert(images, generator, &sampler.inversion_steps(), s)?;
    Ok(sample(generator, &x_t, &sampler, None, s)?.endpoint().clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn prompt_pairs() {
        let p = build_prompt(&PromptPattern::default(), "glasses").unwrap();
        assert_eq!(p.source, "a person");
        assert_eq!(p.target, "a person with glasses");
        let q = build_prompt(&PromptPattern::default(), "smiling").unwrap();
        assert_eq!(q.target, "a person with smiling");
        assert!(matches!(
            build_prompt(&PromptPattern::default(), "hat"),
            Err(Error::UnknownAttribute(_))
        ));
    }

    #[test]
    fn directional_loss_fixtures() {
        let t = Tensor::from_vec(vec![1.0, 0.0, 0.0]);
        let cases = [([2.0, 0.0, 0.0], 0.0), ([0.0, 3.0, 0.0], 1.0), ([-1.0, 0.0, 0.0], 2.0)];
        for (di, want) in cases {
            let got = directional_loss_from(&Tensor::from_vec(di.to_vec()), &t).unwrap();
            assert_abs_diff_eq!(got, want, epsilon = 1e-12);
        }
        assert!(matches!(
            directional_loss_from(&Tensor::zeros(&[3]), &t),
            Err(Error::DegenerateDirection(_))
        ));
        assert!(matches!(
            directional_loss_from(&t, &Tensor::zeros(&[3])),
            Err(Error::DegenerateDirection(_))
        ));
    }

    #[test]
    fn fresh_encoder_is_a_no_op() {
        let gen = ToyUNet::new(Default::default(), NoiseSchedule::default_linear(), 0).unwrap();
        let enc = AttributeEncoder::new(gen.config().bottleneck_dim(), 1).unwrap();
        let dh = enc.encode(&gen, &visual_generator(AttributeId::Glasses, 3).unwrap()).unwrap();
        assert_eq!(dh.len(), 256);
        assert!(dh.data().iter().all(|&v| v == 0.0));
    }
}
