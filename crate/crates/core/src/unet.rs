//! A small ε-predicting U-Net over single-channel square images.
//!
//! Layout (channels last):
//!
//! ```text
//! x [N,S,S,1] -> c1 (C1) ----------------------------------> concat -> u2 (C1) -> out (1)
//!               -> d1 stride 2 (C2) -------------> concat -> u1 (C2) -^
//!                  -> d2 stride 2 (C3) = h -> mid -^
//! ```
//!
//! The step embedding enters as per-channel biases after `c1` and `d2`.
//! The bottleneck `h` (`C3 * (S/4)^2` values per image) is where the
//! attribute shift is injected.
//!
//! The network output `F` is preconditioned by the noise level:
//! `ε = sqrt(1 - a_t) x + sqrt(a_t) F`. With this form the predicted clean
//! image `sqrt(a_t) x - sqrt(1 - a_t) F` stays bounded at the noisiest steps,
//! which keeps long inversions stable.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffusion::{injection_is_noop, EpsilonModel, TrainableEpsilonModel};
use crate::error::{invalid, shape_err, Result};
use crate::nn::{time_embed_batch, Gradients, Graph, ParamSet, Var};
use crate::nn::layers::{add_conv, add_dense};
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UNetConfig {
    pub size: usize,
    pub c1: usize,
    pub c2: usize,
    pub c3: usize,
    pub time_dim: usize,
    pub time_hidden: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            size: 16,
            c1: 8,
            c2: 16,
            c3: 16,
            time_dim: 32,
            time_hidden: 64,
        }
    }
}

impl UNetConfig {
    pub fn bottleneck_side(&self) -> usize {
        self.size.div_ceil(4)
    }

    pub fn bottleneck_dim(&self) -> usize {
        self.bottleneck_side().pow(2) * self.c3
    }
}

/// Encoder activations shared by the clean and injected decoder passes.
#[derive(Clone, Copy, Debug)]
pub struct DownFeatures {
    pub skip1: Var,
    pub skip2: Var,
    /// Bottleneck `[N, s, s, C3]`.
    pub h: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyUNet {
    config: UNetConfig,
    params: ParamSet,
    schedule: NoiseSchedule,
}

impl ToyUNet {
    pub fn new(config: UNetConfig, schedule: NoiseSchedule, seed: u64) -> Result<Self> {
        if config.size < 4 || config.size % 4 != 0 {
            return invalid(format!("image size must be a positive multiple of 4, got {}", config.size));
        }
        if config.time_dim % 2 != 0 {
            return invalid("time embedding dimension must be even");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config;
        let mut p = ParamSet::new();
        add_dense(&mut p, "time.hidden", c.time_dim, c.time_hidden, &mut rng)?;
        add_dense(&mut p, "time.c1", c.time_hidden, c.c1, &mut rng)?;
        add_dense(&mut p, "time.d2", c.time_hidden, c.c3, &mut rng)?;
        add_conv(&mut p, "c1", 1, c.c1, &mut rng)?;
        add_conv(&mut p, "d1", c.c1, c.c2, &mut rng)?;
        add_conv(&mut p, "d2", c.c2, c.c3, &mut rng)?;
        add_conv(&mut p, "mid", c.c3, c.c3, &mut rng)?;
        add_conv(&mut p, "u1", c.c3 + c.c2, c.c2, &mut rng)?;
        add_conv(&mut p, "u2", c.c2 + c.c1, c.c1, &mut rng)?;
        add_conv(&mut p, "out", c.c1, 1, &mut rng)?;
        Ok(Self {
            config,
            params: p,
            schedule,
        })
    }

    /// Rebuilds a network from stored parameters, checking every shape.
    pub fn from_params(config: UNetConfig, schedule: NoiseSchedule, params: ParamSet) -> Result<Self> {
        let reference = Self::new(config, schedule.clone(), 0)?;
        if reference.params.len() != params.len() {
            return shape_err(format!(
                "expected {} parameter tensors, found {}",
                reference.params.len(),
                params.len()
            ));
        }
        for e in reference.params.iter() {
            match params.get(&e.name) {
                Some(t) if t.shape() == e.tensor.shape() => {}
                Some(t) => {
                    return shape_err(format!(
                        "parameter `{}` has shape {:?}, expected {:?}",
                        e.name,
                        t.shape(),
                        e.tensor.shape()
                    ))
                }
                None => return invalid(format!("missing parameter `{}`", e.name)),
            }
        }
        Ok(Self {
            config,
            params,
            schedule,
        })
    }

    pub fn config(&self) -> UNetConfig {
        self.config
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn into_params(self) -> ParamSet {
        self.params
    }

    /// Accepts `[S, S]` or `[N, S, S]`; returns the batch as `[N, S, S, 1]`
    /// and whether the input was unbatched.
    fn to_nhwc(&self, x: &Tensor) -> Result<(Tensor, bool)> {
        let s = self.config.size;
        match x.shape() {
            [h, w] if *h == s && *w == s => Ok((x.clone().reshape(&[1, s, s, 1])?, true)),
            [n, h, w] if *h == s && *w == s => Ok((x.clone().reshape(&[*n, s, s, 1])?, false)),
            other => shape_err(format!("expected [{s}, {s}] or [N, {s}, {s}], got {other:?}")),
        }
    }

    fn check_steps(&self, ts: &[usize]) -> Result<()> {
        match ts.iter().find(|&&t| t > self.schedule.t_max()) {
            Some(t) => invalid(format!("step {t} beyond T = {}", self.schedule.t_max())),
            None => Ok(()),
        }
    }

    /// Encoder pass on `x [N, S, S, 1]`.
    pub fn down_graph(&self, g: &mut Graph, x: Var, ts: &[usize]) -> Result<DownFeatures> {
        self.check_steps(ts)?;
        let p = &self.params;
        let temb = g.input(time_embed_batch(ts, self.config.time_dim));
        let e = g.dense(temb, p, "time.hidden")?;
        let e = g.silu(e)?;
        let b1 = g.dense(e, p, "time.c1")?;
        let b3 = g.dense(e, p, "time.d2")?;

        let h1 = g.conv_layer(x, p, "c1", 1)?;
        let h1 = g.add_sample_bias(h1, b1)?;
        let skip1 = g.silu(h1)?;
        let h2 = g.conv_layer(skip1, p, "d1", 2)?;
        let skip2 = g.silu(h2)?;
        let h3 = g.conv_layer(skip2, p, "d2", 2)?;
        let h3 = g.add_sample_bias(h3, b3)?;
        let h = g.silu(h3)?;
        Ok(DownFeatures { skip1, skip2, h })
    }

    /// Adds `weight * delta` to the bottleneck. `delta` is `[D]` (shared)
    /// or `[N, D]`.
    pub fn inject(&self, g: &mut Graph, h: Var, delta: Var, weight: f32) -> Result<Var> {
        let hs = g.value(h).shape().to_vec();
        let (n, d) = (hs[0], self.config.bottleneck_dim());
        let flat = g.reshape(h, &[n, d])?;
        let scaled = g.scale(delta, weight)?;
        let shifted = match g.value(delta).shape() {
            [k] if *k == d => g.add_bias(flat, scaled)?,
            [m, k] if *m == n && *k == d => g.add(flat, scaled)?,
            other => return shape_err(format!("shift {other:?} for bottleneck [{n}, {d}]")),
        };
        g.reshape(shifted, &hs)
    }

    /// Decoder pass plus preconditioning; returns ε as `[N, S, S, 1]`.
    pub fn up_graph(
        &self,
        g: &mut Graph,
        feats: &DownFeatures,
        h: Var,
        x: Var,
        ts: &[usize],
    ) -> Result<Var> {
        let p = &self.params;
        let m = g.conv_layer(h, p, "mid", 1)?;
        let m = g.silu(m)?;
        let u = g.upsample2(m)?;
        let u = g.concat(u, feats.skip2)?;
        let u = g.conv_layer(u, p, "u1", 1)?;
        let u = g.silu(u)?;
        let u = g.upsample2(u)?;
        let u = g.concat(u, feats.skip1)?;
        let u = g.conv_layer(u, p, "u2", 1)?;
        let u = g.silu(u)?;
        let f = g.conv_layer(u, p, "out", 1)?;

        let per = self.config.size * self.config.size;
        let shape = g.value(x).shape().to_vec();
        let mut cx = Vec::with_capacity(ts.len() * per);
        let mut cf = Vec::with_capacity(ts.len() * per);
        for &t in ts {
            let a = self.schedule.a(t);
            cx.extend(std::iter::repeat_n((1.0 - a).sqrt() as f32, per));
            cf.extend(std::iter::repeat_n(a.sqrt() as f32, per));
        }
        let cx = g.input(Tensor::new(shape.clone(), cx)?);
        let cf = g.input(Tensor::new(shape, cf)?);
        let skip = g.mul(cx, x)?;
        let body = g.mul(cf, f)?;
        g.add(skip, body)
    }

    fn steps_for(&self, n: usize, t: usize) -> Vec<usize> {
        vec![t; n]
    }

    fn restore(&self, eps: &Tensor, unbatched: bool) -> Result<Tensor> {
        let s = self.config.size;
        if unbatched {
            eps.clone().reshape(&[s, s])
        } else {
            eps.clone().reshape(&[eps.shape()[0], s, s])
        }
    }

    /// Bottleneck activations of `x` at step `t`, flattened to `[N, D]`.
    pub fn bottleneck(&self, x: &Tensor, t: usize) -> Result<Tensor> {
        let (xb, _) = self.to_nhwc(x)?;
        let n = xb.shape()[0];
        let mut g = Graph::new();
        let xv = g.input(xb);
        let feats = self.down_graph(&mut g, xv, &self.steps_for(n, t))?;
        g.value(feats.h).clone().reshape(&[n, self.config.bottleneck_dim()])
    }
}

impl EpsilonModel for ToyUNet {
    fn bottleneck_dim(&self) -> usize {
        self.config.bottleneck_dim()
    }

    fn predict(&self, x: &Tensor, t: usize) -> Result<Tensor> {
        let (xb, unbatched) = self.to_nhwc(x)?;
        let ts = self.steps_for(xb.shape()[0], t);
        let mut g = Graph::new();
        let xv = g.input(xb);
        let feats = self.down_graph(&mut g, xv, &ts)?;
        let eps = self.up_graph(&mut g, &feats, feats.h, xv, &ts)?;
        self.restore(g.value(eps), unbatched)
    }

    fn predict_injected(&self, x: &Tensor, t: usize, delta_h: &Tensor, weight: f32) -> Result<Tensor> {
        if injection_is_noop(delta_h, weight) {
            return self.predict(x, t);
        }
        Ok(self.predict_both(x, t, delta_h, weight)?.1)
    }

    fn predict_both(
        &self,
        x: &Tensor,
        t: usize,
        delta_h: &Tensor,
        weight: f32,
    ) -> Result<(Tensor, Tensor)> {
        let (xb, unbatched) = self.to_nhwc(x)?;
        let ts = self.steps_for(xb.shape()[0], t);
        let mut g = Graph::new();
        let xv = g.input(xb);
        let feats = self.down_graph(&mut g, xv, &ts)?;
        let clean = self.up_graph(&mut g, &feats, feats.h, xv, &ts)?;
        let clean = self.restore(g.value(clean), unbatched)?;
        if injection_is_noop(delta_h, weight) {
            return Ok((clean.clone(), clean));
        }
        let dv = g.input(delta_h.clone());
        let shifted = self.inject(&mut g, feats.h, dv, weight)?;
        let inj = self.up_graph(&mut g, &feats, shifted, xv, &ts)?;
        Ok((clean, self.restore(g.value(inj), unbatched)?))
    }
}

impl TrainableEpsilonModel for ToyUNet {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn epsilon_loss(&self, x_t: &Tensor, ts: &[usize], noise: &Tensor) -> Result<(f32, Gradients)> {
        let (xb, _) = self.to_nhwc(x_t)?;
        if ts.len() != xb.shape()[0] {
            return shape_err(format!("{} steps for a batch of {}", ts.len(), xb.shape()[0]));
        }
        let target = noise.clone().reshape(xb.shape())?;
        let mut g = Graph::new();
        let xv = g.input(xb);
        let feats = self.down_graph(&mut g, xv, ts)?;
        let eps = self.up_graph(&mut g, &feats, feats.h, xv, ts)?;
        let tv = g.input(target);
        let diff = g.sub(eps, tv)?;
        let sq = g.square(diff)?;
        let loss = g.mean(sq)?;
        let grads = g.backward(loss)?;
        Ok((g.value(loss).data()[0], grads))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::normal_tensor;

    fn net() -> ToyUNet {
        ToyUNet::new(UNetConfig::default(), NoiseSchedule::default_linear(), 3).unwrap()
    }

    #[test]
    fn shapes_round_trip() {
        let n = net();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = normal_tensor(&[2, 16, 16], &mut rng);
        assert_eq!(n.predict(&x, 500).unwrap().shape(), &[2, 16, 16]);
        assert_eq!(n.predict(&x.item(0).reshape(&[16, 16]).unwrap(), 5).unwrap().shape(), &[16, 16]);
        assert_eq!(n.bottleneck(&x, 10).unwrap().shape(), &[2, 256]);
        assert!(n.predict(&Tensor::zeros(&[8, 8]), 5).is_err());
    }

    #[test]
    fn zero_shift_is_bit_identical() {
        let n = net();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = normal_tensor(&[3, 16, 16], &mut rng);
        let clean = n.predict(&x, 700).unwrap();
        let dh = normal_tensor(&[256], &mut rng);
        assert_eq!(n.predict_injected(&x, 700, &dh, 0.0).unwrap(), clean);
        assert_eq!(n.predict_injected(&x, 700, &Tensor::zeros(&[256]), 0.5).unwrap(), clean);
        let (c, i) = n.predict_both(&x, 700, &dh, 0.3).unwrap();
        assert_eq!(c, clean);
        assert_ne!(i, clean);
    }

    #[test]
    fn batch_items_are_independent() {
        let n = net();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = normal_tensor(&[3, 16, 16], &mut rng);
        let all = n.predict(&x, 250).unwrap();
        let one = n.predict(&x.item(1), 250).unwrap();
        assert_eq!(all.item(1).data(), one.data());
    }

    #[test]
    fn rebuild_from_params() {
        let n = net();
        let again = ToyUNet::from_params(n.config(), n.schedule().clone(), n.params.clone()).unwrap();
        assert_eq!(again, n);
        let mut broken = n.params.clone();
        *broken.get_mut("out.b").unwrap() = Tensor::zeros(&[2]);
        assert!(ToyUNet::from_params(n.config(), n.schedule().clone(), broken).is_err());
    }
}
