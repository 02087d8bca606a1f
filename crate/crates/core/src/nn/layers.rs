use rand::Rng;

use crate::error::Result;
use crate::nn::params::ParamSet;
use crate::tensor::Tensor;

/// Sinusoidal step embedding: `dim/2` sines followed by `dim/2` cosines with
/// geometrically spaced frequencies `10000^(-i/(dim/2))`.
pub fn time_embed(t: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = vec![0.0f32; dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let phase = t as f64 * freq;
        out[i] = phase.sin() as f32;
        out[half + i] = phase.cos() as f32;
    }
    Tensor::from_vec(out)
}

/// Embeddings for a batch of steps, shape `[n, dim]`.
pub fn time_embed_batch(ts: &[usize], dim: usize) -> Tensor {
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        data.extend_from_slice(time_embed(t, dim).data());
    }
    Tensor::new(vec![ts.len(), dim], data).expect("consistent shape")
}

/// Uniform in `±1/sqrt(fan_in)`.
pub fn uniform_init(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = 1.0 / (fan_in as f32).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("consistent shape")
}

/// Registers `prefix.w [inp, out]` and `prefix.b [out]`.
pub fn add_dense(
    params: &mut ParamSet,
    prefix: &str,
    inp: usize,
    out: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    params.insert(format!("{prefix}.w"), uniform_init(&[inp, out], inp, rng), true)?;
    params.insert(format!("{prefix}.b"), uniform_init(&[out], inp, rng), true)
}

/// Registers `prefix.w [3, 3, cin, cout]` and `prefix.b [cout]`.
pub fn add_conv(
    params: &mut ParamSet,
    prefix: &str,
    cin: usize,
    cout: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    let fan_in = 9 * cin;
    params.insert(format!("{prefix}.w"), uniform_init(&[3, 3, cin, cout], fan_in, rng), true)?;
    params.insert(format!("{prefix}.b"), uniform_init(&[cout], fan_in, rng), true)
}
