//! Central finite differences against the reverse sweep, 100 seeded probes
//! per operation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ziplab::nn::{Graph, ParamSet, Var};
use ziplab::rng::normal_tensor;
use ziplab::schedule::NoiseSchedule;
use ziplab::toyworld::{sample_dataset, visual_generator_batch, AttributeId, AttributePriors};
use ziplab::unet::{ToyUNet, UNetConfig};
use ziplab::zip::{
    build_prompt, directional_loss_graph, text_direction, window_loss_graph, AttributeEncoder,
    EditConfig, PromptPattern, WindowCache,
};
use ziplab::Tensor;

const PROBES: usize = 100;
const OP_TOL: f64 = 1e-4;
const LOSS_TOL: f64 = 1e-3;

fn uniform(shape: &[usize], lo: f32, hi: f32, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero, with random sign.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = uniform(shape, 0.5, 2.0, rng);
    for v in t.data_mut() {
        if rng.random::<bool>() {
            *v = -*v;
        }
    }
    t
}

/// `sum(op(inputs) * r)` accumulated in f64 from the f32 outputs.
fn projected(op: &dyn Fn(&mut Graph, &[Var]) -> Var, inputs: &[Tensor], r: &Tensor) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let y = op(&mut g, &vars);
    g.value(y)
        .data()
        .iter()
        .zip(r.data())
        .map(|(&a, &b)| a as f64 * b as f64)
        .sum()
}

/// Relative agreement, measured against the larger of the two values and
/// the RMS of the whole gradient so near-zero entries (sums with heavy
/// cancellation) are not judged on f32 rounding alone.
fn close(analytic: f64, numeric: f64, rms: f64, tol: f64) -> bool {
    (analytic - numeric).abs() <= tol * analytic.abs().max(numeric.abs()).max(rms) + 1e-9
}

fn rms(t: &Tensor) -> f64 {
    t.norm() / (t.len() as f64).sqrt()
}

/// Central difference of `projected` in coordinate `(i, k)` with step `h`.
fn central(op: &dyn Fn(&mut Graph, &[Var]) -> Var, inputs: &[Tensor], r: &Tensor, i: usize, k: usize, h: f32) -> f64 {
    let mut plus = inputs.to_vec();
    let mut minus = inputs.to_vec();
    let x = inputs[i].data()[k];
    plus[i].data_mut()[k] = x + h;
    minus[i].data_mut()[k] = x - h;
    let step = plus[i].data()[k] as f64 - minus[i].data()[k] as f64;
    (projected(op, &plus, r) - projected(op, &minus, r)) / step
}

/// Checks three random coordinates of every input per probe. The step is
/// large and Richardson-extrapolated so f32 rounding of the forward pass
/// stays well below the tolerance.
fn check_op(name: &str, make_inputs: &dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor>, op: &dyn Fn(&mut Graph, &[Var]) -> Var) {
    check_op_tol(name, make_inputs, op, OP_TOL);
}

fn check_op_tol(
    name: &str,
    make_inputs: &dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor>,
    op: &dyn Fn(&mut Graph, &[Var]) -> Var,
    tol: f64,
) {
    let h = 0.05f32;
    for probe in 0..PROBES {
        let mut rng = ChaCha8Rng::seed_from_u64(probe as u64);
        let inputs = make_inputs(&mut rng);
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
        let y = op(&mut g, &vars);
        let r = uniform(g.value(y).shape(), -1.0, 1.0, &mut rng);
        let rv = g.input(r.clone());
        let prod = g.mul(y, rv).unwrap();
        let loss = g.sum(prod).unwrap();
        let grads = g.backward(loss).unwrap();
        for (i, v) in vars.iter().enumerate() {
            let grad = grads.wrt(*v).unwrap_or_else(|| panic!("{name}: no gradient for input {i}"));
            for _ in 0..3 {
                let k = rng.random_range(0..inputs[i].len());
                let (coarse, fine) = (central(op, &inputs, &r, i, k, h), central(op, &inputs, &r, i, k, h / 2.0));
                let numeric = (4.0 * fine - coarse) / 3.0;
                let analytic = grad.data()[k] as f64;
                assert!(
                    close(analytic, numeric, rms(grad), tol),
                    "{name} probe {probe} input {i}[{k}]: analytic {analytic} numeric {numeric}"
                );
            }
        }
    }
}

fn normal(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    normal_tensor(shape, rng)
}

pub fn matmul() {
    check_op("matmul", &|r| vec![normal(&[3, 4], r), normal(&[4, 5], r)], &|g, v| {
        g.matmul(v[0], v[1]).unwrap()
    });
}

pub fn dense_layer() {
    // dense = matmul + add_bias on named parameters.
    for probe in 0..PROBES {
        let mut rng = ChaCha8Rng::seed_from_u64(probe as u64);
        let x = normal(&[2, 3], &mut rng);
        let mut params = ParamSet::new();
        params.insert("d.w", normal(&[3, 4], &mut rng), true).unwrap();
        params.insert("d.b", normal(&[4], &mut rng), true).unwrap();
        let eval = |p: &ParamSet| -> (f64, Option<ziplab::nn::Gradients>) {
            let mut g = Graph::new();
            let xv = g.input(x.clone());
            let y = g.dense(xv, p, "d").unwrap();
            let l = g.sum(y).unwrap();
            let v: f64 = g.value(y).data().iter().map(|&a| a as f64).sum();
            (v, Some(g.backward(l).unwrap()))
        };
        let (_, grads) = eval(&params);
        let grads = grads.unwrap();
        for name in ["d.w", "d.b"] {
            let k = rng.random_range(0..params.get(name).unwrap().len());
            // The output is affine in each parameter, so any step is exact.
            let h = 0.5f32;
            let mut p = params.clone();
            p.get_mut(name).unwrap().data_mut()[k] += h;
            let mut m = params.clone();
            m.get_mut(name).unwrap().data_mut()[k] -= h;
            let step = p.get(name).unwrap().data()[k] as f64 - m.get(name).unwrap().data()[k] as f64;
            let numeric = (eval(&p).0 - eval(&m).0) / step;
            let analytic = grads.param(name).unwrap().data()[k] as f64;
            assert!(close(analytic, numeric, 0.0, OP_TOL), "dense {name}: {analytic} vs {numeric}");
        }
    }
}

pub fn add_bias_and_sample_bias() {
    check_op("add_bias", &|r| vec![normal(&[2, 3, 4], r), normal(&[4], r)], &|g, v| {
        g.add_bias(v[0], v[1]).unwrap()
    });
    check_op("add_sample_bias", &|r| vec![normal(&[2, 3, 3, 4], r), normal(&[2, 4], r)], &|g, v| {
        g.add_sample_bias(v[0], v[1]).unwrap()
    });
}

pub fn conv3x3_both_strides() {
    for stride in [1, 2] {
        check_op(
            &format!("conv3x3/{stride}"),
            &|r| vec![normal(&[2, 5, 4, 2], r), normal(&[3, 3, 2, 3], r)],
            &move |g, v| g.conv3x3(v[0], v[1], stride).unwrap(),
        );
    }
}

pub fn upsample_concat_reshape() {
    check_op("upsample2", &|r| vec![normal(&[2, 2, 3, 2], r)], &|g, v| g.upsample2(v[0]).unwrap());
    check_op("concat", &|r| vec![normal(&[2, 2, 2, 3], r), normal(&[2, 2, 2, 1], r)], &|g, v| {
        g.concat(v[0], v[1]).unwrap()
    });
    check_op("reshape", &|r| vec![normal(&[2, 6], r)], &|g, v| g.reshape(v[0], &[3, 4]).unwrap());
}

pub fn elementwise_binary() {
    let pair = |r: &mut ChaCha8Rng| vec![normal(&[3, 4], r), normal(&[3, 4], r)];
    check_op("add", &pair, &|g, v| g.add(v[0], v[1]).unwrap());
    check_op("sub", &pair, &|g, v| g.sub(v[0], v[1]).unwrap());
    check_op("mul", &pair, &|g, v| g.mul(v[0], v[1]).unwrap());
    check_op("div", &|r| vec![normal(&[3, 4], r), away_from_zero(&[3, 4], r)], &|g, v| {
        g.div(v[0], v[1]).unwrap()
    });
}

pub fn elementwise_unary() {
    let one = |r: &mut ChaCha8Rng| vec![normal(&[3, 5], r)];
    check_op("scale", &one, &|g, v| g.scale(v[0], -1.7).unwrap());
    check_op("add_scalar", &one, &|g, v| g.add_scalar(v[0], 0.3).unwrap());
    check_op("silu", &one, &|g, v| g.silu(v[0]).unwrap());
    check_op("sigmoid", &one, &|g, v| g.sigmoid(v[0]).unwrap());
    check_op("square", &one, &|g, v| g.square(v[0]).unwrap());
    check_op("abs", &|r| vec![away_from_zero(&[3, 5], r)], &|g, v| g.abs(v[0]).unwrap());
    check_op("sqrt", &|r| vec![uniform(&[3, 5], 0.5, 2.0, r)], &|g, v| g.sqrt(v[0]).unwrap());
}

pub fn reductions() {
    let one = |r: &mut ChaCha8Rng| vec![normal(&[3, 5], r)];
    check_op("sum_last", &one, &|g, v| g.sum_last(v[0]).unwrap());
    check_op("sum", &one, &|g, v| g.sum(v[0]).unwrap());
    check_op("mean", &one, &|g, v| g.mean(v[0]).unwrap());
}

pub fn composite_directional_loss() {
    let dt = text_direction(&build_prompt(&PromptPattern::default(), "glasses").unwrap()).unwrap();
    // Part of the training loss, so it is held to the loss tolerance.
    check_op_tol(
        "directional_loss",
        &|r| vec![normal(&[3, 16], r)],
        &move |g, v| directional_loss_graph(g, v[0], &dt).unwrap(),
        LOSS_TOL,
    );
}

struct LossFixture {
    generator: ToyUNet,
    cache: WindowCache,
    cfg: EditConfig,
    schedule: NoiseSchedule,
    delta_t: Tensor,
    refs: Tensor,
}

fn loss_fixture() -> LossFixture {
    let schedule = NoiseSchedule::default_linear();
    let generator = ToyUNet::new(UNetConfig::default(), schedule.clone(), 11).unwrap();
    let cfg = EditConfig {
        inversion_steps: 10,
        ..EditConfig::default()
    };
    let data = sample_dataset(2, &AttributePriors::uniform(0.0), 3).unwrap();
    let cache = WindowCache::build(&data.images, &generator, &cfg, &schedule).unwrap();
    let delta_t = text_direction(&build_prompt(&PromptPattern::default(), "glasses").unwrap()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let refs = visual_generator_batch(AttributeId::Glasses, 2, &mut rng).unwrap();
    LossFixture { generator, cache, cfg, schedule, delta_t, refs }
}

impl LossFixture {
    /// Training loss for a shift `Δh [2, D]` given directly.
    fn loss_of_shift(&self, dh: &Tensor) -> (f64, Tensor) {
        let mut g = Graph::new();
        let v = g.variable(dh.clone());
        let (total, ..) = window_loss_graph(
            &mut g, &self.generator, &self.cache, &[0, 1], v, &self.delta_t, &self.cfg, &self.schedule,
        )
        .unwrap();
        let grads = g.backward(total).unwrap();
        (g.value(total).data()[0] as f64, grads.wrt(v).unwrap().clone())
    }

    /// Training loss through the encoder head.
    fn loss_of_encoder(&self, enc: &AttributeEncoder) -> (f64, ziplab::nn::Gradients) {
        let mut g = Graph::new();
        let dh = enc.encode_graph(&mut g, &self.generator, &self.refs).unwrap();
        let (total, ..) = window_loss_graph(
            &mut g, &self.generator, &self.cache, &[0, 1], dh, &self.delta_t, &self.cfg, &self.schedule,
        )
        .unwrap();
        let grads = g.backward(total).unwrap();
        (g.value(total).data()[0] as f64, grads)
    }
}

/// Loss values are single f32 numbers, so the step must be large against
/// their rounding.
const H_LOSS: f32 = 0.1;

/// The L1 term has kinks wherever an edited pixel meets its clean target.
/// Probing at a large shift keeps those differences well away from zero,
/// so a finite step rarely straddles a kink.
const SHIFT_SCALE: f32 = 4.0;

fn unit(t: &Tensor) -> Tensor {
    t.scale((1.0 / t.norm()) as f32)
}

pub fn training_loss_wrt_shift() {
    let fx = loss_fixture();
    let d = fx.generator.config().bottleneck_dim();
    for probe in 0..PROBES {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + probe as u64);
        let dh = normal(&[2, d], &mut rng).scale(SHIFT_SCALE);
        let (_, grad) = fx.loss_of_shift(&dh);
        // Directional derivative along a mix of the gradient and noise, so
        // the probed slope is large against f32 rounding of the loss.
        let dir = unit(&unit(&grad).add(&unit(&normal(&[2, d], &mut rng)).scale(0.5)).unwrap());
        let analytic = grad.dot(&dir).unwrap();
        let slope = |h: f32| {
            let plus = fx.loss_of_shift(&dh.lincomb(1.0, &dir, h).unwrap()).0;
            let minus = fx.loss_of_shift(&dh.lincomb(1.0, &dir, -h).unwrap()).0;
            (plus - minus) / (2.0 * h as f64)
        };
        let numeric = slope(H_LOSS);
        assert!(close(analytic, numeric, 0.0, LOSS_TOL), "probe {probe}: analytic {analytic} numeric {numeric}");
    }
}

/// `sum(encode(refs) * r)` and its parameter gradients.
fn projected_encoding(fx: &LossFixture, enc: &AttributeEncoder, r: &Tensor) -> (f64, ziplab::nn::Gradients) {
    let mut g = Graph::new();
    let dh = enc.encode_graph(&mut g, &fx.generator, &fx.refs).unwrap();
    let value = g
        .value(dh)
        .data()
        .iter()
        .zip(r.data())
        .map(|(&a, &b)| a as f64 * b as f64)
        .sum();
    let rv = g.input(r.clone());
    let prod = g.mul(dh, rv).unwrap();
    let l = g.sum(prod).unwrap();
    (value, g.backward(l).unwrap())
}

pub fn encoder_head_jacobian() {
    let fx = loss_fixture();
    let d = fx.generator.config().bottleneck_dim();
    for probe in 0..PROBES {
        let enc = AttributeEncoder::new_random(d, 2000 + probe as u64).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3000 + probe as u64);
        let r = uniform(&[2, d], -1.0, 1.0, &mut rng);
        let (_, grads) = projected_encoding(&fx, &enc, &r);
        for name in ["head.0.w", "head.0.b", "head.1.w", "head.1.b"] {
            let grad = grads.param(name).unwrap();
            let k = rng.random_range(0..grad.len());
            let at = |step: f32| {
                let mut e = enc.clone();
                e.params_mut().get_mut(name).unwrap().data_mut()[k] += step;
                let actual = e.params().get(name).unwrap().data()[k] - enc.params().get(name).unwrap().data()[k];
                (projected_encoding(&fx, &e, &r).0, actual as f64)
            };
            let slope = |h: f32| {
                let ((p, dp), (m, dm)) = (at(h), at(-h));
                (p - m) / (dp - dm)
            };
            let numeric = (4.0 * slope(0.025) - slope(0.05)) / 3.0;
            let analytic = grad.data()[k] as f64;
            assert!(
                close(analytic, numeric, rms(grad), OP_TOL),
                "probe {probe} {name}[{k}]: analytic {analytic} numeric {numeric}"
            );
        }
    }
}

/// The end-to-end parameter gradient of the training loss equals the
/// encoder Jacobian applied to the loss gradient in `Δh`, both of which
/// are checked against finite differences above.
pub fn training_loss_wrt_encoder_head_is_chained() {
    let fx = loss_fixture();
    let d = fx.generator.config().bottleneck_dim();
    for probe in 0..PROBES {
        let enc = AttributeEncoder::new_random(d, 2000 + probe as u64).unwrap();
        let (_, direct) = fx.loss_of_encoder(&enc);
        let dh = enc.encode_batch(&fx.generator, &fx.refs).unwrap();
        let (_, g_dh) = fx.loss_of_shift(&dh);
        let (_, chained) = projected_encoding(&fx, &enc, &g_dh);
        for (name, g) in direct.params().iter().filter(|(n, _)| n.starts_with("head.")) {
            let c = chained.param(name).unwrap();
            let scale = rms(g).max(1e-12);
            for (a, b) in g.data().iter().zip(c.data()) {
                assert!(
                    ((a - b) as f64).abs() <= LOSS_TOL * scale,
                    "probe {probe} {name}: {a} vs {b}"
                );
            }
        }
    }
}

/// Every check with its name, in suite order.
pub const CHECKS: [(&str, fn()); 12] = [
    ("matmul", matmul),
    ("dense_layer", dense_layer),
    ("add_bias_and_sample_bias", add_bias_and_sample_bias),
    ("conv3x3_both_strides", conv3x3_both_strides),
    ("upsample_concat_reshape", upsample_concat_reshape),
    ("elementwise_binary", elementwise_binary),
    ("elementwise_unary", elementwise_unary),
    ("reductions", reductions),
    ("composite_directional_loss", composite_directional_loss),
    ("training_loss_wrt_shift", training_loss_wrt_shift),
    ("encoder_head_jacobian", encoder_head_jacobian),
    ("training_loss_wrt_encoder_head_is_chained", training_loss_wrt_encoder_head_is_chained),
];
