use approx::assert_abs_diff_eq;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ziplab::diffusion::{
    cancellation_check, ddim_step, direction_term, forward_diffuse, invert, predicted_x0, sample,
    sample_with, train_generator, trajectory_cancellation, zip_step, Edit, EditWindow,
    EpsilonModel, GeneratorTraining, Injection, SamplerConfig, TrainableEpsilonModel,
};
use ziplab::rng::normal_tensor;
use ziplab::schedule::{NoiseSchedule, StepPair};
use ziplab::toyworld::{AnalyticModel, GaussianMixture};
use ziplab::unet::{ToyUNet, UNetConfig};
use ziplab::{Error, Tensor};

/// `a_1 = 0.5`, `a_2 = 0.25`.
fn quarter_half() -> NoiseSchedule {
    NoiseSchedule::from_signal_levels(&[1.0, 0.5, 0.25]).unwrap()
}

const PAIR: StepPair = StepPair { t: 2, t_prev: 1 };

fn scalar(v: f32) -> Tensor {
    Tensor::from_vec(vec![v])
}

fn gaussian(dim: usize) -> (AnalyticModel, NoiseSchedule) {
    let s = NoiseSchedule::default_linear();
    (AnalyticModel::new(GaussianMixture::standard(dim).unwrap(), s.clone()), s)
}

fn rel_l2(a: &Tensor, b: &Tensor) -> f64 {
    let n = a.batch_len();
    (0..n)
        .map(|i| a.item(i).sub(&b.item(i)).unwrap().norm() / b.item(i).norm())
        .sum::<f64>()
        / n as f64
}

#[test]
fn forward_diffuse_hand_value() {
    let x = forward_diffuse(&scalar(2.0), 2, &scalar(1.0), &quarter_half()).unwrap();
    assert_abs_diff_eq!(x.data()[0], 1.86603, epsilon = 1e-5);
}

#[test]
fn forward_diffuse_at_zero_is_identity() {
    let s = NoiseSchedule::default_linear();
    let x0 = Tensor::from_vec(vec![0.3, -1.2, 4.0]);
    let noise = Tensor::from_vec(vec![1.0, 2.0, -3.0]);
    assert_eq!(forward_diffuse(&x0, 0, &noise, &s).unwrap(), x0);
}

#[test]
fn forward_diffuse_moments() {
    let s = NoiseSchedule::default_linear();
    let t = 400;
    let n = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x0 = Tensor::full(&[n], 1.5);
    let x = forward_diffuse(&x0, t, &normal_tensor(&[n], &mut rng), &s).unwrap();
    let a = s.a(t);
    let mean = x.sum() / n as f64;
    let var = x.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let se_mean = ((1.0 - a) / n as f64).sqrt();
    let se_var = (1.0 - a) * (2.0 / (n - 1) as f64).sqrt();
    assert!((mean - a.sqrt() * 1.5).abs() < 3.0 * se_mean);
    assert!((var - (1.0 - a)).abs() < 3.0 * se_var);
}

#[test]
fn predicted_x0_hand_value_and_identity() {
    let p = predicted_x0(&scalar(1.0), 2, &scalar(0.5), &quarter_half()).unwrap();
    assert_abs_diff_eq!(p.data()[0], 1.13397, epsilon = 1e-5);
    let s = NoiseSchedule::default_linear();
    let x = Tensor::from_vec(vec![0.7, -0.1]);
    assert_eq!(predicted_x0(&x, 0, &Tensor::from_vec(vec![3.0, 9.0]), &s).unwrap(), x);
}

#[test]
fn predicted_x0_inverts_forward_diffusion() {
    let s = NoiseSchedule::default_linear();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x0 = normal_tensor(&[64], &mut rng);
    let noise = normal_tensor(&[64], &mut rng);
    for t in [1, 250, 500, 999] {
        let xt = forward_diffuse(&x0, t, &noise, &s).unwrap();
        let back = predicted_x0(&xt, t, &noise, &s).unwrap();
        for (a, b) in back.data().iter().zip(x0.data()) {
            assert_abs_diff_eq!(a, b, epsilon = 2e-4);
        }
    }
}

#[test]
fn predicted_x0_rejects_vanishing_signal() {
    let s = NoiseSchedule::from_signal_levels(&[1.0, 1e-12]).unwrap();
    let err = predicted_x0(&scalar(1.0), 1, &scalar(0.0), &s).unwrap_err();
    assert!(matches!(err, Error::Numerical(_)));
}

#[test]
fn direction_term_hand_value_and_zero() {
    let d = direction_term(&scalar(0.5), PAIR, 0.0, &quarter_half()).unwrap();
    assert_abs_diff_eq!(d.data()[0], 0.35355, epsilon = 1e-5);
    let z = direction_term(&scalar(0.0), PAIR, 0.0, &quarter_half()).unwrap();
    assert_eq!(z.data()[0], 0.0);
}

#[test]
fn ddpm_eta_matches_posterior_mean_coefficient() {
    let s = NoiseSchedule::default_linear();
    for t in [2, 100, 600, 1000] {
        let pair = StepPair { t, t_prev: t - 1 };
        let sigma = s.sigma(pair, 1.0).unwrap();
        assert_abs_diff_eq!(sigma, s.ddpm_posterior_std(pair).unwrap(), epsilon = 1e-12);
        // With σ at the DDPM value, sqrt(a_prev) P_t + D_t equals the
        // posterior mean (x_t - β_t / sqrt(1 - a_t) ε) / sqrt(α_t).
        let (at, ap) = (s.a(t), s.a(t - 1));
        let alpha = at / ap;
        let beta = 1.0 - alpha;
        let eps_coeff_ddim = -(ap * (1.0 - at) / at).sqrt() + s.direction_radicand(pair, 1.0).unwrap().sqrt();
        let eps_coeff_ddpm = -beta / ((1.0 - at).sqrt() * alpha.sqrt());
        assert_abs_diff_eq!(eps_coeff_ddim, eps_coeff_ddpm, epsilon = 1e-9);
    }
}

#[test]
fn ddim_step_hand_value() {
    let x = ddim_step(&scalar(1.0), PAIR, &scalar(0.5), 0.0, None, &quarter_half()).unwrap();
    assert_abs_diff_eq!(x.data()[0], 1.15539, epsilon = 1e-5);
}

#[test]
fn ddim_step_recovers_matched_forward_path() {
    // With the true noise and η = 0, x_prev lies on the same deterministic path.
    let s = NoiseSchedule::default_linear();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x0 = normal_tensor(&[32], &mut rng);
    let noise = normal_tensor(&[32], &mut rng);
    let pair = StepPair { t: 700, t_prev: 650 };
    let xt = forward_diffuse(&x0, pair.t, &noise, &s).unwrap();
    let prev = ddim_step(&xt, pair, &noise, 0.0, None, &s).unwrap();
    let expect = forward_diffuse(&x0, pair.t_prev, &noise, &s).unwrap();
    for (a, b) in prev.data().iter().zip(expect.data()) {
        assert_abs_diff_eq!(a, b, epsilon = 1e-4);
    }
}

#[test]
fn stochastic_step_requires_noise() {
    let s = NoiseSchedule::default_linear();
    let pair = StepPair { t: 10, t_prev: 9 };
    assert!(ddim_step(&scalar(1.0), pair, &scalar(0.1), 1.0, None, &s).is_err());
}

#[test]
fn eta_one_step_variance_matches_sigma() {
    let s = NoiseSchedule::default_linear();
    let pair = StepPair { t: 300, t_prev: 299 };
    let n = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = Tensor::full(&[n], 0.4);
    let eps = Tensor::full(&[n], 0.2);
    let z = normal_tensor(&[n], &mut rng);
    let out = ddim_step(&x, pair, &eps, 1.0, Some(&z), &s).unwrap();
    let mean = out.sum() / n as f64;
    let var = out.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let sigma2 = s.sigma(pair, 1.0).unwrap().powi(2);
    assert!((var - sigma2).abs() < 3.0 * sigma2 * (2.0 / (n - 1) as f64).sqrt());
}

#[test]
fn zip_step_hand_value() {
    let x = zip_step(&scalar(1.0), PAIR, &scalar(0.5), &scalar(0.6), 0.0, None, &quarter_half()).unwrap();
    // sqrt(0.5) (1 - sqrt(0.75) 0.6) / 0.5 + sqrt(0.5) 0.5
    assert_abs_diff_eq!(x.data()[0], 1.032920, epsilon = 1e-5);
}

#[test]
fn zip_step_with_equal_predictions_is_ddim() {
    let s = NoiseSchedule::default_linear();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = normal_tensor(&[40], &mut rng);
    let eps = normal_tensor(&[40], &mut rng);
    let pair = StepPair { t: 520, t_prev: 480 };
    assert_eq!(
        zip_step(&x, pair, &eps, &eps, 0.0, None, &s).unwrap(),
        ddim_step(&x, pair, &eps, 0.0, None, &s).unwrap()
    );
}

#[test]
fn zero_shift_injection_matches_clean_prediction() {
    let (m, _) = gaussian(2);
    let x = Tensor::new(vec![3, 2], vec![0.1, 0.2, -1.0, 0.5, 2.0, -2.0]).unwrap();
    let clean = m.predict(&x, 400).unwrap();
    assert_eq!(m.predict_injected(&x, 400, &Tensor::zeros(&[2]), 0.7).unwrap(), clean);
    assert_eq!(m.predict_injected(&x, 400, &Tensor::full(&[2], 1.0), 0.0).unwrap(), clean);
}

#[test]
fn inversion_with_no_steps_is_identity() {
    let (m, s) = gaussian(2);
    let x0 = Tensor::from_vec(vec![0.5, -0.5]);
    assert_eq!(invert(&x0, &m, &[], &s).unwrap(), x0);
    assert_eq!(invert(&x0, &m, &[0], &s).unwrap(), x0);
    assert!(invert(&x0, &m, &[0, 10, 5], &s).is_err());
}

fn round_trip_error(m: &dyn EpsilonModel, x0: &Tensor, k: usize, s: &NoiseSchedule) -> f64 {
    let cfg = SamplerConfig::ddim(s, k).unwrap();
    let xt = invert(x0, m, &cfg.inversion_steps(), s).unwrap();
    rel_l2(sample(m, &xt, &cfg, None, s).unwrap().endpoint(), x0)
}

#[test]
fn gaussian_round_trip_error_shrinks_with_steps() {
    let (m, s) = gaussian(2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x0 = normal_tensor(&[200, 2], &mut rng);
    let e: Vec<f64> = [10, 40, 200].iter().map(|&k| round_trip_error(&m, &x0, k, &s)).collect();
    assert!(e[0] > e[1] && e[1] > e[2], "{e:?}");
    // The unit Gaussian has a closed-form ratio of 8.9% at 40 steps; the
    // bound is that value with a small margin.
    assert!(e[1] < 0.095, "{e:?}");
}

#[test]
fn clean_sampling_is_deterministic() {
    let (m, s) = gaussian(2);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let xt = normal_tensor(&[16, 2], &mut rng);
    let cfg = SamplerConfig::ddim(&s, 40).unwrap();
    assert_eq!(
        sample(&m, &xt, &cfg, None, &s).unwrap(),
        sample(&m, &xt, &cfg, None, &s).unwrap()
    );
}

#[test]
fn injection_stays_inside_the_window() {
    let (m, s) = gaussian(2);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let xt = normal_tensor(&[8, 2], &mut rng);
    let cfg = SamplerConfig::ddim(&s, 20).unwrap();
    let clean = sample(&m, &xt, &cfg, None, &s).unwrap();
    let shift = Tensor::from_vec(vec![1.0, -1.0]);
    let zero_weight = Edit {
        delta_h: shift.clone(),
        window: EditWindow::new(600, 300, 0.0).unwrap(),
    };
    assert_eq!(sample(&m, &xt, &cfg, Some(&zero_weight), &s).unwrap().states, clean.states);
    // Steps before the window are untouched; the first state that can
    // differ is the one produced by the step at t_hi.
    let active = Edit { delta_h: shift.clone(), window: EditWindow::new(600, 300, 0.5).unwrap() };
    let edited = sample(&m, &xt, &cfg, Some(&active), &s).unwrap();
    for ((t, a), (_, b)) in edited.states.iter().zip(&clean.states) {
        if *t >= 600 {
            assert_eq!(a, b, "state at t={t} changed before the window");
        }
    }
    for snap in &edited.snapshots {
        assert_eq!(snap.pred_x0_injected.is_some(), active.window.contains(snap.t));
    }
    let off_grid = Edit { delta_h: shift, window: EditWindow::new(610, 300, 0.5).unwrap() };
    assert!(sample(&m, &xt, &cfg, Some(&off_grid), &s).is_err());
}

#[test]
fn endpoint_shift_grows_with_weight() {
    let (m, s) = gaussian(2);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let xt = normal_tensor(&[8, 2], &mut rng);
    let cfg = SamplerConfig::ddim(&s, 40).unwrap();
    let clean = sample(&m, &xt, &cfg, None, &s).unwrap();
    let mut last = 0.0;
    for w in [0.1, 0.2, 0.3] {
        let edit = Edit {
            delta_h: Tensor::from_vec(vec![0.6, 0.8]),
            window: EditWindow::new(600, 300, w).unwrap(),
        };
        let d = sample(&m, &xt, &cfg, Some(&edit), &s)
            .unwrap()
            .endpoint()
            .sub(clean.endpoint())
            .unwrap()
            .norm();
        assert!(d > last, "w={w}: {d} <= {last}");
        last = d;
    }
}

#[test]
fn single_step_ratio_matches_schedule_coefficients() {
    let (m, s) = gaussian(2);
    let x = Tensor::from_vec(vec![0.3, -0.8]);
    let dh = Tensor::from_vec(vec![1.0, 0.5]);
    assert_eq!(cancellation_check(&m, &x, StepPair { t: 500, t_prev: 499 }, &Tensor::zeros(&[2]), 0.3, &s).unwrap(), (0.0, 0.0));
    for t in [2, 50, 300, 500, 900] {
        let pair = StepPair { t, t_prev: t - 1 };
        let (d_sym, d_asym) = cancellation_check(&m, &x, pair, &dh, 0.3, &s).unwrap();
        let c = s.shift_cancellation(pair, 0.0).unwrap();
        assert_abs_diff_eq!(d_sym / d_asym, c.ratio, epsilon = 1e-3 * c.ratio.max(1e-3));
    }
}

#[test]
fn full_trajectory_symmetric_shift_mostly_cancels() {
    let (m, s) = gaussian(2);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let xt = normal_tensor(&[16, 2], &mut rng);
    let cfg = SamplerConfig {
        eta: 0.0,
        steps: (0..=s.t_max()).rev().collect(),
        seed: 0,
    };
    let edit = Edit {
        delta_h: Tensor::from_vec(vec![0.6, 0.8]),
        window: EditWindow::new(600, 300, 0.3).unwrap(),
    };
    let (d_sym, d_asym) = trajectory_cancellation(&m, &xt, &cfg, &edit, &s).unwrap();
    assert!(d_sym < 0.1 * d_asym, "{d_sym} vs {d_asym}");
    let sym = sample_with(&m, &xt, &cfg, Some(&edit), Injection::Symmetric, &s).unwrap();
    assert!(sym.endpoint().all_finite());
}

#[test]
fn generator_training_reduces_held_out_loss() {
    let s = NoiseSchedule::default_linear();
    let cfg = UNetConfig::default();
    let data = ziplab::toyworld::sample_dataset(256, &ziplab::toyworld::AttributePriors::uniform(0.5), 1)
        .unwrap();
    let held = ziplab::toyworld::sample_dataset(64, &ziplab::toyworld::AttributePriors::uniform(0.5), 2)
        .unwrap();
    let mut net = ToyUNet::new(cfg, s.clone(), 0).unwrap();
    let before = ziplab::diffusion::epsilon_mse(&net, &held.images, &s, 5).unwrap();

    let zero = GeneratorTraining { epochs: 0, ..Default::default() };
    let init = net.params().clone();
    train_generator(&data.images, &mut net, &s, &zero).unwrap();
    assert_eq!(net.params(), &init);

    let t = GeneratorTraining { epochs: 4, ..Default::default() };
    let report = train_generator(&data.images, &mut net, &s, &t).unwrap();
    assert_eq!(report.epoch_loss.len(), 4);
    let after = ziplab::diffusion::epsilon_mse(&net, &held.images, &s, 5).unwrap();
    assert!(after < before, "{after} >= {before}");
}
