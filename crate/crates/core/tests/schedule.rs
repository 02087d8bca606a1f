use ziplab::schedule::{NoiseSchedule, StepPair};

/// Adjacent-step cancellation maximum of the default schedule, recorded
/// from the first sweep.
const RECORDED_MAX_RATIO: f64 = 0.325699448414;
const RECORDED_MAX_AT: usize = 2;

#[test]
fn adjacent_sweep_maximum_matches_record() {
    let (t, ratio) = NoiseSchedule::default_linear().max_adjacent_ratio(0.0).unwrap();
    assert_eq!(t, RECORDED_MAX_AT);
    assert!((ratio - RECORDED_MAX_RATIO).abs() < 1e-9, "{ratio:.12}");
}

#[test]
fn ratio_is_small_away_from_the_first_steps() {
    let sweep = NoiseSchedule::default_linear().adjacent_sweep(0.0).unwrap();
    for (t, c) in sweep.iter().filter(|(t, _)| *t >= 17) {
        assert!(c.ratio < 0.05, "t {t}: {}", c.ratio);
    }
    let window_max = sweep
        .iter()
        .filter(|(t, _)| (301..=600).contains(t))
        .map(|(_, c)| c.ratio)
        .fold(0.0, f64::max);
    assert!(window_max < 0.01, "{window_max}");
}

#[test]
fn ratio_has_an_interior_minimum() {
    let sweep = NoiseSchedule::default_linear().adjacent_sweep(0.0).unwrap();
    let (t_min, _) = sweep
        .iter()
        .min_by(|a, b| a.1.ratio.total_cmp(&b.1.ratio))
        .unwrap();
    assert_eq!(*t_min, 350);
    for w in sweep.windows(2) {
        let (t, prev, cur) = (w[1].0, w[0].1.ratio, w[1].1.ratio);
        if t <= 350 {
            assert!(cur < prev, "t {t}: {cur} >= {prev}");
        } else {
            assert!(cur > prev, "t {t}: {cur} <= {prev}");
        }
    }
}

#[test]
fn signal_levels_decrease_strictly() {
    let s = NoiseSchedule::default_linear();
    assert_eq!(s.a(0), 1.0);
    for t in 1..=s.t_max() {
        assert!(s.a(t) < s.a(t - 1));
    }
}

#[test]
fn dump_reports_both_eta_columns() {
    let s = NoiseSchedule::default_linear();
    let text = s.dump_csv().unwrap().as_str().to_string();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).unwrap();
    let rows: Vec<Vec<f64>> = lines.map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), s.t_max());
    let r = &rows[499];
    let c1 = s.shift_cancellation(StepPair { t: 500, t_prev: 499 }, 1.0).unwrap();
    assert!((r[col("ratio_eta1")] - c1.ratio).abs() < 1e-9);
    assert_eq!(r[col("sigma_eta0")], 0.0);
    assert!(r[col("sigma_eta1")] > 0.0);
}
