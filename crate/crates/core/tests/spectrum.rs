use fallball::flow::FlowConfig;
use fallball::lyapunov::{estimate_spectrum, zero_exponent_count, EstimatorConfig, ThresholdRule, ZeroCount};
use fallball::state::{sample_state, MassProfile};

fn run(masses: &[f64], state_seed: u64, est: EstimatorConfig) -> fallball::lyapunov::LyapunovEstimate {
    let mp = MassProfile::new(masses.to_vec()).unwrap();
    let s = sample_state(&mp, 1.0, state_seed).unwrap();
    estimate_spectrum(&mp, &s, &est, &FlowConfig::default()).unwrap()
}

fn spread(e: &fallball::lyapunov::LyapunovEstimate) -> f64 {
    e.oscillation().into_iter().fold(0.0, f64::max)
}

#[test]
fn qr_stride_does_not_change_the_spectrum() {
    let base = EstimatorConfig { n_returns: 50_000, ..Default::default() };
    let reference = run(&[3.0, 2.0, 1.0], 3, base);
    for stride in [5, 20] {
        let other = run(&[3.0, 2.0, 1.0], 3, EstimatorConfig { qr_stride: stride, ..base });
        let tol = 2.0 * spread(&reference).max(spread(&other));
        for (a, b) in reference.flow_exponents.iter().zip(&other.flow_exponents) {
            assert!((a - b).abs() <= tol, "stride {stride}: {a} vs {b} (tol {tol})");
        }
    }
}

#[test]
fn random_frames_agree() {
    let a = run(&[2.0, 1.0], 4, EstimatorConfig { n_returns: 50_000, seed: 1, ..Default::default() });
    let b = run(&[2.0, 1.0], 4, EstimatorConfig { n_returns: 50_000, seed: 2, ..Default::default() });
    let tol = spread(&a).max(spread(&b));
    for (x, y) in a.flow_exponents.iter().zip(&b.flow_exponents) {
        assert!((x - y).abs() <= tol, "{x} vs {y} (tol {tol})");
    }
}

#[test]
fn equal_masses_calibrate_unequal_masses() {
    let est = EstimatorConfig { n_returns: 50_000, ..Default::default() };
    let calib = run(&[1.0, 1.0, 1.0], 5, est);
    let hyper = run(&[3.0, 2.0, 1.0], 5, est);
    let rule = ThresholdRule::calibrated(calib.max_abs_flow());
    assert_eq!(zero_exponent_count(&calib, &rule), ZeroCount::Count(4));
    assert_eq!(zero_exponent_count(&hyper, &rule), ZeroCount::Count(0));
    assert!(hyper.min_abs_flow() >= 10.0 * calib.max_abs_flow());
}
