use fedlora_dp::fedsim::task::Record;
use fedlora_dp::mia::{
    adversarial_game, attack_accuracy, calibrated_for, check_dp_bound, clean_reference, make_neighbors, play,
    run_game, RocCurve,
};
use fedlora_dp::RngStream;

const TRIALS: usize = 10_000;

fn tolerance() -> f64 {
    3.0 / (TRIALS as f64).sqrt()
}

#[test]
fn huge_noise_reduces_attack_to_guessing() {
    let (pair, cfg) = adversarial_game(0).unwrap();
    let mut mech = calibrated_for(&cfg.mechanism, 1.0, 1e-5).unwrap();
    mech.sigma_b *= 1e3;
    mech.sigma_a *= 1e3;
    let trials = run_game(&pair, &cfg.with_mechanism(mech), TRIALS, &RngStream::root(1)).unwrap();
    let acc = attack_accuracy(&trials);
    assert!((acc - 0.5).abs() <= tolerance(), "accuracy {acc}");
}

#[test]
fn near_identical_pair_is_indistinguishable() {
    let (pair, cfg) = adversarial_game(0).unwrap();
    let i = pair.differing_index;
    let original = pair.d.record(i);
    let nudged = Record {
        x: original.x.iter().map(|v| v + 1e-9).collect(),
        y: original.y.clone(),
    };
    let close = make_neighbors(&pair.d, i, &nudged).unwrap();
    let mech = calibrated_for(&cfg.mechanism, 1.0, 1e-5).unwrap();
    let trials = run_game(&close, &cfg.with_mechanism(mech), TRIALS, &RngStream::root(2)).unwrap();
    let acc = attack_accuracy(&trials);
    assert!((acc - 0.5).abs() <= tolerance(), "accuracy {acc}");
}

#[test]
fn without_noise_the_attack_always_wins() {
    let (pair, cfg) = adversarial_game(0).unwrap();
    let trials = run_game(&pair, &cfg, TRIALS, &RngStream::root(3)).unwrap();
    assert!(attack_accuracy(&trials) >= 0.99);
}

#[test]
fn relabelling_the_datasets_keeps_accuracy() {
    let (pair, cfg) = adversarial_game(4).unwrap();
    let mech = calibrated_for(&cfg.mechanism, 2.0, 1e-5).unwrap();
    let reference = clean_reference(&pair, &cfg.with_mechanism(mech)).unwrap();
    let rng = RngStream::root(5);
    let a = attack_accuracy(&play(&reference, &mech, TRIALS, &rng).unwrap());
    let b = attack_accuracy(&play(&reference.swapped(), &mech, TRIALS, &rng).unwrap());
    // each coin now selects the other release and the direction flips sign
    assert!((a - b).abs() <= tolerance(), "{a} vs {b}");
}

#[test]
fn scores_have_the_projected_gaussian_moments() {
    let (pair, cfg) = adversarial_game(6).unwrap();
    let mech = calibrated_for(&cfg.mechanism, 1.0, 1e-5).unwrap();
    let reference = clean_reference(&pair, &cfg.with_mechanism(mech)).unwrap();
    let trials = play(&reference, &mech, TRIALS, &RngStream::root(7)).unwrap();

    // score = +-s^2/2 + noise projected on the direction
    let s = reference.separation();
    let b_part: f64 = reference.mu1.0.sub(&reference.mu0.0).unwrap().frobenius_norm().powi(2);
    let a_part: f64 = reference.mu1.1.sub(&reference.mu0.1).unwrap().frobenius_norm().powi(2);
    let var = mech.sigma_b.powi(2) * b_part + mech.sigma_a.powi(2) * a_part;
    for bit in [false, true] {
        let xs: Vec<f64> = trials.iter().filter(|t| t.true_bit == bit).map(|t| t.score).collect();
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let v = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let expected = if bit { 0.5 * s * s } else { -0.5 * s * s };
        assert!((mean - expected).abs() <= 5.0 * (var / n).sqrt(), "bit {bit}: mean {mean} vs {expected}");
        assert!((v / var - 1.0).abs() <= 5.0 * (2.0 / n).sqrt(), "bit {bit}: var {v} vs {var}");
    }
}

#[test]
fn calibrated_mechanism_respects_the_bound() {
    let (pair, cfg) = adversarial_game(0).unwrap();
    let mech = calibrated_for(&cfg.mechanism, 1.0, 1e-5).unwrap();
    let trials = run_game(&pair, &cfg.with_mechanism(mech), TRIALS, &RngStream::root(8)).unwrap();
    let curve = RocCurve::from_trials(&trials).unwrap();
    curve.validate().unwrap();
    let check = check_dp_bound(&curve, 1.0, 1e-5, TRIALS).unwrap();
    assert!(check.passed(), "{check:?}");
}

#[test]
fn undersized_noise_is_caught() {
    let (pair, cfg) = adversarial_game(0).unwrap();
    let mut mech = calibrated_for(&cfg.mechanism, 0.5, 1e-5).unwrap();
    mech.sigma_b *= 0.1;
    mech.sigma_a *= 0.1;
    let trials = run_game(&pair, &cfg.with_mechanism(mech), TRIALS, &RngStream::root(9)).unwrap();
    let check = check_dp_bound(&RocCurve::from_trials(&trials).unwrap(), 0.5, 1e-5, TRIALS).unwrap();
    assert!(!check.passed(), "{check:?}");
}

#[test]
fn trials_are_reproducible() {
    let (pair, cfg) = adversarial_game(0).unwrap();
    let mech = calibrated_for(&cfg.mechanism, 1.0, 1e-5).unwrap();
    let cfg = cfg.with_mechanism(mech);
    let a = run_game(&pair, &cfg, 500, &RngStream::root(10)).unwrap();
    let b = run_game(&pair, &cfg, 500, &RngStream::root(10)).unwrap();
    assert_eq!(a, b);
    assert!(run_game(&pair, &cfg, 99, &RngStream::root(10)).is_err());
}
