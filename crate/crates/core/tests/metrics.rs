use approx::assert_abs_diff_eq;
use upcc_core::corpus::{generate_synthetic, GeneratorParams};
use upcc_core::tokenizer::build_vocab;
use upcc_core::trainer::pipeline::Splits;
use upcc_core::trainer::{accuracy, mean_std, rmse, EarlyStopper, Metrics};

#[test]
fn accuracy_examples() {
    assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
    assert_eq!(accuracy(&[2, 3, 1], &[1, 2, 3]).unwrap(), 0.0);
    assert_eq!(accuracy(&[1, 2, 3, 4], &[1, 2, 3, 1]).unwrap(), 0.75);
    assert!(accuracy(&[1], &[1, 2]).is_err());
}

#[test]
fn rmse_examples() {
    assert_eq!(rmse(&[4, 2], &[4, 2]).unwrap(), 0.0);
    assert_abs_diff_eq!(rmse(&[1, 3], &[2, 5]).unwrap(), 2.5f64.sqrt(), epsilon = 1e-12);
    assert_abs_diff_eq!(rmse(&[2, 3, 4], &[1, 2, 3]).unwrap(), 1.0, epsilon = 1e-12);
    assert!(rmse(&[1, 2], &[1]).is_err());
    let m = Metrics::from_classes(&[0, 2], &[1, 4]).unwrap();
    assert_abs_diff_eq!(m.rmse, 2.5f64.sqrt(), epsilon = 1e-12);
    assert_eq!((m.accuracy, m.n), (0.0, 2));
}

#[test]
fn early_stopping_returns_the_best_epoch() {
    let mut stopper = EarlyStopper::new(1);
    let decisions: Vec<_> = [0.5, 0.6, 0.55]
        .iter()
        .enumerate()
        .map(|(i, &acc)| stopper.observe(i + 1, acc))
        .collect();
    assert!(!decisions[0].stop && !decisions[1].stop);
    assert!(decisions[2].stop && !decisions[2].improved);
    assert_eq!(stopper.best(), Some((0.6, 2)));

    let mut patient = EarlyStopper::new(2);
    assert!(!patient.observe(1, 0.5).stop);
    assert!(!patient.observe(2, 0.5).stop);
    assert!(patient.observe(3, 0.4).stop);
    assert_eq!(patient.best(), Some((0.5, 1)));
}

#[test]
fn seed_aggregation_is_mean_and_sample_std() {
    let (mean, std) = mean_std(&[0.60, 0.62, 0.64, 0.66, 0.68]);
    assert_abs_diff_eq!(mean, 0.64, epsilon = 1e-12);
    assert_abs_diff_eq!(std, 0.001f64.sqrt(), epsilon = 1e-12);
    assert_eq!(mean_std(&[0.7]), (0.7, 0.0));
}

#[test]
fn truncated_share_falls_with_max_len() {
    let params = GeneratorParams {
        num_users: 10,
        num_products: 5,
        reviews_per_user: 6,
        doc_length_range: (10, 40),
        seed: 3,
        ..GeneratorParams::default()
    };
    let corpus = generate_synthetic(&params).unwrap().0;
    let vocab = build_vocab(&corpus, 1);
    let shares: Vec<f64> = [4, 8, 16, 32, 41, 64]
        .iter()
        .map(|&l| Splits::new(&corpus, &vocab, l).unwrap().dev.truncated_fraction())
        .collect();
    assert!(shares.windows(2).all(|w| w[1] <= w[0]), "{shares:?}");
    assert_eq!(shares[0], 1.0);
    assert_eq!(shares[4], 0.0);
    assert_eq!(shares[5], 0.0);
}
