use std::fs;

use proptest::prelude::*;
use upcc_core::corpus::{
    bayes_oracle, bayes_oracle_accuracy, corpus_stats, downsample_user_reviews, generate_synthetic, load_split_dir,
    load_tsv, save_split_dir, Corpus, GeneratorParams, LoadOptions, OracleMode, Review, Split,
};
use upcc_core::Error;

fn review(id: &str, user: &str, product: &str, label: usize, text: &str) -> Review {
    Review {
        review_id: id.into(),
        user_id: user.into(),
        product_id: product.into(),
        label,
        text: text.into(),
    }
}

#[test]
fn tsv_line_parses_into_a_review() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.tsv");
    fs::write(&path, "u1\tp1\t5\tgreat food\n").unwrap();
    let corpus = load_tsv(&path, 5).unwrap();
    let r = &corpus.split(Split::Train)[0];
    assert_eq!((r.user_id.as_str(), r.product_id.as_str(), r.label, r.text.as_str()), ("u1", "p1", 5, "great food"));
    assert_eq!(corpus.users().len(), 1);
}

#[test]
fn empty_file_and_bad_rating() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.tsv");
    fs::write(&path, "").unwrap();
    let corpus = load_tsv(&path, 5).unwrap();
    assert!(corpus.is_empty() && corpus.users().is_empty() && corpus.products().is_empty());

    fs::write(&path, "u1\tp1\t6\tgreat food\n").unwrap();
    let err = load_tsv(&path, 5).unwrap_err();
    assert!(matches!(err, Error::RatingRange { line: 1, rating: 6, .. }), "{err}");
    assert!(err.to_string().contains("line 1"), "{err}");
}

#[test]
fn split_directory_round_trip() {
    let params = GeneratorParams {
        num_users: 12,
        num_products: 6,
        reviews_per_user: 5,
        seed: 4,
        ..GeneratorParams::default()
    };
    let corpus = generate_synthetic(&params).unwrap().0;
    let dir = tempfile::tempdir().unwrap();
    save_split_dir(&corpus, dir.path()).unwrap();
    let back = load_split_dir(dir.path(), LoadOptions::new(params.num_classes)).unwrap();
    for split in [Split::Train, Split::Dev, Split::Test] {
        assert_eq!(back.split(split), corpus.split(split));
    }
}

#[test]
fn generator_counts_and_determinism() {
    let params = GeneratorParams {
        num_users: 200,
        num_products: 100,
        reviews_per_user: 30,
        seed: 7,
        ..GeneratorParams::default()
    };
    let (a, _) = generate_synthetic(&params).unwrap();
    assert_eq!(a.users().len(), 200);
    assert_eq!(a.products().len(), 100);
    assert_eq!(a.len(), 6000);

    let (b, _) = generate_synthetic(&params).unwrap();
    let (da, db) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    save_split_dir(&a, da.path()).unwrap();
    save_split_dir(&b, db.path()).unwrap();
    for f in ["train.tsv", "dev.tsv", "test.tsv"] {
        assert_eq!(fs::read(da.path().join(f)).unwrap(), fs::read(db.path().join(f)).unwrap());
    }
}

#[test]
fn downsampling_examples() {
    let train: Vec<Review> = (0..10)
        .map(|i| review(&format!("a{i}"), "u1", &format!("p{}", i % 3), 1 + i % 5, "w"))
        .chain((0..4).map(|i| review(&format!("b{i}"), "u2", "p0", 2, "x y")))
        .collect();
    let corpus = Corpus::new(5, train, vec![review("d0", "u1", "p1", 3, "z")], vec![]).unwrap();

    let same = downsample_user_reviews(&corpus, 1.0, 3).unwrap();
    assert_eq!(same.split(Split::Train), corpus.split(Split::Train));

    let tenth = downsample_user_reviews(&corpus, 0.1, 3).unwrap();
    let count = |c: &Corpus, u: &str| c.split(Split::Train).iter().filter(|r| r.user_id == u).count();
    assert_eq!(count(&tenth, "u1"), 1);
    assert_eq!(tenth.split(Split::Dev), corpus.split(Split::Dev));
    assert_eq!(downsample_user_reviews(&corpus, 0.1, 3).unwrap().split(Split::Train), tenth.split(Split::Train));

    assert!(matches!(downsample_user_reviews(&corpus, 0.0, 3), Err(Error::Range(_))));
    assert!(downsample_user_reviews(&corpus, -0.5, 3).is_err());
}

#[test]
fn stats_examples() {
    let two = Corpus::new(5, vec![review("a", "u1", "p1", 1, "a b c"), review("b", "u1", "p2", 2, "a b c d e")], vec![], vec![])
        .unwrap();
    assert_eq!(corpus_stats(&two).unwrap().words_per_doc, 4.0);

    let train = vec![
        review("a", "u1", "p1", 1, "x"),
        review("b", "u1", "p1", 1, "x"),
        review("c", "u1", "p1", 1, "x"),
        review("d", "u2", "p1", 1, "x"),
    ];
    let stats = corpus_stats(&Corpus::new(5, train, vec![], vec![]).unwrap()).unwrap();
    assert_eq!((stats.users, stats.products, stats.docs_per_user), (2, 1, 2.0));
}

#[test]
fn oracle_examples() {
    let no_users = GeneratorParams {
        sigma_user: 0.0,
        ..GeneratorParams::default()
    };
    let with_user = bayes_oracle_accuracy(&no_users, OracleMode::TextUser, 20_000).unwrap();
    let text = bayes_oracle_accuracy(&no_users, OracleMode::TextOnly, 20_000).unwrap();
    let se = (with_user.std_error.powi(2) + text.std_error.powi(2)).sqrt();
    assert!((with_user.accuracy - text.accuracy).abs() <= 2.0 * se + 1e-12);

    let acceptance = GeneratorParams {
        seed: 7,
        ..GeneratorParams::default()
    };
    let report = bayes_oracle(&acceptance, 20_000).unwrap();
    assert!(report.gap() >= 0.08, "gap {}", report.gap());
    assert!(report.full.accuracy >= report.text_user.accuracy && report.text_user.accuracy >= report.text_only.accuracy);

    let few = bayes_oracle_accuracy(&acceptance, OracleMode::Full, 500).unwrap();
    assert!(few.warning.is_some());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn downsampling_keeps_a_ceiling_share_of_every_user(fraction in 0.01f64..=1.0, seed in 0u64..1000) {
        let params = GeneratorParams { num_users: 8, num_products: 4, reviews_per_user: 7, seed: 2, ..GeneratorParams::default() };
        let corpus = generate_synthetic(&params).unwrap().0;
        let sub = downsample_user_reviews(&corpus, fraction, seed).unwrap();
        for (i, id) in corpus.users().ids().iter().enumerate() {
            let n = corpus.users().history(i).len();
            let kept = sub.split(Split::Train).iter().filter(|r| &r.user_id == id).count();
            if n > 0 {
                let expected = (fraction * n as f64 - 1e-9).ceil().max(1.0) as usize;
                prop_assert_eq!(kept, expected.min(n));
            }
        }
        for r in sub.split(Split::Train) {
            prop_assert!(corpus.split(Split::Train).contains(r));
        }
    }
}
