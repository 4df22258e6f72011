use approx::assert_abs_diff_eq;
use ndarray::{array, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use upcc_core::encoder::{finite_diff_check, multi_head_attention_values, AttentionParams, Encoder, EncoderConfig, Probe};
use upcc_core::params::ParamStore;
use upcc_core::tokenizer::{build_vocab_from_texts, encode, Vocab, PAD};

fn setup(dropout: f64) -> (Encoder, ParamStore, Vocab) {
    let vocab = build_vocab_from_texts(["the pasta was cold but the service was great"].into_iter(), 1);
    let config = EncoderConfig {
        hidden: 8,
        layers: 2,
        heads: 2,
        ffn_dim: 16,
        max_len: 10,
        vocab_size: vocab.len(),
        dropout,
        seed: 0,
    };
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let enc = Encoder::new(config, &mut store, &mut rng).unwrap();
    (enc, store, vocab)
}

#[test]
fn output_shape_and_cls_row() {
    let (enc, store, vocab) = setup(0.0);
    let doc = encode("the pasta was cold", &vocab, 10).unwrap();
    let out = enc.encode_doc(&store, &doc).unwrap();
    assert_eq!(out.h_d.dim(), (10, 8));
    assert_eq!(out.h_cls.row(0), out.h_d.row(0));
}

#[test]
fn pad_positions_do_not_reach_content() {
    let (enc, mut store, vocab) = setup(0.0);
    let doc = encode("the service was great", &vocab, 10).unwrap();
    let before = enc.encode_doc(&store, &doc).unwrap();
    let tok = store.id("encoder.tok_emb").unwrap();
    store.get_mut(tok).row_mut(PAD).fill(40.0);
    let pos = store.id("encoder.pos_emb").unwrap();
    for p in (0..10).filter(|&p| doc.is_pad(p)) {
        store.get_mut(pos).row_mut(p).fill(-7.0);
    }
    let after = enc.encode_doc(&store, &doc).unwrap();
    assert_eq!(before.h_cls, after.h_cls);
    for p in (0..10).filter(|&p| !doc.is_pad(p)) {
        assert_eq!(before.h_d.row(p), after.h_d.row(p));
    }
}

#[test]
fn eval_mode_is_deterministic_even_with_dropout_configured() {
    let (enc, store, vocab) = setup(0.3);
    let doc = encode("the pasta was great", &vocab, 10).unwrap();
    let a = enc.encode_doc(&store, &doc).unwrap();
    let b = enc.encode_doc(&store, &doc).unwrap();
    assert_eq!(a, b);
}

#[test]
fn out_of_vocabulary_id_is_an_error() {
    let (enc, store, vocab) = setup(0.0);
    let mut doc = encode("the pasta", &vocab, 10).unwrap();
    doc.ids[1] = vocab.len();
    assert!(enc.encode_doc(&store, &doc).is_err());
}

fn identity_attention() -> (ParamStore, AttentionParams) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let p = AttentionParams::new(&mut store, "attn", 2, 1, 0.02, &mut rng);
    for id in [p.wq, p.wk, p.wv, p.wo] {
        *store.get_mut(id) = Array2::eye(2);
    }
    (store, p)
}

#[test]
fn attention_examples() {
    let (store, p) = identity_attention();
    let one = multi_head_attention_values(&store, &p, &array![[0.4, 0.1]], &array![[3.0, -1.0]], &array![[2.0, 9.0]], None)
        .unwrap();
    assert_abs_diff_eq!(one, array![[2.0, 9.0]], epsilon = 1e-12);

    let keys = array![[0.5, 0.5], [0.5, 0.5]];
    let values = array![[1.0, 0.0], [3.0, 4.0]];
    let mean = multi_head_attention_values(&store, &p, &array![[1.0, -2.0]], &keys, &values, None).unwrap();
    assert_abs_diff_eq!(mean, array![[2.0, 2.0]], epsilon = 1e-12);

    let kv = array![[1.0, 0.0], [0.0, 1.0]];
    let out = multi_head_attention_values(&store, &p, &array![[1.0, 0.0]], &kv, &kv, None).unwrap();
    assert_abs_diff_eq!(out, array![[0.6698, 0.3302]], epsilon = 1e-3);

    let nan = multi_head_attention_values(&store, &p, &array![[f64::NAN, 0.0]], &kv, &kv, None);
    assert!(nan.is_err());
}

#[test]
fn finite_differences_of_a_quadratic() {
    let point = [0.3, -1.2, 2.5, 0.0];
    let grad: Vec<f64> = point.iter().map(|x| 2.0 * x).collect();
    let f = |w: &[f64]| Ok(w.iter().map(|x| x * x).sum::<f64>());
    for probe in [Probe::Coordinates { max: None }, Probe::Directions { count: 5 }] {
        let err = finite_diff_check(f, &point, &grad, 1e-5, &probe, 0).unwrap();
        assert!(err < 1e-8, "{err}");
    }
    assert!(finite_diff_check(f, &point, &grad, 0.0, &Probe::Coordinates { max: None }, 0).is_err());
    let wrong: Vec<f64> = grad.iter().map(|g| g + 0.5).collect();
    assert!(finite_diff_check(f, &point, &wrong, 1e-5, &Probe::Coordinates { max: None }, 0).unwrap() > 0.1);
}
