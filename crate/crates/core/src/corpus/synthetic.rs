//! Synthetic review corpora with known latent structure.
//!
//! Each label is `clamp(round(μ + q_p + b_u + ε), 1, C)` with `μ = (1+C)/2`.
//! The text carries sentiment words whose band tracks `s = q_p + ε` (bands are
//! the `C` equal-probability quantile intervals of `s`), so it is informative
//! about the product and the noise term but never about the user bias `b_u`.
//! Every sentiment word comes from the true band with probability
//! `sentiment_signal`, otherwise from a uniformly drawn band. Users also
//! repeat a few style words drawn from a shared pool.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal as StatNormal};

use super::{Corpus, Review, Split};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorParams {
    pub num_users: usize,
    pub num_products: usize,
    pub reviews_per_user: usize,
    pub num_classes: usize,
    /// Std-dev of user leniency, in label units.
    pub sigma_user: f64,
    /// Std-dev of product quality, in label units.
    pub sigma_product: f64,
    pub sigma_noise: f64,
    /// Inclusive range of sentiment words per review.
    pub doc_length_range: (usize, usize),
    pub sentiment_words_per_band: usize,
    pub sentiment_signal: f64,
    pub style_vocab_size: usize,
    pub style_words_per_user: usize,
    pub style_words_per_doc: usize,
    pub dev_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for GeneratorParams {
    fn default() -> Self {
        Self {
            num_users: 200,
            num_products: 100,
            reviews_per_user: 30,
            num_classes: 5,
            sigma_user: 0.5,
            sigma_product: 0.8,
            sigma_noise: 0.6,
            doc_length_range: (8, 24),
            sentiment_words_per_band: 20,
            sentiment_signal: 0.3,
            style_vocab_size: 60,
            style_words_per_user: 3,
            style_words_per_doc: 2,
            dev_fraction: 0.1,
            test_fraction: 0.1,
            seed: 7,
        }
    }
}

impl GeneratorParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParam(m));
        if self.num_classes < 2 {
            return bad(format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        if self.num_users == 0 || self.num_products == 0 || self.reviews_per_user == 0 {
            return bad("num_users, num_products and reviews_per_user must be >= 1".into());
        }
        for (name, v) in [
            ("sigma_user", self.sigma_user),
            ("sigma_product", self.sigma_product),
            ("sigma_noise", self.sigma_noise),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        let (lo, hi) = self.doc_length_range;
        if lo < 1 || lo > hi {
            return bad(format!("doc_length_range ({lo}, {hi}) must satisfy 1 <= min <= max"));
        }
        if self.sentiment_words_per_band == 0 {
            return bad("sentiment_words_per_band must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.sentiment_signal) {
            return bad(format!(
                "sentiment_signal must lie in [0, 1], got {}",
                self.sentiment_signal
            ));
        }
        if self.style_words_per_doc > 0
            && (self.style_words_per_user == 0 || self.style_words_per_user > self.style_vocab_size)
        {
            return bad("style_words_per_user must be in 1..=style_vocab_size".into());
        }
        if !(self.dev_fraction >= 0.0
            && self.test_fraction >= 0.0
            && self.dev_fraction + self.test_fraction < 1.0)
        {
            return bad("dev_fraction + test_fraction must lie in [0, 1)".into());
        }
        Ok(())
    }

    pub fn label_center(&self) -> f64 {
        (1 + self.num_classes) as f64 / 2.0
    }

    /// Std-dev of the text-visible score `s = q_p + ε`.
    pub fn signal_std(&self) -> f64 {
        self.sigma_product.hypot(self.sigma_noise)
    }

    /// Upper edges of the first `C-1` sentiment bands.
    pub fn band_edges(&self) -> Vec<f64> {
        let c = self.num_classes;
        let sd = self.signal_std();
        if sd == 0.0 {
            return vec![0.0; c - 1];
        }
        let normal = StatNormal::new(0.0, sd).expect("validated std-dev");
        (1..c).map(|k| normal.inverse_cdf(k as f64 / c as f64)).collect()
    }

    pub fn band_of(&self, edges: &[f64], s: f64) -> usize {
        edges.iter().take_while(|&&e| e <= s).count()
    }

    pub fn label_of(&self, latent: f64) -> usize {
        latent.round().clamp(1.0, self.num_classes as f64) as usize
    }
}

/// Ground truth behind a synthetic corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentRecord {
    pub user_bias: BTreeMap<String, f64>,
    pub product_quality: BTreeMap<String, f64>,
    /// Latent score `μ + q_p + b_u + ε` per review id, before rounding.
    pub review_latent: BTreeMap<String, f64>,
}

impl LatentRecord {
    pub fn save_json(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

pub(crate) fn sample_normal<R: Rng + ?Sized>(rng: &mut R, std: f64) -> f64 {
    if std == 0.0 {
        0.0
    } else {
        Normal::new(0.0, std).expect("validated std-dev").sample(rng)
    }
}

pub fn sentiment_word(band: usize, index: usize) -> String {
    format!("sent{band}_{index}")
}

pub fn style_word(index: usize) -> String {
    format!("style_{index}")
}

struct Draft {
    user: usize,
    product: usize,
    latent: f64,
    label: usize,
    text: String,
}

pub fn generate_synthetic(params: &GeneratorParams) -> Result<(Corpus, LatentRecord)> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let c = params.num_classes;
    let mu = params.label_center();
    let edges = params.band_edges();

    let user_bias: Vec<f64> = (0..params.num_users)
        .map(|_| sample_normal(&mut rng, params.sigma_user))
        .collect();
    let product_quality: Vec<f64> = (0..params.num_products)
        .map(|_| sample_normal(&mut rng, params.sigma_product))
        .collect();
    let styles: Vec<Vec<usize>> = (0..params.num_users)
        .map(|_| {
            if params.style_words_per_doc == 0 {
                Vec::new()
            } else {
                index::sample(&mut rng, params.style_vocab_size, params.style_words_per_user)
                    .into_vec()
            }
        })
        .collect();

    // Products are dealt from back-to-back shuffled permutations so every
    // product is reviewed once the total reaches the product count.
    let total = params.num_users * params.reviews_per_user;
    let mut deck = Vec::with_capacity(total);
    while deck.len() < total {
        let mut perm: Vec<usize> = (0..params.num_products).collect();
        perm.shuffle(&mut rng);
        deck.extend(perm);
    }
    deck.truncate(total);

    let mut drafts = Vec::with_capacity(total);
    for (slot, &product) in deck.iter().enumerate() {
        let user = slot / params.reviews_per_user;
        let noise = sample_normal(&mut rng, params.sigma_noise);
        let signal = product_quality[product] + noise;
        let latent = mu + signal + user_bias[user];
        let band = params.band_of(&edges, signal);
        let k = rng.random_range(params.doc_length_range.0..=params.doc_length_range.1);
        let mut words = Vec::with_capacity(k + params.style_words_per_doc);
        for _ in 0..params.style_words_per_doc {
            let pick = styles[user][rng.random_range(0..styles[user].len())];
            words.push(style_word(pick));
        }
        for _ in 0..k {
            let b = if rng.random::<f64>() < params.sentiment_signal {
                band
            } else {
                rng.random_range(0..c)
            };
            words.push(sentiment_word(
                b,
                rng.random_range(0..params.sentiment_words_per_band),
            ));
        }
        drafts.push(Draft {
            user,
            product,
            latent,
            label: params.label_of(latent),
            text: words.join(" "),
        });
    }

    // Stratified split per user.
    let mut assignment = vec![Split::Train; total];
    for user in 0..params.num_users {
        let start = user * params.reviews_per_user;
        let n = params.reviews_per_user;
        let n_dev = (n as f64 * params.dev_fraction).round() as usize;
        let n_test = ((n as f64 * params.test_fraction).round() as usize).min(n - n_dev.min(n));
        let mut order: Vec<usize> = (start..start + n).collect();
        order.shuffle(&mut rng);
        for (k, &slot) in order.iter().enumerate() {
            assignment[slot] = if k < n_dev {
                Split::Dev
            } else if k < n_dev + n_test {
                Split::Test
            } else {
                Split::Train
            };
        }
    }

    let uw = digits(params.num_users);
    let pw = digits(params.num_products);
    let user_id = |u: usize| format!("u{u:0uw$}");
    let product_id = |p: usize| format!("p{p:0pw$}");

    let mut splits: [Vec<Review>; 3] = Default::default();
    let mut review_latent = BTreeMap::new();
    for (draft, split) in drafts.into_iter().zip(assignment) {
        let bucket = &mut splits[split as usize];
        let review_id = format!("{}-{}", split.name(), bucket.len());
        review_latent.insert(review_id.clone(), draft.latent);
        bucket.push(Review {
            review_id,
            user_id: user_id(draft.user),
            product_id: product_id(draft.product),
            label: draft.label,
            text: draft.text,
        });
    }
    let [train, dev, test] = splits;
    let corpus = Corpus::new(c, train, dev, test)?;
    let latents = LatentRecord {
        user_bias: user_bias
            .iter()
            .enumerate()
            .map(|(u, &b)| (user_id(u), b))
            .collect(),
        product_quality: product_quality
            .iter()
            .enumerate()
            .map(|(p, &q)| (product_id(p), q))
            .collect(),
        review_latent,
    };
    Ok((corpus, latents))
}

fn digits(n: usize) -> usize {
    n.saturating_sub(1).max(1).to_string().len()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GeneratorParams {
        GeneratorParams {
            num_users: 20,
            num_products: 10,
            reviews_per_user: 10,
            ..GeneratorParams::default()
        }
    }

    #[test]
    fn sizes_match_parameters() {
        let params = GeneratorParams::default();
        let (corpus, latents) = generate_synthetic(&params).unwrap();
        assert_eq!(corpus.users().len(), 200);
        assert_eq!(corpus.products().len(), 100);
        assert_eq!(corpus.len(), 6000);
        assert_eq!(latents.review_latent.len(), 6000);
    }

    #[test]
    fn same_seed_same_corpus() {
        let (a, la) = generate_synthetic(&small()).unwrap();
        let (b, lb) = generate_synthetic(&small()).unwrap();
        for split in Split::ALL {
            assert_eq!(a.split(split), b.split(split));
        }
        assert_eq!(la, lb);
        let other = GeneratorParams { seed: 8, ..small() };
        let (c, _) = generate_synthetic(&other).unwrap();
        assert_ne!(a.split(Split::Train), c.split(Split::Train));
    }

    #[test]
    fn labels_replay_from_latents() {
        let params = small();
        let (corpus, latents) = generate_synthetic(&params).unwrap();
        for r in corpus.reviews() {
            let latent = latents.review_latent[&r.review_id];
            assert_eq!(params.label_of(latent), r.label);
        }
    }

    #[test]
    fn every_user_keeps_training_reviews() {
        let (corpus, _) = generate_synthetic(&small()).unwrap();
        for u in 0..corpus.users().len() {
            assert_eq!(corpus.users().history(u).len(), 8);
        }
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        for p in [
            GeneratorParams { num_classes: 1, ..small() },
            GeneratorParams { sigma_user: -1.0, ..small() },
            GeneratorParams { doc_length_range: (0, 3), ..small() },
            GeneratorParams { doc_length_range: (5, 3), ..small() },
        ] {
            assert!(matches!(generate_synthetic(&p), Err(Error::InvalidParam(_))));
        }
    }

    #[test]
    fn bands_are_equal_probability() {
        let p = GeneratorParams::default();
        let edges = p.band_edges();
        assert_eq!(edges.len(), 4);
        assert!((edges[0] + edges[3]).abs() < 1e-12);
        assert_eq!(p.band_of(&edges, 0.0), 2);
    }
}
