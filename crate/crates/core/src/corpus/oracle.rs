//! Monte-Carlo estimate of the best achievable accuracy on a synthetic corpus.
//!
//! The decision rule is the exact Bayes rule of the generator. Given the band
//! counts of a review's sentiment words, the band posterior is proportional to
//! `Π_w (ρ·[band(w) = b] + (1-ρ)/C)`. The text-only rule marginalizes the
//! label over the band posterior, the user bias and `s` within each band. The
//! text-user rule also knows the user bias. The full rule knows the user bias
//! and the product quality, leaving only the noise term unknown.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::synthetic::{sample_normal, GeneratorParams};
use crate::error::Result;
use crate::tape::{std_normal_cdf, std_normal_pdf};

const MIN_SAMPLES: usize = 1000;
const ORACLE_STREAM: u64 = 0x6261_7965_735f_6f72;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleMode {
    /// Text, user bias and product quality observed.
    Full,
    /// Text and user bias observed.
    TextUser,
    /// Text only; entity effects marginalized.
    TextOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleEstimate {
    pub accuracy: f64,
    pub std_error: f64,
    pub samples: usize,
    pub warning: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub full: OracleEstimate,
    pub text_user: OracleEstimate,
    pub text_only: OracleEstimate,
}

impl OracleReport {
    pub fn gap(&self) -> f64 {
        self.full.accuracy - self.text_only.accuracy
    }
}

pub fn bayes_oracle_accuracy(
    params: &GeneratorParams,
    mode: OracleMode,
    samples: usize,
) -> Result<OracleEstimate> {
    let report = bayes_oracle(params, samples)?;
    Ok(match mode {
        OracleMode::Full => report.full,
        OracleMode::TextUser => report.text_user,
        OracleMode::TextOnly => report.text_only,
    })
}

/// Both modes evaluated on one shared set of samples.
pub fn bayes_oracle(params: &GeneratorParams, samples: usize) -> Result<OracleReport> {
    params.validate()?;
    let model = BayesModel::new(params);
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed ^ ORACLE_STREAM);
    let c = params.num_classes;
    let mut hits_full = 0usize;
    let mut hits_user = 0usize;
    let mut hits_text = 0usize;
    let mut counts = vec![0usize; c];
    for _ in 0..samples {
        let q = sample_normal(&mut rng, params.sigma_product);
        let b = sample_normal(&mut rng, params.sigma_user);
        let e = sample_normal(&mut rng, params.sigma_noise);
        let s = q + e;
        let label = params.label_of(params.label_center() + s + b) - 1;
        let band = params.band_of(&model.edges, s);
        let k = rng.random_range(params.doc_length_range.0..=params.doc_length_range.1);
        counts.iter_mut().for_each(|n| *n = 0);
        for _ in 0..k {
            let w = if rng.random::<f64>() < params.sentiment_signal {
                band
            } else {
                rng.random_range(0..c)
            };
            counts[w] += 1;
        }
        let weights = model.band_posterior(&counts);
        hits_text += usize::from(model.decide_text(&weights) == label);
        hits_user += usize::from(model.decide_with_user(&weights, b) == label);
        hits_full += usize::from(model.decide_full(&weights, q, b) == label);
    }
    let estimate = |hits: usize| {
        let n = samples.max(1) as f64;
        let accuracy = hits as f64 / n;
        OracleEstimate {
            accuracy,
            std_error: (accuracy * (1.0 - accuracy) / n).sqrt(),
            samples,
            warning: (samples < MIN_SAMPLES)
                .then(|| format!("only {samples} samples; estimates are unreliable")),
        }
    };
    Ok(OracleReport {
        full: estimate(hits_full),
        text_user: estimate(hits_user),
        text_only: estimate(hits_text),
    })
}

struct BayesModel<'a> {
    params: &'a GeneratorParams,
    edges: Vec<f64>,
    /// `P(label = c | band)` with the user bias marginalized.
    text_table: Vec<Vec<f64>>,
}

impl<'a> BayesModel<'a> {
    fn new(params: &'a GeneratorParams) -> Self {
        let edges = params.band_edges();
        let mut model = Self {
            params,
            edges,
            text_table: Vec::new(),
        };
        model.text_table = (0..params.num_classes)
            .map(|band| {
                (0..params.num_classes)
                    .map(|c| model.text_cell(band, c))
                    .collect()
            })
            .collect();
        model
    }

    fn band_bounds(&self, band: usize) -> (f64, f64) {
        let lo = if band == 0 {
            f64::NEG_INFINITY
        } else {
            self.edges[band - 1]
        };
        let hi = self.edges.get(band).copied().unwrap_or(f64::INFINITY);
        (lo, hi)
    }

    /// Interval of `s` that rounds to class `c` (0-based) given user bias `b`.
    fn label_bounds(&self, c: usize, b: f64) -> (f64, f64) {
        let mu = self.params.label_center();
        let label = (c + 1) as f64;
        let lo = if c == 0 {
            f64::NEG_INFINITY
        } else {
            label - 0.5 - mu - b
        };
        let hi = if c + 1 == self.params.num_classes {
            f64::INFINITY
        } else {
            label + 0.5 - mu - b
        };
        (lo, hi)
    }

    fn text_cell(&self, band: usize, c: usize) -> f64 {
        let p = self.params;
        let sd_s = p.signal_std();
        let (blo, bhi) = self.band_bounds(band);
        if p.sigma_user < 1e-3 {
            let (llo, lhi) = self.label_bounds(c, 0.0);
            return interval_prob(blo.max(llo), bhi.min(lhi), 0.0, sd_s);
        }
        if sd_s == 0.0 {
            return if blo <= 0.0 && 0.0 < bhi {
                self.label_prob_given_signal(c, 0.0)
            } else {
                0.0
            };
        }
        let lo = blo.max(-8.0 * sd_s);
        let hi = bhi.min(8.0 * sd_s);
        if lo >= hi {
            return 0.0;
        }
        simpson(
            |s| std_normal_pdf(s / sd_s) / sd_s * self.label_prob_given_signal(c, s),
            lo,
            hi,
            2000,
        )
    }

    /// `P(label = c | s)` with `b ~ N(0, σ_u²)`.
    fn label_prob_given_signal(&self, c: usize, s: f64) -> f64 {
        let p = self.params;
        let mu = p.label_center();
        let label = (c + 1) as f64;
        let upper = if c + 1 == p.num_classes {
            1.0
        } else {
            std_normal_cdf((label + 0.5 - mu - s) / p.sigma_user)
        };
        let lower = if c == 0 {
            0.0
        } else {
            std_normal_cdf((label - 0.5 - mu - s) / p.sigma_user)
        };
        (upper - lower).max(0.0)
    }

    fn band_posterior(&self, counts: &[usize]) -> Vec<f64> {
        let c = self.params.num_classes as f64;
        let rho = self.params.sentiment_signal;
        let on = (rho + (1.0 - rho) / c).ln();
        let off = ((1.0 - rho) / c).ln();
        let total: usize = counts.iter().sum();
        let logs: Vec<f64> = counts
            .iter()
            .map(|&n| {
                let miss = total - n;
                let mut l = 0.0;
                if n > 0 {
                    l += n as f64 * on;
                }
                if miss > 0 {
                    l += miss as f64 * off;
                }
                l
            })
            .collect();
        let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = w.iter().sum();
        w.into_iter().map(|x| x / z).collect()
    }

    fn decide_text(&self, weights: &[f64]) -> usize {
        let scores: Vec<f64> = (0..self.params.num_classes)
            .map(|c| {
                weights
                    .iter()
                    .zip(&self.text_table)
                    .map(|(w, row)| w * row[c])
                    .sum()
            })
            .collect();
        argmax(&scores)
    }

    fn decide_with_user(&self, weights: &[f64], b: f64) -> usize {
        self.decide_known_bias(weights, 0.0, self.params.signal_std(), b)
    }

    fn decide_full(&self, weights: &[f64], q: f64, b: f64) -> usize {
        self.decide_known_bias(weights, q, self.params.sigma_noise, b)
    }

    /// Bayes rule when `s ~ N(mean, sd²)` a priori and the bias is known.
    fn decide_known_bias(&self, weights: &[f64], mean: f64, sd: f64, b: f64) -> usize {
        let scores: Vec<f64> = (0..self.params.num_classes)
            .map(|c| {
                let (llo, lhi) = self.label_bounds(c, b);
                weights
                    .iter()
                    .enumerate()
                    .map(|(band, w)| {
                        let (blo, bhi) = self.band_bounds(band);
                        w * interval_prob(blo.max(llo), bhi.min(lhi), mean, sd)
                    })
                    .sum()
            })
            .collect();
        argmax(&scores)
    }
}

/// `P(lo ≤ X < hi)` for `X ~ N(mean, sd²)`; a point mass when `sd = 0`.
fn interval_prob(lo: f64, hi: f64, mean: f64, sd: f64) -> f64 {
    if lo >= hi {
        return 0.0;
    }
    if sd == 0.0 {
        return f64::from(u8::from(lo <= mean && mean < hi));
    }
    let cdf = |x: f64| {
        if x == f64::INFINITY {
            1.0
        } else if x == f64::NEG_INFINITY {
            0.0
        } else {
            std_normal_cdf((x - mean) / sd)
        }
    };
    (cdf(hi) - cdf(lo)).max(0.0)
}

fn simpson(f: impl Fn(f64) -> f64, lo: f64, hi: f64, panels: usize) -> f64 {
    let n = panels + panels % 2;
    let h = (hi - lo) / n as f64;
    let mut sum = f(lo) + f(hi);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        sum += w * f(lo + i as f64 * h);
    }
    sum * h / 3.0
}

/// Index of the maximum; ties go to the lowest index.
fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_user_bias_means_no_user_gain() {
        let params = GeneratorParams {
            sigma_user: 0.0,
            ..GeneratorParams::default()
        };
        let r = bayes_oracle(&params, 100_000).unwrap();
        let se = r.text_user.std_error.hypot(r.text_only.std_error);
        let gap = r.text_user.accuracy - r.text_only.accuracy;
        assert!(
            gap.abs() <= 2.0 * se,
            "text+user {} text {}",
            r.text_user.accuracy,
            r.text_only.accuracy
        );
    }

    #[test]
    fn uninformative_text_and_no_entity_effects_collapse_both_modes() {
        let params = GeneratorParams {
            sigma_user: 0.0,
            sigma_product: 0.0,
            sigma_noise: 1e3,
            sentiment_signal: 0.0,
            ..GeneratorParams::default()
        };
        let r = bayes_oracle(&params, 20_000).unwrap();
        assert_eq!(r.full.accuracy, r.text_only.accuracy);
        assert_eq!(r.text_user.accuracy, r.text_only.accuracy);
        // Huge noise pushes every label to one of the two clamped extremes.
        assert!((r.full.accuracy - 0.5).abs() < 4.0 * r.full.std_error);
    }

    #[test]
    fn user_bias_opens_a_gap() {
        let r = bayes_oracle(&GeneratorParams::default(), 20_000).unwrap();
        assert!(r.gap() > 0.08, "gap {}", r.gap());
        assert!(r.full.accuracy >= r.text_user.accuracy);
        assert!(r.text_user.accuracy > r.text_only.accuracy);
    }

    #[test]
    fn small_sample_counts_carry_a_warning() {
        let e = bayes_oracle_accuracy(&GeneratorParams::default(), OracleMode::Full, 500).unwrap();
        assert!(e.warning.is_some());
        let e = bayes_oracle_accuracy(&GeneratorParams::default(), OracleMode::Full, 2000).unwrap();
        assert!(e.warning.is_none());
    }

    #[test]
    fn interval_probability_edges() {
        assert_eq!(interval_prob(f64::NEG_INFINITY, f64::INFINITY, 3.0, 2.0), 1.0);
        assert_eq!(interval_prob(1.0, 1.0, 0.0, 1.0), 0.0);
        assert_eq!(interval_prob(-1.0, 1.0, 0.0, 0.0), 1.0);
        assert!((interval_prob(0.0, f64::INFINITY, 0.0, 1.0) - 0.5).abs() < 1e-12);
    }
}
