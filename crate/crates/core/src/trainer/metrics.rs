use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub rmse: f64,
    pub n: usize,
}

impl Metrics {
    /// From 0-based class predictions.
    pub fn from_classes(preds: &[usize], gold: &[usize]) -> Result<Self> {
        let to_label = |v: &[usize]| v.iter().map(|&c| c as i64 + 1).collect::<Vec<_>>();
        Ok(Self {
            accuracy: accuracy(preds, gold)?,
            rmse: rmse(&to_label(preds), &to_label(gold))?,
            n: preds.len(),
        })
    }
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{a} predictions for {b} gold labels")));
    }
    if a == 0 {
        return Err(Error::Shape("no predictions".into()));
    }
    Ok(())
}

pub fn accuracy(preds: &[usize], gold: &[usize]) -> Result<f64> {
    check_lengths(preds.len(), gold.len())?;
    let hits = preds.iter().zip(gold).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Root mean squared difference of label values.
pub fn rmse(preds: &[i64], gold: &[i64]) -> Result<f64> {
    check_lengths(preds.len(), gold.len())?;
    let sq: f64 = preds.iter().zip(gold).map(|(p, g)| ((p - g) as f64).powi(2)).sum();
    Ok((sq / preds.len() as f64).sqrt())
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(row: impl IntoIterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in row.into_iter().enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 0], &[1, 1]).unwrap(), 0.0);
        assert_eq!(accuracy(&[1, 2, 3, 4], &[1, 2, 3, 0]).unwrap(), 0.75);
        assert!(accuracy(&[1], &[1, 2]).is_err());
    }

    #[test]
    fn rmse_examples() {
        assert_eq!(rmse(&[1, 2], &[1, 2]).unwrap(), 0.0);
        assert_abs_diff_eq!(rmse(&[1, 3], &[2, 5]).unwrap(), 2.5f64.sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(rmse(&[2, 3, 4], &[1, 2, 3]).unwrap(), 1.0, epsilon = 1e-12);
        assert!(rmse(&[], &[]).is_err());
    }

    #[test]
    fn rmse_zero_iff_perfect_accuracy() {
        let m = Metrics::from_classes(&[0, 4, 2], &[0, 4, 2]).unwrap();
        assert_eq!((m.accuracy, m.rmse), (1.0, 0.0));
        let m = Metrics::from_classes(&[0, 4, 2], &[0, 4, 1]).unwrap();
        assert!(m.accuracy < 1.0 && m.rmse > 0.0);
    }

    #[test]
    fn argmax_breaks_ties_low_and_is_scale_invariant() {
        assert_eq!(argmax([0.1, 0.5, 0.5]), 1);
        let row = [0.3, -1.0, 2.5, 2.4];
        assert_eq!(argmax(row), 2);
        assert_eq!(argmax(row.map(|v| v * 7.5)), 2);
    }

    #[test]
    fn mean_std_of_seeds() {
        let (m, s) = mean_std(&[0.5, 0.6, 0.7]);
        assert_abs_diff_eq!(m, 0.6, epsilon = 1e-12);
        assert_abs_diff_eq!(s, 0.1, epsilon = 1e-12);
    }
}
