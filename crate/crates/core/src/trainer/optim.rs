use std::collections::HashMap;

use crate::params::{ParamId, ParamStore};
use crate::tape::Mat;

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: HashMap<ParamId, Mat>,
    v: HashMap<ParamId, Mat>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    /// One update of the blocks in `ids`, in that order. Blocks without a
    /// gradient are treated as having a zero gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &HashMap<ParamId, Mat>, ids: &[ParamId]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.eps, self.lr);
        for &id in ids {
            let shape = store.get(id).dim();
            let m = self.m.entry(id).or_insert_with(|| Mat::zeros(shape));
            let v = self.v.entry(id).or_insert_with(|| Mat::zeros(shape));
            let Some(g) = grads.get(&id) else {
                if m.iter().all(|&x| x == 0.0) {
                    continue;
                }
                m.mapv_inplace(|x| b1 * x);
                v.mapv_inplace(|x| b2 * x);
                ndarray::Zip::from(store.get_mut(id)).and(&*m).and(&*v).for_each(|w, &mi, &vi| {
                    *w -= lr * (mi / c1) / ((vi / c2).sqrt() + eps);
                });
                continue;
            };
            ndarray::Zip::from(store.get_mut(id))
                .and(m)
                .and(v)
                .and(g)
                .for_each(|w, mi, vi, &gi| {
                    *mi = b1 * *mi + (1.0 - b1) * gi;
                    *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                    *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
                });
        }
    }
}

/// Outcome of one [`EarlyStopper::observe`] call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StopDecision {
    pub improved: bool,
    pub stop: bool,
}

/// Stops after `patience` consecutive evaluations without a strict
/// improvement of the best score.
#[derive(Clone, Debug)]
pub struct EarlyStopper {
    patience: usize,
    best: Option<(f64, usize)>,
    bad: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        Self {
            patience: patience.max(1),
            best: None,
            bad: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, score: f64) -> StopDecision {
        let improved = self.best.is_none_or(|(b, _)| score > b);
        if improved {
            self.best = Some((score, epoch));
            self.bad = 0;
        } else {
            self.bad += 1;
        }
        StopDecision {
            improved,
            stop: self.bad >= self.patience,
        }
    }

    /// `(score, epoch)` of the best evaluation so far.
    pub fn best(&self) -> Option<(f64, usize)> {
        self.best
    }
}
