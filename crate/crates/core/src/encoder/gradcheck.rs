//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tape::Gradients;

/// Which perturbations to evaluate.
#[derive(Clone, Debug)]
pub enum Probe {
    /// Unit coordinates; at most `max` per block (seeded subset), all if `None`.
    Coordinates { max: Option<usize> },
    /// `count` random unit directions.
    Directions { count: usize },
}

#[derive(Clone, Debug)]
pub struct BlockError {
    pub name: String,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub blocks: Vec<BlockError>,
}

/// Magnitudes below this are compared absolutely; central differences of
/// an O(1) loss resolve gradients only to about 1e-10, so structurally zero
/// gradients (e.g. attention key biases) would otherwise show up as noise.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_ERROR_FLOOR)
}

/// Max relative error between `analytic` and central differences of `f`
/// around `point`.
pub fn finite_diff_check<F>(mut f: F, point: &[f64], analytic: &[f64], eps: f64, probe: &Probe, seed: u64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::InvalidParam(format!("eps must be positive, got {eps}")));
    }
    if point.len() != analytic.len() {
        return Err(Error::Shape(format!(
            "{} analytic entries for {} coordinates",
            analytic.len(),
            point.len()
        )));
    }
    let n = point.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = point.to_vec();
    let mut eval = |x: &[f64]| -> Result<f64> {
        let v = f(x)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite("loss during finite differences".into()))
        }
    };
    let mut worst: f64 = 0.0;
    match probe {
        Probe::Coordinates { max } => {
            let coords = match max {
                Some(m) if *m < n => sample(&mut rng, n, *m).into_vec(),
                _ => (0..n).collect(),
            };
            for i in coords {
                x[i] = point[i] + eps;
                let plus = eval(&x)?;
                x[i] = point[i] - eps;
                let minus = eval(&x)?;
                x[i] = point[i];
                worst = worst.max(rel_error(analytic[i], (plus - minus) / (2.0 * eps)));
            }
        }
        Probe::Directions { count } => {
            for _ in 0..*count {
                let mut d: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
                let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
                d.iter_mut().for_each(|v| *v /= norm);
                let along = |s: f64| -> Vec<f64> { point.iter().zip(&d).map(|(p, v)| p + s * v).collect() };
                let plus = eval(&along(eps))?;
                let minus = eval(&along(-eps))?;
                let a: f64 = analytic.iter().zip(&d).map(|(g, v)| g * v).sum();
                worst = worst.max(rel_error(a, (plus - minus) / (2.0 * eps)));
            }
        }
    }
    Ok(worst)
}

/// Checks every block in `ids` separately. `loss` evaluates the scalar at
/// the store's current values; `analytic` holds the gradients at the
/// unperturbed point (blocks the loss does not touch count as zero).
pub fn check_params<F>(
    store: &mut ParamStore,
    ids: &[ParamId],
    analytic: &Gradients,
    mut loss: F,
    eps: f64,
    probe: &Probe,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    let mut blocks = Vec::with_capacity(ids.len());
    for (k, &id) in ids.iter().enumerate() {
        let point = store.flatten(&[id]);
        let grad = match analytic.param(id) {
            Some(g) => g.iter().copied().collect(),
            None => vec![0.0; point.len()],
        };
        let result = finite_diff_check(
            |x| {
                store.unflatten(&[id], x);
                loss(store)
            },
            &point,
            &grad,
            eps,
            probe,
            seed.wrapping_add(k as u64),
        );
        store.unflatten(&[id], &point);
        blocks.push(BlockError {
            name: store.name(id).to_owned(),
            max_rel_error: result?,
        });
    }
    let max_rel_error = blocks.iter().map(|b| b.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport { max_rel_error, blocks })
}
