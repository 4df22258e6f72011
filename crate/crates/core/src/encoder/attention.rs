use std::rc::Rc;

use rand::Rng;

use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tape::{AttnMask, Mask, Mat, Tape, Var};

/// Projections of one multi-head attention block. Each `h×h` weight holds
/// the per-head `h×(h/heads)` projections side by side.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub heads: usize,
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
}

impl AttentionParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        hidden: usize,
        heads: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let mut w = |store: &mut ParamStore, n: &str| {
            store.add_normal(format!("{prefix}.{n}"), (hidden, hidden), std, rng)
        };
        let wq = w(store, "wq");
        let wk = w(store, "wk");
        let wv = w(store, "wv");
        let wo = w(store, "wo");
        let b = |store: &mut ParamStore, n: &str| store.add_zeros(format!("{prefix}.{n}"), (1, hidden));
        Self {
            heads,
            wq,
            bq: b(store, "bq"),
            wk,
            bk: b(store, "bk"),
            wv,
            bv: b(store, "bv"),
            wo,
            bo: b(store, "bo"),
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![
            self.wq, self.bq, self.wk, self.bk, self.wv, self.bv, self.wo, self.bo,
        ]
    }

    pub fn project_queries(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        affine(tape, store, x, self.wq, self.bq)
    }

    pub fn project_keys(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        affine(tape, store, x, self.wk, self.bk)
    }

    pub fn project_values(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        affine(tape, store, x, self.wv, self.bv)
    }

    /// Attention over already projected inputs, followed by the output
    /// projection. Queries without any visible key yield a zero row.
    pub fn attend(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        q: Var,
        k: Var,
        v: Var,
        mask: Rc<AttnMask>,
    ) -> Result<Var> {
        let (nq, h) = tape.shape(q);
        let nk = tape.shape(k).0;
        let ctx = tape.attention(q, k, v, self.heads, mask.clone())?;
        let out = affine(tape, store, ctx, self.wo, self.bo)?;
        let empty: Vec<usize> = (0..nq).filter(|&r| !mask.row_has_keys(r, nk)).collect();
        if empty.is_empty() {
            return Ok(out);
        }
        let mut gate = Mat::ones((nq, h));
        for r in empty {
            gate.row_mut(r).fill(0.0);
        }
        tape.mul_const(out, Rc::new(gate))
    }
}

pub fn affine(tape: &mut Tape, store: &ParamStore, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
    let w = tape.param(store, w);
    let b = tape.param(store, b);
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

/// `MHA(Q, K, V)` with projections, on the tape.
pub fn multi_head_attention(
    tape: &mut Tape,
    store: &ParamStore,
    params: &AttentionParams,
    q: Var,
    k: Var,
    v: Var,
    mask: Rc<AttnMask>,
) -> Result<Var> {
    let qp = params.project_queries(tape, store, q)?;
    let kp = params.project_keys(tape, store, k)?;
    let vp = params.project_values(tape, store, v)?;
    params.attend(tape, store, qp, kp, vp, mask)
}

/// Value-level `MHA` with an optional dense mask (`true` = blocked).
pub fn multi_head_attention_values(
    store: &ParamStore,
    params: &AttentionParams,
    q: &Mat,
    k: &Mat,
    v: &Mat,
    mask: Option<&Mask>,
) -> Result<Mat> {
    let mut tape = Tape::new();
    let (q, k, v) = (
        tape.constant(q.clone()),
        tape.constant(k.clone()),
        tape.constant(v.clone()),
    );
    let mask = mask.map_or(AttnMask::Open, |m| AttnMask::Dense(m.clone()));
    let out = multi_head_attention(&mut tape, store, params, q, k, v, Rc::new(mask))?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array2};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_params(h: usize, heads: usize) -> (ParamStore, AttentionParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = AttentionParams::new(&mut store, "a", h, heads, 0.02, &mut rng);
        for id in [p.wq, p.wk, p.wv, p.wo] {
            *store.get_mut(id) = Array2::eye(h);
        }
        (store, p)
    }

    #[test]
    fn single_key_returns_value_row() {
        let (store, p) = identity_params(2, 1);
        let out =
            multi_head_attention_values(&store, &p, &array![[0.3, -1.0]], &array![[2.0, 1.0]], &array![[5.0, 7.0]], None)
                .unwrap();
        assert_abs_diff_eq!(out, array![[5.0, 7.0]], epsilon = 1e-12);
    }

    #[test]
    fn equal_scores_average_values() {
        let (store, p) = identity_params(2, 1);
        let k = array![[1.0, 0.0], [1.0, 0.0]];
        let v = array![[1.0, 3.0], [3.0, 5.0]];
        let out = multi_head_attention_values(&store, &p, &array![[1.0, 2.0]], &k, &v, None).unwrap();
        assert_abs_diff_eq!(out, array![[2.0, 4.0]], epsilon = 1e-12);
    }

    #[test]
    fn two_key_softmax_weights() {
        let (store, p) = identity_params(2, 1);
        let kv = array![[1.0, 0.0], [0.0, 1.0]];
        let out = multi_head_attention_values(&store, &p, &array![[1.0, 0.0]], &kv, &kv, None).unwrap();
        assert_abs_diff_eq!(out[[0, 0]], 0.6698, epsilon = 1e-3);
        assert_abs_diff_eq!(out[[0, 1]], 0.3302, epsilon = 1e-3);
    }

    #[test]
    fn fully_masked_row_is_zero_even_with_bias() {
        let (mut store, p) = identity_params(2, 1);
        *store.get_mut(p.bo) = array![[0.5, -0.5]];
        let kv = array![[1.0, 0.0], [0.0, 1.0]];
        let mask = array![[true, true], [false, true]];
        let q = array![[1.0, 0.0], [0.0, 1.0]];
        let out = multi_head_attention_values(&store, &p, &q, &kv, &kv, Some(&mask)).unwrap();
        assert_eq!(out.row(0).to_vec(), vec![0.0, 0.0]);
        assert_abs_diff_eq!(out.row(1).to_vec()[..], [1.5, -0.5], epsilon = 1e-12);
    }

    #[test]
    fn permuting_keys_jointly_preserves_output() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = AttentionParams::new(&mut store, "a", 8, 4, 0.5, &mut rng);
        let q = crate::params::normal_matrix((3, 8), 1.0, &mut rng);
        let k = crate::params::normal_matrix((5, 8), 1.0, &mut rng);
        let v = crate::params::normal_matrix((5, 8), 1.0, &mut rng);
        let perm = [3, 0, 4, 1, 2];
        let kp = k.select(ndarray::Axis(0), &perm);
        let vp = v.select(ndarray::Axis(0), &perm);
        let a = multi_head_attention_values(&store, &p, &q, &k, &v, None).unwrap();
        let b = multi_head_attention_values(&store, &p, &q, &kp, &vp, None).unwrap();
        assert_abs_diff_eq!(a, b, epsilon = 1e-12);
    }

    #[test]
    fn non_finite_input_is_an_error() {
        let (store, p) = identity_params(2, 1);
        let q = array![[f64::NAN, 0.0]];
        let kv = array![[1.0, 0.0]];
        assert!(multi_head_attention_values(&store, &p, &q, &kv, &kv, None).is_err());
    }
}
