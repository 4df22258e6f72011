//! Minimal reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters enter
//! the tape through [`Tape::param`], which deduplicates repeated reads of the
//! same block, so gradients from every use site are summed into one entry.
//! [`Tape::backward`] walks the record in reverse and returns a
//! [`Gradients`] map keyed by [`ParamId`].

use std::collections::HashMap;
use std::rc::Rc;

use ndarray::{concatenate, s, Array2, Axis};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

pub type Mat = Array2<f64>;

/// Attention mask, `true` marks a blocked (query, key) pair.
pub type Mask = Array2<bool>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-12;

/// Key visibility for [`Tape::attention`].
#[derive(Clone, Debug)]
pub enum AttnMask {
    /// Every query sees every key.
    Open,
    /// Dense `queries × keys` mask, `true` = blocked.
    Dense(Mask),
    /// Query `r` sees keys `spans[r].0..spans[r].1`, minus keys flagged in
    /// `blocked` and minus the key `exclude[r]`.
    Spans {
        spans: Vec<(usize, usize)>,
        blocked: Option<Vec<bool>>,
        exclude: Option<Vec<Option<usize>>>,
    },
}

impl AttnMask {
    /// Every query sees all keys except its own entry in `exclude`.
    pub fn excluding(exclude: Vec<Option<usize>>, num_keys: usize) -> Self {
        AttnMask::Spans {
            spans: vec![(0, num_keys); exclude.len()],
            blocked: None,
            exclude: Some(exclude),
        }
    }

    /// Query `r` sees the `len` keys of block `r`, skipping `blocked` keys.
    pub fn blocks(num_queries: usize, len: usize, blocked: Vec<bool>) -> Self {
        AttnMask::Spans {
            spans: (0..num_queries).map(|r| (r * len, (r + 1) * len)).collect(),
            blocked: Some(blocked),
            exclude: None,
        }
    }

    fn validate(&self, nq: usize, nk: usize) -> Result<()> {
        match self {
            AttnMask::Open => Ok(()),
            AttnMask::Dense(m) if m.dim() == (nq, nk) => Ok(()),
            AttnMask::Dense(m) => Err(Error::Shape(format!(
                "mask {:?} for {nq}x{nk} scores",
                m.dim()
            ))),
            AttnMask::Spans {
                spans,
                blocked,
                exclude,
            } => {
                if spans.len() != nq
                    || spans.iter().any(|&(a, b)| a > b || b > nk)
                    || blocked.as_ref().is_some_and(|b| b.len() != nk)
                    || exclude.as_ref().is_some_and(|e| e.len() != nq)
                {
                    return Err(Error::Shape(format!("span mask for {nq}x{nk} scores")));
                }
                Ok(())
            }
        }
    }

    fn span(&self, r: usize, nk: usize) -> (usize, usize) {
        match self {
            AttnMask::Spans { spans, .. } => spans[r],
            _ => (0, nk),
        }
    }

    pub fn is_open(&self, r: usize, c: usize) -> bool {
        match self {
            AttnMask::Open => true,
            AttnMask::Dense(m) => !m[[r, c]],
            AttnMask::Spans {
                spans,
                blocked,
                exclude,
            } => {
                let (a, b) = spans[r];
                c >= a
                    && c < b
                    && !blocked.as_ref().is_some_and(|bl| bl[c])
                    && !exclude.as_ref().is_some_and(|e| e[r] == Some(c))
            }
        }
    }

    /// Whether query `r` sees at least one of `nk` keys.
    pub fn row_has_keys(&self, r: usize, nk: usize) -> bool {
        let (a, b) = self.span(r, nk);
        (a..b).any(|c| self.is_open(r, c))
    }
}

/// Softmax weights of an attention node, stored per (query, head) over the
/// query's key span.
struct AttnProbs {
    offsets: Vec<usize>,
    values: Vec<f64>,
}

fn contiguous(m: &Mat) -> std::borrow::Cow<'_, [f64]> {
    match m.as_slice() {
        Some(s) => std::borrow::Cow::Borrowed(s),
        None => std::borrow::Cow::Owned(m.iter().copied().collect()),
    }
}

enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Rc<Mat>),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize, usize),
    GatherRows(Var, Vec<usize>),
    Sum(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: Rc<AttnMask>,
        probs: AttnProbs,
    },
    CrossEntropy {
        logits: Var,
        gold: Vec<usize>,
        probs: Mat,
    },
}

struct Node {
    value: Mat,
    op: Op,
    /// Whether gradients flow into this node; false for fixed inputs and
    /// anything computed from fixed inputs only.
    grad: bool,
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Param => Vec::new(),
            Op::MatMul(a, b) | Op::MatMulT(a, b) | Op::Add(a, b) | Op::AddRow(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::MulConst(a, _)
            | Op::Gelu(a)
            | Op::Softmax(a)
            | Op::SliceCols(a, ..)
            | Op::GatherRows(a, _)
            | Op::Sum(a) => vec![*a],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::ConcatCols(parts) | Op::ConcatRows(parts) => parts.clone(),
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        let grad = match op {
            Op::Leaf | Op::Param => true,
            _ => op.inputs().iter().any(|v| self.nodes[v.0].grad),
        };
        self.push_node(value, op, grad)
    }

    fn push_node(&mut self, value: Mat, op: Op, grad: bool) -> Var {
        self.nodes.push(Node { value, op, grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// A constant input; receives a gradient slot but is not a parameter.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    /// A constant input that never receives a gradient. Backward skips
    /// every node computed from fixed inputs only.
    pub fn fixed(&mut self, value: Mat) -> Var {
        self.push_node(value, Op::Leaf, false)
    }

    /// Whether [`Tape::backward`] propagates into `v`.
    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].grad
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ac != br {
            return Err(Error::Shape(format!("matmul {ar}x{ac} by {br}x{bc}")));
        }
        let value = self.value(a).dot(self.value(b));
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ac != bc {
            return Err(Error::Shape(format!("matmul_t {ar}x{ac} by ({br}x{bc})ᵀ")));
        }
        let value = self.value(a).dot(&self.value(b).t());
        Ok(self.push(value, Op::MatMulT(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "add {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let value = self.value(a) + self.value(b);
        Ok(self.push(value, Op::Add(a, b)))
    }

    /// Adds a `1×n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (_, ac) = self.shape(a);
        if self.shape(row) != (1, ac) {
            return Err(Error::Shape(format!(
                "add_row {:?} and {:?}",
                self.shape(a),
                self.shape(row)
            )));
        }
        let value = self.value(a) + self.value(row);
        Ok(self.push(value, Op::AddRow(a, row)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        self.push(value, Op::Scale(a, c))
    }

    /// Elementwise product with a constant matrix (dropout masks, row gates).
    pub fn mul_const(&mut self, a: Var, m: Rc<Mat>) -> Result<Var> {
        if self.shape(a) != m.dim() {
            return Err(Error::Shape(format!(
                "mul_const {:?} and {:?}",
                self.shape(a),
                m.dim()
            )));
        }
        let value = self.value(a) * m.as_ref();
        Ok(self.push(value, Op::MulConst(a, m)))
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x * std_normal_cdf(x));
        self.push(value, Op::Gelu(a))
    }

    /// Row-wise layer normalization with a learned `1×n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (rows, cols) = self.shape(x);
        if self.shape(gain) != (1, cols) || self.shape(bias) != (1, cols) {
            return Err(Error::Shape("layer_norm gain/bias".into()));
        }
        let xv = self.value(x);
        let mut xhat = Mat::zeros((rows, cols));
        let mut inv_std = Vec::with_capacity(rows);
        for (r, row) in xv.outer_iter().enumerate() {
            let mean = row.sum() / cols as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(inv);
            for (c, v) in row.iter().enumerate() {
                xhat[[r, c]] = (v - mean) * inv;
            }
        }
        let value = &xhat * self.value(gain) + self.value(bias);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    /// Row-wise softmax. Blocked entries get weight exactly zero and a row
    /// whose entries are all blocked becomes an all-zero row.
    pub fn masked_softmax(&mut self, x: Var, mask: Option<&Mask>) -> Result<Var> {
        let xv = self.value(x);
        if let Some(m) = mask {
            if m.dim() != xv.dim() {
                return Err(Error::Shape(format!(
                    "mask {:?} for scores {:?}",
                    m.dim(),
                    xv.dim()
                )));
            }
        }
        let (rows, cols) = xv.dim();
        let mut out = Mat::zeros((rows, cols));
        for r in 0..rows {
            let open = |c: usize| mask.is_none_or(|m| !m[[r, c]]);
            let mut max = f64::NEG_INFINITY;
            for c in 0..cols {
                if open(c) {
                    let v = xv[[r, c]];
                    if !v.is_finite() {
                        return Err(Error::NonFinite("attention scores".into()));
                    }
                    max = max.max(v);
                }
            }
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut sum = 0.0;
            for c in 0..cols {
                if open(c) {
                    let e = (xv[[r, c]] - max).exp();
                    out[[r, c]] = e;
                    sum += e;
                }
            }
            out.row_mut(r).mapv_inplace(|e| e / sum);
        }
        Ok(self.push(out, Op::Softmax(x)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = concatenate(Axis(1), &views).map_err(|e| Error::Shape(e.to_string()))?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (_, cols) = self.shape(a);
        if start >= end || end > cols {
            return Err(Error::Shape(format!("slice {start}..{end} of {cols} columns")));
        }
        let value = self.value(a).slice(s![.., start..end]).to_owned();
        Ok(self.push(value, Op::SliceCols(a, start, end)))
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (n, _) = self.shape(a);
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::Index {
                what: "rows",
                index: bad,
                len: n,
            });
        }
        let value = self.value(a).select(Axis(0), rows);
        Ok(self.push(value, Op::GatherRows(a, rows.to_vec())))
    }

    /// Sum of all entries as a `1×1` node.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Mat::from_elem((1, 1), self.value(a).sum());
        self.push(value, Op::Sum(a))
    }

    /// Scaled dot-product attention over `heads` column groups, without
    /// projections: `softmax(q_h k_hᵀ / √d_h) v_h` per head, heads side by
    /// side. Rows whose keys are all masked produce zeros.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: Rc<AttnMask>) -> Result<Var> {
        let (nq, d) = self.shape(q);
        let (nk, dk) = self.shape(k);
        if dk != d || self.shape(v) != (nk, d) || heads == 0 || d % heads != 0 {
            return Err(Error::Shape(format!(
                "attention q {:?} k {:?} v {:?} heads {heads}",
                self.shape(q),
                self.shape(k),
                self.shape(v)
            )));
        }
        mask.validate(nq, nk)?;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qs = contiguous(self.value(q));
        let ks = contiguous(self.value(k));
        let vs = contiguous(self.value(v));
        if qs.iter().chain(ks.iter()).chain(vs.iter()).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("attention inputs".into()));
        }
        let mut out = vec![0.0; nq * d];
        let mut offsets = Vec::with_capacity(nq * heads + 1);
        let mut probs = Vec::new();
        let mut scores = Vec::new();
        for r in 0..nq {
            let (a, b) = mask.span(r, nk);
            let open: Vec<bool> = (a..b).map(|c| mask.is_open(r, c)).collect();
            for h in 0..heads {
                offsets.push(probs.len());
                let qr = &qs[r * d + h * dh..r * d + (h + 1) * dh];
                scores.clear();
                let mut max = f64::NEG_INFINITY;
                for (c, &o) in (a..b).zip(&open) {
                    let sc = if o {
                        let kc = &ks[c * d + h * dh..c * d + (h + 1) * dh];
                        qr.iter().zip(kc).map(|(x, y)| x * y).sum::<f64>() * scale
                    } else {
                        f64::NEG_INFINITY
                    };
                    max = max.max(sc);
                    scores.push(sc);
                }
                if max == f64::NEG_INFINITY {
                    probs.extend(std::iter::repeat_n(0.0, b - a));
                    continue;
                }
                let mut total = 0.0;
                for sc in scores.iter_mut() {
                    *sc = (*sc - max).exp();
                    total += *sc;
                }
                let orow = &mut out[r * d + h * dh..r * d + (h + 1) * dh];
                for (c, &e) in (a..b).zip(scores.iter()) {
                    let p = e / total;
                    probs.push(p);
                    if p != 0.0 {
                        let vc = &vs[c * d + h * dh..c * d + (h + 1) * dh];
                        for (o, x) in orow.iter_mut().zip(vc) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        offsets.push(probs.len());
        drop((qs, ks, vs));
        let value = Mat::from_shape_vec((nq, d), out).expect("attention output shape");
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                heads,
                mask,
                probs: AttnProbs {
                    offsets,
                    values: probs,
                },
            },
        ))
    }

    /// Dense attention weights of query `row` and head `head` for an
    /// attention node, zero outside the visible keys.
    pub fn attention_weights(&self, node: Var, row: usize, head: usize) -> Option<Vec<f64>> {
        let Op::Attention {
            k, heads, mask, probs, ..
        } = &self.nodes[node.0].op
        else {
            return None;
        };
        let nk = self.shape(*k).0;
        let (a, b) = mask.span(row, nk);
        let i = row * heads + head;
        let mut w = vec![0.0; nk];
        w[a..b].copy_from_slice(&probs.values[probs.offsets[i]..probs.offsets[i + 1]]);
        Some(w)
    }

    /// Mean cross-entropy of `logits` (B×C) against 0-based `gold` classes.
    /// Returns a `1×1` node.
    pub fn cross_entropy(&mut self, logits: Var, gold: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (rows, classes) = lv.dim();
        if rows != gold.len() || rows == 0 {
            return Err(Error::Shape(format!(
                "{rows} logit rows for {} labels",
                gold.len()
            )));
        }
        if let Some(&bad) = gold.iter().find(|&&g| g >= classes) {
            return Err(Error::Index {
                what: "classes",
                index: bad,
                len: classes,
            });
        }
        let mut probs = Mat::zeros((rows, classes));
        let mut loss = 0.0;
        for (r, row) in lv.outer_iter().enumerate() {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            if !max.is_finite() {
                return Err(Error::NonFinite("logits".into()));
            }
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            loss += lse - row[gold[r]];
            for c in 0..classes {
                probs[[r, c]] = (row[c] - lse).exp();
            }
        }
        let value = Mat::from_elem((1, 1), loss / rows as f64);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                gold: gold.to_vec(),
                probs,
            },
        ))
    }

    /// Reverse pass from a `1×1` node.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.shape(root) != (1, 1) {
            return Err(Error::Shape("backward root must be 1x1".into()));
        }
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Mat::ones((1, 1)));

        let need = |v: &Var| self.nodes[v.0].grad;
        fn acc(grads: &mut [Option<Mat>], v: Var, g: Mat) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot => *slot = Some(g),
            }
        }

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.grad {
                continue;
            }
            match &node.op {
                Op::Leaf | Op::Param => {}
                Op::MatMul(a, b) => {
                    if need(a) {
                        acc(&mut grads, *a, g.dot(&self.value(*b).t()));
                    }
                    if need(b) {
                        acc(&mut grads, *b, self.value(*a).t().dot(&g));
                    }
                }
                Op::MatMulT(a, b) => {
                    if need(a) {
                        acc(&mut grads, *a, g.dot(self.value(*b)));
                    }
                    if need(b) {
                        acc(&mut grads, *b, g.t().dot(self.value(*a)));
                    }
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.clone());
                }
                Op::AddRow(a, row) => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *row, gr);
                }
                Op::Scale(a, c) => acc(&mut grads, *a, &g * *c),
                Op::MulConst(a, m) => acc(&mut grads, *a, &g * m.as_ref()),
                Op::Gelu(a) => {
                    let x = self.value(*a);
                    let mut ga = g.clone();
                    ga.zip_mut_with(x, |gv, &xv| {
                        *gv *= std_normal_cdf(xv) + xv * std_normal_pdf(xv);
                    });
                    acc(&mut grads, *a, ga);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let gv = self.value(*gain);
                    let (rows, cols) = xhat.dim();
                    let n = cols as f64;
                    let ggain = (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let gbias = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    let dxhat = &g * gv;
                    let mut gx = Mat::zeros((rows, cols));
                    for r in 0..rows {
                        let d = dxhat.row(r);
                        let xh = xhat.row(r);
                        let sum_d = d.sum();
                        let sum_dx = d.dot(&xh);
                        for c in 0..cols {
                            gx[[r, c]] = inv_std[r] / n * (n * d[c] - sum_d - xh[c] * sum_dx);
                        }
                    }
                    acc(&mut grads, *x, gx);
                    acc(&mut grads, *gain, ggain);
                    acc(&mut grads, *bias, gbias);
                }
                Op::Softmax(x) => {
                    let y = &node.value;
                    let mut gx = Mat::zeros(y.dim());
                    for (r, (yr, gr)) in y.outer_iter().zip(g.outer_iter()).enumerate() {
                        let dot = yr.dot(&gr);
                        for c in 0..yr.len() {
                            gx[[r, c]] = yr[c] * (gr[c] - dot);
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let w = self.shape(*p).1;
                        acc(&mut grads, *p, g.slice(s![.., start..start + w]).to_owned());
                        start += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let h = self.shape(*p).0;
                        acc(&mut grads, *p, g.slice(s![start..start + h, ..]).to_owned());
                        start += h;
                    }
                }
                Op::SliceCols(a, start, end) => {
                    let mut ga = Mat::zeros(self.shape(*a));
                    ga.slice_mut(s![.., *start..*end]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::GatherRows(a, rows) => {
                    let mut ga = Mat::zeros(self.shape(*a));
                    for (k, &r) in rows.iter().enumerate() {
                        let mut dst = ga.row_mut(r);
                        dst += &g.row(k);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let ga = Mat::from_elem(self.shape(*a), g[[0, 0]]);
                    acc(&mut grads, *a, ga);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    mask,
                    probs,
                } => {
                    let (nq, d) = self.shape(*q);
                    let nk = self.shape(*k).0;
                    let dh = d / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let qs = contiguous(self.value(*q));
                    let ks = contiguous(self.value(*k));
                    let vs = contiguous(self.value(*v));
                    let gs = contiguous(&g);
                    let mut gq = vec![0.0; nq * d];
                    let mut gk = vec![0.0; nk * d];
                    let mut gv = vec![0.0; nk * d];
                    let mut dp = Vec::new();
                    for r in 0..nq {
                        let (a, b) = mask.span(r, nk);
                        for h in 0..*heads {
                            let i = r * heads + h;
                            let p = &probs.values[probs.offsets[i]..probs.offsets[i + 1]];
                            let cols = h * dh..(h + 1) * dh;
                            let gr = &gs[r * d + cols.start..r * d + cols.end];
                            dp.clear();
                            let mut dot = 0.0;
                            for (c, &pc) in (a..b).zip(p) {
                                let vc = &vs[c * d + cols.start..c * d + cols.end];
                                let x: f64 = gr.iter().zip(vc).map(|(x, y)| x * y).sum();
                                dot += pc * x;
                                dp.push(x);
                                if pc != 0.0 {
                                    for (o, y) in gv[c * d + cols.start..c * d + cols.end].iter_mut().zip(gr) {
                                        *o += pc * y;
                                    }
                                }
                            }
                            let qr = &qs[r * d + cols.start..r * d + cols.end];
                            for ((c, &pc), &x) in (a..b).zip(p).zip(dp.iter()) {
                                if pc == 0.0 {
                                    continue;
                                }
                                let ds = pc * (x - dot) * scale;
                                let kc = &ks[c * d + cols.start..c * d + cols.end];
                                for (o, y) in gq[r * d + cols.start..r * d + cols.end].iter_mut().zip(kc) {
                                    *o += ds * y;
                                }
                                for (o, y) in gk[c * d + cols.start..c * d + cols.end].iter_mut().zip(qr) {
                                    *o += ds * y;
                                }
                            }
                        }
                    }
                    let to_mat = |rows: usize, data: Vec<f64>| {
                        Mat::from_shape_vec((rows, d), data).expect("attention gradient shape")
                    };
                    acc(&mut grads, *q, to_mat(nq, gq));
                    acc(&mut grads, *k, to_mat(nk, gk));
                    acc(&mut grads, *v, to_mat(nk, gv));
                }
                Op::CrossEntropy {
                    logits,
                    gold,
                    probs,
                } => {
                    let scale = g[[0, 0]] / gold.len() as f64;
                    let mut gl = probs.clone();
                    for (r, &k) in gold.iter().enumerate() {
                        gl[[r, k]] -= 1.0;
                    }
                    gl *= scale;
                    acc(&mut grads, *logits, gl);
                }
            }
            grads[i] = Some(g);
        }

        let mut params = HashMap::new();
        for (id, v) in &self.params {
            if let Some(g) = &grads[v.0] {
                params.insert(*id, g.clone());
            }
        }
        Ok(Gradients { params, nodes: grads })
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    params: HashMap<ParamId, Mat>,
    nodes: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&Mat> {
        self.params.get(&id)
    }

    /// Gradient with respect to any tape node (constants included).
    pub fn var(&self, v: Var) -> Option<&Mat> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }

    pub fn param_ids(&self) -> impl Iterator<Item = &ParamId> {
        self.params.keys()
    }

    pub fn into_params(self) -> HashMap<ParamId, Mat> {
        self.params
    }
}

pub(crate) fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + statrs::function::erf::erf(x / std::f64::consts::SQRT_2))
}

pub(crate) fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}
