//! Classifier heads on top of the encoder: text-only, entity→document
//! attention (vanilla and textually initialized), and the full user-product
//! cross-context model.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::rc::Rc;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{affine, checkpoint, EncodedBatch, Encoder, EncoderConfig, EncoderOutput, AttentionParams, INIT_STD};
use crate::error::{Error, Result};
use crate::params::{normal_matrix, ParamId, ParamStore};
use crate::tape::{AttnMask, Mat, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    TextOnly,
    VanillaUp,
    TextualInit,
    FullCrossContext,
}

impl Variant {
    /// Ablation order.
    pub const ALL: [Variant; 4] = [
        Variant::TextOnly,
        Variant::VanillaUp,
        Variant::TextualInit,
        Variant::FullCrossContext,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::TextOnly => "text_only",
            Variant::VanillaUp => "vanilla_up",
            Variant::TextualInit => "textual_init",
            Variant::FullCrossContext => "full_cross_context",
        }
    }

    pub fn uses_entities(self) -> bool {
        self != Variant::TextOnly
    }

    /// Whether entity matrices come from pooled review encodings.
    pub fn textual_init(self) -> bool {
        matches!(self, Variant::TextualInit | Variant::FullCrossContext)
    }

    pub fn cross_context(self) -> bool {
        self == Variant::FullCrossContext
    }

    /// Width of the classifier input in units of the hidden size.
    pub fn feature_blocks(self) -> usize {
        match self {
            Variant::TextOnly => 1,
            Variant::VanillaUp | Variant::TextualInit => 5,
            Variant::FullCrossContext => 9,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidParam(format!("unknown variant {s:?}")))
    }
}

/// Row of an entity matrix, or an entity the model has never seen.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EntityRef {
    Known(usize),
    Unknown,
}

/// Initial contents of one entity matrix.
#[derive(Clone, Debug)]
pub struct EntityInit {
    pub ids: Vec<String>,
    pub matrix: Mat,
    /// Rows that never receive gradient updates.
    pub frozen: Vec<usize>,
}

impl EntityInit {
    /// Standard-normal rows.
    pub fn random<R: Rng + ?Sized>(ids: Vec<String>, h: usize, frozen: Vec<usize>, rng: &mut R) -> Self {
        let matrix = normal_matrix((ids.len(), h), 1.0, rng);
        Self { ids, matrix, frozen }
    }
}

#[derive(Clone, Debug)]
struct EntityTable {
    ids: Vec<String>,
    positions: HashMap<String, usize>,
    param: ParamId,
    frozen: Vec<usize>,
    /// Stand-in row for unseen entities: the mean of the initial rows.
    unknown: Mat,
}

impl EntityTable {
    fn new(store: &mut ParamStore, name: &str, init: EntityInit) -> Result<Self> {
        if init.ids.len() != init.matrix.nrows() || init.ids.is_empty() {
            return Err(Error::Shape(format!(
                "{name}: {} ids for {} rows",
                init.ids.len(),
                init.matrix.nrows()
            )));
        }
        if let Some(&bad) = init.frozen.iter().find(|&&r| r >= init.ids.len()) {
            return Err(Error::Index {
                what: "frozen rows",
                index: bad,
                len: init.ids.len(),
            });
        }
        let unknown = init
            .matrix
            .mean_axis(ndarray::Axis(0))
            .expect("non-empty")
            .insert_axis(ndarray::Axis(0));
        let positions = init.ids.iter().enumerate().map(|(i, id)| (id.clone(), i)).collect();
        Ok(Self {
            param: store.add(name, init.matrix),
            ids: init.ids,
            positions,
            frozen: init.frozen,
            unknown,
        })
    }

    fn lookup(&self, id: &str) -> EntityRef {
        self.positions.get(id).map_or(EntityRef::Unknown, |&i| EntityRef::Known(i))
    }

    /// Query rows for a batch: row indices into `[E; unknown]`.
    fn rows(&self, tape: &mut Tape, store: &ParamStore, refs: &[EntityRef]) -> Result<(Var, Var)> {
        let e = tape.param(store, self.param);
        let n = self.ids.len();
        let idx: Vec<usize> = refs
            .iter()
            .map(|r| match *r {
                EntityRef::Known(i) if i < n => Ok(i),
                EntityRef::Known(i) => Err(Error::Index {
                    what: "entity",
                    index: i,
                    len: n,
                }),
                EntityRef::Unknown => Ok(n),
            })
            .collect::<Result<_>>()?;
        let source = if idx.contains(&n) {
            let u = tape.fixed(self.unknown.clone());
            tape.concat_rows(&[e, u])?
        } else {
            e
        };
        Ok((e, tape.gather_rows(source, &idx)?))
    }
}

fn self_exclusion(refs: &[EntityRef]) -> Vec<Option<usize>> {
    refs.iter()
        .map(|r| match r {
            EntityRef::Known(i) => Some(*i),
            EntityRef::Unknown => None,
        })
        .collect()
}

#[derive(Clone, Debug)]
struct Fusion {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
struct CrossBlocks {
    uu: AttentionParams,
    pp: AttentionParams,
    up: AttentionParams,
    pu: AttentionParams,
}

#[derive(Clone, Debug)]
struct EntityHead {
    users: EntityTable,
    products: EntityTable,
    fuse_u: Fusion,
    fuse_p: Fusion,
    cross: Option<CrossBlocks>,
    ud: AttentionParams,
    pd: AttentionParams,
}

/// One of the six attentions of the entity head.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttnBlock {
    UserUser,
    ProductProduct,
    UserProduct,
    ProductUser,
    UserDoc,
    ProductDoc,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Heads of each entity-side attention block.
    pub cross_heads: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { cross_heads: 4 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Sidecar {
    variant: Variant,
    num_classes: usize,
    encoder: EncoderConfig,
    model: ModelConfig,
    users: Option<(Vec<String>, Vec<usize>)>,
    products: Option<(Vec<String>, Vec<usize>)>,
}

#[derive(Clone, Debug)]
pub struct Model {
    variant: Variant,
    num_classes: usize,
    config: ModelConfig,
    pub store: ParamStore,
    encoder: Encoder,
    head: Option<EntityHead>,
    cls_w: ParamId,
    cls_b: ParamId,
}

/// Tape handles of one batched forward pass.
#[derive(Clone, Debug)]
pub struct BatchOutput {
    pub logits: Var,
    pub h_cls: Var,
    pub fused_u: Option<Var>,
    pub fused_p: Option<Var>,
    /// uu, pp, up, pu (full model only).
    pub cross: Option<[Var; 4]>,
    pub ud: Option<Var>,
    pub pd: Option<Var>,
    pub features: Var,
}

/// Values of a single-example forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    pub h_cls: Mat,
    pub fused_u: Option<Mat>,
    pub fused_p: Option<Mat>,
    pub uu: Option<Mat>,
    pub pp: Option<Mat>,
    pub up: Option<Mat>,
    pub pu: Option<Mat>,
    pub ud: Option<Mat>,
    pub pd: Option<Mat>,
    /// Classifier input.
    pub h_d: Mat,
    pub logits: Mat,
}

impl Model {
    /// A fresh model. `entities` is required for every variant except
    /// text-only; weights are drawn from `seed`.
    pub fn new(
        variant: Variant,
        encoder_config: EncoderConfig,
        num_classes: usize,
        config: ModelConfig,
        entities: Option<(EntityInit, EntityInit)>,
        seed: u64,
    ) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::InvalidParam(format!("num_classes must be >= 2, got {num_classes}")));
        }
        let h = encoder_config.hidden;
        if config.cross_heads == 0 || h % config.cross_heads != 0 {
            return Err(Error::InvalidParam(format!(
                "hidden {h} not divisible by cross_heads {}",
                config.cross_heads
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(encoder_config, &mut store, &mut rng)?;
        let head = match (variant.uses_entities(), entities) {
            (false, _) => None,
            (true, None) => return Err(Error::InvalidParam(format!("variant {variant} needs entity matrices"))),
            (true, Some((users, products))) => {
                for init in [&users, &products] {
                    if init.matrix.ncols() != h {
                        return Err(Error::Shape(format!("entity width {} for hidden {h}", init.matrix.ncols())));
                    }
                }
                let users = EntityTable::new(&mut store, "entities.users", users)?;
                let products = EntityTable::new(&mut store, "entities.products", products)?;
                let mut fusion = |store: &mut ParamStore, name: &str| Fusion {
                    w: store.add_normal(format!("fuse.{name}.w"), (2 * h, h), INIT_STD, &mut rng),
                    b: store.add_zeros(format!("fuse.{name}.b"), (1, h)),
                };
                let fuse_u = fusion(&mut store, "user");
                let fuse_p = fusion(&mut store, "product");
                let heads = config.cross_heads;
                let mut attn = |store: &mut ParamStore, name: &str| {
                    AttentionParams::new(store, &format!("attn.{name}"), h, heads, INIT_STD, &mut rng)
                };
                let cross = variant.cross_context().then(|| CrossBlocks {
                    uu: attn(&mut store, "uu"),
                    pp: attn(&mut store, "pp"),
                    up: attn(&mut store, "up"),
                    pu: attn(&mut store, "pu"),
                });
                let ud = attn(&mut store, "ud");
                let pd = attn(&mut store, "pd");
                Some(EntityHead {
                    users,
                    products,
                    fuse_u,
                    fuse_p,
                    cross,
                    ud,
                    pd,
                })
            }
        };
        let d_in = variant.feature_blocks() * h;
        let cls_w = store.add_normal("cls.w", (d_in, num_classes), INIT_STD, &mut rng);
        let cls_b = store.add_zeros("cls.b", (1, num_classes));
        Ok(Self {
            variant,
            num_classes,
            config,
            store,
            encoder,
            head,
            cls_w,
            cls_b,
        })
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn hidden(&self) -> usize {
        self.encoder.config().hidden
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn encoder_ids(&self) -> Vec<ParamId> {
        self.encoder.param_ids()
    }

    pub fn encoder_hash(&self) -> String {
        checkpoint::params_hash(&self.store, &self.encoder.param_ids())
    }

    /// Every block outside the encoder.
    pub fn head_ids(&self) -> Vec<ParamId> {
        let enc: std::collections::HashSet<_> = self.encoder.param_ids().into_iter().collect();
        self.store.ids().filter(|id| !enc.contains(id)).collect()
    }

    pub fn user_ref(&self, id: &str) -> EntityRef {
        self.head.as_ref().map_or(EntityRef::Unknown, |h| h.users.lookup(id))
    }

    pub fn product_ref(&self, id: &str) -> EntityRef {
        self.head.as_ref().map_or(EntityRef::Unknown, |h| h.products.lookup(id))
    }

    pub fn user_matrix(&self) -> Option<ParamId> {
        self.head.as_ref().map(|h| h.users.param)
    }

    pub fn product_matrix(&self) -> Option<ParamId> {
        self.head.as_ref().map(|h| h.products.param)
    }

    /// `(block, rows)` pairs whose gradients must stay zero.
    pub fn frozen_rows(&self) -> Vec<(ParamId, &[usize])> {
        self.head
            .as_ref()
            .map(|h| {
                vec![
                    (h.users.param, h.users.frozen.as_slice()),
                    (h.products.param, h.products.frozen.as_slice()),
                ]
            })
            .unwrap_or_default()
    }

    /// Copies the encoder from `source` and seeds the classifier's `H_cls`
    /// rows with its text-only classifier, zeroing the remaining rows, so
    /// the new model starts from the source's predictions.
    pub fn warm_start(&mut self, source: &Model) -> Result<()> {
        if source.variant != Variant::TextOnly
            || source.encoder.config() != self.encoder.config()
            || source.num_classes != self.num_classes
        {
            return Err(Error::InvalidParam("warm start needs a matching text-only model".into()));
        }
        for (dst, src) in self.encoder.param_ids().into_iter().zip(source.encoder.param_ids()) {
            *self.store.get_mut(dst) = source.store.get(src).clone();
        }
        let h = self.hidden();
        let w = self.store.get_mut(self.cls_w);
        let rows = w.nrows();
        w.fill(0.0);
        w.slice_mut(ndarray::s![rows - h.., ..]).assign(source.store.get(source.cls_w));
        *self.store.get_mut(self.cls_b) = source.store.get(source.cls_b).clone();
        Ok(())
    }

    /// Forward pass over an encoded batch.
    pub fn forward_batch(
        &self,
        tape: &mut Tape,
        enc: &EncodedBatch,
        users: &[EntityRef],
        products: &[EntityRef],
    ) -> Result<BatchOutput> {
        let store = &self.store;
        let b = tape.shape(enc.h_cls).0;
        let Some(head) = &self.head else {
            let logits = affine(tape, store, enc.h_cls, self.cls_w, self.cls_b)?;
            return Ok(BatchOutput {
                logits,
                h_cls: enc.h_cls,
                fused_u: None,
                fused_p: None,
                cross: None,
                ud: None,
                pd: None,
                features: enc.h_cls,
            });
        };
        if users.len() != b || products.len() != b {
            return Err(Error::Shape(format!(
                "{} users and {} products for {b} documents",
                users.len(),
                products.len()
            )));
        }
        let (e_u, rows_u) = head.users.rows(tape, store, users)?;
        let (e_p, rows_p) = head.products.rows(tape, store, products)?;
        let fused_u = fuse(tape, store, &head.fuse_u, rows_u, enc.h_cls)?;
        let fused_p = fuse(tape, store, &head.fuse_p, rows_p, enc.h_cls)?;

        let doc_mask = Rc::new(AttnMask::blocks(b, enc.len, enc.pad.clone()));
        let ud = attend(tape, store, &head.ud, fused_u, enc.h_d, doc_mask.clone())?;
        let pd = attend(tape, store, &head.pd, fused_p, enc.h_d, doc_mask)?;

        let cross = match &head.cross {
            Some(c) => {
                let n = head.users.ids.len();
                let m = head.products.ids.len();
                let uu_mask = Rc::new(AttnMask::excluding(self_exclusion(users), n));
                let pp_mask = Rc::new(AttnMask::excluding(self_exclusion(products), m));
                Some([
                    attend(tape, store, &c.uu, fused_u, e_u, uu_mask)?,
                    attend(tape, store, &c.pp, fused_p, e_p, pp_mask)?,
                    attend(tape, store, &c.up, fused_u, e_p, Rc::new(AttnMask::Open))?,
                    attend(tape, store, &c.pu, fused_p, e_u, Rc::new(AttnMask::Open))?,
                ])
            }
            None => None,
        };
        let mut parts = Vec::with_capacity(9);
        if let Some(c) = &cross {
            parts.extend_from_slice(c);
        }
        parts.extend([ud, pd, fused_u, fused_p, enc.h_cls]);
        let features = tape.concat_cols(&parts)?;
        let logits = affine(tape, store, features, self.cls_w, self.cls_b)?;
        Ok(BatchOutput {
            logits,
            h_cls: enc.h_cls,
            fused_u: Some(fused_u),
            fused_p: Some(fused_p),
            cross,
            ud: Some(ud),
            pd: Some(pd),
            features,
        })
    }

    /// Stacks cached encoder outputs into a batch of fixed tape inputs.
    pub fn constant_batch(tape: &mut Tape, outputs: &[&EncoderOutput], pads: &[&[bool]]) -> Result<EncodedBatch> {
        let Some(first) = outputs.first() else {
            return Err(Error::Shape("empty batch".into()));
        };
        let len = first.h_d.nrows();
        let views: Vec<_> = outputs.iter().map(|o| o.h_d.view()).collect();
        let h_d = ndarray::concatenate(ndarray::Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))?;
        let cls: Vec<_> = outputs.iter().map(|o| o.h_cls.view()).collect();
        let h_cls = ndarray::concatenate(ndarray::Axis(0), &cls).map_err(|e| Error::Shape(e.to_string()))?;
        let pad: Vec<bool> = pads.iter().flat_map(|p| p.iter().copied()).collect();
        if pad.len() != h_d.nrows() || outputs.iter().any(|o| o.h_d.nrows() != len) {
            return Err(Error::Shape("inconsistent cached batch".into()));
        }
        Ok(EncodedBatch {
            h_d: tape.fixed(h_d),
            h_cls: tape.fixed(h_cls),
            pad,
            len,
        })
    }

    /// Single-example forward pass on encoder output (eval mode).
    pub fn trace(&self, enc: &EncoderOutput, pad: &[bool], user: EntityRef, product: EntityRef) -> Result<ForwardTrace> {
        let mut tape = Tape::new();
        let batch = Self::constant_batch(&mut tape, &[enc], &[pad])?;
        let out = self.forward_batch(&mut tape, &batch, &[user], &[product])?;
        let get = |v: Option<Var>| v.map(|v| tape.value(v).clone());
        let cross = out.cross.map(|c| c.map(|v| tape.value(v).clone()));
        let [uu, pp, up, pu] = match cross {
            Some([a, b, c, d]) => [Some(a), Some(b), Some(c), Some(d)],
            None => [None, None, None, None],
        };
        Ok(ForwardTrace {
            h_cls: tape.value(out.h_cls).clone(),
            fused_u: get(out.fused_u),
            fused_p: get(out.fused_p),
            uu,
            pp,
            up,
            pu,
            ud: get(out.ud),
            pd: get(out.pd),
            h_d: tape.value(out.features).clone(),
            logits: tape.value(out.logits).clone(),
        })
    }

    /// Evaluates one attention block on explicit queries and keys/values.
    pub fn attention_values(&self, block: AttnBlock, queries: &Mat, keys: &Mat, mask: AttnMask) -> Result<Mat> {
        let head = self
            .head
            .as_ref()
            .ok_or_else(|| Error::InvalidParam("text-only model has no attention head".into()))?;
        let params = match block {
            AttnBlock::UserDoc => &head.ud,
            AttnBlock::ProductDoc => &head.pd,
            other => {
                let c = head
                    .cross
                    .as_ref()
                    .ok_or_else(|| Error::InvalidParam(format!("{} has no cross-context blocks", self.variant)))?;
                match other {
                    AttnBlock::UserUser => &c.uu,
                    AttnBlock::ProductProduct => &c.pp,
                    AttnBlock::UserProduct => &c.up,
                    _ => &c.pu,
                }
            }
        };
        let mut tape = Tape::new();
        let q = tape.constant(queries.clone());
        let k = tape.constant(keys.clone());
        let out = attend(&mut tape, &self.store, params, q, k, Rc::new(mask))?;
        Ok(tape.value(out).clone())
    }

    /// Fusion layer `[E ; H_cls] → h` for users (`true`) or products.
    pub fn fuse_values(&self, user: bool, entity: &Mat, h_cls: &Mat) -> Result<Mat> {
        let head = self
            .head
            .as_ref()
            .ok_or_else(|| Error::InvalidParam("text-only model has no fusion layers".into()))?;
        let mut tape = Tape::new();
        let e = tape.constant(entity.clone());
        let c = tape.constant(h_cls.clone());
        let f = fuse(&mut tape, &self.store, if user { &head.fuse_u } else { &head.fuse_p }, e, c)?;
        Ok(tape.value(f).clone())
    }

    /// Named parameter blocks, for tests and inspection.
    pub fn param(&self, name: &str) -> Option<ParamId> {
        self.store.id(name)
    }

    /// Writes `path` (binary checkpoint) and `path.json` (configuration).
    pub fn save(&self, path: &Path) -> Result<()> {
        let ids: Vec<ParamId> = self.store.ids().collect();
        checkpoint::write_checkpoint(&self.store, &ids, path)?;
        let table = |t: &EntityTable| (t.ids.clone(), t.frozen.clone());
        let side = Sidecar {
            variant: self.variant,
            num_classes: self.num_classes,
            encoder: self.encoder.config().clone(),
            model: self.config.clone(),
            users: self.head.as_ref().map(|h| table(&h.users)),
            products: self.head.as_ref().map(|h| table(&h.products)),
        };
        std::fs::write(sidecar_path(path), serde_json::to_string_pretty(&side)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let side: Sidecar = serde_json::from_str(&std::fs::read_to_string(sidecar_path(path))?)?;
        let records = checkpoint::read_checkpoint(path)?;
        let h = side.encoder.hidden;
        let placeholder = |t: Option<(Vec<String>, Vec<usize>)>| {
            t.map(|(ids, frozen)| EntityInit {
                matrix: Mat::zeros((ids.len(), h)),
                ids,
                frozen,
            })
        };
        let entities = placeholder(side.users).zip(placeholder(side.products));
        let mut model = Model::new(side.variant, side.encoder, side.num_classes, side.model, entities, 0)?;
        let ids: Vec<ParamId> = model.store.ids().collect();
        checkpoint::restore(&mut model.store, &ids, records)?;
        if let Some(head) = &mut model.head {
            for t in [&mut head.users, &mut head.products] {
                t.unknown = model
                    .store
                    .get(t.param)
                    .mean_axis(ndarray::Axis(0))
                    .expect("non-empty")
                    .insert_axis(ndarray::Axis(0));
            }
        }
        Ok(model)
    }
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

fn fuse(tape: &mut Tape, store: &ParamStore, f: &Fusion, entity: Var, h_cls: Var) -> Result<Var> {
    let x = tape.concat_cols(&[entity, h_cls])?;
    affine(tape, store, x, f.w, f.b)
}

fn attend(tape: &mut Tape, store: &ParamStore, p: &AttentionParams, q: Var, kv: Var, mask: Rc<AttnMask>) -> Result<Var> {
    let qp = p.project_queries(tape, store, q)?;
    let kp = p.project_keys(tape, store, kv)?;
    let vp = p.project_values(tape, store, kv)?;
    p.attend(tape, store, qp, kp, vp, mask)
}

/// Mean cross-entropy over a batch, on values.
pub fn cross_entropy_loss(logits: &Mat, gold: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let loss = tape.cross_entropy(l, gold)?;
    Ok(tape.value(loss)[[0, 0]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    fn enc_config() -> EncoderConfig {
        EncoderConfig {
            hidden: 8,
            layers: 1,
            heads: 2,
            ffn_dim: 16,
            max_len: 6,
            vocab_size: 12,
            dropout: 0.0,
            seed: 0,
        }
    }

    fn entities(n: usize, m: usize, seed: u64) -> (EntityInit, EntityInit) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids = |p: &str, k: usize| (0..k).map(|i| format!("{p}{i}")).collect();
        (
            EntityInit::random(ids("u", n), 8, vec![], &mut rng),
            EntityInit::random(ids("p", m), 8, vec![], &mut rng),
        )
    }

    fn model(variant: Variant, n: usize) -> Model {
        let ents = variant.uses_entities().then(|| entities(n, 4, 3));
        let mut m = Model::new(variant, enc_config(), 3, ModelConfig { cross_heads: 2 }, ents, 11).unwrap();
        // Larger weights than the default init make every path visible.
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for id in m.head_ids() {
            let shape = m.store.get(id).dim();
            if !m.store.name(id).starts_with("entities") {
                *m.store.get_mut(id) = normal_matrix(shape, 0.4, &mut rng);
            }
        }
        m
    }

    fn encoder_output(seed: u64) -> (EncoderOutput, Vec<bool>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h_d = normal_matrix((6, 8), 1.0, &mut rng);
        let h_cls = h_d.row(0).to_owned().insert_axis(ndarray::Axis(0));
        (EncoderOutput { h_d, h_cls }, vec![false, false, false, false, true, true])
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("bert".parse::<Variant>().is_err());
    }

    #[test]
    fn full_trace_shapes() {
        let m = model(Variant::FullCrossContext, 5);
        let (enc, pad) = encoder_output(1);
        let t = m.trace(&enc, &pad, EntityRef::Known(2), EntityRef::Known(1)).unwrap();
        assert_eq!(t.h_d.dim(), (1, 72));
        assert_eq!(t.logits.dim(), (1, 3));
        assert!(t.logits.iter().all(|v| v.is_finite()));
        assert_eq!(t.h_d.slice(ndarray::s![.., 64..]), t.h_cls);
    }

    #[test]
    fn fusion_identity_blocks() {
        let mut m = model(Variant::VanillaUp, 3);
        let w = m.param("fuse.user.w").unwrap();
        let b = m.param("fuse.user.b").unwrap();
        let e = array![[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]];
        let c = array![[-1.0, -2.0, -3.0, -4.0, -5.0, -6.0, -7.0, -8.0]];
        *m.store.get_mut(b) = Array2::zeros((1, 8));
        let mut top = Array2::zeros((16, 8));
        top.slice_mut(ndarray::s![..8, ..]).assign(&Array2::eye(8));
        *m.store.get_mut(w) = top;
        assert_eq!(m.fuse_values(true, &e, &c).unwrap(), e);
        let mut bottom = Array2::zeros((16, 8));
        bottom.slice_mut(ndarray::s![8.., ..]).assign(&Array2::eye(8));
        *m.store.get_mut(w) = bottom;
        assert_eq!(m.fuse_values(true, &e, &c).unwrap(), c);
    }

    #[test]
    fn self_exclusion_ignores_own_row() {
        let m = model(Variant::FullCrossContext, 5);
        let (enc, pad) = encoder_output(2);
        let t = m.trace(&enc, &pad, EntityRef::Known(2), EntityRef::Known(0)).unwrap();
        let q = t.fused_u.clone().unwrap();
        let mut keys = m.store.get(m.user_matrix().unwrap()).clone();
        let mask = || AttnMask::excluding(vec![Some(2)], 5);
        let base = m.attention_values(AttnBlock::UserUser, &q, &keys, mask()).unwrap();
        assert!((&base - t.uu.as_ref().unwrap()).iter().all(|d| d.abs() < 1e-12));
        keys.row_mut(2).fill(123.0);
        let moved = m.attention_values(AttnBlock::UserUser, &q, &keys, mask()).unwrap();
        assert!((&base - &moved).iter().all(|d| d.abs() < 1e-7));
    }

    #[test]
    fn single_user_gives_zero_user_attention() {
        let m = model(Variant::FullCrossContext, 1);
        let (enc, pad) = encoder_output(3);
        let t = m.trace(&enc, &pad, EntityRef::Known(0), EntityRef::Known(1)).unwrap();
        assert!(t.uu.unwrap().iter().all(|&v| v == 0.0));
        assert!(t.logits.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn pad_rows_do_not_change_document_attention() {
        let m = model(Variant::FullCrossContext, 4);
        let (mut enc, pad) = encoder_output(4);
        let a = m.trace(&enc, &pad, EntityRef::Known(1), EntityRef::Known(2)).unwrap();
        enc.h_d.row_mut(4).fill(50.0);
        enc.h_d.row_mut(5).fill(-9.0);
        let b = m.trace(&enc, &pad, EntityRef::Known(1), EntityRef::Known(2)).unwrap();
        assert_eq!(a.ud, b.ud);
        assert_eq!(a.pd, b.pd);
    }

    #[test]
    fn zeroed_cross_context_matches_textual_init() {
        let (users, products) = entities(4, 4, 8);
        let full = Model::new(
            Variant::FullCrossContext,
            enc_config(),
            3,
            ModelConfig { cross_heads: 2 },
            Some((users.clone(), products.clone())),
            5,
        )
        .unwrap();
        let mut small = Model::new(
            Variant::TextualInit,
            enc_config(),
            3,
            ModelConfig { cross_heads: 2 },
            Some((users, products)),
            6,
        )
        .unwrap();
        let mut full = full;
        for name in ["attn.uu.wo", "attn.pp.wo", "attn.up.wo", "attn.pu.wo"] {
            let id = full.param(name).unwrap();
            full.store.get_mut(id).fill(0.0);
        }
        // Share every block the smaller model has.
        for (id, name, _) in small.store.clone().iter() {
            let src = full.param(name).unwrap();
            let value = if name == "cls.w" {
                full.store.get(src).slice(ndarray::s![32.., ..]).to_owned()
            } else {
                full.store.get(src).clone()
            };
            *small.store.get_mut(id) = value;
        }
        let cls = full.param("cls.w").unwrap();
        full.store.get_mut(cls).slice_mut(ndarray::s![..32, ..]).fill(0.0);
        let (enc, pad) = encoder_output(5);
        let a = full.trace(&enc, &pad, EntityRef::Known(3), EntityRef::Known(0)).unwrap();
        let b = small.trace(&enc, &pad, EntityRef::Known(3), EntityRef::Known(0)).unwrap();
        assert!((&a.logits - &b.logits).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn unknown_entities_use_mean_row() {
        let m = model(Variant::FullCrossContext, 3);
        assert_eq!(m.user_ref("u1"), EntityRef::Known(1));
        assert_eq!(m.user_ref("nobody"), EntityRef::Unknown);
        let (enc, pad) = encoder_output(6);
        let t = m.trace(&enc, &pad, EntityRef::Unknown, EntityRef::Known(0)).unwrap();
        assert!(t.logits.iter().all(|v| v.is_finite()));
        assert!(m.trace(&enc, &pad, EntityRef::Known(3), EntityRef::Known(0)).is_err());
    }

    #[test]
    fn loss_examples() {
        let ln3 = 3f64.ln();
        assert!((cross_entropy_loss(&Array2::zeros((1, 3)), &[2]).unwrap() - ln3).abs() < 1e-12);
        let confident = array![[0.0, 800.0, 0.0]];
        assert!(cross_entropy_loss(&confident, &[1]).unwrap() < 1e-12);
        let two = array![[1.0, 0.0, 0.0], [0.0, 2.0, 1.0]];
        let a = cross_entropy_loss(&two.slice(ndarray::s![..1, ..]).to_owned(), &[0]).unwrap();
        let b = cross_entropy_loss(&two.slice(ndarray::s![1.., ..]).to_owned(), &[2]).unwrap();
        assert!((cross_entropy_loss(&two, &[0, 2]).unwrap() - (a + b) / 2.0).abs() < 1e-12);
        assert!(cross_entropy_loss(&two, &[0, 3]).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let mut m = model(Variant::FullCrossContext, 3);
        m.store.round_to_f32();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        m.save(&path).unwrap();
        let back = Model::load(&path).unwrap();
        let (enc, pad) = encoder_output(7);
        let a = m.trace(&enc, &pad, EntityRef::Known(0), EntityRef::Known(1)).unwrap();
        let b = back.trace(&enc, &pad, EntityRef::Known(0), EntityRef::Known(1)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn warm_start_reproduces_text_only_logits() {
        let text = model(Variant::TextOnly, 0);
        let mut full = model(Variant::FullCrossContext, 3);
        full.warm_start(&text).unwrap();
        let (enc, pad) = encoder_output(8);
        let a = text.trace(&enc, &pad, EntityRef::Unknown, EntityRef::Unknown).unwrap();
        let b = full.trace(&enc, &pad, EntityRef::Known(0), EntityRef::Known(1)).unwrap();
        assert!((&a.logits - &b.logits).iter().all(|d| d.abs() < 1e-12));
    }
}
