//! Small post-layer-norm transformer encoder trained from scratch.

mod attention;
pub mod checkpoint;
mod gradcheck;

use std::rc::Rc;

use ndarray::Axis;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

pub use attention::{affine, multi_head_attention, multi_head_attention_values, AttentionParams};
pub use gradcheck::{check_params, finite_diff_check, BlockError, GradCheckReport, Probe, REL_ERROR_FLOOR};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tape::{AttnMask, Mat, Tape, Var};
use crate::tokenizer::TokenizedDoc;

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
    /// Filled in from the vocabulary when left at 0.
    pub vocab_size: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            layers: 2,
            heads: 4,
            ffn_dim: 256,
            max_len: 64,
            vocab_size: 0,
            dropout: 0.1,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParam(m));
        if self.hidden == 0 || self.layers == 0 || self.heads == 0 || self.ffn_dim == 0 {
            return bad("encoder dimensions must be >= 1".into());
        }
        if self.hidden % self.heads != 0 {
            return bad(format!("hidden {} not divisible by heads {}", self.hidden, self.heads));
        }
        if self.max_len < 2 {
            return bad(format!("max_len must be >= 2, got {}", self.max_len));
        }
        if self.vocab_size < 4 {
            return bad(format!("vocab_size must be >= 4, got {}", self.vocab_size));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Block {
    attn: AttentionParams,
    ln1_g: ParamId,
    ln1_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    config: EncoderConfig,
    tok_emb: ParamId,
    pos_emb: ParamId,
    ln_g: ParamId,
    ln_b: ParamId,
    blocks: Vec<Block>,
}

/// Per-document encoder output.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    /// `L×h` token representations.
    pub h_d: Mat,
    /// `1×h`, row 0 of `h_d`.
    pub h_cls: Mat,
}

/// Encoder output of a batch on the tape. Documents are stacked: rows
/// `b·L..(b+1)·L` of `h_d` belong to document `b`.
#[derive(Clone, Debug)]
pub struct EncodedBatch {
    pub h_d: Var,
    pub h_cls: Var,
    pub pad: Vec<bool>,
    pub len: usize,
}

impl Encoder {
    /// Registers all encoder blocks under the `encoder.` prefix.
    pub fn new<R: Rng + ?Sized>(config: EncoderConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let h = config.hidden;
        let tok_emb = store.add_normal("encoder.tok_emb", (config.vocab_size, h), INIT_STD, rng);
        let pos_emb = store.add_normal("encoder.pos_emb", (config.max_len, h), INIT_STD, rng);
        let ln_g = store.add_ones("encoder.emb_ln.g", (1, h));
        let ln_b = store.add_zeros("encoder.emb_ln.b", (1, h));
        let blocks = (0..config.layers)
            .map(|l| {
                let p = format!("encoder.layer{l}");
                let attn = AttentionParams::new(store, &format!("{p}.attn"), h, config.heads, INIT_STD, rng);
                Block {
                    attn,
                    ln1_g: store.add_ones(format!("{p}.ln1.g"), (1, h)),
                    ln1_b: store.add_zeros(format!("{p}.ln1.b"), (1, h)),
                    w1: store.add_normal(format!("{p}.ffn.w1"), (h, config.ffn_dim), INIT_STD, rng),
                    b1: store.add_zeros(format!("{p}.ffn.b1"), (1, config.ffn_dim)),
                    w2: store.add_normal(format!("{p}.ffn.w2"), (config.ffn_dim, h), INIT_STD, rng),
                    b2: store.add_zeros(format!("{p}.ffn.b2"), (1, h)),
                    ln2_g: store.add_ones(format!("{p}.ln2.g"), (1, h)),
                    ln2_b: store.add_zeros(format!("{p}.ln2.b"), (1, h)),
                }
            })
            .collect();
        Ok(Self {
            config,
            tok_emb,
            pos_emb,
            ln_g,
            ln_b,
            blocks,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.tok_emb, self.pos_emb, self.ln_g, self.ln_b];
        for b in &self.blocks {
            ids.extend(b.attn.ids());
            ids.extend([b.ln1_g, b.ln1_b, b.w1, b.b1, b.w2, b.b2, b.ln2_g, b.ln2_b]);
        }
        ids
    }

    /// Batched forward pass. Dropout is applied iff `dropout_rng` is given.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        docs: &[&TokenizedDoc],
        mut dropout_rng: Option<&mut dyn RngCore>,
    ) -> Result<EncodedBatch> {
        let len = self.config.max_len;
        if docs.is_empty() {
            return Err(Error::Shape("empty batch".into()));
        }
        let mut ids = Vec::with_capacity(docs.len() * len);
        let mut pad = Vec::with_capacity(docs.len() * len);
        for doc in docs {
            if doc.ids.len() != len {
                return Err(Error::Shape(format!("document length {} for max_len {len}", doc.ids.len())));
            }
            for (pos, &id) in doc.ids.iter().enumerate() {
                if id >= self.config.vocab_size {
                    return Err(Error::TokenIndex {
                        id,
                        vocab_size: self.config.vocab_size,
                    });
                }
                ids.push(id);
                pad.push(doc.is_pad(pos));
            }
        }
        let positions: Vec<usize> = (0..docs.len()).flat_map(|_| 0..len).collect();
        let tok = tape.param(store, self.tok_emb);
        let tok = tape.gather_rows(tok, &ids)?;
        let pos = tape.param(store, self.pos_emb);
        let pos = tape.gather_rows(pos, &positions)?;
        let x = tape.add(tok, pos)?;
        let (g, b) = (tape.param(store, self.ln_g), tape.param(store, self.ln_b));
        let x = tape.layer_norm(x, g, b)?;
        let mut x = self.dropout(tape, x, dropout_rng.as_deref_mut())?;

        let rows = ids.len();
        let mask = Rc::new(AttnMask::Spans {
            spans: (0..rows).map(|r| (r / len * len, (r / len + 1) * len)).collect(),
            blocked: Some(pad.clone()),
            exclude: None,
        });
        for block in &self.blocks {
            let a = multi_head_attention(tape, store, &block.attn, x, x, x, mask.clone())?;
            let a = self.dropout(tape, a, dropout_rng.as_deref_mut())?;
            let y = tape.add(x, a)?;
            let (g, b) = (tape.param(store, block.ln1_g), tape.param(store, block.ln1_b));
            let y = tape.layer_norm(y, g, b)?;
            let f = affine(tape, store, y, block.w1, block.b1)?;
            let f = tape.gelu(f);
            let f = affine(tape, store, f, block.w2, block.b2)?;
            let f = self.dropout(tape, f, dropout_rng.as_deref_mut())?;
            let z = tape.add(y, f)?;
            let (g, b) = (tape.param(store, block.ln2_g), tape.param(store, block.ln2_b));
            x = tape.layer_norm(z, g, b)?;
        }
        let cls_rows: Vec<usize> = (0..docs.len()).map(|b| b * len).collect();
        let h_cls = tape.gather_rows(x, &cls_rows)?;
        Ok(EncodedBatch {
            h_d: x,
            h_cls,
            pad,
            len,
        })
    }

    fn dropout<R: RngCore + ?Sized>(&self, tape: &mut Tape, x: Var, rng: Option<&mut R>) -> Result<Var> {
        let p = self.config.dropout;
        match rng {
            Some(rng) if p > 0.0 => {
                let keep = 1.0 / (1.0 - p);
                let mask = Mat::from_shape_simple_fn(tape.shape(x), || {
                    if rng.random::<f64>() < p {
                        0.0
                    } else {
                        keep
                    }
                });
                tape.mul_const(x, Rc::new(mask))
            }
            _ => Ok(x),
        }
    }

    /// Eval-mode encoding of a batch of documents.
    pub fn encode_batch(&self, store: &ParamStore, docs: &[&TokenizedDoc]) -> Result<Vec<EncoderOutput>> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, store, docs, None)?;
        let h_d = tape.value(out.h_d);
        let len = out.len;
        Ok((0..docs.len())
            .map(|b| {
                let rows = h_d.slice(ndarray::s![b * len..(b + 1) * len, ..]).to_owned();
                let h_cls = rows.row(0).to_owned().insert_axis(Axis(0));
                EncoderOutput { h_d: rows, h_cls }
            })
            .collect())
    }

    pub fn encode_doc(&self, store: &ParamStore, doc: &TokenizedDoc) -> Result<EncoderOutput> {
        Ok(self.encode_batch(store, &[doc])?.remove(0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::{build_vocab_from_texts, encode};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(max_len: usize) -> (ParamStore, Encoder, crate::tokenizer::Vocab) {
        let vocab = build_vocab_from_texts(["good bad food service slow quick"].into_iter(), 1);
        let config = EncoderConfig {
            hidden: 16,
            heads: 4,
            ffn_dim: 32,
            max_len,
            vocab_size: vocab.len(),
            ..EncoderConfig::default()
        };
        let mut store = ParamStore::new();
        let enc = Encoder::new(config, &mut store, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        (store, enc, vocab)
    }

    #[test]
    fn output_shapes_and_cls_row() {
        let (store, enc, vocab) = setup(8);
        let doc = encode("good food", &vocab, 8).unwrap();
        let out = enc.encode_doc(&store, &doc).unwrap();
        assert_eq!(out.h_d.dim(), (8, 16));
        assert_eq!(out.h_cls.row(0), out.h_d.row(0));
    }

    #[test]
    fn pad_positions_do_not_affect_content() {
        let (mut store, enc, vocab) = setup(8);
        // Distinct PAD and content embeddings make any leak visible.
        store.get_mut(enc.tok_emb).row_mut(crate::tokenizer::PAD).fill(3.0);
        let doc = encode("good food", &vocab, 8).unwrap();
        let a = enc.encode_doc(&store, &doc).unwrap();
        store.get_mut(enc.tok_emb).row_mut(crate::tokenizer::PAD).fill(-7.0);
        let b = enc.encode_doc(&store, &doc).unwrap();
        assert_ne!(a.h_d.row(5), b.h_d.row(5));
        assert_eq!(a.h_cls, b.h_cls);
        assert_eq!(a.h_d.row(2), b.h_d.row(2));
    }

    #[test]
    fn eval_mode_is_deterministic_and_batch_independent() {
        let (store, enc, vocab) = setup(8);
        let d1 = encode("good food", &vocab, 8).unwrap();
        let d2 = encode("slow bad service quick", &vocab, 8).unwrap();
        let single = enc.encode_doc(&store, &d1).unwrap();
        let again = enc.encode_doc(&store, &d1).unwrap();
        assert_eq!(single, again);
        let batch = enc.encode_batch(&store, &[&d2, &d1]).unwrap();
        assert_eq!(batch[1], single);
    }

    #[test]
    fn out_of_range_token_is_rejected() {
        let (store, enc, vocab) = setup(4);
        let mut doc = encode("good", &vocab, 4).unwrap();
        doc.ids[1] = vocab.len();
        assert!(matches!(enc.encode_doc(&store, &doc), Err(Error::TokenIndex { .. })));
    }

    #[test]
    fn dropout_changes_training_output_only() {
        let (store, enc, vocab) = setup(8);
        let doc = encode("good food", &vocab, 8).unwrap();
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let out = enc.forward(&mut tape, &store, &[&doc], Some(&mut rng)).unwrap();
        let eval = enc.encode_doc(&store, &doc).unwrap();
        assert_ne!(tape.value(out.h_cls), &eval.h_cls);
    }

    #[test]
    fn invalid_configs() {
        let base = EncoderConfig {
            vocab_size: 10,
            ..EncoderConfig::default()
        };
        assert!(base.validate().is_ok());
        for bad in [
            EncoderConfig { heads: 3, ..base.clone() },
            EncoderConfig { max_len: 1, ..base.clone() },
            EncoderConfig { dropout: 1.0, ..base.clone() },
            EncoderConfig { layers: 0, ..base.clone() },
        ] {
            assert!(bad.validate().is_err());
        }
    }
}
