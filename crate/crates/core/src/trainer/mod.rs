//! Mini-batch training with early stopping, evaluation and run records.

mod metrics;
mod optim;
pub mod pipeline;

use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use metrics::{accuracy, argmax, mean_std, rmse, Metrics};
pub use optim::{Adam, EarlyStopper, StopDecision};

use crate::corpus::Review;
use crate::crosscontext::{EntityRef, Model, Variant};
use crate::encoder::{EncodedBatch, EncoderOutput};
use crate::error::{Error, Result};
use crate::params::ParamId;
use crate::tape::{Mat, Tape};
use crate::tokenizer::{encode, TokenizedDoc, Vocab};
use crate::upinit::ScalingMode;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: Variant,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// Maximum tokenized length including `[CLS]`.
    pub max_len: usize,
    /// Evaluate on dev every this many steps; `None` evaluates per epoch.
    pub eval_every: Option<usize>,
    pub scaling: ScalingMode,
    /// Replaces the heuristic scale factor of both entity matrices.
    pub scale_override: Option<f64>,
    /// Keep training the encoder after the text-only phase. When false the
    /// encoder is frozen and its outputs are computed once and reused.
    pub finetune_encoder: bool,
    /// Epoch budget and patience of the text-only phase.
    pub pretrain_epochs: usize,
    pub pretrain_patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::FullCrossContext,
            learning_rate: 3e-4,
            batch_size: 32,
            max_epochs: 20,
            patience: 2,
            seed: 0,
            max_len: 64,
            eval_every: None,
            scaling: ScalingMode::ClosedForm,
            scale_override: None,
            finetune_encoder: true,
            pretrain_epochs: 2,
            pretrain_patience: 2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParam(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.pretrain_epochs == 0 {
            return bad("batch_size, max_epochs and pretrain_epochs must be >= 1".into());
        }
        if self.patience == 0 || self.pretrain_patience == 0 {
            return bad("patience must be >= 1".into());
        }
        if self.max_len < 2 {
            return bad(format!("max_len must be >= 2, got {}", self.max_len));
        }
        if self.eval_every == Some(0) {
            return bad("eval_every must be >= 1".into());
        }
        if let Some(f) = self.scale_override {
            if !(f > 0.0 && f.is_finite()) {
                return bad(format!("scale_override must be positive, got {f}"));
            }
        }
        Ok(())
    }
}

/// A tokenized split.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub review_ids: Vec<String>,
    pub user_ids: Vec<String>,
    pub product_ids: Vec<String>,
    pub docs: Vec<TokenizedDoc>,
    /// 0-based classes.
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(reviews: &[Review], vocab: &Vocab, max_len: usize) -> Result<Self> {
        Ok(Self {
            review_ids: reviews.iter().map(|r| r.review_id.clone()).collect(),
            user_ids: reviews.iter().map(|r| r.user_id.clone()).collect(),
            product_ids: reviews.iter().map(|r| r.product_id.clone()).collect(),
            docs: reviews
                .iter()
                .map(|r| encode(&r.text, vocab, max_len))
                .collect::<Result<_>>()?,
            labels: reviews.iter().map(|r| r.label - 1).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Fraction of documents that lost words to truncation.
    pub fn truncated_fraction(&self) -> f64 {
        if self.docs.is_empty() {
            return 0.0;
        }
        self.docs.iter().filter(|d| d.is_truncated()).count() as f64 / self.docs.len() as f64
    }

    fn refs(&self, model: &Model) -> (Vec<EntityRef>, Vec<EntityRef>) {
        (
            self.user_ids.iter().map(|u| model.user_ref(u)).collect(),
            self.product_ids.iter().map(|p| model.product_ref(p)).collect(),
        )
    }
}

/// Encoder outputs of every document of a dataset, in order.
pub fn encode_dataset(model: &Model, data: &Dataset, batch_size: usize) -> Result<Vec<EncoderOutput>> {
    let mut out = Vec::with_capacity(data.len());
    let refs: Vec<&TokenizedDoc> = data.docs.iter().collect();
    for chunk in refs.chunks(batch_size.max(1)) {
        out.extend(model.encoder().encode_batch(&model.store, chunk)?);
    }
    Ok(out)
}

/// Where document representations come from during a run.
#[derive(Clone, Copy, Debug)]
pub enum DocSource<'a> {
    /// Run the encoder on the tokens.
    Encoder,
    /// Precomputed outputs of a frozen encoder, aligned with the dataset.
    Cached(&'a [EncoderOutput]),
}

fn encode_batch(
    model: &Model,
    tape: &mut Tape,
    data: &Dataset,
    idx: &[usize],
    source: DocSource<'_>,
    dropout: Option<&mut ChaCha8Rng>,
) -> Result<EncodedBatch> {
    match source {
        DocSource::Encoder => {
            let docs: Vec<&TokenizedDoc> = idx.iter().map(|&i| &data.docs[i]).collect();
            let rng = dropout.map(|r| r as &mut dyn rand::RngCore);
            model.encoder().forward(tape, &model.store, &docs, rng)
        }
        DocSource::Cached(outputs) => {
            if outputs.len() != data.len() {
                return Err(Error::Shape(format!(
                    "{} cached outputs for {} documents",
                    outputs.len(),
                    data.len()
                )));
            }
            let outs: Vec<&EncoderOutput> = idx.iter().map(|&i| &outputs[i]).collect();
            let pads: Vec<Vec<bool>> = idx.iter().map(|&i| pad_flags(&data.docs[i])).collect();
            let pad_refs: Vec<&[bool]> = pads.iter().map(Vec::as_slice).collect();
            Model::constant_batch(tape, &outs, &pad_refs)
        }
    }
}

fn pad_flags(doc: &TokenizedDoc) -> Vec<bool> {
    (0..doc.max_len()).map(|p| doc.is_pad(p)).collect()
}

/// One evaluated prediction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Prediction {
    pub review_id: String,
    /// 1-based labels.
    pub gold: usize,
    pub pred: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub metrics: Metrics,
    pub predictions: Vec<Prediction>,
}

const EVAL_BATCH: usize = 64;

/// Eval-mode pass over a dataset.
pub fn evaluate(model: &Model, data: &Dataset, source: DocSource<'_>) -> Result<Evaluation> {
    let (users, products) = data.refs(model);
    let mut preds = Vec::with_capacity(data.len());
    let all: Vec<usize> = (0..data.len()).collect();
    for idx in all.chunks(EVAL_BATCH) {
        let mut tape = Tape::new();
        let enc = encode_batch(model, &mut tape, data, idx, source, None)?;
        let u: Vec<_> = idx.iter().map(|&i| users[i]).collect();
        let p: Vec<_> = idx.iter().map(|&i| products[i]).collect();
        let out = model.forward_batch(&mut tape, &enc, &u, &p)?;
        for row in tape.value(out.logits).outer_iter() {
            preds.push(argmax(row.iter().copied()));
        }
    }
    let metrics = Metrics::from_classes(&preds, &data.labels)?;
    let predictions = preds
        .iter()
        .zip(&data.labels)
        .zip(&data.review_ids)
        .map(|((&p, &g), id)| Prediction {
            review_id: id.clone(),
            gold: g + 1,
            pred: p + 1,
        })
        .collect();
    Ok(Evaluation { metrics, predictions })
}

pub fn write_predictions(path: &Path, predictions: &[Prediction]) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    writeln!(out, "review_id\tgold\tpred")?;
    for p in predictions {
        writeln!(out, "{}\t{}\t{}", p.review_id, p.gold, p.pred)?;
    }
    out.flush()?;
    Ok(())
}

/// One dev evaluation during training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: usize,
    /// Mean training loss since the previous evaluation; `None` before any step.
    pub train_loss: Option<f64>,
    pub dev: Metrics,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunHistory {
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_step: usize,
    pub stopped_epoch: usize,
}

impl RunHistory {
    pub fn best(&self) -> &EpochRecord {
        self.records
            .iter()
            .find(|r| r.epoch == self.best_epoch && r.step == self.best_step)
            .expect("best record is present")
    }

    /// The history with wall times zeroed, for run-to-run comparisons.
    pub fn without_timing(&self) -> Self {
        let mut h = self.clone();
        h.records.iter_mut().for_each(|r| r.wall_time_s = 0.0);
        h
    }

    /// One JSON object per evaluation, then a summary line.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(fs::File::create(path)?);
        for r in &self.records {
            writeln!(out, "{}", serde_json::to_string(r)?)?;
        }
        let summary = serde_json::json!({
            "best_epoch": self.best_epoch,
            "best_step": self.best_step,
            "stopped_epoch": self.stopped_epoch,
        });
        writeln!(out, "{summary}")?;
        out.flush()?;
        Ok(())
    }
}

/// Knobs of one optimisation run.
#[derive(Clone, Debug)]
pub struct RunOptions<'a> {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub eval_every: Option<usize>,
    pub seed: u64,
    /// Blocks updated by the optimizer.
    pub trainable: Vec<ParamId>,
    /// Evaluate before the first step (warm-started models).
    pub eval_initial: bool,
    pub train_source: DocSource<'a>,
    pub dev_source: DocSource<'a>,
}

/// Trains `model` in place and leaves it at its best dev checkpoint.
pub fn fit(model: &mut Model, train: &Dataset, dev: &Dataset, opts: &RunOptions<'_>) -> Result<RunHistory> {
    if train.is_empty() || dev.is_empty() {
        return Err(Error::InvalidParam("training needs non-empty train and dev splits".into()));
    }
    let start = Instant::now();
    let (users, products) = train.refs(model);
    let frozen: Vec<(ParamId, Vec<usize>)> = model
        .frozen_rows()
        .into_iter()
        .filter(|(_, rows)| !rows.is_empty())
        .map(|(id, rows)| (id, rows.to_vec()))
        .collect();
    let dropout = matches!(opts.train_source, DocSource::Encoder) && model.encoder().config().dropout > 0.0;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0xD50D_0u64);
    let mut adam = Adam::new(opts.learning_rate);
    let mut stopper = EarlyStopper::new(opts.patience);
    let mut records = Vec::new();
    let mut best: Option<Vec<Mat>> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0usize;
    let (mut loss_sum, mut loss_n) = (0.0, 0usize);

    let mut checkpoint = |model: &Model, epoch: usize, step: usize, loss: Option<f64>, records: &mut Vec<EpochRecord>, best: &mut Option<Vec<Mat>>| -> Result<bool> {
        let dev_metrics = evaluate(model, dev, opts.dev_source)?.metrics;
        records.push(EpochRecord {
            epoch,
            step,
            train_loss: loss,
            dev: dev_metrics,
            wall_time_s: start.elapsed().as_secs_f64(),
        });
        log::debug!("epoch {epoch} step {step}: loss {loss:?} dev acc {:.4}", dev_metrics.accuracy);
        let d = stopper.observe(records.len() - 1, dev_metrics.accuracy);
        if d.improved {
            *best = Some(opts.trainable.iter().map(|&id| model.store.get(id).clone()).collect());
        }
        Ok(d.stop)
    };

    if opts.eval_initial && checkpoint(model, 0, 0, None, &mut records, &mut best)? {
        unreachable!("a first evaluation always improves");
    }
    let mut stopped_epoch = 0;
    'epochs: for epoch in 1..=opts.max_epochs {
        stopped_epoch = epoch;
        order.shuffle(&mut shuffle_rng);
        for idx in order.chunks(opts.batch_size) {
            let mut tape = Tape::new();
            let enc = encode_batch(
                model,
                &mut tape,
                train,
                idx,
                opts.train_source,
                dropout.then_some(&mut dropout_rng),
            )?;
            let u: Vec<_> = idx.iter().map(|&i| users[i]).collect();
            let p: Vec<_> = idx.iter().map(|&i| products[i]).collect();
            let gold: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
            let out = model.forward_batch(&mut tape, &enc, &u, &p)?;
            let loss = tape.cross_entropy(out.logits, &gold)?;
            let loss_value = tape.value(loss)[[0, 0]];
            step += 1;
            if !loss_value.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    loss: loss_value,
                });
            }
            let mut grads = tape.backward(loss)?.into_params();
            drop(tape);
            for (id, rows) in &frozen {
                if let Some(g) = grads.get_mut(id) {
                    for &r in rows {
                        g.row_mut(r).fill(0.0);
                    }
                }
            }
            let grads: HashMap<ParamId, Mat> = grads;
            adam.step(&mut model.store, &grads, &opts.trainable);
            loss_sum += loss_value;
            loss_n += 1;
            if opts.eval_every.is_some_and(|k| step % k == 0) {
                let stop = checkpoint(model, epoch, step, Some(loss_sum / loss_n as f64), &mut records, &mut best)?;
                (loss_sum, loss_n) = (0.0, 0);
                if stop {
                    break 'epochs;
                }
            }
        }
        if opts.eval_every.is_none() {
            let stop = checkpoint(model, epoch, step, (loss_n > 0).then(|| loss_sum / loss_n as f64), &mut records, &mut best)?;
            (loss_sum, loss_n) = (0.0, 0);
            if stop {
                break;
            }
        }
    }
    if let Some(values) = best {
        for (&id, v) in opts.trainable.iter().zip(values) {
            *model.store.get_mut(id) = v;
        }
    }
    let (_, best_index) = stopper.best().ok_or_else(|| Error::InvalidParam("no evaluation was run".into()))?;
    let best_record = &records[best_index];
    Ok(RunHistory {
        best_epoch: best_record.epoch,
        best_step: best_record.step,
        stopped_epoch,
        records,
    })
}
