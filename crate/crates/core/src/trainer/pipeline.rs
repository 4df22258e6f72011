//! The three training phases: text-only pretraining, entity matrix
//! initialization from the frozen pretrained encoder, and training of the
//! selected variant warm-started from the pretrained model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{encode_dataset, fit, Dataset, DocSource, RunHistory, RunOptions, TrainConfig};
use crate::corpus::{Corpus, EntityIndex, Split};
use crate::crosscontext::{EntityInit, Model, ModelConfig, Variant};
use crate::encoder::{EncoderConfig, EncoderOutput};
use crate::error::{Error, Result};
use crate::tape::Mat;
use crate::tokenizer::Vocab;
use crate::upinit::{build_matrices, doc_vector, EmbeddingMatrix};

/// Tokenized train/dev/test splits.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub dev: Dataset,
    pub test: Dataset,
}

impl Splits {
    pub fn new(corpus: &Corpus, vocab: &Vocab, max_len: usize) -> Result<Self> {
        Ok(Self {
            train: Dataset::new(corpus.split(Split::Train), vocab, max_len)?,
            dev: Dataset::new(corpus.split(Split::Dev), vocab, max_len)?,
            test: Dataset::new(corpus.split(Split::Test), vocab, max_len)?,
        })
    }

    pub fn get(&self, split: Split) -> &Dataset {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }
}

/// Outputs of a frozen encoder for every document of each split.
#[derive(Clone, Debug)]
pub struct EncodedCorpus {
    pub train: Vec<EncoderOutput>,
    pub dev: Vec<EncoderOutput>,
    pub test: Vec<EncoderOutput>,
}

impl EncodedCorpus {
    pub fn new(model: &Model, splits: &Splits, batch_size: usize) -> Result<Self> {
        Ok(Self {
            train: encode_dataset(model, &splits.train, batch_size)?,
            dev: encode_dataset(model, &splits.dev, batch_size)?,
            test: encode_dataset(model, &splits.test, batch_size)?,
        })
    }

    pub fn get(&self, split: Split) -> &[EncoderOutput] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }
}

/// Static settings shared by every phase.
#[derive(Clone, Debug)]
pub struct Setup {
    pub encoder: EncoderConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub num_classes: usize,
    /// Batch size of encoder passes outside training.
    pub encode_batch: usize,
}

impl Setup {
    /// Encoder settings with the vocabulary size and truncation length filled in.
    pub fn encoder_config(&self, vocab: &Vocab) -> EncoderConfig {
        EncoderConfig {
            vocab_size: vocab.len(),
            max_len: self.train.max_len,
            ..self.encoder.clone()
        }
    }
}

/// Text-only model trained from scratch. Weights are rounded through
/// `f32` afterwards so that the in-memory model equals its checkpoint.
pub fn pretrain(setup: &Setup, vocab: &Vocab, splits: &Splits) -> Result<(Model, RunHistory)> {
    setup.train.validate()?;
    let cfg = &setup.train;
    let mut model = Model::new(
        Variant::TextOnly,
        setup.encoder_config(vocab),
        setup.num_classes,
        setup.model.clone(),
        None,
        cfg.seed,
    )?;
    let opts = RunOptions {
        learning_rate: cfg.learning_rate,
        batch_size: cfg.batch_size,
        max_epochs: cfg.pretrain_epochs,
        patience: cfg.pretrain_patience,
        eval_every: cfg.eval_every,
        seed: cfg.seed,
        trainable: model.store.ids().collect(),
        eval_initial: false,
        train_source: DocSource::Encoder,
        dev_source: DocSource::Encoder,
    };
    let history = fit(&mut model, &splits.train, &splits.dev, &opts)?;
    model.store.round_to_f32();
    Ok((model, history))
}

/// Training-split document vectors, from cached outputs when available.
pub fn split_doc_vectors(
    model: &Model,
    splits: &Splits,
    cache: Option<&EncodedCorpus>,
    batch_size: usize,
) -> Result<Vec<Option<Mat>>> {
    let owned;
    let outputs = match cache {
        Some(c) => &c.train,
        None => {
            owned = encode_dataset(model, &splits.train, batch_size)?;
            &owned
        }
    };
    outputs
        .iter()
        .zip(&splits.train.docs)
        .map(|(out, doc)| match doc_vector(&out.h_d, &doc.content_flags) {
            Ok(v) => Ok(Some(v)),
            Err(Error::EmptyDocument) => Ok(None),
            Err(e) => Err(e),
        })
        .collect()
}

/// Scaled user and product matrices pooled with the pretrained encoder.
pub fn entity_matrices(
    setup: &Setup,
    corpus: &Corpus,
    splits: &Splits,
    pretrained: &Model,
    cache: Option<&EncodedCorpus>,
) -> Result<(EmbeddingMatrix, EmbeddingMatrix)> {
    let vecs = split_doc_vectors(pretrained, splits, cache, setup.encode_batch)?;
    build_matrices(
        corpus,
        &vecs,
        pretrained.hidden(),
        setup.train.scaling,
        setup.train.seed,
        &pretrained.encoder_hash(),
    )
}

fn cold_rows(index: &EntityIndex) -> Vec<usize> {
    (0..index.len()).filter(|&i| index.is_cold(i)).collect()
}

/// Initial entity matrices for `variant`: standard-normal rows for the
/// vanilla baseline, pooled rows (optionally rescaled) otherwise.
pub fn entity_inits(
    setup: &Setup,
    variant: Variant,
    corpus: &Corpus,
    matrices: Option<&(EmbeddingMatrix, EmbeddingMatrix)>,
    h: usize,
) -> Result<Option<(EntityInit, EntityInit)>> {
    if !variant.uses_entities() {
        return Ok(None);
    }
    if !variant.textual_init() {
        let mut rng = ChaCha8Rng::seed_from_u64(setup.train.seed.wrapping_add(2));
        let users = EntityInit::random(corpus.users().ids().to_vec(), h, cold_rows(corpus.users()), &mut rng);
        let products = EntityInit::random(corpus.products().ids().to_vec(), h, cold_rows(corpus.products()), &mut rng);
        return Ok(Some((users, products)));
    }
    let (u, p) = matrices.ok_or_else(|| Error::MissingCache(format!("{variant} needs entity matrices")))?;
    let init = |m: &EmbeddingMatrix, index: &EntityIndex| -> Result<EntityInit> {
        if m.ids != index.ids() {
            return Err(Error::MissingCache("entity matrix ids do not match the corpus".into()));
        }
        let matrix = match setup.train.scale_override {
            Some(f) => m.with_scale(f)?,
            None => m.matrix.clone(),
        };
        let mut frozen = cold_rows(index);
        frozen.extend(&m.meta.cold_rows);
        frozen.sort_unstable();
        frozen.dedup();
        Ok(EntityInit {
            ids: m.ids.clone(),
            matrix,
            frozen,
        })
    };
    Ok(Some((init(u, corpus.users())?, init(p, corpus.products())?)))
}

/// Trains `variant` warm-started from the pretrained text-only model.
/// With a cache the encoder stays frozen and its cached outputs are used.
pub fn finetune(
    setup: &Setup,
    variant: Variant,
    corpus: &Corpus,
    splits: &Splits,
    pretrained: &Model,
    matrices: Option<&(EmbeddingMatrix, EmbeddingMatrix)>,
    cache: Option<&EncodedCorpus>,
) -> Result<(Model, RunHistory)> {
    let cfg = &setup.train;
    cfg.validate()?;
    let entities = entity_inits(setup, variant, corpus, matrices, pretrained.hidden())?;
    let mut model = Model::new(
        variant,
        pretrained.encoder().config().clone(),
        setup.num_classes,
        setup.model.clone(),
        entities,
        cfg.seed.wrapping_add(1),
    )?;
    model.warm_start(pretrained)?;
    let frozen_encoder = !cfg.finetune_encoder;
    if frozen_encoder && cache.is_none() {
        return Err(Error::MissingCache("a frozen encoder needs cached encoder outputs".into()));
    }
    let (train_source, dev_source, trainable) = match cache.filter(|_| frozen_encoder) {
        Some(c) => (DocSource::Cached(&c.train), DocSource::Cached(&c.dev), model.head_ids()),
        None => (DocSource::Encoder, DocSource::Encoder, model.store.ids().collect()),
    };
    let opts = RunOptions {
        learning_rate: cfg.learning_rate,
        batch_size: cfg.batch_size,
        max_epochs: cfg.max_epochs,
        patience: cfg.patience,
        eval_every: cfg.eval_every,
        seed: cfg.seed.wrapping_add(3),
        trainable,
        eval_initial: true,
        train_source,
        dev_source,
    };
    let history = fit(&mut model, &splits.train, &splits.dev, &opts)?;
    Ok((model, history))
}

/// Output of [`train`].
pub struct TrainedRun {
    pub model: Model,
    pub history: RunHistory,
    pub pretrain_history: RunHistory,
    pub matrices: Option<(EmbeddingMatrix, EmbeddingMatrix)>,
}

/// All three phases for `setup.train.variant`.
pub fn train(setup: &Setup, corpus: &Corpus, vocab: &Vocab) -> Result<TrainedRun> {
    let splits = Splits::new(corpus, vocab, setup.train.max_len)?;
    let (pretrained, pretrain_history) = pretrain(setup, vocab, &splits)?;
    let cache = (!setup.train.finetune_encoder)
        .then(|| EncodedCorpus::new(&pretrained, &splits, setup.encode_batch))
        .transpose()?;
    let variant = setup.train.variant;
    let matrices = variant
        .textual_init()
        .then(|| entity_matrices(setup, corpus, &splits, &pretrained, cache.as_ref()))
        .transpose()?;
    let (model, history) = finetune(setup, variant, corpus, &splits, &pretrained, matrices.as_ref(), cache.as_ref())?;
    Ok(TrainedRun {
        model,
        history,
        pretrain_history,
        matrices,
    })
}
