//! The experiment commands. Each is a pure function of the configuration,
//! the corpus files and the seeds.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use anyhow::{bail, Context as _, Result};
use serde::{Deserialize, Serialize};
use upcc_core::corpus::{
    bayes_oracle, corpus_stats, downsample_user_reviews, generate_synthetic, load_split_dir, save_split_dir, Corpus,
    CorpusStats, LoadOptions, OracleReport,
};
use upcc_core::crosscontext::{Model, Variant};
use upcc_core::tokenizer::{build_vocab, Vocab};
use upcc_core::trainer::pipeline::{entity_matrices, finetune, pretrain, EncodedCorpus, Setup, Splits};
use upcc_core::trainer::{evaluate, write_predictions, DocSource, RunHistory};
use upcc_core::upinit::{save_cache, EmbeddingMatrix};

use crate::config::ExperimentConfig;
use crate::report::{Report, ReportRow, SeedResult};

/// Shared state of one command invocation.
#[derive(Clone, Debug)]
pub struct Context {
    pub config: ExperimentConfig,
    /// Output directory of reports and run artifacts.
    pub out: PathBuf,
    /// Upper bound on concurrently executing runs.
    pub threads: usize,
    /// Reuse finished runs and pretrained encoders found under `out`.
    pub resume: bool,
}

impl Context {
    pub fn new(config: ExperimentConfig, out: PathBuf) -> Self {
        Self {
            config,
            out,
            threads: 1,
            resume: false,
        }
    }

    fn setup(&self, seed: u64, variant: Variant, max_len: usize) -> Setup {
        let mut train = self.config.train.clone();
        train.seed = seed;
        train.variant = variant;
        train.max_len = max_len;
        Setup {
            encoder: self.config.encoder.clone(),
            model: self.config.model.clone(),
            train,
            num_classes: self.config.num_classes(),
            encode_batch: self.config.upinit.batch_size,
        }
    }

    pub fn load_corpus(&self) -> Result<Corpus> {
        let dir = &self.config.data.dir;
        if !dir.join("train.tsv").exists() {
            bail!("corpus files missing under {} (run `gen` first)", dir.display());
        }
        load_split_dir(dir, LoadOptions::new(self.config.num_classes()))
            .with_context(|| format!("loading corpus from {}", dir.display()))
    }

    fn vocab(&self, corpus: &Corpus) -> Vocab {
        build_vocab(corpus, self.config.tokenizer.min_freq)
    }

    fn finish(&self, command: &str, rows: Vec<ReportRow>, started: Instant) -> Result<Report> {
        let report = Report {
            experiment: self.config.experiment.name.clone(),
            command: command.into(),
            config_hash: self.config.hash(),
            seeds: self.config.experiment.seeds.clone(),
            rows,
        };
        report.write(&self.out, command)?;
        fs::write(self.out.join("config.json"), self.config.canonical_json() + "\n")?;
        let timing = serde_json::json!({ "command": command, "wall_time_s": started.elapsed().as_secs_f64() });
        fs::write(self.out.join(format!("{command}.timing.json")), timing.to_string() + "\n")?;
        Ok(report)
    }
}

/// Applies `f` to every item with at most `threads` items in flight;
/// results keep the input order.
pub fn parallel_map<T: Sync, R: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> Result<R> + Sync) -> Result<Vec<R>> {
    if threads <= 1 || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<R>>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..threads.min(items.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().expect("no worker panicked")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("no worker panicked")
        .into_iter()
        .map(|r| r.expect("every item ran"))
        .collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GenSummary {
    pub stats: CorpusStats,
    pub oracle: OracleReport,
}

/// Writes the synthetic corpus, its latent variables and the Bayes oracle.
pub fn cmd_gen(ctx: &Context) -> Result<GenSummary> {
    let data = &ctx.config.data;
    let (corpus, latent) = generate_synthetic(&data.generator).context("generating corpus")?;
    save_split_dir(&corpus, &data.dir)?;
    latent.save_json(&data.dir.join("latent.json"))?;
    let oracle = bayes_oracle(&data.generator, data.oracle_samples)?;
    fs::write(data.dir.join("oracle.json"), serde_json::to_string_pretty(&oracle)? + "\n")?;
    let stats = corpus_stats(&corpus)?;
    Ok(GenSummary { stats, oracle })
}

pub fn cmd_stats(ctx: &Context) -> Result<CorpusStats> {
    let stats = corpus_stats(&ctx.load_corpus()?)?;
    fs::create_dir_all(&ctx.out)?;
    fs::write(ctx.out.join("stats.json"), serde_json::to_string_pretty(&stats)? + "\n")?;
    Ok(stats)
}

pub fn cmd_vocab(ctx: &Context) -> Result<Vocab> {
    let vocab = ctx.vocab(&ctx.load_corpus()?);
    fs::create_dir_all(&ctx.out)?;
    vocab.save(&ctx.out.join("vocab.txt"))?;
    Ok(vocab)
}

/// Phase A output shared by every variant of one (corpus, seed).
struct Prepared<'a> {
    corpus: &'a Corpus,
    splits: Splits,
    pretrained: Model,
    cache: Option<EncodedCorpus>,
    matrices: Option<(EmbeddingMatrix, EmbeddingMatrix)>,
    seed: u64,
    max_len: usize,
}

fn same_hash(dir: &Path, hash: &str) -> bool {
    fs::read_to_string(dir.join("config_hash")).is_ok_and(|h| h.trim() == hash)
}

/// Phase A, and optionally the entity matrices, for one seed. Artifacts go
/// to `dir`: the pretrained checkpoint, its history and the matrix caches.
fn prepare<'a>(
    ctx: &Context,
    corpus: &'a Corpus,
    vocab: &Vocab,
    seed: u64,
    max_len: usize,
    with_matrices: bool,
    dir: &Path,
) -> Result<Prepared<'a>> {
    let setup = ctx.setup(seed, Variant::TextOnly, max_len);
    fs::create_dir_all(dir)?;
    let hash = ctx.config.hash();
    let splits = Splits::new(corpus, vocab, max_len).context("tokenizing")?;
    let ckpt = dir.join("pretrain.ckpt");
    let pretrained = if ctx.resume && same_hash(dir, &hash) && ckpt.exists() {
        log::info!("reusing pretrained encoder {}", ckpt.display());
        Model::load(&ckpt)?
    } else {
        log::info!("phase A: seed {seed}, max_len {max_len}");
        let (model, history) =
            pretrain(&setup, vocab, &splits).with_context(|| format!("text-only pretraining (seed {seed})"))?;
        history.without_timing().write_jsonl(&dir.join("pretrain_history.jsonl"))?;
        model.save(&ckpt)?;
        fs::write(dir.join("config_hash"), format!("{hash}\n"))?;
        model
    };
    let cache = (!setup.train.finetune_encoder)
        .then(|| EncodedCorpus::new(&pretrained, &splits, setup.encode_batch))
        .transpose()
        .context("encoding corpus with the frozen encoder")?;
    let matrices = if with_matrices {
        let m = entity_matrices(&setup, corpus, &splits, &pretrained, cache.as_ref()).context("precomputing entity matrices")?;
        let cache_dir = dir.join("cache");
        fs::create_dir_all(&cache_dir)?;
        save_cache(&m.0, &cache_dir.join("users.bin"))?;
        save_cache(&m.1, &cache_dir.join("products.bin"))?;
        Some(m)
    } else {
        None
    };
    Ok(Prepared {
        corpus,
        splits,
        pretrained,
        cache,
        matrices,
        seed,
        max_len,
    })
}

#[derive(Serialize, Deserialize)]
struct StoredResult {
    config_hash: String,
    result: SeedResult,
}

/// Phase C for one variant plus dev/test evaluation.
fn run_variant(
    ctx: &Context,
    prep: &Prepared<'_>,
    variant: Variant,
    scale_override: Option<f64>,
    dir: &Path,
) -> Result<SeedResult> {
    let hash = ctx.config.hash();
    let result_path = dir.join("result.json");
    if ctx.resume {
        if let Ok(text) = fs::read_to_string(&result_path) {
            let stored: StoredResult = serde_json::from_str(&text)?;
            if stored.config_hash == hash {
                log::info!("reusing finished run {}", dir.display());
                return Ok(stored.result);
            }
        }
    }
    log::info!("phase C: {variant}, seed {}, dir {}", prep.seed, dir.display());
    let mut setup = ctx.setup(prep.seed, variant, prep.max_len);
    setup.train.scale_override = scale_override;
    let (model, history) = finetune(
        &setup,
        variant,
        prep.corpus,
        &prep.splits,
        &prep.pretrained,
        prep.matrices.as_ref(),
        prep.cache.as_ref(),
    )
    .with_context(|| format!("training {variant} (seed {})", prep.seed))?;
    let (dev_source, test_source) = match &prep.cache {
        Some(c) => (DocSource::Cached(&c.dev), DocSource::Cached(&c.test)),
        None => (DocSource::Encoder, DocSource::Encoder),
    };
    let dev = evaluate(&model, &prep.splits.dev, dev_source).context("evaluating dev")?;
    let test = (!prep.splits.test.is_empty())
        .then(|| evaluate(&model, &prep.splits.test, test_source))
        .transpose()
        .context("evaluating test")?;
    fs::create_dir_all(dir)?;
    write_history(&history, &dir.join("history.jsonl"))?;
    if ctx.config.experiment.save_runs {
        model.save(&dir.join("model.ckpt"))?;
        write_predictions(&dir.join("dev_predictions.tsv"), &dev.predictions)?;
        if let Some(t) = &test {
            write_predictions(&dir.join("test_predictions.tsv"), &t.predictions)?;
        }
    }
    let result = SeedResult {
        seed: prep.seed,
        dev: dev.metrics,
        test: test.map(|t| t.metrics),
        best_epoch: history.best_epoch,
        stopped_epoch: history.stopped_epoch,
        scale: prep
            .matrices
            .as_ref()
            .filter(|_| variant.textual_init())
            .map(|(u, p)| (u.scale, p.scale)),
    };
    let stored = StoredResult {
        config_hash: hash,
        result: result.clone(),
    };
    fs::write(result_path, serde_json::to_string_pretty(&stored)? + "\n")?;
    Ok(result)
}

/// Histories are written without wall times to keep artifacts reproducible.
fn write_history(history: &RunHistory, path: &Path) -> Result<()> {
    history.without_timing().write_jsonl(path)?;
    Ok(())
}

fn seed_dir(base: &Path, seed: u64) -> PathBuf {
    base.join(format!("seed{seed}"))
}

/// Runs `variants` for every seed on one corpus; returns results indexed
/// `[variant][seed]`.
fn run_variants(ctx: &Context, corpus: &Corpus, variants: &[Variant], base: &Path) -> Result<Vec<Vec<SeedResult>>> {
    let vocab = ctx.vocab(corpus);
    let with_matrices = variants.iter().any(|v| v.textual_init());
    let max_len = ctx.config.train.max_len;
    let per_seed = parallel_map(&ctx.config.experiment.seeds, ctx.threads, |&seed| {
        let dir = seed_dir(base, seed);
        let prep = prepare(ctx, corpus, &vocab, seed, max_len, with_matrices, &dir)?;
        variants
            .iter()
            .map(|&v| run_variant(ctx, &prep, v, None, &dir.join(v.name())))
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(transpose(per_seed))
}

fn transpose<T>(rows: Vec<Vec<T>>) -> Vec<Vec<T>> {
    let n = rows.first().map_or(0, Vec::len);
    let mut out: Vec<Vec<T>> = (0..n).map(|_| Vec::with_capacity(rows.len())).collect();
    for row in rows {
        for (i, v) in row.into_iter().enumerate() {
            out[i].push(v);
        }
    }
    out
}

/// One variant through all phases, for every seed.
pub fn cmd_pipeline(ctx: &Context, variant: Variant) -> Result<Report> {
    let started = Instant::now();
    let corpus = ctx.load_corpus()?;
    let results = run_variants(ctx, &corpus, &[variant], &ctx.out.join("pipeline"))?;
    let rows = results
        .into_iter()
        .map(|runs| ReportRow::new(variant.name(), variant.name(), runs))
        .collect();
    ctx.finish("pipeline", rows, started)
}

/// The four variants with shared seeds, in ladder order.
pub fn cmd_ablation(ctx: &Context) -> Result<Report> {
    let started = Instant::now();
    let corpus = ctx.load_corpus()?;
    let results = run_variants(ctx, &corpus, &Variant::ALL, &ctx.out.join("ablation"))?;
    let rows = Variant::ALL
        .iter()
        .zip(results)
        .map(|(v, runs)| ReportRow::new(v.name(), v.name(), runs))
        .collect();
    ctx.finish("ablation", rows, started)
}

/// The full model with each grid factor applied to both matrices, then
/// with the heuristic factor.
pub fn cmd_scale_sweep(ctx: &Context) -> Result<Report> {
    let started = Instant::now();
    let corpus = ctx.load_corpus()?;
    let vocab = ctx.vocab(&corpus);
    let grid = &ctx.config.experiment.scale_grid;
    let base = ctx.out.join("scale_sweep");
    let variant = Variant::FullCrossContext;
    let max_len = ctx.config.train.max_len;
    let per_seed = parallel_map(&ctx.config.experiment.seeds, ctx.threads, |&seed| {
        let dir = seed_dir(&base, seed);
        let prep = prepare(ctx, &corpus, &vocab, seed, max_len, true, &dir)?;
        let mut runs = grid
            .iter()
            .map(|&f| run_variant(ctx, &prep, variant, Some(f), &dir.join(format!("f{f:.2}"))))
            .collect::<Result<Vec<_>>>()?;
        runs.push(run_variant(ctx, &prep, variant, None, &dir.join("heuristic"))?);
        Ok(runs)
    })?;
    let rows: Vec<ReportRow> = transpose(per_seed)
        .into_iter()
        .enumerate()
        .map(|(i, runs)| match grid.get(i) {
            Some(&f) => ReportRow {
                value: Some(f),
                ..ReportRow::new(format!("f={f:.2}"), variant.name(), runs)
            },
            None => {
                let mean_user_scale = runs.iter().filter_map(|r| r.scale.map(|s| s.0)).sum::<f64>() / runs.len() as f64;
                ReportRow {
                    value: Some(mean_user_scale),
                    heuristic: true,
                    ..ReportRow::new("heuristic", variant.name(), runs)
                }
            }
        })
        .collect();
    ctx.finish("scale_sweep", rows, started)
}

/// Full and vanilla variants after keeping a fraction of each user's
/// training reviews; vocabulary, encoder and matrices are rebuilt per fraction.
pub fn cmd_downsample_sweep(ctx: &Context) -> Result<Report> {
    let started = Instant::now();
    let corpus = ctx.load_corpus()?;
    let exp = &ctx.config.experiment;
    let variants = [Variant::FullCrossContext, Variant::VanillaUp];
    let tasks: Vec<(f64, u64)> = exp
        .fractions
        .iter()
        .flat_map(|&f| exp.seeds.iter().map(move |&s| (f, s)))
        .collect();
    let base = ctx.out.join("downsample_sweep");
    let max_len = ctx.config.train.max_len;
    let results = parallel_map(&tasks, ctx.threads, |&(fraction, seed)| {
        let sub = downsample_user_reviews(&corpus, fraction, exp.downsample_seed.wrapping_add(seed))
            .with_context(|| format!("downsampling to {fraction}"))?;
        let vocab = ctx.vocab(&sub);
        let dir = seed_dir(&base.join(format!("frac{fraction:.2}")), seed);
        let prep = prepare(ctx, &sub, &vocab, seed, max_len, true, &dir)?;
        variants
            .iter()
            .map(|&v| run_variant(ctx, &prep, v, None, &dir.join(v.name())))
            .collect::<Result<Vec<_>>>()
    })?;
    let mut rows = Vec::new();
    for (fi, &fraction) in exp.fractions.iter().enumerate() {
        let chunk = &results[fi * exp.seeds.len()..(fi + 1) * exp.seeds.len()];
        let mut pair: Vec<ReportRow> = variants
            .iter()
            .enumerate()
            .map(|(vi, v)| ReportRow {
                value: Some(fraction),
                ..ReportRow::new(format!("{}@{fraction:.2}", v.name()), v.name(), chunk.iter().map(|r| r[vi].clone()).collect())
            })
            .collect();
        let gap = pair[0].dev_accuracy.mean - pair[1].dev_accuracy.mean;
        pair.iter_mut().for_each(|r| r.gap = Some(gap));
        rows.extend(pair);
    }
    ctx.finish("downsample_sweep", rows, started)
}

/// The text-only variant at each truncation length.
pub fn cmd_length_sweep(ctx: &Context) -> Result<Report> {
    let started = Instant::now();
    let corpus = ctx.load_corpus()?;
    let vocab = ctx.vocab(&corpus);
    let exp = &ctx.config.experiment;
    let tasks: Vec<(usize, u64)> = exp
        .max_len_grid
        .iter()
        .flat_map(|&l| exp.seeds.iter().map(move |&s| (l, s)))
        .collect();
    let base = ctx.out.join("length_sweep");
    let results = parallel_map(&tasks, ctx.threads, |&(max_len, seed)| {
        let dir = seed_dir(&base.join(format!("len{max_len}")), seed);
        let prep = prepare(ctx, &corpus, &vocab, seed, max_len, false, &dir)?;
        let r = run_variant(ctx, &prep, Variant::TextOnly, None, &dir.join(Variant::TextOnly.name()))?;
        Ok((r, prep.splits.dev.truncated_fraction()))
    })?;
    let rows = exp
        .max_len_grid
        .iter()
        .enumerate()
        .map(|(li, &max_len)| {
            let chunk = &results[li * exp.seeds.len()..(li + 1) * exp.seeds.len()];
            ReportRow {
                value: Some(max_len as f64),
                truncated_pct: Some(100.0 * chunk[0].1),
                ..ReportRow::new(
                    format!("max_len={max_len}"),
                    Variant::TextOnly.name(),
                    chunk.iter().map(|(r, _)| r.clone()).collect(),
                )
            }
        })
        .collect();
    ctx.finish("length_sweep", rows, started)
}
