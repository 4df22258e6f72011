//! Experiment configuration: one JSON document, every field defaulted,
//! unknown keys rejected.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use upcc_core::corpus::GeneratorParams;
use upcc_core::crosscontext::ModelConfig;
use upcc_core::encoder::EncoderConfig;
use upcc_core::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Directory holding `train.tsv`, `dev.tsv` and `test.tsv`. Relative
    /// paths resolve against the config file's directory.
    pub dir: PathBuf,
    /// Label count of externally supplied corpora; defaults to the generator's.
    pub num_classes: Option<usize>,
    /// Synthetic corpus written by `gen`.
    pub generator: GeneratorParams,
    /// Monte-Carlo samples of the Bayes oracle written by `gen`.
    pub oracle_samples: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("data"),
            num_classes: None,
            generator: GeneratorParams::default(),
            oracle_samples: 20_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerConfig {
    pub min_freq: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self { min_freq: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UpinitConfig {
    /// Batch size of the frozen-encoder passes.
    pub batch_size: usize,
}

impl Default for UpinitConfig {
    fn default() -> Self {
        Self { batch_size: 64 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub name: String,
    pub seeds: Vec<u64>,
    /// Scaling factors of `scale-sweep`.
    pub scale_grid: Vec<f64>,
    /// Per-user review fractions of `downsample-sweep`.
    pub fractions: Vec<f64>,
    /// Base seed of the review subsampling; run seed `s` uses `downsample_seed + s`.
    pub downsample_seed: u64,
    /// Truncation lengths of `length-sweep`.
    pub max_len_grid: Vec<usize>,
    /// Write model checkpoints and prediction dumps of every run.
    pub save_runs: bool,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            name: "upcc".into(),
            seeds: vec![0, 1, 2],
            scale_grid: (1..=30).map(|k| (k * 5) as f64 / 100.0).collect(),
            fractions: (1..=10).map(|k| k as f64 / 10.0).collect(),
            downsample_seed: 0,
            max_len_grid: vec![16, 32, 64, 128],
            save_runs: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub tokenizer: TokenizerConfig,
    pub encoder: EncoderConfig,
    pub upinit: UpinitConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub experiment: ExperimentSection,
}

impl ExperimentConfig {
    /// Parses and validates; `data.dir` is resolved against `path`'s directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: Self =
            serde_json::from_str(&text).with_context(|| format!("config {} does not match the schema", path.display()))?;
        if cfg.data.dir.is_relative() {
            let base = path.parent().unwrap_or(Path::new("."));
            cfg.data.dir = base.join(&cfg.data.dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.generator.validate().context("data.generator")?;
        if self.data.num_classes.is_some_and(|c| c < 2) {
            bail!("data.num_classes must be >= 2");
        }
        if self.data.oracle_samples == 0 {
            bail!("data.oracle_samples must be >= 1");
        }
        if self.tokenizer.min_freq == 0 {
            bail!("tokenizer.min_freq must be >= 1");
        }
        let enc = EncoderConfig {
            vocab_size: self.encoder.vocab_size.max(4),
            max_len: self.train.max_len,
            ..self.encoder.clone()
        };
        enc.validate().context("encoder")?;
        if self.model.cross_heads == 0 || self.encoder.hidden % self.model.cross_heads != 0 {
            bail!("model.cross_heads must divide encoder.hidden");
        }
        if self.upinit.batch_size == 0 {
            bail!("upinit.batch_size must be >= 1");
        }
        self.train.validate().context("train")?;
        let e = &self.experiment;
        if e.name.is_empty() || e.name.contains(['/', '\\']) {
            bail!("experiment.name must be a non-empty file name");
        }
        if e.seeds.is_empty() {
            bail!("experiment.seeds must not be empty");
        }
        if e.scale_grid.iter().any(|&f| !(f > 0.0 && f.is_finite())) {
            bail!("experiment.scale_grid values must be positive");
        }
        if e.fractions.iter().any(|&f| !(f > 0.0 && f <= 1.0)) {
            bail!("experiment.fractions must lie in (0, 1]");
        }
        if e.max_len_grid.iter().any(|&l| l < 2) {
            bail!("experiment.max_len_grid values must be >= 2");
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.data.num_classes.unwrap_or(self.data.generator.num_classes)
    }

    /// Canonical JSON of the resolved configuration.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 of [`Self::canonical_json`].
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let cfg: ExperimentConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.experiment.scale_grid.len(), 30);
        assert_eq!(cfg.experiment.scale_grid[0], 0.05);
        assert_eq!(cfg.experiment.scale_grid[29], 1.5);
        assert_eq!(cfg.experiment.fractions.len(), 10);
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"bogus": 1}"#).is_err());
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"train": {"lr": 1}}"#).is_err());
    }

    #[test]
    fn invalid_values_fail_validation() {
        let mut cfg = ExperimentConfig::default();
        cfg.train.learning_rate = -1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.model.cross_heads = 5;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.experiment.seeds.clear();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.train.seed = 9;
        assert_ne!(a.hash(), b.hash());
    }
}
